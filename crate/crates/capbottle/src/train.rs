//! Minibatch Adam training loop for the six transfer regimes, with
//! deterministic seeding and held-out L1 test evaluation.

use crate::config::TrainSettings;
use crate::dataset::{Action, Dataset, DatasetKind};
use crate::losses::{
    composite_loss, AlignMode, Bandwidth, CompositeBatch, KernelConfig, LossError, LossWeights,
};
use crate::net::{predict_batch, Architecture, NetError, NetworkParams};
use crate::seed::rng_for;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("unknown regime `{0}`")]
    UnknownRegime(String),
    #[error("regime/dataset mismatch: {0}")]
    DatasetMismatch(String),
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch} step {step}: total loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("shape mismatch: {left} parameters vs {right} gradients")]
    ShapeMismatch { left: usize, right: usize },
    #[error("empty evaluation set")]
    EmptyTestSet,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// The six training setups compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    RealOnlyNoClutter,
    RealOnlyClutter,
    SimOnly,
    SimPlusRealMMD,
    SimPlusRealNoPairwise,
    SimPlusRealPairwise,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::RealOnlyNoClutter,
        Regime::RealOnlyClutter,
        Regime::SimOnly,
        Regime::SimPlusRealMMD,
        Regime::SimPlusRealNoPairwise,
        Regime::SimPlusRealPairwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::RealOnlyNoClutter => "real-only-no-clutter",
            Regime::RealOnlyClutter => "real-only-clutter",
            Regime::SimOnly => "sim-only",
            Regime::SimPlusRealMMD => "sim-real-mmd",
            Regime::SimPlusRealNoPairwise => "sim-real-no-pairwise",
            Regime::SimPlusRealPairwise => "sim-real-pairwise",
        }
    }

    pub fn align_mode(self) -> AlignMode {
        match self {
            Regime::SimPlusRealPairwise => AlignMode::Pairwise,
            Regime::SimPlusRealMMD => AlignMode::Mmd,
            _ => AlignMode::None,
        }
    }

    /// Loss weights for this regime. The real-only baselines train purely on
    /// target-domain samples at full weight; mixed regimes use the configured
    /// alpha/beta/gamma.
    pub fn weights(self, s: &TrainSettings) -> LossWeights {
        match self {
            Regime::RealOnlyNoClutter | Regime::RealOnlyClutter => {
                LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0 }
            }
            Regime::SimOnly => LossWeights { alpha: s.alpha, beta: 0.0, gamma: 0.0 },
            Regime::SimPlusRealNoPairwise => {
                LossWeights { alpha: s.alpha, beta: s.beta, gamma: 0.0 }
            }
            Regime::SimPlusRealPairwise => {
                LossWeights { alpha: s.alpha, beta: s.beta, gamma: s.gamma_pairwise }
            }
            Regime::SimPlusRealMMD => {
                LossWeights { alpha: s.alpha, beta: 0.0, gamma: s.gamma_mmd }
            }
        }
    }
}

impl FromStr for Regime {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Regime, TrainError> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| TrainError::UnknownRegime(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> AdamState {
        AdamState { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    h: &AdamHyper,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch { left: params.len(), right: grads.len() });
    }
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grads[i];
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= h.lr * mhat / (vhat.sqrt() + h.eps);
    }
    Ok(())
}

/// Datasets available to the trainer; each regime checks for what it needs.
#[derive(Default, Clone, Copy)]
pub struct TrainData<'a> {
    /// Labeled simulated set X_S (kind Source).
    pub source: Option<&'a Dataset>,
    /// Paired set (kind Paired): target-tagged labeled samples plus X_ST.
    pub paired: Option<&'a Dataset>,
    /// Labeled target-with-clutter set (kind TargetClutter); doubles as the
    /// MMD target image pool.
    pub target_clutter: Option<&'a Dataset>,
    /// Held-out target-with-clutter test set, evaluated every epoch if given.
    pub test: Option<&'a Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub settings: TrainSettings,
    pub seed: u64,
}

/// Per-epoch decomposed loss means. `total` is the weighted combination of
/// the three unweighted term means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub task_source: f64,
    pub task_target: f64,
    pub alignment: f64,
    pub total: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub regime: Regime,
    pub history: Vec<EpochStats>,
    pub params: NetworkParams,
}

fn expect_kind<'a>(
    slot: Option<&'a Dataset>,
    kind: DatasetKind,
    what: &str,
    regime: Regime,
) -> Result<&'a Dataset, TrainError> {
    let ds = slot.ok_or_else(|| {
        TrainError::DatasetMismatch(format!("regime {} needs the {what} dataset", regime.name()))
    })?;
    if ds.manifest.kind != kind {
        return Err(TrainError::DatasetMismatch(format!(
            "{what} dataset has kind {:?}, expected {kind:?}",
            ds.manifest.kind
        )));
    }
    if ds.samples.is_empty() {
        return Err(TrainError::DatasetMismatch(format!("{what} dataset has no samples")));
    }
    Ok(ds)
}

/// A shuffled index stream that wraps around; reshuffled once per epoch.
struct Stream {
    order: Vec<usize>,
    cursor: usize,
}

impl Stream {
    fn new(len: usize, seed: u64, tag: &str, epoch: usize) -> Stream {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng_for(seed, tag, epoch as u64));
        Stream { order, cursor: 0 }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let out = (0..n)
            .map(|i| self.order[(self.cursor + i) % self.order.len()])
            .collect();
        self.cursor += n;
        out
    }
}

/// Run shuffled minibatch Adam for the configured regime. Deterministic per
/// seed: identical config and datasets give a bitwise-identical checkpoint.
pub fn train(
    config: &TrainConfig,
    arch: Architecture,
    data: &TrainData,
) -> Result<TrainReport, TrainError> {
    let s = &config.settings;
    if s.batch_size == 0 {
        return Err(TrainError::Invalid("batch_size must be positive".into()));
    }
    if s.learning_rate < 0.0 {
        return Err(TrainError::Invalid("learning_rate must be >= 0".into()));
    }
    let regime = config.regime;
    let weights = regime.weights(s);
    let kernel = if s.kernel_bandwidth > 0.0 {
        KernelConfig { bandwidth: Bandwidth::Fixed(s.kernel_bandwidth) }
    } else {
        KernelConfig { bandwidth: Bandwidth::Median }
    };

    // Resolve the datasets this regime draws from.
    let source = match regime {
        Regime::RealOnlyNoClutter | Regime::RealOnlyClutter => None,
        _ => Some(expect_kind(data.source, DatasetKind::Source, "source", regime)?),
    };
    let target = match regime {
        Regime::RealOnlyNoClutter
        | Regime::SimPlusRealNoPairwise
        | Regime::SimPlusRealPairwise => {
            Some(expect_kind(data.paired, DatasetKind::Paired, "paired", regime)?)
        }
        Regime::RealOnlyClutter => Some(expect_kind(
            data.target_clutter,
            DatasetKind::TargetClutter,
            "target-clutter",
            regime,
        )?),
        _ => None,
    };
    let mmd_pool = match regime {
        Regime::SimPlusRealMMD => Some(expect_kind(
            data.target_clutter,
            DatasetKind::TargetClutter,
            "target-clutter",
            regime,
        )?),
        _ => None,
    };
    if regime == Regime::SimPlusRealPairwise && target.unwrap().pairs.is_empty() {
        return Err(TrainError::DatasetMismatch(
            "paired dataset has no X_ST triples".into(),
        ));
    }
    if regime == Regime::SimPlusRealPairwise && s.pairs_per_batch == 0 {
        return Err(TrainError::Invalid("pairs_per_batch must be positive".into()));
    }
    if regime == Regime::SimPlusRealMMD && (s.mmd_batch == 0 || s.mmd_batch % 2 != 0) {
        return Err(TrainError::Invalid("mmd_batch must be positive and even".into()));
    }

    // Batch composition: full batches for single-stream regimes, half source /
    // half target rows for mixed ones.
    let (src_rows, tgt_rows) = match regime {
        Regime::RealOnlyNoClutter | Regime::RealOnlyClutter => (0, s.batch_size),
        Regime::SimOnly | Regime::SimPlusRealMMD => (s.batch_size, 0),
        Regime::SimPlusRealNoPairwise | Regime::SimPlusRealPairwise => {
            let half = (s.batch_size / 2).max(1);
            (half, half)
        }
    };
    let primary_len = match regime {
        Regime::RealOnlyNoClutter | Regime::RealOnlyClutter => target.unwrap().samples.len(),
        _ => source.unwrap().samples.len(),
    };
    let steps_per_epoch = (primary_len / s.batch_size).max(1);

    let mut params = NetworkParams::init(arch, &mut rng_for(config.seed, "init", 0));
    let mut adam = AdamState::new(params.num_params());
    let mut hyper = AdamHyper {
        lr: s.learning_rate,
        beta1: s.adam_beta1,
        beta2: s.adam_beta2,
        eps: s.adam_eps,
    };
    let mut history = Vec::with_capacity(s.epochs);

    for epoch in 0..s.epochs {
        hyper.lr = s.learning_rate * s.lr_decay.powi(epoch as i32);
        // Alignment is withheld for the first `gamma_warmup_epochs` epochs
        // (the term is skipped entirely while its weight is 0), then ramped
        // linearly to full strength over `gamma_ramp_epochs`.
        let gamma_scale = if epoch < s.gamma_warmup_epochs {
            0.0
        } else {
            let since = (epoch - s.gamma_warmup_epochs + 1) as f64;
            (since / s.gamma_ramp_epochs.max(1) as f64).min(1.0)
        };
        let epoch_weights = LossWeights { gamma: weights.gamma * gamma_scale, ..weights };
        let mut src_stream =
            source.map(|d| Stream::new(d.samples.len(), config.seed, "shuf-source", epoch));
        let mut tgt_stream =
            target.map(|d| Stream::new(d.samples.len(), config.seed, "shuf-target", epoch));
        let mut pair_stream = (regime == Regime::SimPlusRealPairwise)
            .then(|| Stream::new(target.unwrap().pairs.len(), config.seed, "shuf-pairs", epoch));
        let mut mmd_src_stream = mmd_pool
            .map(|_| Stream::new(source.unwrap().images.len(), config.seed, "shuf-mmd-src", epoch));
        let mut mmd_tgt_stream =
            mmd_pool.map(|d| Stream::new(d.images.len(), config.seed, "shuf-mmd-tgt", epoch));

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for step in 0..steps_per_epoch {
            let mut batch = CompositeBatch::default();
            if let (Some(stream), Some(ds)) = (src_stream.as_mut(), source) {
                for i in stream.take(src_rows) {
                    let smp = &ds.samples[i];
                    batch.source.push((
                        ds.images[smp.image as usize].view(),
                        smp.action,
                        smp.label,
                    ));
                }
            }
            if let (Some(stream), Some(ds)) = (tgt_stream.as_mut(), target) {
                for i in stream.take(tgt_rows) {
                    let smp = &ds.samples[i];
                    batch.target.push((
                        ds.images[smp.image as usize].view(),
                        smp.action,
                        smp.label,
                    ));
                }
            }
            if let Some(stream) = pair_stream.as_mut() {
                let ds = target.unwrap();
                for i in stream.take(s.pairs_per_batch) {
                    let pair = &ds.pairs[i];
                    batch.pairs.push((
                        ds.images[pair.source_image as usize].view(),
                        ds.images[pair.target_image as usize].view(),
                        pair.action,
                    ));
                }
            }
            if let Some(stream) = mmd_src_stream.as_mut() {
                let ds = source.unwrap();
                for i in stream.take(s.mmd_batch) {
                    batch.mmd_source.push(ds.images[i].view());
                }
            }
            if let Some(stream) = mmd_tgt_stream.as_mut() {
                let ds = mmd_pool.unwrap();
                for i in stream.take(s.mmd_batch) {
                    batch.mmd_target.push(ds.images[i].view());
                }
            }

            let res =
                composite_loss(regime.align_mode(), &batch, &params, &epoch_weights, &kernel)?;
            if !res.total.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss: res.total });
            }
            let mut flat = params.flatten();
            adam_step(&mut flat, &res.grads.flatten(), &mut adam, &hyper)?;
            params.assign_from_flat(&flat);

            sums.0 += res.task_source;
            sums.1 += res.task_target;
            sums.2 += res.alignment;
            sums.3 += res.total;
        }
        let n = steps_per_epoch as f64;
        let test_loss = match data.test {
            Some(ds) => Some(evaluate_test_loss(&params, ds)?),
            None => None,
        };
        history.push(EpochStats {
            task_source: sums.0 / n,
            task_target: sums.1 / n,
            alignment: sums.2 / n,
            total: sums.3 / n,
            test_loss,
        });
    }

    Ok(TrainReport { regime, history, params })
}

/// Mean L1 error (meters) over a labeled evaluation set. Samples are grouped
/// by image so the convolutional trunk runs once per image.
pub fn evaluate_test_loss(params: &NetworkParams, test: &Dataset) -> Result<f64, TrainError> {
    if test.samples.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let mut by_image: BTreeMap<u32, Vec<(Action, f64)>> = BTreeMap::new();
    for s in &test.samples {
        by_image.entry(s.image).or_default().push((s.action, s.label));
    }
    let mut sum = 0.0;
    for (image, rows) in &by_image {
        let actions: Vec<Action> = rows.iter().map(|r| r.0).collect();
        let preds = predict_batch(test.images[*image as usize].view(), &actions, params)?;
        for (pred, (_, label)) in preds.iter().zip(rows) {
            sum += (pred - label).abs();
        }
    }
    Ok(sum / test.samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::dataset::{
        generate_paired_dataset, generate_source_dataset, generate_target_clutter_dataset,
        generate_test_dataset,
    };
    use crate::net::forward_full;
    use approx::assert_relative_eq;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.source_scenes = 6;
        cfg.data.actions_per_scene = 2;
        cfg.data.paired_count = 6;
        cfg.data.test_scenes = 4;
        cfg.data.test_actions_per_scene = 2;
        cfg.scene.clutter_count = (1, 2);
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg.train.pairs_per_batch = 2;
        cfg.train.mmd_batch = 4;
        cfg.train.gamma_warmup_epochs = 0;
        cfg.train.gamma_ramp_epochs = 1;
        cfg
    }

    fn tiny_arch(cfg: &ExperimentConfig) -> Architecture {
        // Full 64x64 input, but a very small net, to keep tests quick.
        let mut arch = Architecture::desk(cfg.data.action_bound);
        arch.conv1.out_ch = 2;
        arch.conv2.out_ch = 3;
        arch.conv3.out_ch = 3;
        arch.dense1 = 6;
        arch.dense2 = 5;
        arch.hook_width = 8;
        arch
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(Regime::from_str(r.name()).unwrap(), r);
        }
        assert!(matches!(Regime::from_str("sim"), Err(TrainError::UnknownRegime(_))));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut state = AdamState::new(3);
        let h = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut state, &h).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![0.0, 0.0];
        let g = vec![0.3, -0.7];
        let mut state = AdamState::new(2);
        let h = AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-12 };
        adam_step(&mut p, &g, &mut state, &h).unwrap();
        assert_relative_eq!(p[0], -0.01, max_relative = 1e-6);
        assert_relative_eq!(p[1], 0.01, max_relative = 1e-6);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut w: Vec<f64> = vec![1.0];
        let mut state = AdamState::new(1);
        let h = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut prev = w[0].abs();
        for _ in 0..10 {
            let g = vec![2.0 * w[0]];
            adam_step(&mut w, &g, &mut state, &h).unwrap();
            assert!(w[0].abs() < prev, "|w| should shrink, got {}", w[0]);
            prev = w[0].abs();
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0; 2];
        let mut state = AdamState::new(2);
        let h = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut state, &h),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 0;
        let arch = tiny_arch(&cfg);
        let source = generate_source_dataset(&cfg, 1).unwrap();
        let tc = TrainConfig { regime: Regime::SimOnly, settings: cfg.train.clone(), seed: 7 };
        let data = TrainData { source: Some(&source), ..Default::default() };
        let report = train(&tc, arch, &data).unwrap();
        assert!(report.history.is_empty());
        let init = NetworkParams::init(arch, &mut rng_for(7, "init", 0));
        assert_eq!(report.params, init);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut cfg = tiny_config();
        cfg.train.learning_rate = 0.0;
        cfg.train.epochs = 2;
        let arch = tiny_arch(&cfg);
        let source = generate_source_dataset(&cfg, 2).unwrap();
        let tc = TrainConfig { regime: Regime::SimOnly, settings: cfg.train.clone(), seed: 8 };
        let data = TrainData { source: Some(&source), ..Default::default() };
        let report = train(&tc, arch, &data).unwrap();
        assert_eq!(report.history.len(), 2);
        let init = NetworkParams::init(arch, &mut rng_for(8, "init", 0));
        assert_eq!(report.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let arch = tiny_arch(&cfg);
        let source = generate_source_dataset(&cfg, 3).unwrap();
        let paired = generate_paired_dataset(&cfg, 3).unwrap();
        let tc = TrainConfig {
            regime: Regime::SimPlusRealPairwise,
            settings: cfg.train.clone(),
            seed: 9,
        };
        let data = TrainData {
            source: Some(&source),
            paired: Some(&paired),
            ..Default::default()
        };
        let a = train(&tc, arch, &data).unwrap();
        let b = train(&tc, arch, &data).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn sim_only_equals_composite_with_zeroed_weights() {
        // One epoch, one step: the trainer's update must equal a hand-rolled
        // composite_loss + adam_step with beta = gamma = 0.
        let mut cfg = tiny_config();
        cfg.data.source_scenes = 4;
        cfg.train.batch_size = cfg.data.source_scenes * cfg.data.actions_per_scene;
        let arch = tiny_arch(&cfg);
        let source = generate_source_dataset(&cfg, 4).unwrap();
        let tc = TrainConfig { regime: Regime::SimOnly, settings: cfg.train.clone(), seed: 10 };
        let data = TrainData { source: Some(&source), ..Default::default() };
        let report = train(&tc, arch, &data).unwrap();

        let params = NetworkParams::init(arch, &mut rng_for(10, "init", 0));
        let mut order: Vec<usize> = (0..source.samples.len()).collect();
        order.shuffle(&mut rng_for(10, "shuf-source", 0));
        let batch = CompositeBatch {
            source: order
                .iter()
                .map(|&i| {
                    let s = &source.samples[i];
                    (source.images[s.image as usize].view(), s.action, s.label)
                })
                .collect(),
            ..Default::default()
        };
        let weights = LossWeights { alpha: cfg.train.alpha, beta: 0.0, gamma: 0.0 };
        let res = composite_loss(
            AlignMode::None,
            &batch,
            &params,
            &weights,
            &KernelConfig::median(),
        )
        .unwrap();
        let mut flat = params.flatten();
        let mut adam = AdamState::new(params.num_params());
        let h = AdamHyper {
            lr: cfg.train.learning_rate,
            beta1: cfg.train.adam_beta1,
            beta2: cfg.train.adam_beta2,
            eps: cfg.train.adam_eps,
        };
        adam_step(&mut flat, &res.grads.flatten(), &mut adam, &h).unwrap();
        assert_eq!(report.params.flatten(), flat);
        assert_relative_eq!(report.history[0].total, res.total, epsilon = 1e-15);
    }

    #[test]
    fn bookkeeping_reconstructs_totals() {
        let cfg = tiny_config();
        let arch = tiny_arch(&cfg);
        let source = generate_source_dataset(&cfg, 5).unwrap();
        let paired = generate_paired_dataset(&cfg, 5).unwrap();
        let tc = TrainConfig {
            regime: Regime::SimPlusRealPairwise,
            settings: cfg.train.clone(),
            seed: 11,
        };
        let data = TrainData {
            source: Some(&source),
            paired: Some(&paired),
            ..Default::default()
        };
        let report = train(&tc, arch, &data).unwrap();
        let w = Regime::SimPlusRealPairwise.weights(&cfg.train);
        for e in &report.history {
            let rebuilt = w.alpha * e.task_source + w.beta * e.task_target + w.gamma * e.alignment;
            assert!((rebuilt - e.total).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_dataset_is_a_mismatch_error() {
        let cfg = tiny_config();
        let arch = tiny_arch(&cfg);
        let tc = TrainConfig { regime: Regime::SimOnly, settings: cfg.train.clone(), seed: 12 };
        let err = train(&tc, arch, &TrainData::default()).unwrap_err();
        assert!(matches!(err, TrainError::DatasetMismatch(_)));
    }

    #[test]
    fn wrong_kind_is_a_mismatch_error() {
        let cfg = tiny_config();
        let arch = tiny_arch(&cfg);
        let test = generate_test_dataset(&cfg, 13).unwrap();
        let tc = TrainConfig { regime: Regime::SimOnly, settings: cfg.train.clone(), seed: 13 };
        let data = TrainData { source: Some(&test), ..Default::default() };
        assert!(matches!(
            train(&tc, arch, &data),
            Err(TrainError::DatasetMismatch(_))
        ));
    }

    #[test]
    fn all_regimes_run_one_epoch() {
        let cfg = tiny_config();
        let arch = tiny_arch(&cfg);
        let source = generate_source_dataset(&cfg, 14).unwrap();
        let paired = generate_paired_dataset(&cfg, 14).unwrap();
        let clutter = generate_target_clutter_dataset(&cfg, 14).unwrap();
        let test = generate_test_dataset(&cfg, 14).unwrap();
        for regime in Regime::ALL {
            let tc = TrainConfig { regime, settings: cfg.train.clone(), seed: 14 };
            let data = TrainData {
                source: Some(&source),
                paired: Some(&paired),
                target_clutter: Some(&clutter),
                test: Some(&test),
            };
            let report = train(&tc, arch, &data)
                .unwrap_or_else(|e| panic!("{} failed: {e}", regime.name()));
            assert_eq!(report.history.len(), 1);
            assert!(report.history[0].test_loss.unwrap().is_finite());
            assert!(report.params.all_finite());
        }
    }

    #[test]
    fn constant_net_test_loss() {
        let cfg = tiny_config();
        let arch = tiny_arch(&cfg);
        let mut test = generate_test_dataset(&cfg, 15).unwrap();
        // All-zero parameters predict exactly 0 everywhere.
        let zero = NetworkParams::zeros(arch);
        let mean_label: f64 =
            test.samples.iter().map(|s| s.label).sum::<f64>() / test.samples.len() as f64;
        let loss = evaluate_test_loss(&zero, &test).unwrap();
        // Labels are nonnegative distances, so the L1 error of the zero
        // predictor is the mean label.
        assert_relative_eq!(loss, mean_label, epsilon = 1e-12);

        // Constant predictor equal to every label -> zero loss.
        let c = 0.04;
        for s in &mut test.samples {
            s.label = c;
        }
        let mut constant = NetworkParams::zeros(arch);
        constant.fc3_b[0] = c;
        assert_relative_eq!(evaluate_test_loss(&constant, &test).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn test_loss_matches_loop_oracle() {
        let cfg = tiny_config();
        let arch = tiny_arch(&cfg);
        let test = generate_test_dataset(&cfg, 16).unwrap();
        let params = NetworkParams::init(arch, &mut rng_for(16, "init", 0));
        let fast = evaluate_test_loss(&params, &test).unwrap();
        let mut sum = 0.0;
        for s in &test.samples {
            let (pred, _) =
                forward_full(test.images[s.image as usize].view(), s.action, &params).unwrap();
            sum += (pred - s.label).abs();
        }
        assert_relative_eq!(fast, sum / test.samples.len() as f64, max_relative = 1e-12);
    }

    #[test]
    fn empty_test_set_errors() {
        let cfg = tiny_config();
        let mut test = generate_test_dataset(&cfg, 17).unwrap();
        test.samples.clear();
        let params = NetworkParams::zeros(tiny_arch(&cfg));
        assert!(matches!(
            evaluate_test_loss(&params, &test),
            Err(TrainError::EmptyTestSet)
        ));
    }
}
