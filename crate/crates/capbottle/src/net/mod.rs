//! The d(I,a) regression network.
//!
//! A convolutional feature extractor `f` with the action injected as two
//! constant broadcast channels after conv1, a dense regression head `g`, and
//! two feature hooks: the flattened pool3 activation (pairwise loss) and a
//! wide dense layer on the pooled conv1 activation (MMD loss). All gradients
//! are analytic; double precision throughout.

pub mod checkpoint;
pub mod layers;

pub use checkpoint::{load_params, save_params};

use crate::dataset::Action;
use layers::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format mismatch: bad magic bytes (not a PSNN checkpoint)")]
    FormatMismatch,
    #[error("truncated checkpoint: expected {0} more bytes")]
    Truncated(usize),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Fixed network shape. The layer graph (conv1 / action concat / pool1 /
/// conv2 / pool2 / conv3 / pool3 / three dense layers / conv1 hook) is
/// structural; the sizes here are free parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    /// Square input resolution.
    pub input: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub conv3: ConvSpec,
    pub dense1: usize,
    pub dense2: usize,
    /// Average-pool factor applied to the conv1 activation before the hook
    /// dense layer.
    pub hook_pool: usize,
    /// Width of the hook dense layer.
    pub hook_width: usize,
    /// Actions are divided by this bound before broadcast, so the action
    /// channels lie in [-1, 1].
    pub action_scale: f64,
}

/// Spatial sizes derived from an [`Architecture`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub c1: usize,
    pub p1: usize,
    pub c2: usize,
    pub p2: usize,
    pub c3: usize,
    pub p3: usize,
    pub feature_len: usize,
    pub hook_spatial: usize,
    pub hook_in: usize,
}

impl Architecture {
    /// Desk-scale default: small enough to train in minutes on one CPU core.
    pub fn desk(action_bound: f64) -> Architecture {
        Architecture {
            input: 64,
            conv1: ConvSpec { out_ch: 10, kernel: 5, stride: 1 },
            conv2: ConvSpec { out_ch: 20, kernel: 3, stride: 1 },
            conv3: ConvSpec { out_ch: 28, kernel: 3, stride: 1 },
            dense1: 48,
            dense2: 32,
            hook_pool: 10,
            hook_width: 512,
            action_scale: action_bound,
        }
    }

    /// Tiny architecture (~1k parameters) for finite-difference checks.
    pub fn toy() -> Architecture {
        Architecture {
            input: 16,
            conv1: ConvSpec { out_ch: 2, kernel: 3, stride: 1 },
            conv2: ConvSpec { out_ch: 3, kernel: 3, stride: 1 },
            conv3: ConvSpec { out_ch: 4, kernel: 1, stride: 1 },
            dense1: 6,
            dense2: 5,
            hook_pool: 2,
            hook_width: 8,
            action_scale: 0.03,
        }
    }

    pub fn dims(&self) -> Dims {
        let c1 = conv_out_size(self.input, self.conv1.kernel, self.conv1.stride);
        let p1 = c1 / 2;
        let c2 = conv_out_size(p1, self.conv2.kernel, self.conv2.stride);
        let p2 = c2 / 2;
        let c3 = conv_out_size(p2, self.conv3.kernel, self.conv3.stride);
        let p3 = c3 / 2;
        assert!(p3 >= 1, "architecture collapses to an empty pool3");
        let hook_spatial = c1 / self.hook_pool;
        Dims {
            c1,
            p1,
            c2,
            p2,
            c3,
            p3,
            feature_len: self.conv3.out_ch * p3 * p3,
            hook_spatial,
            hook_in: self.conv1.out_ch * hook_spatial * hook_spatial,
        }
    }
}

/// All trainable parameters: theta_f (convolutions + hook projection) and
/// theta_g (dense head).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub conv1_w: Array4<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array4<f64>,
    pub conv2_b: Array1<f64>,
    pub conv3_w: Array4<f64>,
    pub conv3_b: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
    pub fc3_w: Array2<f64>,
    pub fc3_b: Array1<f64>,
    pub hook_w: Array2<f64>,
    pub hook_b: Array1<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> NetworkParams {
        let d = arch.dims();
        NetworkParams {
            arch,
            conv1_w: Array4::zeros((arch.conv1.out_ch, 1, arch.conv1.kernel, arch.conv1.kernel)),
            conv1_b: Array1::zeros(arch.conv1.out_ch),
            conv2_w: Array4::zeros((
                arch.conv2.out_ch,
                arch.conv1.out_ch + 2,
                arch.conv2.kernel,
                arch.conv2.kernel,
            )),
            conv2_b: Array1::zeros(arch.conv2.out_ch),
            conv3_w: Array4::zeros((
                arch.conv3.out_ch,
                arch.conv2.out_ch,
                arch.conv3.kernel,
                arch.conv3.kernel,
            )),
            conv3_b: Array1::zeros(arch.conv3.out_ch),
            fc1_w: Array2::zeros((arch.dense1, d.feature_len + 2)),
            fc1_b: Array1::zeros(arch.dense1),
            fc2_w: Array2::zeros((arch.dense2, arch.dense1)),
            fc2_b: Array1::zeros(arch.dense2),
            fc3_w: Array2::zeros((1, arch.dense2)),
            fc3_b: Array1::zeros(1),
            hook_w: Array2::zeros((arch.hook_width, d.hook_in)),
            hook_b: Array1::zeros(arch.hook_width),
        }
    }

    /// Fan-in uniform initialization (U[-1/sqrt(fan_in), 1/sqrt(fan_in)])
    /// for weights, zero biases. The L1 task loss has unit-magnitude output
    /// gradients, so an over-scaled init costs many optimizer steps just to
    /// shrink activations back down; this scale starts the output near the
    /// label range.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> NetworkParams {
        let mut p = NetworkParams::zeros(arch);
        fn fill4(a: &mut Array4<f64>, rng: &mut impl Rng) {
            let fan_in = a.dim().1 * a.dim().2 * a.dim().3;
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in a.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        fn fill2(a: &mut Array2<f64>, rng: &mut impl Rng) {
            let bound = 1.0 / (a.dim().1 as f64).sqrt();
            for v in a.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        fill4(&mut p.conv1_w, rng);
        fill4(&mut p.conv2_w, rng);
        fill4(&mut p.conv3_w, rng);
        fill2(&mut p.fc1_w, rng);
        fill2(&mut p.fc2_w, rng);
        fill2(&mut p.fc3_w, rng);
        fill2(&mut p.hook_w, rng);
        p
    }

    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("conv1_w", self.conv1_w.shape().to_vec(), self.conv1_w.as_slice().unwrap()),
            ("conv1_b", self.conv1_b.shape().to_vec(), self.conv1_b.as_slice().unwrap()),
            ("conv2_w", self.conv2_w.shape().to_vec(), self.conv2_w.as_slice().unwrap()),
            ("conv2_b", self.conv2_b.shape().to_vec(), self.conv2_b.as_slice().unwrap()),
            ("conv3_w", self.conv3_w.shape().to_vec(), self.conv3_w.as_slice().unwrap()),
            ("conv3_b", self.conv3_b.shape().to_vec(), self.conv3_b.as_slice().unwrap()),
            ("fc1_w", self.fc1_w.shape().to_vec(), self.fc1_w.as_slice().unwrap()),
            ("fc1_b", self.fc1_b.shape().to_vec(), self.fc1_b.as_slice().unwrap()),
            ("fc2_w", self.fc2_w.shape().to_vec(), self.fc2_w.as_slice().unwrap()),
            ("fc2_b", self.fc2_b.shape().to_vec(), self.fc2_b.as_slice().unwrap()),
            ("fc3_w", self.fc3_w.shape().to_vec(), self.fc3_w.as_slice().unwrap()),
            ("fc3_b", self.fc3_b.shape().to_vec(), self.fc3_b.as_slice().unwrap()),
            ("hook_w", self.hook_w.shape().to_vec(), self.hook_w.as_slice().unwrap()),
            ("hook_b", self.hook_b.shape().to_vec(), self.hook_b.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("conv1_w", self.conv1_w.as_slice_mut().unwrap()),
            ("conv1_b", self.conv1_b.as_slice_mut().unwrap()),
            ("conv2_w", self.conv2_w.as_slice_mut().unwrap()),
            ("conv2_b", self.conv2_b.as_slice_mut().unwrap()),
            ("conv3_w", self.conv3_w.as_slice_mut().unwrap()),
            ("conv3_b", self.conv3_b.as_slice_mut().unwrap()),
            ("fc1_w", self.fc1_w.as_slice_mut().unwrap()),
            ("fc1_b", self.fc1_b.as_slice_mut().unwrap()),
            ("fc2_w", self.fc2_w.as_slice_mut().unwrap()),
            ("fc2_b", self.fc2_b.as_slice_mut().unwrap()),
            ("fc3_w", self.fc3_w.as_slice_mut().unwrap()),
            ("fc3_b", self.fc3_b.as_slice_mut().unwrap()),
            ("hook_w", self.hook_w.as_slice_mut().unwrap()),
            ("hook_b", self.hook_b.as_slice_mut().unwrap()),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, _, data) in self.tensors() {
            out.extend_from_slice(data);
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for (_, data) in self.tensors_mut() {
            data.copy_from_slice(&flat[pos..pos + data.len()]);
            pos += data.len();
        }
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
    }

    /// In-place scaled accumulation: self += scale * other.
    pub fn axpy(&mut self, scale: f64, other: &NetworkParams) {
        let theirs = other.tensors();
        for ((_, data), (_, _, src)) in self.tensors_mut().into_iter().zip(theirs) {
            for (d, s) in data.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

pub struct HeadCache {
    head_in: Array1<f64>,
    fc1_pre: Array1<f64>,
    fc1_act: Array1<f64>,
    fc2_pre: Array1<f64>,
    fc2_act: Array1<f64>,
    pub out: f64,
}

pub struct HookCache {
    pooled: Array1<f64>,
    pre: Array1<f64>,
    pub act: Array1<f64>,
}

/// Stored activations from one forward pass, for backward and loss hooks.
pub struct ForwardCache {
    pub action: Action,
    input: Array3<f64>,
    conv1_pre: Array3<f64>,
    concat_act: Array3<f64>,
    pool1: Array3<f64>,
    pool1_idx: Vec<u32>,
    conv2_pre: Array3<f64>,
    conv2_act: Array3<f64>,
    pool2: Array3<f64>,
    pool2_idx: Vec<u32>,
    conv3_pre: Array3<f64>,
    conv3_act: Array3<f64>,
    pool3_idx: Vec<u32>,
    pub feature: Array1<f64>,
    pub head: Option<HeadCache>,
    pub hook: Option<HookCache>,
}

/// Accumulated upstream gradients at the three injection points.
#[derive(Default)]
pub struct UpstreamGrads<'a> {
    pub d_out: f64,
    pub d_feature: Option<ArrayView1<'a, f64>>,
    pub d_hook: Option<ArrayView1<'a, f64>>,
}

fn leaky_relu3(pre: &Array3<f64>) -> Array3<f64> {
    pre.mapv(leaky_relu)
}

/// Depth images arrive in meters, clustered near the camera-to-table range,
/// with 0 encoding a missing pixel. Recentring and scaling puts the working
/// range on the order of [-1, 1], which conv1 would otherwise have to learn
/// from a near-constant signal. Missing pixels are imputed at the offset
/// (normalized 0, roughly table level) so dropout reads as mild blur rather
/// than full-scale salt noise.
pub const INPUT_OFFSET: f64 = 0.5;
pub const INPUT_GAIN: f64 = 10.0;

fn normalize_input(input: ArrayView2<f64>, res: usize) -> Array3<f64> {
    input
        .mapv(|d| if d == 0.0 { 0.0 } else { (d - INPUT_OFFSET) * INPUT_GAIN })
        .into_shape((1, res, res))
        .expect("input reshape")
}

/// Run the feature extractor f(I, a): conv stack with action broadcast,
/// returning the flattened pool3 activation and the cache backward needs.
pub fn forward_features(
    input: ArrayView2<f64>,
    action: Action,
    params: &NetworkParams,
) -> Result<(Array1<f64>, ForwardCache), NetError> {
    let arch = &params.arch;
    if input.dim() != (arch.input, arch.input) {
        return Err(NetError::Config(format!(
            "input shape {:?} does not match architecture input {}",
            input.dim(),
            arch.input
        )));
    }
    let input3 = normalize_input(input, arch.input);

    let conv1_pre = conv2d_forward(&input3, &params.conv1_w, &params.conv1_b, arch.conv1.stride);
    let conv1_act = leaky_relu3(&conv1_pre);

    let (n, h, w) = conv1_act.dim();
    let mut concat_act = Array3::<f64>::zeros((n + 2, h, w));
    concat_act.slice_mut(s![..n, .., ..]).assign(&conv1_act);
    concat_act
        .slice_mut(s![n, .., ..])
        .fill(action.dx / arch.action_scale);
    concat_act
        .slice_mut(s![n + 1, .., ..])
        .fill(action.dy / arch.action_scale);

    let (pool1, pool1_idx) = maxpool2_forward(&concat_act);
    let conv2_pre = conv2d_forward(&pool1, &params.conv2_w, &params.conv2_b, arch.conv2.stride);
    let conv2_act = leaky_relu3(&conv2_pre);
    let (pool2, pool2_idx) = maxpool2_forward(&conv2_act);
    let conv3_pre = conv2d_forward(&pool2, &params.conv3_w, &params.conv3_b, arch.conv3.stride);
    let conv3_act = leaky_relu3(&conv3_pre);
    let (pool3, pool3_idx) = maxpool2_forward(&conv3_act);
    let feature = Array1::from_iter(pool3.iter().copied());

    let cache = ForwardCache {
        action,
        input: input3,
        conv1_pre,
        concat_act,
        pool1,
        pool1_idx,
        conv2_pre,
        conv2_act,
        pool2,
        pool2_idx,
        conv3_pre,
        conv3_act,
        pool3_idx,
        feature: feature.clone(),
        head: None,
        hook: None,
    };
    Ok((feature, cache))
}

/// The head input is the pool3 feature with the scaled action appended: the
/// controller's argmin needs sharp dependence on the action, and the direct
/// dense path models it far better than the broadcast channels alone.
fn head_input(feature: ArrayView1<f64>, action: Action, scale: f64) -> Array1<f64> {
    let mut v = Vec::with_capacity(feature.len() + 2);
    v.extend(feature.iter().copied());
    v.push(action.dx / scale);
    v.push(action.dy / scale);
    Array1::from_vec(v)
}

/// Regression head g: dense-leaky_relu-dense-leaky_relu-dense, scalar output. The output
/// is linear and unbounded; non-negativity is a property of the learned fit.
pub fn forward_head(feature: ArrayView1<f64>, action: Action, params: &NetworkParams) -> f64 {
    let x = head_input(feature, action, params.arch.action_scale);
    let fc1 = dense_forward(x.view(), params.fc1_w.view(), params.fc1_b.view()).mapv(leaky_relu);
    let fc2 = dense_forward(fc1.view(), params.fc2_w.view(), params.fc2_b.view()).mapv(leaky_relu);
    dense_forward(fc2.view(), params.fc3_w.view(), params.fc3_b.view())[0]
}

/// Head forward that records the activations backward needs.
pub fn forward_head_cached(cache: &mut ForwardCache, params: &NetworkParams) -> f64 {
    let head_in = head_input(cache.feature.view(), cache.action, params.arch.action_scale);
    let fc1_pre = dense_forward(head_in.view(), params.fc1_w.view(), params.fc1_b.view());
    let fc1_act = fc1_pre.mapv(leaky_relu);
    let fc2_pre = dense_forward(fc1_act.view(), params.fc2_w.view(), params.fc2_b.view());
    let fc2_act = fc2_pre.mapv(leaky_relu);
    let out = dense_forward(fc2_act.view(), params.fc3_w.view(), params.fc3_b.view())[0];
    cache.head = Some(HeadCache { head_in, fc1_pre, fc1_act, fc2_pre, fc2_act, out });
    out
}

/// Full prediction d(I, a) with a cache suitable for [`backward`].
pub fn forward_full(
    input: ArrayView2<f64>,
    action: Action,
    params: &NetworkParams,
) -> Result<(f64, ForwardCache), NetError> {
    let (_, mut cache) = forward_features(input, action, params)?;
    let out = forward_head_cached(&mut cache, params);
    Ok((out, cache))
}

/// The MMD hook: ReLU(dense(avgpool(conv1 activation))). Depends on the image
/// only; the action is injected after conv1.
pub fn forward_mmd_hook(cache: &mut ForwardCache, params: &NetworkParams) -> Array1<f64> {
    let arch = &params.arch;
    let n = arch.conv1.out_ch;
    let conv1_act = cache.concat_act.slice(s![..n, .., ..]).to_owned();
    let pooled3 = avgpool_forward(&conv1_act, arch.hook_pool);
    let pooled = Array1::from_iter(pooled3.iter().copied());
    let pre = dense_forward(pooled.view(), params.hook_w.view(), params.hook_b.view());
    let act = pre.mapv(leaky_relu);
    cache.hook = Some(HookCache { pooled, pre, act: act.clone() });
    act
}

/// Exact analytic backward pass. Upstream gradients may enter at the head
/// output, the pool3 feature, and the MMD hook in any combination; their
/// contributions are summed. Accumulates into `grads`.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    up: &UpstreamGrads,
    grads: &mut NetworkParams,
) -> Result<(), NetError> {
    let arch = &params.arch;
    let d = arch.dims();
    let mut d_feature = Array1::<f64>::zeros(d.feature_len);

    if up.d_out != 0.0 {
        let head = cache.head.as_ref().ok_or(NetError::Contract(
            "backward with d_out requires a cache from forward_full / forward_head_cached",
        ))?;
        let d_out = ndarray::arr1(&[up.d_out]);
        let (dfc2_act, dw3, db3) =
            dense_backward(head.fc2_act.view(), params.fc3_w.view(), d_out.view());
        grads.fc3_w += &dw3;
        grads.fc3_b += &db3;
        let dfc2_pre = &dfc2_act * &head.fc2_pre.mapv(leaky_relu_grad);
        let (dfc1_act, dw2, db2) =
            dense_backward(head.fc1_act.view(), params.fc2_w.view(), dfc2_pre.view());
        grads.fc2_w += &dw2;
        grads.fc2_b += &db2;
        let dfc1_pre = &dfc1_act * &head.fc1_pre.mapv(leaky_relu_grad);
        let (dhead_in, dw1, db1) =
            dense_backward(head.head_in.view(), params.fc1_w.view(), dfc1_pre.view());
        grads.fc1_w += &dw1;
        grads.fc1_b += &db1;
        // The trailing two action coordinates are constants, not activations.
        d_feature += &dhead_in.slice(s![..d.feature_len]);
    }

    if let Some(df) = &up.d_feature {
        d_feature += df;
    }

    // pool3 <- conv3 <- pool2 <- conv2 <- pool1 <- concat.
    let dpool3 = d_feature
        .into_shape((arch.conv3.out_ch, d.p3, d.p3))
        .expect("pool3 grad shape");
    let dconv3_act = maxpool2_backward(cache.conv3_act.dim(), &cache.pool3_idx, &dpool3);
    let dconv3_pre = &dconv3_act * &cache.conv3_pre.mapv(leaky_relu_grad);
    let (dpool2, dw, db) =
        conv2d_backward(&cache.pool2, &params.conv3_w, arch.conv3.stride, &dconv3_pre);
    grads.conv3_w += &dw;
    grads.conv3_b += &db;

    let dconv2_act = maxpool2_backward(cache.conv2_act.dim(), &cache.pool2_idx, &dpool2);
    let dconv2_pre = &dconv2_act * &cache.conv2_pre.mapv(leaky_relu_grad);
    let (dpool1, dw, db) =
        conv2d_backward(&cache.pool1, &params.conv2_w, arch.conv2.stride, &dconv2_pre);
    grads.conv2_w += &dw;
    grads.conv2_b += &db;

    let dconcat = maxpool2_backward(cache.concat_act.dim(), &cache.pool1_idx, &dpool1);
    let n = arch.conv1.out_ch;
    // Gradient into the broadcast action channels is discarded.
    let mut dconv1_act = dconcat.slice(s![..n, .., ..]).to_owned();

    if let Some(dh) = &up.d_hook {
        let hook = cache.hook.as_ref().ok_or(NetError::Contract(
            "backward with d_hook requires a cache from forward_mmd_hook",
        ))?;
        let dpre = dh.to_owned() * hook.pre.mapv(leaky_relu_grad);
        let (dpooled, dwh, dbh) =
            dense_backward(hook.pooled.view(), params.hook_w.view(), dpre.view());
        grads.hook_w += &dwh;
        grads.hook_b += &dbh;
        let dpooled3 = dpooled
            .into_shape((n, d.hook_spatial, d.hook_spatial))
            .expect("hook pool grad shape");
        dconv1_act += &avgpool_backward(dconv1_act.dim(), arch.hook_pool, &dpooled3);
    }

    let dconv1_pre = &dconv1_act * &cache.conv1_pre.mapv(leaky_relu_grad);
    let (_, dw, db) =
        conv2d_backward(&cache.input, &params.conv1_w, arch.conv1.stride, &dconv1_pre);
    grads.conv1_w += &dw;
    grads.conv1_b += &db;
    Ok(())
}

/// Batched prediction of d(I, a) for many candidate actions on one image.
///
/// Everything up to the action injection is computed once; the contribution
/// of the constant action channels to conv2 is a per-channel offset (a valid
/// convolution of a constant channel is constant), so each extra candidate
/// costs only the conv2-onwards tail. Agrees with [`forward_full`] up to
/// floating-point summation order.
pub fn predict_batch(
    input: ArrayView2<f64>,
    actions: &[Action],
    params: &NetworkParams,
) -> Result<Vec<f64>, NetError> {
    let arch = &params.arch;
    if input.dim() != (arch.input, arch.input) {
        return Err(NetError::Config(format!(
            "input shape {:?} does not match architecture input {}",
            input.dim(),
            arch.input
        )));
    }
    let input3 = normalize_input(input, arch.input);
    let conv1_act = leaky_relu3(&conv2d_forward(
        &input3,
        &params.conv1_w,
        &params.conv1_b,
        arch.conv1.stride,
    ));
    let (pool1_img, _) = maxpool2_forward(&conv1_act);

    let n = arch.conv1.out_ch;
    let img_w = params.conv2_w.slice(s![.., ..n, .., ..]).to_owned();
    let img_part = conv2d_forward(&pool1_img, &img_w, &params.conv2_b, arch.conv2.stride);
    // Per-output-channel sums of the action-channel kernels.
    let sum_dx: Array1<f64> = params
        .conv2_w
        .slice(s![.., n, .., ..])
        .sum_axis(Axis(2))
        .sum_axis(Axis(1));
    let sum_dy: Array1<f64> = params
        .conv2_w
        .slice(s![.., n + 1, .., ..])
        .sum_axis(Axis(2))
        .sum_axis(Axis(1));

    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        let ax = a.dx / arch.action_scale;
        let ay = a.dy / arch.action_scale;
        let mut conv2_act = img_part.clone();
        for (mut ch, (&sx, &sy)) in conv2_act
            .axis_iter_mut(Axis(0))
            .zip(sum_dx.iter().zip(sum_dy.iter()))
        {
            let off = ax * sx + ay * sy;
            ch.mapv_inplace(|v| leaky_relu(v + off));
        }
        let (pool2, _) = maxpool2_forward(&conv2_act);
        let conv3_act = leaky_relu3(&conv2d_forward(
            &pool2,
            &params.conv3_w,
            &params.conv3_b,
            arch.conv3.stride,
        ));
        let (pool3, _) = maxpool2_forward(&conv3_act);
        let feature = Array1::from_iter(pool3.iter().copied());
        out.push(forward_head(feature.view(), a, params));
    }
    Ok(out)
}
