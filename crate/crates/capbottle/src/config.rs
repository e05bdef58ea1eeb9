//! Experiment configuration: a flat `section.key = value` text format.
//!
//! Parsing is strict: unknown keys and missing required keys are hard errors
//! naming the key. The same text round-trips into dataset manifests so a
//! dataset file alone suffices to regenerate its contents.

use crate::control::ControllerConfig;
use crate::depthscene::{Camera, DomainModel, SceneConfig, Vec3};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing required config key `{0}`")]
    MissingKey(String),
    #[error("invalid value `{value}` for config key `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
}

/// Parsed key/value map with consumption tracking.
#[derive(Debug)]
pub struct ConfigMap {
    map: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Parse { line: i + 1, reason: "empty key".into() });
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(ConfigMap { map })
    }

    fn take_raw(&mut self, key: &str) -> Result<String, ConfigError> {
        self.map.remove(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn take_f64(&mut self, key: &str) -> Result<f64, ConfigError> {
        let v = self.take_raw(key)?;
        v.parse().map_err(|e| ConfigError::InvalidValue {
            key: key.into(),
            value: v,
            reason: format!("{e}"),
        })
    }

    pub fn take_u64(&mut self, key: &str) -> Result<u64, ConfigError> {
        let v = self.take_raw(key)?;
        v.parse().map_err(|e| ConfigError::InvalidValue {
            key: key.into(),
            value: v,
            reason: format!("{e}"),
        })
    }

    pub fn take_usize(&mut self, key: &str) -> Result<usize, ConfigError> {
        Ok(self.take_u64(key)? as usize)
    }

    pub fn take_i32(&mut self, key: &str) -> Result<i32, ConfigError> {
        let v = self.take_raw(key)?;
        v.parse().map_err(|e| ConfigError::InvalidValue {
            key: key.into(),
            value: v,
            reason: format!("{e}"),
        })
    }

    pub fn take_bool(&mut self, key: &str) -> Result<bool, ConfigError> {
        let v = self.take_raw(key)?;
        match v.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(ConfigError::InvalidValue {
                key: key.into(),
                value: v,
                reason: "expected `true` or `false`".into(),
            }),
        }
    }

    /// Error on the first leftover (unknown) key.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    pub eye: Vec3,
    pub look: Vec3,
    pub vfov_deg: f64,
}

impl CameraConfig {
    pub fn build(&self) -> Camera {
        Camera::look_at(self.eye, self.look, self.vfov_deg.to_radians())
    }
}

/// Dataset generation sizes and pairing flags.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source_scenes: usize,
    pub actions_per_scene: usize,
    pub action_bound: f64,
    pub paired_count: usize,
    pub pair_source_clutter: bool,
    pub pair_target_clutter: bool,
    /// Optional xy jitter (meters) applied to the target-side robot state of
    /// each pair, to study imperfect sim/real state reproduction. 0 = exact.
    pub state_jitter: f64,
    pub test_scenes: usize,
    pub test_actions_per_scene: usize,
}

/// Optimizer and loss-weight settings shared by all regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch learning-rate factor; 1 disables decay. The
    /// L1 task loss has sign gradients, so Adam's step-size floor tracks the
    /// learning rate and decay is what lets late epochs settle.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_pairwise: f64,
    pub gamma_mmd: f64,
    /// Epochs trained with the alignment weight held at 0 before gamma takes
    /// effect; 0 applies it from the first step. Adam normalizes gradient
    /// scale, so a consistent alignment pull on a random initialization
    /// collapses the features no matter how small gamma is; the task term
    /// must shape the features first.
    pub gamma_warmup_epochs: usize,
    /// Epochs over which gamma ramps linearly to full strength once the
    /// warmup ends; 1 switches it on at once. Ramping lets Adam's
    /// second-moment state calibrate to the new gradient term instead of
    /// taking full-size steps on it for the first ~1/(1-beta2) updates.
    pub gamma_ramp_epochs: usize,
    /// RBF bandwidth; 0 selects the per-batch median heuristic.
    pub kernel_bandwidth: f64,
    pub pairs_per_batch: usize,
    pub mmd_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub source_domain: DomainModel,
    pub target_domain: DomainModel,
    pub data: DataConfig,
    pub train: TrainSettings,
    pub control: ControllerConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            camera: CameraConfig {
                eye: Vec3::new(0.0, 0.0, 0.55),
                look: Vec3::new(0.0, 0.0, 0.0),
                vfov_deg: 45.0,
            },
            source_domain: DomainModel::source_default(),
            target_domain: DomainModel {
                missing_prob: 0.10,
                noise_std: 0.004,
                depth_bias: 0.03,
                lateral_shift: 3,
                quant_step: 0.003,
                edge_width: 1,
            },
            data: DataConfig {
                source_scenes: 800,
                actions_per_scene: 4,
                action_bound: 0.06,
                paired_count: 400,
                pair_source_clutter: true,
                pair_target_clutter: false,
                state_jitter: 0.0,
                test_scenes: 150,
                test_actions_per_scene: 4,
            },
            train: TrainSettings {
                epochs: 24,
                batch_size: 64,
                learning_rate: 1e-3,
                lr_decay: 1.0,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                alpha: 1.0,
                beta: 0.1,
                gamma_pairwise: 0.1,
                gamma_mmd: 0.05,
                gamma_warmup_epochs: 10,
                gamma_ramp_epochs: 6,
                kernel_bandwidth: 0.0,
                pairs_per_batch: 8,
                mmd_batch: 16,
            },
            control: ControllerConfig::default(),
            seed: 0,
        }
    }
}

fn take_domain(m: &mut ConfigMap, prefix: &str) -> Result<DomainModel, ConfigError> {
    let model = DomainModel {
        missing_prob: m.take_f64(&format!("{prefix}.missing_prob"))?,
        noise_std: m.take_f64(&format!("{prefix}.noise_std"))?,
        depth_bias: m.take_f64(&format!("{prefix}.depth_bias"))?,
        lateral_shift: m.take_i32(&format!("{prefix}.lateral_shift"))?,
        quant_step: m.take_f64(&format!("{prefix}.quant_step"))?,
        edge_width: m.take_usize(&format!("{prefix}.edge_width"))?,
    };
    model.validate().map_err(|reason| ConfigError::InvalidValue {
        key: format!("{prefix}.*"),
        value: String::new(),
        reason,
    })?;
    Ok(model)
}

fn write_domain(out: &mut String, prefix: &str, d: &DomainModel) {
    let _ = writeln!(out, "{prefix}.missing_prob = {}", d.missing_prob);
    let _ = writeln!(out, "{prefix}.noise_std = {}", d.noise_std);
    let _ = writeln!(out, "{prefix}.depth_bias = {}", d.depth_bias);
    let _ = writeln!(out, "{prefix}.lateral_shift = {}", d.lateral_shift);
    let _ = writeln!(out, "{prefix}.quant_step = {}", d.quant_step);
    let _ = writeln!(out, "{prefix}.edge_width = {}", d.edge_width);
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut m = ConfigMap::parse(text)?;
        let scene = SceneConfig {
            bottle_radius: (m.take_f64("scene.bottle_radius_min")?, m.take_f64("scene.bottle_radius_max")?),
            bottle_height: (m.take_f64("scene.bottle_height_min")?, m.take_f64("scene.bottle_height_max")?),
            bottle_xy_range: m.take_f64("scene.bottle_xy_range")?,
            clutter_count: (m.take_usize("scene.clutter_min")?, m.take_usize("scene.clutter_max")?),
            clutter_xy_range: m.take_f64("scene.clutter_xy_range")?,
            clutter_size: (m.take_f64("scene.clutter_size_min")?, m.take_f64("scene.clutter_size_max")?),
            clutter_height: (m.take_f64("scene.clutter_height_min")?, m.take_f64("scene.clutter_height_max")?),
            clutter_margin: m.take_f64("scene.clutter_margin")?,
            hand_offset_range: m.take_f64("scene.hand_offset_range")?,
            hand_z: (m.take_f64("scene.hand_z_min")?, m.take_f64("scene.hand_z_max")?),
            cap_radius_scale: m.take_f64("scene.cap_radius_scale")?,
            table_z: m.take_f64("scene.table_z")?,
        };
        let camera = CameraConfig {
            eye: Vec3::new(m.take_f64("camera.eye_x")?, m.take_f64("camera.eye_y")?, m.take_f64("camera.eye_z")?),
            look: Vec3::new(m.take_f64("camera.look_x")?, m.take_f64("camera.look_y")?, m.take_f64("camera.look_z")?),
            vfov_deg: m.take_f64("camera.vfov_deg")?,
        };
        let source_domain = take_domain(&mut m, "domain.source")?;
        let target_domain = take_domain(&mut m, "domain.target")?;
        let data = DataConfig {
            source_scenes: m.take_usize("data.source_scenes")?,
            actions_per_scene: m.take_usize("data.actions_per_scene")?,
            action_bound: m.take_f64("data.action_bound")?,
            paired_count: m.take_usize("data.paired_count")?,
            pair_source_clutter: m.take_bool("data.pair_source_clutter")?,
            pair_target_clutter: m.take_bool("data.pair_target_clutter")?,
            state_jitter: m.take_f64("data.state_jitter")?,
            test_scenes: m.take_usize("data.test_scenes")?,
            test_actions_per_scene: m.take_usize("data.test_actions_per_scene")?,
        };
        let train = TrainSettings {
            epochs: m.take_usize("train.epochs")?,
            batch_size: m.take_usize("train.batch_size")?,
            learning_rate: m.take_f64("train.learning_rate")?,
            lr_decay: m.take_f64("train.lr_decay")?,
            adam_beta1: m.take_f64("train.adam_beta1")?,
            adam_beta2: m.take_f64("train.adam_beta2")?,
            adam_eps: m.take_f64("train.adam_eps")?,
            alpha: m.take_f64("train.alpha")?,
            beta: m.take_f64("train.beta")?,
            gamma_pairwise: m.take_f64("train.gamma_pairwise")?,
            gamma_mmd: m.take_f64("train.gamma_mmd")?,
            gamma_warmup_epochs: m.take_usize("train.gamma_warmup_epochs")?,
            gamma_ramp_epochs: m.take_usize("train.gamma_ramp_epochs")?,
            kernel_bandwidth: m.take_f64("train.kernel_bandwidth")?,
            pairs_per_batch: m.take_usize("train.pairs_per_batch")?,
            mmd_batch: m.take_usize("train.mmd_batch")?,
        };
        let control = ControllerConfig {
            num_candidates: m.take_usize("control.candidates")?,
            iterations: m.take_usize("control.iterations")?,
            descent_per_step: m.take_f64("control.descent")?,
            init_half_width: m.take_f64("control.init_half_width")?,
            init_height: m.take_f64("control.init_height")?,
            candidate_bound: m.take_f64("control.candidate_bound")?,
            success_threshold: m.take_f64("control.success_threshold")?,
            distance_cap: m.take_f64("control.distance_cap")?,
            trials: m.take_usize("control.trials")?,
        };
        let seed = m.take_u64("experiment.seed")?;
        m.finish()?;
        Ok(ExperimentConfig {
            scene,
            camera,
            source_domain,
            target_domain,
            data,
            train,
            control,
            seed,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "camera.eye_x = {}", self.camera.eye.x);
        let _ = writeln!(w, "camera.eye_y = {}", self.camera.eye.y);
        let _ = writeln!(w, "camera.eye_z = {}", self.camera.eye.z);
        let _ = writeln!(w, "camera.look_x = {}", self.camera.look.x);
        let _ = writeln!(w, "camera.look_y = {}", self.camera.look.y);
        let _ = writeln!(w, "camera.look_z = {}", self.camera.look.z);
        let _ = writeln!(w, "camera.vfov_deg = {}", self.camera.vfov_deg);
        let _ = writeln!(w, "control.candidate_bound = {}", self.control.candidate_bound);
        let _ = writeln!(w, "control.candidates = {}", self.control.num_candidates);
        let _ = writeln!(w, "control.descent = {}", self.control.descent_per_step);
        let _ = writeln!(w, "control.distance_cap = {}", self.control.distance_cap);
        let _ = writeln!(w, "control.init_half_width = {}", self.control.init_half_width);
        let _ = writeln!(w, "control.init_height = {}", self.control.init_height);
        let _ = writeln!(w, "control.iterations = {}", self.control.iterations);
        let _ = writeln!(w, "control.success_threshold = {}", self.control.success_threshold);
        let _ = writeln!(w, "control.trials = {}", self.control.trials);
        let _ = writeln!(w, "data.action_bound = {}", self.data.action_bound);
        let _ = writeln!(w, "data.actions_per_scene = {}", self.data.actions_per_scene);
        let _ = writeln!(w, "data.pair_source_clutter = {}", self.data.pair_source_clutter);
        let _ = writeln!(w, "data.pair_target_clutter = {}", self.data.pair_target_clutter);
        let _ = writeln!(w, "data.paired_count = {}", self.data.paired_count);
        let _ = writeln!(w, "data.source_scenes = {}", self.data.source_scenes);
        let _ = writeln!(w, "data.state_jitter = {}", self.data.state_jitter);
        let _ = writeln!(w, "data.test_actions_per_scene = {}", self.data.test_actions_per_scene);
        let _ = writeln!(w, "data.test_scenes = {}", self.data.test_scenes);
        write_domain(w, "domain.source", &self.source_domain);
        write_domain(w, "domain.target", &self.target_domain);
        let _ = writeln!(w, "experiment.seed = {}", self.seed);
        let _ = writeln!(w, "scene.bottle_height_max = {}", self.scene.bottle_height.1);
        let _ = writeln!(w, "scene.bottle_height_min = {}", self.scene.bottle_height.0);
        let _ = writeln!(w, "scene.bottle_radius_max = {}", self.scene.bottle_radius.1);
        let _ = writeln!(w, "scene.bottle_radius_min = {}", self.scene.bottle_radius.0);
        let _ = writeln!(w, "scene.bottle_xy_range = {}", self.scene.bottle_xy_range);
        let _ = writeln!(w, "scene.cap_radius_scale = {}", self.scene.cap_radius_scale);
        let _ = writeln!(w, "scene.clutter_height_max = {}", self.scene.clutter_height.1);
        let _ = writeln!(w, "scene.clutter_height_min = {}", self.scene.clutter_height.0);
        let _ = writeln!(w, "scene.clutter_margin = {}", self.scene.clutter_margin);
        let _ = writeln!(w, "scene.clutter_max = {}", self.scene.clutter_count.1);
        let _ = writeln!(w, "scene.clutter_min = {}", self.scene.clutter_count.0);
        let _ = writeln!(w, "scene.clutter_size_max = {}", self.scene.clutter_size.1);
        let _ = writeln!(w, "scene.clutter_size_min = {}", self.scene.clutter_size.0);
        let _ = writeln!(w, "scene.clutter_xy_range = {}", self.scene.clutter_xy_range);
        let _ = writeln!(w, "scene.hand_offset_range = {}", self.scene.hand_offset_range);
        let _ = writeln!(w, "scene.hand_z_max = {}", self.scene.hand_z.1);
        let _ = writeln!(w, "scene.hand_z_min = {}", self.scene.hand_z.0);
        let _ = writeln!(w, "scene.table_z = {}", self.scene.table_z);
        let _ = writeln!(w, "train.adam_beta1 = {}", self.train.adam_beta1);
        let _ = writeln!(w, "train.adam_beta2 = {}", self.train.adam_beta2);
        let _ = writeln!(w, "train.adam_eps = {}", self.train.adam_eps);
        let _ = writeln!(w, "train.alpha = {}", self.train.alpha);
        let _ = writeln!(w, "train.batch_size = {}", self.train.batch_size);
        let _ = writeln!(w, "train.beta = {}", self.train.beta);
        let _ = writeln!(w, "train.epochs = {}", self.train.epochs);
        let _ = writeln!(w, "train.gamma_mmd = {}", self.train.gamma_mmd);
        let _ = writeln!(w, "train.gamma_pairwise = {}", self.train.gamma_pairwise);
        let _ = writeln!(w, "train.gamma_ramp_epochs = {}", self.train.gamma_ramp_epochs);
        let _ = writeln!(w, "train.gamma_warmup_epochs = {}", self.train.gamma_warmup_epochs);
        let _ = writeln!(w, "train.kernel_bandwidth = {}", self.train.kernel_bandwidth);
        let _ = writeln!(w, "train.learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(w, "train.lr_decay = {}", self.train.lr_decay);
        let _ = writeln!(w, "train.mmd_batch = {}", self.train.mmd_batch);
        let _ = writeln!(w, "train.pairs_per_batch = {}", self.train.pairs_per_batch);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let parsed = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut text = ExperimentConfig::default().to_text();
        text.push_str("bogus.key = 1\n");
        let err = ExperimentConfig::from_text(&text).unwrap_err();
        assert!(err.to_string().contains("bogus.key"), "{err}");
    }

    #[test]
    fn missing_key_is_rejected_by_name() {
        let text = ExperimentConfig::default().to_text();
        let text: String = text
            .lines()
            .filter(|l| !l.starts_with("experiment.seed"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = ExperimentConfig::from_text(&text).unwrap_err();
        assert!(err.to_string().contains("experiment.seed"), "{err}");
    }

    #[test]
    fn duplicate_key_is_a_parse_error() {
        let err = ConfigMap::parse("a.b = 1\na.b = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
