//! Closed-loop cap-on-bottle controller: sampling-based action selection over
//! a learned (or oracle) distance predictor, the five-iteration trial
//! protocol, and the capped-distance / success-rate evaluation metrics.

use crate::dataset::{distance_to_goal, Action};
use crate::depthscene::{
    apply_domain, render_depth, sample_scene, Camera, DepthImage, DomainModel, RobotState, Scene,
    SceneConfig, SceneError, Vec3,
};
use crate::net::{predict_batch, NetworkParams};
use crate::seed::rng_for;
use rand::Rng;
use rayon::prelude::*;
use std::io::Write;

/// Trial protocol parameters. Defaults: 1000 candidate displacements per
/// step, 5 iterations with a 1 cm scripted descent, hand initialized in a
/// 10 cm box (half-width 5 cm) 6.5 cm above the bottle opening, 3 cm distance
/// cap, 1 cm success threshold, 20 trials per evaluation. The five scripted
/// descents bring the cap from the init height to 1.5 cm above the rim,
/// where it is released onto the bottle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub num_candidates: usize,
    pub iterations: usize,
    pub descent_per_step: f64,
    pub init_half_width: f64,
    pub init_height: f64,
    pub candidate_bound: f64,
    pub success_threshold: f64,
    pub distance_cap: f64,
    pub trials: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            num_candidates: 1000,
            iterations: 5,
            descent_per_step: 0.01,
            init_half_width: 0.05,
            init_height: 0.065,
            candidate_bound: 0.03,
            success_threshold: 0.01,
            distance_cap: 0.03,
            trials: 20,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_candidates == 0 || self.iterations == 0 || self.trials == 0 {
            return Err("num_candidates, iterations and trials must be positive".into());
        }
        for (name, v) in [
            ("descent_per_step", self.descent_per_step),
            ("init_half_width", self.init_half_width),
            ("init_height", self.init_height),
            ("candidate_bound", self.candidate_bound),
            ("success_threshold", self.success_threshold),
            ("distance_cap", self.distance_cap),
        ] {
            if v <= 0.0 {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.success_threshold > self.distance_cap {
            return Err("success_threshold must not exceed distance_cap".into());
        }
        Ok(())
    }
}

/// What a predictor may look at when scoring candidate displacements. The
/// network predictor reads only the image; the oracle reads the true state.
pub struct Observation<'a> {
    pub image: &'a DepthImage,
    pub state: &'a RobotState,
    pub scene: &'a Scene,
}

/// Batched candidate scoring: predicted distance-to-goal in meters for each
/// action executed from the observed state.
pub trait DistanceFn: Sync {
    fn predict(&self, obs: &Observation, actions: &[Action]) -> Vec<f64>;
}

/// Ground-truth planar distance; bypasses the image entirely.
pub struct OracleDistance;

impl DistanceFn for OracleDistance {
    fn predict(&self, obs: &Observation, actions: &[Action]) -> Vec<f64> {
        actions.iter().map(|&a| distance_to_goal(obs.state, a, obs.scene)).collect()
    }
}

/// Trained-network predictor.
pub struct NetDistance {
    pub params: NetworkParams,
}

impl DistanceFn for NetDistance {
    fn predict(&self, obs: &Observation, actions: &[Action]) -> Vec<f64> {
        predict_batch(obs.image.view(), actions, &self.params)
            .expect("observation image matches network input size")
    }
}

impl<F> DistanceFn for F
where
    F: Fn(&Observation, Action) -> f64 + Sync,
{
    fn predict(&self, obs: &Observation, actions: &[Action]) -> Vec<f64> {
        actions.iter().map(|&a| self(obs, a)).collect()
    }
}

/// Outcome of one candidate-selection step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub action: Action,
    pub index: usize,
    pub predicted: f64,
}

/// Sample `num_candidates` displacements uniformly in the square
/// [-bound, bound]^2 and return the one with the lowest predicted distance;
/// ties go to the lowest candidate index.
pub fn select_action(
    distance_fn: &dyn DistanceFn,
    obs: &Observation,
    cfg: &ControllerConfig,
    rng: &mut impl Rng,
) -> Selected {
    let b = cfg.candidate_bound;
    let candidates: Vec<Action> = (0..cfg.num_candidates)
        .map(|_| Action { dx: rng.gen_range(-b..b), dy: rng.gen_range(-b..b) })
        .collect();
    let preds = distance_fn.predict(obs, &candidates);
    let mut best = 0;
    for (i, &p) in preds.iter().enumerate() {
        if p < preds[best] {
            best = i;
        }
    }
    Selected { action: candidates[best], index: best, predicted: preds[best] }
}

/// One row of a trial trajectory: the hand position before step `step`, the
/// predicted distance of the action chosen there (absent on the final row),
/// and the true planar distance to the opening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub hand: Vec3,
    pub predicted: Option<f64>,
    pub true_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    /// Final planar distance between cap and opening, meters.
    pub raw: f64,
    /// min(raw, distance_cap).
    pub capped: f64,
    /// raw <= success_threshold.
    pub success: bool,
    pub trajectory: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean_capped: f64,
    pub success_rate: f64,
    pub trials: Vec<TrialResult>,
    pub config: ControllerConfig,
}

/// Run one closed-loop trial on the given scene: initialize the hand
/// uniformly in the init box above the bottle, then repeat `iterations`
/// times: render the current state under `domain`, select a displacement,
/// apply it, and descend by `descent_per_step`.
pub fn run_trial(
    distance_fn: &dyn DistanceFn,
    scene: &Scene,
    cap_radius: f64,
    domain: &DomainModel,
    camera: &Camera,
    cfg: &ControllerConfig,
    rng: &mut impl Rng,
) -> TrialResult {
    let w = cfg.init_half_width;
    let mut state = RobotState {
        hand: Vec3::new(
            scene.opening.x + rng.gen_range(-w..w),
            scene.opening.y + rng.gen_range(-w..w),
            scene.opening.z + cfg.init_height,
        ),
        cap_radius,
    };
    let mut trajectory = Vec::with_capacity(cfg.iterations + 1);
    for step in 0..cfg.iterations {
        let image = apply_domain(&render_depth(scene, &state, camera), domain, rng);
        let obs = Observation { image: &image, state: &state, scene };
        let chosen = select_action(distance_fn, &obs, cfg, rng);
        trajectory.push(StepRecord {
            step,
            hand: state.hand,
            predicted: Some(chosen.predicted),
            true_distance: state.hand.planar_distance(scene.opening),
        });
        state.hand.x += chosen.action.dx;
        state.hand.y += chosen.action.dy;
        state.hand.z -= cfg.descent_per_step;
    }
    let raw = state.hand.planar_distance(scene.opening);
    trajectory.push(StepRecord {
        step: cfg.iterations,
        hand: state.hand,
        predicted: None,
        true_distance: raw,
    });
    TrialResult {
        raw,
        capped: raw.min(cfg.distance_cap),
        success: raw <= cfg.success_threshold,
        trajectory,
    }
}

/// Run `cfg.trials` independent trials on freshly sampled scenes and
/// aggregate the capped-distance mean and success rate. Trials get derived
/// per-index seeds and run in parallel with index-ordered aggregation, so the
/// summary is deterministic per seed and independent of thread count.
pub fn evaluate(
    distance_fn: &dyn DistanceFn,
    scene_cfg: &SceneConfig,
    with_clutter: bool,
    domain: &DomainModel,
    camera: &Camera,
    cfg: &ControllerConfig,
    seed: u64,
) -> Result<EvalSummary, SceneError> {
    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, "trial", i as u64);
            let (scene, sampled) = sample_scene(scene_cfg, &mut rng)?;
            let scene = if with_clutter { scene } else { scene.without_clutter() };
            Ok(run_trial(
                distance_fn,
                &scene,
                sampled.cap_radius,
                domain,
                camera,
                cfg,
                &mut rng,
            ))
        })
        .collect::<Result<_, SceneError>>()?;
    let n = trials.len() as f64;
    Ok(EvalSummary {
        mean_capped: trials.iter().map(|t| t.capped).sum::<f64>() / n,
        success_rate: trials.iter().filter(|t| t.success).count() as f64 / n,
        trials,
        config: *cfg,
    })
}

/// Dump all trial trajectories as CSV: trial, step, x, y, z, predicted
/// (empty on final rows), true distance.
pub fn write_trajectories_csv(
    trials: &[TrialResult],
    w: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(w, "trial,step,x,y,z,predicted,true_distance")?;
    for (i, trial) in trials.iter().enumerate() {
        for rec in &trial.trajectory {
            let predicted = rec.predicted.map(|p| format!("{p}")).unwrap_or_default();
            writeln!(
                w,
                "{i},{},{},{},{},{predicted},{}",
                rec.step, rec.hand.x, rec.hand.y, rec.hand.z, rec.true_distance
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthscene::Primitive;
    use approx::assert_relative_eq;

    fn fixed_scene() -> (Scene, RobotState) {
        let bottle = Primitive::Cylinder {
            center: Vec3::new(0.0, 0.0, 0.0),
            radius: 0.03,
            height: 0.12,
        };
        let scene = Scene {
            bottle,
            opening: Vec3::new(0.0, 0.0, 0.12),
            clutter: vec![],
            table_z: 0.0,
            with_clutter: false,
        };
        let state = RobotState {
            hand: Vec3::new(0.02, 0.0, 0.05),
            cap_radius: 0.024,
        };
        (scene, state)
    }

    fn obs_image() -> DepthImage {
        DepthImage::zeros()
    }

    #[test]
    fn constant_predictor_returns_first_candidate() {
        let (scene, state) = fixed_scene();
        let image = obs_image();
        let obs = Observation { image: &image, state: &state, scene: &scene };
        let cfg = ControllerConfig::default();
        let constant = |_: &Observation, _: Action| 0.5;
        let mut rng = rng_for(1, "sel", 0);
        let picked = select_action(&constant, &obs, &cfg, &mut rng);
        assert_eq!(picked.index, 0);
        let mut rng = rng_for(1, "sel", 0);
        let b = cfg.candidate_bound;
        let first = Action { dx: rng.gen_range(-b..b), dy: rng.gen_range(-b..b) };
        assert_eq!(picked.action, first);
    }

    #[test]
    fn single_candidate_is_returned() {
        let (scene, state) = fixed_scene();
        let image = obs_image();
        let obs = Observation { image: &image, state: &state, scene: &scene };
        let cfg = ControllerConfig { num_candidates: 1, ..Default::default() };
        let mut rng = rng_for(2, "sel", 0);
        let picked = select_action(&OracleDistance, &obs, &cfg, &mut rng);
        assert_eq!(picked.index, 0);
    }

    #[test]
    fn oracle_selects_near_optimal_displacement() {
        // Hand offset (0.02, 0) from the goal; the best candidate should be
        // close to (-0.02, 0) given 1000 samples in the 6 cm square.
        let (scene, state) = fixed_scene();
        let image = obs_image();
        let obs = Observation { image: &image, state: &state, scene: &scene };
        let cfg = ControllerConfig::default();
        let mut rng = rng_for(3, "sel", 0);
        let picked = select_action(&OracleDistance, &obs, &cfg, &mut rng);
        assert!((picked.action.dx + 0.02).abs() < 0.005, "dx {}", picked.action.dx);
        assert!(picked.action.dy.abs() < 0.005, "dy {}", picked.action.dy);
    }

    #[test]
    fn argmin_invariant_under_positive_shift() {
        let (scene, state) = fixed_scene();
        let image = obs_image();
        let obs = Observation { image: &image, state: &state, scene: &scene };
        let cfg = ControllerConfig::default();
        let base = |o: &Observation, a: Action| distance_to_goal(o.state, a, o.scene);
        let shifted = |o: &Observation, a: Action| distance_to_goal(o.state, a, o.scene) + 7.0;
        let a = select_action(&base, &obs, &cfg, &mut rng_for(4, "sel", 0));
        let b = select_action(&shifted, &obs, &cfg, &mut rng_for(4, "sel", 0));
        assert_eq!(a.index, b.index);
        assert_eq!(a.action, b.action);
    }

    #[test]
    fn candidate_sampling_is_centered() {
        let cfg = ControllerConfig::default();
        let b = cfg.candidate_bound;
        let mut rng = rng_for(13, "uniform", 0);
        let n = 100_000;
        let mut mx = 0.0;
        let mut my = 0.0;
        for _ in 0..n {
            mx += rng.gen_range(-b..b);
            my += rng.gen_range(-b..b);
        }
        assert!((mx / n as f64).abs() < 1e-3 * b);
        assert!((my / n as f64).abs() < 1e-3 * b);
    }

    #[test]
    fn oracle_trial_succeeds_and_distance_is_monotone() {
        let (scene, state) = fixed_scene();
        let cfg = ControllerConfig::default();
        let camera = Camera::look_at(
            Vec3::new(0.0, -0.18, 0.55),
            Vec3::new(0.0, 0.0, 0.05),
            55f64.to_radians(),
        );
        let mut rng = rng_for(17, "trial", 0);
        let result = run_trial(
            &OracleDistance,
            &scene,
            state.cap_radius,
            &DomainModel::identity(),
            &camera,
            &cfg,
            &mut rng,
        );
        assert!(result.success, "raw final distance {}", result.raw);
        for pair in result.trajectory.windows(2) {
            if pair[0].true_distance <= cfg.candidate_bound {
                assert!(
                    pair[1].true_distance <= pair[0].true_distance + 1e-12,
                    "distance increased: {} -> {}",
                    pair[0].true_distance,
                    pair[1].true_distance
                );
            }
        }
    }

    #[test]
    fn stationary_predictor_keeps_initial_offset() {
        // Predicting |a| makes the controller pick the candidate nearest
        // (0,0), so the hand barely moves laterally.
        let (scene, state) = fixed_scene();
        let cfg = ControllerConfig::default();
        let camera = Camera::look_at(
            Vec3::new(0.0, -0.18, 0.55),
            Vec3::new(0.0, 0.0, 0.05),
            55f64.to_radians(),
        );
        let stay = |_: &Observation, a: Action| (a.dx * a.dx + a.dy * a.dy).sqrt();
        let mut rng = rng_for(7, "trial", 0);
        let result = run_trial(
            &stay,
            &scene,
            state.cap_radius,
            &DomainModel::identity(),
            &camera,
            &cfg,
            &mut rng,
        );
        let initial = result.trajectory[0].true_distance;
        assert!((result.raw - initial).abs() < 0.01, "raw {} vs initial {initial}", result.raw);
        assert_eq!(result.capped, result.raw.min(cfg.distance_cap));
        assert_eq!(result.success, result.raw <= cfg.success_threshold);
    }

    #[test]
    fn runaway_predictor_caps_at_three_centimeters() {
        // Rewarding distance-increasing actions drives every trial past the
        // cap, so the mean capped distance is exactly 0.03.
        let flee = |o: &Observation, a: Action| -distance_to_goal(o.state, a, o.scene);
        let cfg = ControllerConfig { trials: 5, ..Default::default() };
        let camera = Camera::look_at(
            Vec3::new(0.0, -0.18, 0.55),
            Vec3::new(0.0, 0.0, 0.05),
            55f64.to_radians(),
        );
        let summary = evaluate(
            &flee,
            &SceneConfig::default(),
            true,
            &DomainModel::identity(),
            &camera,
            &cfg,
            8,
        )
        .unwrap();
        for t in &summary.trials {
            assert!(t.raw >= cfg.distance_cap);
            assert_eq!(t.capped, cfg.distance_cap);
            assert!(!t.success);
        }
        assert_relative_eq!(summary.mean_capped, cfg.distance_cap, epsilon = 1e-15);
        assert_eq!(summary.success_rate, 0.0);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let cfg = ControllerConfig { trials: 3, num_candidates: 200, ..Default::default() };
        let camera = Camera::look_at(
            Vec3::new(0.0, -0.18, 0.55),
            Vec3::new(0.0, 0.0, 0.05),
            55f64.to_radians(),
        );
        let run = || {
            evaluate(
                &OracleDistance,
                &SceneConfig::default(),
                false,
                &DomainModel::identity(),
                &camera,
                &cfg,
                9,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trajectory_csv_shape() {
        let (scene, state) = fixed_scene();
        let cfg = ControllerConfig { iterations: 3, num_candidates: 50, ..Default::default() };
        let camera = Camera::look_at(
            Vec3::new(0.0, -0.18, 0.55),
            Vec3::new(0.0, 0.0, 0.05),
            55f64.to_radians(),
        );
        let mut rng = rng_for(10, "trial", 0);
        let t = run_trial(
            &OracleDistance,
            &scene,
            state.cap_radius,
            &DomainModel::identity(),
            &camera,
            &cfg,
            &mut rng,
        );
        assert_eq!(t.trajectory.len(), cfg.iterations + 1);
        let mut out = Vec::new();
        write_trajectories_csv(std::slice::from_ref(&t), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + cfg.iterations + 1);
        assert_eq!(lines[0], "trial,step,x,y,z,predicted,true_distance");
        // Final row has an empty predicted field.
        assert!(lines.last().unwrap().split(',').nth(5).unwrap().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        let bad = ControllerConfig { success_threshold: 0.05, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ControllerConfig { trials: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}

