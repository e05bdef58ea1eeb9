//! Procedural scenes and deterministic depth rendering for the two domains.
//!
//! The "source" domain is a clean analytic render plus missing-pixel noise;
//! the "target" domain reuses the same renderer and passes the image through a
//! perturbation pipeline ([`DomainModel`]) standing in for a real depth sensor.
//!
//! Everything here is a pure function of its inputs and an explicit RNG, so
//! renders are bitwise reproducible and safe to fan out across threads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use thiserror::Error;

/// Image resolution on both axes.
pub const RES: usize = 64;

/// Depth floor in meters applied before missing-pixel zeroing, so a stored 0
/// unambiguously means "missing".
pub const DEPTH_FLOOR: f64 = 1e-3;

/// Depth discontinuity (meters) that counts as an edge for edge dropout.
pub const EDGE_DEPTH_STEP: f64 = 0.02;

/// Rendered thickness of the cap held in the gripper.
pub const CAP_HEIGHT: f64 = 0.015;

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("clutter placement failed after {attempts} attempts: object {index} cannot satisfy the no-intersection constraint against bottle and cap")]
    ClutterPlacement { index: usize, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self.scale(1.0 / self.norm())
    }

    /// Planar (xy) distance to another point.
    pub fn planar_distance(self, o: Vec3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Analytic solid. Cylinders are upright with `center` at the middle of the
/// bottom face; boxes are axis-aligned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Cylinder { center: Vec3, radius: f64, height: f64 },
    Box { center: Vec3, half: Vec3 },
    Plane { z: f64 },
}

impl Primitive {
    /// Radius of the xy footprint circle, used by clutter rejection sampling.
    fn footprint_radius(&self) -> f64 {
        match *self {
            Primitive::Cylinder { radius, .. } => radius,
            Primitive::Box { half, .. } => (half.x * half.x + half.y * half.y).sqrt(),
            Primitive::Plane { .. } => f64::INFINITY,
        }
    }

    fn footprint_center(&self) -> (f64, f64) {
        match *self {
            Primitive::Cylinder { center, .. } | Primitive::Box { center, .. } => {
                (center.x, center.y)
            }
            Primitive::Plane { .. } => (0.0, 0.0),
        }
    }

    /// Conservative footprint-circle intersection test between two primitives.
    pub fn footprints_intersect(&self, other: &Primitive, margin: f64) -> bool {
        let (ax, ay) = self.footprint_center();
        let (bx, by) = other.footprint_center();
        let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
        d < self.footprint_radius() + other.footprint_radius() + margin
    }

    /// Nearest intersection parameter t > eps along a normalized ray, if any.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match *self {
            Primitive::Plane { z } => {
                if dir.z.abs() < RAY_EPS {
                    return None;
                }
                let t = (z - origin.z) / dir.z;
                (t > RAY_EPS).then_some(t)
            }
            Primitive::Cylinder { center, radius, height } => {
                let mut best: Option<f64> = None;
                let z0 = center.z;
                let z1 = center.z + height;
                // Lateral surface.
                let ox = origin.x - center.x;
                let oy = origin.y - center.y;
                let a = dir.x * dir.x + dir.y * dir.y;
                if a > RAY_EPS {
                    let b = 2.0 * (ox * dir.x + oy * dir.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                            if t > RAY_EPS {
                                let z = origin.z + t * dir.z;
                                if z >= z0 && z <= z1 {
                                    best = Some(best.map_or(t, |b: f64| b.min(t)));
                                }
                            }
                        }
                    }
                }
                // End caps.
                if dir.z.abs() > RAY_EPS {
                    for zc in [z0, z1] {
                        let t = (zc - origin.z) / dir.z;
                        if t > RAY_EPS {
                            let x = origin.x + t * dir.x - center.x;
                            let y = origin.y + t * dir.y - center.y;
                            if x * x + y * y <= radius * radius {
                                best = Some(best.map_or(t, |b: f64| b.min(t)));
                            }
                        }
                    }
                }
                best
            }
            Primitive::Box { center, half } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                let o = [origin.x - center.x, origin.y - center.y, origin.z - center.z];
                let d = [dir.x, dir.y, dir.z];
                let h = [half.x, half.y, half.z];
                for i in 0..3 {
                    if d[i].abs() < RAY_EPS {
                        if o[i].abs() > h[i] {
                            return None;
                        }
                    } else {
                        let inv = 1.0 / d[i];
                        let mut t0 = (-h[i] - o[i]) * inv;
                        let mut t1 = (h[i] - o[i]) * inv;
                        if t0 > t1 {
                            std::mem::swap(&mut t0, &mut t1);
                        }
                        tmin = tmin.max(t0);
                        tmax = tmax.min(t1);
                        if tmin > tmax {
                            return None;
                        }
                    }
                }
                let t = if tmin > RAY_EPS { tmin } else { tmax };
                (t > RAY_EPS).then_some(t)
            }
        }
    }
}

/// One cap-on-bottle workspace instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Target bottle, always an upright cylinder resting on the table.
    pub bottle: Primitive,
    /// Goal point: center of the bottle's top face.
    pub opening: Vec3,
    pub clutter: Vec<Primitive>,
    pub table_z: f64,
    /// Whether renders of this scene include the clutter list.
    pub with_clutter: bool,
}

impl Scene {
    pub fn without_clutter(&self) -> Scene {
        Scene { with_clutter: false, ..self.clone() }
    }
}

/// Gripper state: the cap is held centered at `hand`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub hand: Vec3,
    pub cap_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub eye: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub vfov: f64,
}

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, vfov: f64) -> Camera {
        let forward = target.sub(eye).normalized();
        // Fall back to +y when looking straight up or down.
        let world_up = if forward.cross(Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-9 {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let right = forward.cross(world_up).normalized();
        let up = right.cross(forward).normalized();
        Camera { eye, forward, right, up, vfov }
    }

    /// Normalized ray direction through the center of pixel (row, col).
    fn ray(&self, row: usize, col: usize) -> Vec3 {
        let half = (self.vfov / 2.0).tan();
        let u = ((col as f64 + 0.5) / RES as f64 * 2.0 - 1.0) * half;
        let v = ((row as f64 + 0.5) / RES as f64 * 2.0 - 1.0) * half;
        self.forward
            .add(self.right.scale(u))
            .add(self.up.scale(-v))
            .normalized()
    }
}

/// 64x64 depth map in meters; 0 encodes a missing pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    data: Vec<f64>,
}

impl DepthImage {
    pub fn zeros() -> DepthImage {
        DepthImage { data: vec![0.0; RES * RES] }
    }

    pub fn from_vec(data: Vec<f64>) -> DepthImage {
        assert_eq!(data.len(), RES * RES);
        DepthImage { data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * RES + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * RES + col] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Borrow as a (row, col) matrix for the network.
    pub fn view(&self) -> ndarray::ArrayView2<'_, f64> {
        ndarray::ArrayView2::from_shape((RES, RES), &self.data).expect("RES x RES image")
    }

    pub fn missing_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 0.0).count() as f64 / (RES * RES) as f64
    }

    /// Dump as a binary 16-bit PGM with millimeter values.
    pub fn write_pgm<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n65535\n", RES, RES)?;
        for &v in &self.data {
            let mm = (v * 1000.0).round().clamp(0.0, 65535.0) as u16;
            w.write_all(&mm.to_be_bytes())?;
        }
        Ok(())
    }
}

/// Sensor perturbation pipeline for one domain, applied in the declared order:
/// lateral shift, depth bias, additive noise, quantization, edge dropout,
/// missing-pixel zeroing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainModel {
    pub missing_prob: f64,
    pub noise_std: f64,
    pub depth_bias: f64,
    /// Horizontal shift in pixels; vacated pixels become missing.
    pub lateral_shift: i32,
    pub quant_step: f64,
    /// Chebyshev radius of dropout around depth discontinuities; 0 disables.
    pub edge_width: usize,
}

impl DomainModel {
    pub fn identity() -> DomainModel {
        DomainModel {
            missing_prob: 0.0,
            noise_std: 0.0,
            depth_bias: 0.0,
            lateral_shift: 0,
            quant_step: 0.0,
            edge_width: 0,
        }
    }

    /// Clean simulation domain: missing pixels only, at the default 10% rate.
    pub fn source_default() -> DomainModel {
        DomainModel { missing_prob: 0.10, ..DomainModel::identity() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.missing_prob) {
            return Err(format!("missing_prob {} outside [0,1]", self.missing_prob));
        }
        if self.noise_std < 0.0 || self.quant_step < 0.0 {
            return Err("noise_std and quant_step must be >= 0".into());
        }
        Ok(())
    }
}

/// Ranges used by [`sample_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub bottle_radius: (f64, f64),
    pub bottle_height: (f64, f64),
    /// Bottle center sampled uniformly in +-range around the origin.
    pub bottle_xy_range: f64,
    pub clutter_count: (usize, usize),
    pub clutter_xy_range: f64,
    pub clutter_size: (f64, f64),
    pub clutter_height: (f64, f64),
    pub clutter_margin: f64,
    /// Hand xy sampled uniformly in +-range around the opening.
    pub hand_offset_range: f64,
    /// Hand height band ABOVE THE OPENING: the cap approaches from above the
    /// bottle rim, so an aligned cap partially occludes the rim instead of
    /// vanishing underneath it (an overhead camera cannot see a cap that is
    /// below the rim plane, which would blind the predictor exactly at the
    /// goal).
    pub hand_z: (f64, f64),
    pub cap_radius_scale: f64,
    pub table_z: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            bottle_radius: (0.018, 0.042),
            bottle_height: (0.10, 0.18),
            bottle_xy_range: 0.06,
            clutter_count: (2, 5),
            clutter_xy_range: 0.16,
            clutter_size: (0.012, 0.035),
            // Clutter tops stay below the cap's lowest flight height so the
            // three object classes (clutter, cap, bottle) occupy disjoint
            // height bands: a 64x64 depth image cannot otherwise tell a
            // cap-sized cylinder of clutter from the cap itself.
            clutter_height: (0.004, 0.012),
            clutter_margin: 0.005,
            hand_offset_range: 0.06,
            // Covers every height the trial protocol renders at (descending
            // 5 cm -> 1 cm above the opening in 1 cm steps).
            hand_z: (0.005, 0.065),
            cap_radius_scale: 0.8,
            table_z: 0.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Sample a workspace instance and robot state from the configured ranges.
///
/// Clutter objects are rejection-sampled so their xy footprints intersect
/// neither the bottle nor the cap at the sampled hand position.
pub fn sample_scene(
    cfg: &SceneConfig,
    rng: &mut impl Rng,
) -> Result<(Scene, RobotState), SceneError> {
    const ATTEMPTS: usize = 100;

    let radius = uniform(rng, cfg.bottle_radius);
    let height = uniform(rng, cfg.bottle_height);
    let bx = rng.gen_range(-cfg.bottle_xy_range..cfg.bottle_xy_range);
    let by = rng.gen_range(-cfg.bottle_xy_range..cfg.bottle_xy_range);
    let bottle = Primitive::Cylinder {
        center: Vec3::new(bx, by, cfg.table_z),
        radius,
        height,
    };
    let opening = Vec3::new(bx, by, cfg.table_z + height);

    let cap_radius = radius * cfg.cap_radius_scale;
    let hand = Vec3::new(
        bx + rng.gen_range(-cfg.hand_offset_range..cfg.hand_offset_range),
        by + rng.gen_range(-cfg.hand_offset_range..cfg.hand_offset_range),
        opening.z + uniform(rng, cfg.hand_z),
    );
    let state = RobotState { hand, cap_radius };
    let cap = Primitive::Cylinder { center: hand, radius: cap_radius, height: CAP_HEIGHT };

    let count = if cfg.clutter_count.0 == cfg.clutter_count.1 {
        cfg.clutter_count.0
    } else {
        rng.gen_range(cfg.clutter_count.0..=cfg.clutter_count.1)
    };
    let mut clutter = Vec::with_capacity(count);
    for index in 0..count {
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let cx = rng.gen_range(-cfg.clutter_xy_range..cfg.clutter_xy_range);
            let cy = rng.gen_range(-cfg.clutter_xy_range..cfg.clutter_xy_range);
            let prim = if rng.gen_bool(0.5) {
                Primitive::Cylinder {
                    center: Vec3::new(cx, cy, cfg.table_z),
                    radius: uniform(rng, cfg.clutter_size),
                    height: uniform(rng, cfg.clutter_height),
                }
            } else {
                let hz = uniform(rng, cfg.clutter_height) / 2.0;
                Primitive::Box {
                    center: Vec3::new(cx, cy, cfg.table_z + hz),
                    half: Vec3::new(
                        uniform(rng, cfg.clutter_size),
                        uniform(rng, cfg.clutter_size),
                        hz,
                    ),
                }
            };
            let ok = !prim.footprints_intersect(&bottle, cfg.clutter_margin)
                && !prim.footprints_intersect(&cap, cfg.clutter_margin);
            if ok {
                clutter.push(prim);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::ClutterPlacement { index, attempts: ATTEMPTS });
        }
    }

    let scene = Scene {
        bottle,
        opening,
        clutter,
        table_z: cfg.table_z,
        with_clutter: true,
    };
    Ok((scene, state))
}

/// Render the scene as seen by `camera`. The recorded value is the
/// camera-forward (z-depth) component of the hit point, so a plane
/// perpendicular to the view axis reads as a constant image.
pub fn render_depth(scene: &Scene, state: &RobotState, camera: &Camera) -> DepthImage {
    let cap = Primitive::Cylinder {
        center: state.hand,
        radius: state.cap_radius,
        height: CAP_HEIGHT,
    };
    let table = Primitive::Plane { z: scene.table_z };
    let mut img = DepthImage::zeros();
    for row in 0..RES {
        for col in 0..RES {
            let dir = camera.ray(row, col);
            let mut best = table.intersect(camera.eye, dir);
            let mut consider = |p: &Primitive| {
                if let Some(t) = p.intersect(camera.eye, dir) {
                    best = Some(best.map_or(t, |b: f64| b.min(t)));
                }
            };
            consider(&scene.bottle);
            consider(&cap);
            if scene.with_clutter {
                for p in &scene.clutter {
                    consider(p);
                }
            }
            let depth = best.map_or(0.0, |t| t * dir.dot(camera.forward));
            img.set(row, col, depth.max(0.0));
        }
    }
    img
}

/// Pass a clean render through one domain's sensor model.
pub fn apply_domain(image: &DepthImage, model: &DomainModel, rng: &mut impl Rng) -> DepthImage {
    let mut out = image.clone();

    if model.lateral_shift != 0 {
        let mut shifted = DepthImage::zeros();
        for row in 0..RES {
            for col in 0..RES {
                let src = col as i64 - model.lateral_shift as i64;
                if (0..RES as i64).contains(&src) {
                    shifted.set(row, col, out.get(row, src as usize));
                }
            }
        }
        out = shifted;
    }

    if model.depth_bias != 0.0 {
        for v in &mut out.data {
            if *v > 0.0 {
                *v += model.depth_bias;
            }
        }
    }

    if model.noise_std > 0.0 {
        let normal = Normal::new(0.0, model.noise_std).expect("valid stddev");
        for v in &mut out.data {
            let n = normal.sample(rng);
            if *v > 0.0 {
                *v += n;
            }
        }
    }

    if model.quant_step > 0.0 {
        for v in &mut out.data {
            if *v > 0.0 {
                *v = (*v / model.quant_step).round() * model.quant_step;
            }
        }
    }

    if model.edge_width > 0 {
        let w = model.edge_width as i64;
        let mut edge = vec![false; RES * RES];
        for row in 0..RES {
            for col in 0..RES {
                let v = out.get(row, col);
                if v == 0.0 {
                    continue;
                }
                let mut mark = false;
                if col + 1 < RES {
                    let r = out.get(row, col + 1);
                    mark |= r > 0.0 && (v - r).abs() > EDGE_DEPTH_STEP;
                }
                if row + 1 < RES {
                    let d = out.get(row + 1, col);
                    mark |= d > 0.0 && (v - d).abs() > EDGE_DEPTH_STEP;
                }
                edge[row * RES + col] = mark;
            }
        }
        let mut drop = vec![false; RES * RES];
        for row in 0..RES as i64 {
            for col in 0..RES as i64 {
                'search: for dr in -w..=w {
                    for dc in -w..=w {
                        let (r, c) = (row + dr, col + dc);
                        if (0..RES as i64).contains(&r)
                            && (0..RES as i64).contains(&c)
                            && edge[r as usize * RES + c as usize]
                        {
                            drop[row as usize * RES + col as usize] = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        for (v, &d) in out.data.iter_mut().zip(&drop) {
            if d {
                *v = 0.0;
            }
        }
    }

    // Floor before zeroing so 0 stays reserved for "missing".
    for v in &mut out.data {
        if *v != 0.0 && *v < DEPTH_FLOOR {
            *v = DEPTH_FLOOR;
        }
    }

    if model.missing_prob > 0.0 {
        for v in &mut out.data {
            if rng.gen::<f64>() < model.missing_prob {
                *v = 0.0;
            }
        }
    }

    out
}
