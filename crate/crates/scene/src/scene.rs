//! Procedural sphere scenes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::SceneError;
use crate::geometry::Vec3;

/// Objects and the effector live in this sub-box of the unit workspace.
pub const ACTIVE_MIN: f64 = 0.2;
pub const ACTIVE_MAX: f64 = 0.8;
pub const EFFECTOR_RADIUS: f64 = 0.04;
pub const NUM_COLORS: usize = 4;
/// Nominal sphere radius per colour id. Apparent size is a depth cue only
/// because radius is (nearly) fixed by colour.
pub const COLOR_RADIUS: [f64; NUM_COLORS] = [0.05, 0.065, 0.08, 0.095];
pub const RADIUS_JITTER: f64 = 0.002;
const MAX_ATTEMPTS: usize = 1000;
const MIN_SURFACE_GAP: f64 = 0.01;
const MIN_START_DISTANCE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    /// Two distinct cameras, objects placed freely.
    TwoView,
    /// A single camera (duplicated into both view slots) with object
    /// centres on a fixed family of that camera's rays at varied range.
    MonoAmbiguous,
}

impl Difficulty {
    pub fn code(self) -> u8 {
        match self {
            Difficulty::TwoView => 0,
            Difficulty::MonoAmbiguous => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Difficulty::TwoView),
            1 => Some(Difficulty::MonoAmbiguous),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::TwoView => "two_view",
            Difficulty::MonoAmbiguous => "mono_ambiguous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two_view" => Some(Difficulty::TwoView),
            "mono_ambiguous" => Some(Difficulty::MonoAmbiguous),
            _ => None,
        }
    }

    /// Cameras filling the view slots, in order.
    pub fn cameras(self) -> [Camera; 2] {
        match self {
            Difficulty::TwoView => [Camera::primary(), Camera::oblique()],
            Difficulty::MonoAmbiguous => [Camera::primary(), Camera::primary()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub color_id: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<Sphere>,
    pub target_index: usize,
    pub effector_start: Vec3,
    pub light_dir: Vec3,
}

impl SceneSpec {
    pub fn target(&self) -> &Sphere {
        &self.objects[self.target_index]
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.objects.is_empty() || self.objects.len() > 3 {
            return Err(format!("{} objects", self.objects.len()));
        }
        if self.target_index >= self.objects.len() {
            return Err("target index out of range".into());
        }
        for (i, a) in self.objects.iter().enumerate() {
            let c = a.center.to_array();
            if c.iter().any(|&v| v < a.radius || v > 1.0 - a.radius) {
                return Err(format!("sphere {i} leaves the workspace"));
            }
            if !(0.04..=0.10).contains(&a.radius) {
                return Err(format!("sphere {i} radius {}", a.radius));
            }
            for b in &self.objects[i + 1..] {
                if (a.center - b.center).norm() <= a.radius + b.radius {
                    return Err("intersecting spheres".into());
                }
                if a.color_id == b.color_id {
                    return Err("duplicate colour".into());
                }
            }
        }
        Ok(())
    }
}

/// Directions (through pixel coordinates of the primary camera) that object
/// centres are restricted to in the mono-ambiguous task.
pub fn mono_ray_family() -> Vec<(f64, f64)> {
    let rows = [10.0, 14.0, 18.0];
    let cols = [10.0, 16.0, 22.0];
    rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
}

/// Z-depth interval over which `camera.position + t · dir` stays inside the
/// active box shrunk by `margin`.
pub fn ray_box_interval(origin: Vec3, dir: Vec3, margin: f64) -> Option<(f64, f64)> {
    let (lo, hi) = (ACTIVE_MIN + margin, ACTIVE_MAX - margin);
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for (o, d) in origin.to_array().into_iter().zip(dir.to_array()) {
        if d.abs() < 1e-12 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo - o) / d, (hi - o) / d);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

fn sample_in_box(rng: &mut ChaCha8Rng, margin: f64) -> Vec3 {
    let mut c = || rng.gen_range(ACTIVE_MIN + margin..ACTIVE_MAX - margin);
    Vec3::new(c(), c(), c())
}

fn seed_rng(seed: u64, difficulty: Difficulty) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ difficulty.code() as u64)
}

/// Deterministic scene for `(seed, difficulty)`.
pub fn gen_scene(seed: u64, difficulty: Difficulty) -> Result<SceneSpec, SceneError> {
    let mut rng = seed_rng(seed, difficulty);
    let n_objects = rng.gen_range(1..=3usize);
    let mut colors: Vec<u8> = (0..NUM_COLORS as u8).collect();
    colors.shuffle(&mut rng);
    colors.truncate(n_objects);
    let radii: Vec<f64> =
        colors.iter().map(|&c| COLOR_RADIUS[c as usize] + rng.gen_range(-RADIUS_JITTER..RADIUS_JITTER)).collect();
    let target_index = rng.gen_range(0..n_objects);
    let light = Vec3::new(0.3, -0.5, 1.0)
        + Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    let light_dir = light.normalized();
    let camera = Camera::primary();
    let family = mono_ray_family();

    for _ in 0..MAX_ATTEMPTS {
        let mut objects = Vec::with_capacity(n_objects);
        let mut rays: Vec<usize> = (0..family.len()).collect();
        rays.shuffle(&mut rng);
        let mut ok = true;
        for (i, (&color_id, &radius)) in colors.iter().zip(&radii).enumerate() {
            let center = match difficulty {
                Difficulty::TwoView => sample_in_box(&mut rng, radius),
                Difficulty::MonoAmbiguous => {
                    let (r, c) = family[rays[i]];
                    let dir = camera.ray_dir(r, c);
                    match ray_box_interval(camera.position, dir, radius) {
                        Some((t0, t1)) => camera.position + dir * rng.gen_range(t0..t1),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
            };
            if objects.iter().any(|o: &Sphere| (o.center - center).norm() <= o.radius + radius + MIN_SURFACE_GAP) {
                ok = false;
                break;
            }
            objects.push(Sphere { center, radius, color_id });
        }
        if !ok {
            continue;
        }
        let start = sample_in_box(&mut rng, EFFECTOR_RADIUS);
        let clear = objects.iter().all(|o| (o.center - start).norm() > o.radius + EFFECTOR_RADIUS + MIN_SURFACE_GAP);
        if !clear || (objects[target_index].center - start).norm() < MIN_START_DISTANCE {
            continue;
        }
        // effector positions are carried in f32
        let effector_start = Vec3::from_f32(start.to_f32());
        return Ok(SceneSpec { objects, target_index, effector_start, light_dir });
    }
    Err(SceneError::Rejection { seed, attempts: MAX_ATTEMPTS })
}
