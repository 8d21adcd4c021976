//! Analytic ray-cast renderer with exact depth and point-map ground truth.

use crate::camera::Camera;
use crate::geometry::{ray_sphere, Vec3};
use crate::scene::{SceneSpec, EFFECTOR_RADIUS};

pub const BACKGROUND_DEPTH: f32 = 10.0;
pub const BACKGROUND_POINT: [f32; 3] = [0.0, 0.0, -1.0];
pub const AMBIENT: f64 = 0.1;
/// Colour samples per pixel side; depth, points and mask come from the
/// pixel-centre ray only.
pub const SUPERSAMPLE: usize = 4;

pub const PALETTE: [[f64; 3]; 4] = [[0.85, 0.15, 0.15], [0.15, 0.75, 0.2], [0.2, 0.3, 0.85], [0.8, 0.75, 0.1]];
pub const EFFECTOR_COLOR: [f64; 3] = [0.7, 0.7, 0.7];

/// One rendered view. Buffers are row-major; `image` and `pointmap` are
/// interleaved `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
    pub pointmap: Vec<f32>,
    pub mask: Vec<bool>,
}

impl RenderOutput {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn point(&self, idx: usize) -> [f32; 3] {
        [self.pointmap[3 * idx], self.pointmap[3 * idx + 1], self.pointmap[3 * idx + 2]]
    }
}

struct Shape {
    center: Vec3,
    radius: f64,
    color: [f64; 3],
}

fn nearest(shapes: &[Shape], origin: Vec3, dir: Vec3) -> Option<(f64, &Shape)> {
    shapes
        .iter()
        .filter_map(|s| ray_sphere(origin, dir, s.center, s.radius).map(|t| (t, s)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn shapes_of(scene: &SceneSpec, effector: Option<Vec3>) -> Vec<Shape> {
    let mut shapes: Vec<Shape> = scene
        .objects
        .iter()
        .map(|o| Shape { center: o.center, radius: o.radius, color: PALETTE[o.color_id as usize] })
        .collect();
    if let Some(e) = effector {
        shapes.push(Shape { center: e, radius: EFFECTOR_RADIUS, color: EFFECTOR_COLOR });
    }
    shapes
}

/// Renders the scene's objects.
pub fn render(scene: &SceneSpec, camera: &Camera) -> RenderOutput {
    render_shapes(&shapes_of(scene, None), scene.light_dir, camera)
}

/// Renders the scene's objects plus the effector sphere at `effector`.
pub fn render_with_effector(scene: &SceneSpec, camera: &Camera, effector: Vec3) -> RenderOutput {
    render_shapes(&shapes_of(scene, Some(effector)), scene.light_dir, camera)
}

fn render_shapes(shapes: &[Shape], light: Vec3, camera: &Camera) -> RenderOutput {
    let (h, w) = (camera.height, camera.width);
    let mut out = RenderOutput {
        height: h,
        width: w,
        image: vec![0.0; h * w * 3],
        depth: vec![BACKGROUND_DEPTH; h * w],
        pointmap: BACKGROUND_POINT.repeat(h * w),
        mask: vec![false; h * w],
    };
    let origin = camera.position;
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let rays = camera.rays();
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            let dir = rays.dir(r as f64 + 0.5, c as f64 + 0.5);
            if let Some((t, _)) = nearest(shapes, origin, dir) {
                let p = origin + dir * t;
                out.depth[idx] = t as f32;
                out.pointmap[3 * idx..3 * idx + 3].copy_from_slice(&p.to_f32());
                out.mask[idx] = true;
            }
            let mut rgb = [0.0f64; 3];
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let d = rays.dir(
                        r as f64 + (sr as f64 + 0.5) / SUPERSAMPLE as f64,
                        c as f64 + (sc as f64 + 0.5) / SUPERSAMPLE as f64,
                    );
                    if let Some((t, s)) = nearest(shapes, origin, d) {
                        let n = (origin + d * t - s.center).normalized();
                        let shade = n.dot(light).max(0.0);
                        for k in 0..3 {
                            rgb[k] += (s.color[k] * shade + AMBIENT).min(1.0);
                        }
                    }
                }
            }
            for k in 0..3 {
                out.image[3 * idx + k] = (rgb[k] * inv) as f32;
            }
        }
    }
    out
}

/// Inverts the pinhole projection: pixel centres at their z-depth. Pixels at
/// the background sentinel map to the background point.
pub fn unproject(depth: &[f32], camera: &Camera) -> Vec<f32> {
    let (h, w) = (camera.height, camera.width);
    assert_eq!(depth.len(), h * w, "depth map does not match camera resolution");
    let mut out = BACKGROUND_POINT.repeat(h * w);
    let rays = camera.rays();
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            let z = depth[idx];
            if z < BACKGROUND_DEPTH {
                let p = camera.position + rays.dir(r as f64 + 0.5, c as f64 + 0.5) * z as f64;
                out[3 * idx..3 * idx + 3].copy_from_slice(&p.to_f32());
            }
        }
    }
    out
}
