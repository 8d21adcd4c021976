use crate::geometry::Vec3;

pub const IMAGE_SIZE: usize = 32;

/// Pinhole camera with square pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub height: usize,
    pub width: usize,
}

/// Orthonormal camera frame: `forward` is the optical axis, `right` and
/// `down` span the image plane in pixel-column and pixel-row order.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub forward: Vec3,
    pub right: Vec3,
    pub down: Vec3,
}

impl Camera {
    pub fn new(position: Vec3, look_at: Vec3, up: Vec3, vertical_fov: f64) -> Self {
        assert!((position - look_at).norm() > 0.0, "camera position equals look_at");
        assert!(vertical_fov > 0.0 && vertical_fov < std::f64::consts::PI, "fov out of (0, pi)");
        Self { position, look_at, up: up.normalized(), vertical_fov, height: IMAGE_SIZE, width: IMAGE_SIZE }
    }

    /// Front-top camera looking down across the work area.
    pub fn primary() -> Self {
        Camera::new(Vec3::new(0.5, -0.6, 1.0), Vec3::new(0.5, 0.5, 0.45), Vec3::new(0.0, 0.0, 1.0), 0.80)
    }

    /// Fixed oblique side camera standing in for a wrist view.
    pub fn oblique() -> Self {
        Camera::new(Vec3::new(1.55, 0.15, 0.95), Vec3::new(0.45, 0.55, 0.4), Vec3::new(0.0, 0.0, 1.0), 0.85)
    }

    pub fn frame(&self) -> Frame {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(self.up).normalized();
        let down = forward.cross(right);
        Frame { forward, right, down }
    }

    fn focal(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.vertical_fov / 2.0).tan()
    }

    /// Ray direction through continuous pixel coordinates `(row, col)`, scaled
    /// so its component along the optical axis is 1; `position + z · dir` is
    /// then the point at camera z-depth `z`.
    pub fn ray_dir(&self, row: f64, col: f64) -> Vec3 {
        self.rays().dir(row, col)
    }

    /// [`Camera::ray_dir`] with the frame computed once.
    pub fn rays(&self) -> Rays {
        Rays { frame: self.frame(), focal: self.focal(), cx: self.width as f64 / 2.0, cy: self.height as f64 / 2.0 }
    }

    /// Ray through the centre of pixel `(row, col)`.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vec3 {
        self.ray_dir(row as f64 + 0.5, col as f64 + 0.5)
    }

    /// `(row, col, depth)` of a world point, in continuous pixel units.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let f = self.frame();
        let rel = p - self.position;
        let z = rel.dot(f.forward);
        let focal = self.focal();
        let col = rel.dot(f.right) / z * focal + self.width as f64 / 2.0;
        let row = rel.dot(f.down) / z * focal + self.height as f64 / 2.0;
        (row, col, z)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Rays {
    frame: Frame,
    focal: f64,
    cx: f64,
    cy: f64,
}

impl Rays {
    pub fn dir(&self, row: f64, col: f64) -> Vec3 {
        let u = (col - self.cx) / self.focal;
        let v = (row - self.cy) / self.focal;
        self.frame.forward + self.frame.right * u + self.frame.down * v
    }
}
