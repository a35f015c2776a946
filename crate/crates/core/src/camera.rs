//! Pinhole camera, affine crop bookkeeping and ray generation.
//!
//! Conventions: world units are meters, `R`/`t` map world to camera
//! coordinates (camera looks along +z), pixels are centered on integer
//! coordinates, and projections are `K · (R·X + t)` dehomogenized.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng;
use nalgebra::Matrix3;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Camera {
    pub k: Matrix3<f32>,
    pub r: Matrix3<f32>,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(k: Matrix3<f32>, r: Matrix3<f32>, t: Vec3, width: usize, height: usize) -> Self {
        Camera { k, r, t, width, height }
    }

    /// Camera placed at `eye` looking at `target` with +z world up.
    pub fn look_at(eye: Vec3, target: Vec3, focal: f32, width: usize, height: usize) -> Self {
        let up = Vec3::new(0.0, 0.0, 1.0);
        let zc = (target - eye).normalize();
        let xc = up.cross(&zc).normalize();
        let yc = zc.cross(&xc);
        let r = Matrix3::from_rows(&[xc.transpose(), yc.transpose(), zc.transpose()]);
        let t = -r * eye;
        let k = Matrix3::new(
            focal,
            0.0,
            (width as f32 - 1.0) / 2.0,
            0.0,
            focal,
            (height as f32 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera { k, r, t, width, height }
    }

    /// K upper-triangular with positive focals, R orthonormal with det +1.
    pub fn validate(&self) -> Result<()> {
        if self.k[(1, 0)] != 0.0 || self.k[(2, 0)] != 0.0 || self.k[(2, 1)] != 0.0 {
            return Err(Error::data("camera K is not upper-triangular"));
        }
        if self.k[(0, 0)] <= 0.0 || self.k[(1, 1)] <= 0.0 {
            return Err(Error::data("camera K has non-positive focal lengths"));
        }
        let rtr = self.r.transpose() * self.r;
        if (rtr - Matrix3::identity()).norm() > 1e-4 {
            return Err(Error::data("camera R is not orthonormal"));
        }
        if (self.r.determinant() - 1.0).abs() > 1e-3 {
            return Err(Error::data("camera R has determinant != +1"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.r * p + self.t
    }

    /// Project a world point; `None` when it is not in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f32, f32)> {
        let c = self.to_camera(p);
        if c.z <= 1e-6 {
            return None;
        }
        let h = self.k * c;
        Some((h.x / h.z, h.y / h.z))
    }

    /// Distance from the camera center (the depth convention of the
    /// analytic renderer's depth buffers).
    pub fn ray_depth(&self, p: &Vec3) -> f32 {
        (p - self.center()).norm()
    }

    /// Unit world-space direction of the ray through pixel coordinates.
    pub fn ray_dir(&self, px: f32, py: f32) -> Vec3 {
        let fx = self.k[(0, 0)];
        let fy = self.k[(1, 1)];
        let skew = self.k[(0, 1)];
        let cx = self.k[(0, 2)];
        let cy = self.k[(1, 2)];
        let y = (py - cy) / fy;
        let x = (px - cx - skew * y) / fx;
        let dir_cam = Vec3::new(x, y, 1.0);
        (self.r.transpose() * dir_cam).normalize()
    }

    /// Camera with intrinsics rewritten for an affine crop plus downscale.
    pub fn cropped(&self, t: &Matrix3<f32>, k_down: usize, crop_w: usize, crop_h: usize) -> Camera {
        Camera {
            k: update_intrinsics(&self.k, t, k_down),
            r: self.r,
            t: self.t,
            width: crop_w / k_down,
            height: crop_h / k_down,
        }
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl Rect {
    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    /// Expand to a centered square with a relative margin factor.
    pub fn squared_with_margin(&self, margin: f32) -> Rect {
        let cx = (self.x0 + self.x1) / 2.0;
        let cy = (self.y0 + self.y1) / 2.0;
        let half = self.width().max(self.height()) * margin / 2.0;
        Rect { x0: cx - half, y0: cy - half, x1: cx + half, y1: cy + half }
    }
}

/// Affine transform mapping a (jittered) pixel bbox onto the target
/// rectangle. Jitter is a train-time augmentation; pass zeros to disable.
pub fn crop_transform(
    bbox: &Rect,
    target: (usize, usize),
    jitter: (f32, f32),
    seed: u64,
) -> Matrix3<f32> {
    assert!(bbox.width() > 0.0 && bbox.height() > 0.0, "degenerate crop bbox");
    let mut b = *bbox;
    let (sigma_s, sigma_t) = jitter;
    if sigma_s != 0.0 || sigma_t != 0.0 {
        let mut rng = rng::stream(&[rng::purpose::CROP_JITTER, seed]);
        let s: f32 = 1.0 + rng.gen_range(-sigma_s..=sigma_s);
        let dx: f32 = rng.gen_range(-sigma_t..=sigma_t);
        let dy: f32 = rng.gen_range(-sigma_t..=sigma_t);
        let cx = (b.x0 + b.x1) / 2.0 + dx;
        let cy = (b.y0 + b.y1) / 2.0 + dy;
        let hw = b.width() * s / 2.0;
        let hh = b.height() * s / 2.0;
        b = Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh };
    }
    let sx = target.0 as f32 / b.width();
    let sy = target.1 as f32 / b.height();
    Matrix3::new(sx, 0.0, -sx * b.x0, 0.0, sy, -sy * b.y0, 0.0, 0.0, 1.0)
}

/// K' = T·K with focal lengths and principal point divided by the
/// downscale factor.
pub fn update_intrinsics(k: &Matrix3<f32>, t: &Matrix3<f32>, k_down: usize) -> Matrix3<f32> {
    assert!(k_down >= 1, "downscale factor must be >= 1");
    let mut kp = t * k;
    let inv = 1.0 / k_down as f32;
    for col in 0..3 {
        kp[(0, col)] *= inv;
        kp[(1, col)] *= inv;
    }
    kp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cam() -> Camera {
        Camera::look_at(Vec3::new(0.0, -0.5, 0.2), Vec3::new(0.0, 0.0, 0.0), 200.0, 65, 65)
    }

    #[test]
    fn look_at_is_valid_and_projects_target_to_principal_point() {
        let cam = test_cam();
        cam.validate().unwrap();
        let (u, v) = cam.project(&Vec3::new(0.0, 0.0, 0.0)).unwrap();
        assert!((u - 32.0).abs() < 1e-3 && (v - 32.0).abs() < 1e-3);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = test_cam();
        let behind = cam.center() - (Vec3::new(0.0, 0.0, 0.0) - cam.center());
        assert!(cam.project(&behind).is_none());
    }

    #[test]
    fn doubling_focal_doubles_pixel_offsets() {
        let mut cam = test_cam();
        let p = Vec3::new(0.03, 0.01, -0.02);
        let (u1, v1) = cam.project(&p).unwrap();
        cam.k[(0, 0)] *= 2.0;
        cam.k[(1, 1)] *= 2.0;
        let (u2, v2) = cam.project(&p).unwrap();
        assert!(((u2 - 32.0) - 2.0 * (u1 - 32.0)).abs() < 1e-3);
        assert!(((v2 - 32.0) - 2.0 * (v1 - 32.0)).abs() < 1e-3);
    }

    #[test]
    fn crop_identity_when_bbox_equals_target() {
        let t = crop_transform(
            &Rect { x0: 0.0, y0: 0.0, x1: 64.0, y1: 64.0 },
            (64, 64),
            (0.0, 0.0),
            0,
        );
        assert!((t - Matrix3::identity()).norm() < 1e-6);
    }

    #[test]
    fn crop_pure_zoom_has_diagonal_two() {
        let t = crop_transform(
            &Rect { x0: 10.0, y0: 20.0, x1: 42.0, y1: 52.0 },
            (64, 64),
            (0.0, 0.0),
            0,
        );
        assert!((t[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((t[(1, 1)] - 2.0).abs() < 1e-6);
        assert_eq!(t[(0, 1)], 0.0);
    }

    #[test]
    fn crop_composes_with_inverse_to_identity() {
        let t = crop_transform(
            &Rect { x0: 5.5, y0: 8.25, x1: 101.0, y1: 103.75 },
            (128, 128),
            (0.05, 3.0),
            9,
        );
        let ti = t.try_inverse().unwrap();
        let p = nalgebra::Vector3::new(33.0f32, 77.0, 1.0);
        let q = ti * (t * p);
        assert!((q - p).norm() < 1e-4);
    }

    #[test]
    fn update_intrinsics_identity_and_focal_halving() {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 40.0, 0.0, 0.0, 1.0);
        let kp = update_intrinsics(&k, &Matrix3::identity(), 1);
        assert_eq!(kp, k);
        let kp2 = update_intrinsics(&k, &Matrix3::identity(), 2);
        assert_eq!(kp2[(0, 0)], 50.0);
        assert_eq!(kp2[(1, 1)], 50.0);
        assert_eq!(kp2[(0, 2)], 25.0);
    }

    #[test]
    fn projection_consistency_identity() {
        // project(K', X) == (1/k) · T · project(K, X) in homogeneous pixels
        let cam = test_cam();
        let t = crop_transform(
            &Rect { x0: 12.0, y0: 7.0, x1: 50.0, y1: 45.0 },
            (64, 64),
            (0.0, 0.0),
            0,
        );
        // both routes in f64 so only the rounding of the composed K' remains;
        // the identity then holds to 1e-5 relative
        let proj64 = |k: &Matrix3<f32>, cam: &Camera, p: &Vec3| -> (f64, f64) {
            let c = cam.to_camera(p);
            let (x, y, z) = (c.x as f64, c.y as f64, c.z as f64);
            let u = k[(0, 0)] as f64 * x + k[(0, 1)] as f64 * y + k[(0, 2)] as f64 * z;
            let v = k[(1, 1)] as f64 * y + k[(1, 2)] as f64 * z;
            (u / z, v / z)
        };
        for k_down in [1usize, 2, 4] {
            let cc = cam.cropped(&t, k_down, 64, 64);
            let mut rng = rng::stream(&[99, k_down as u64]);
            for _ in 0..1000 {
                let p = Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                );
                let (u0, v0) = proj64(&cam.k, &cam, &p);
                let tw = |r: usize| {
                    t[(r, 0)] as f64 * u0 + t[(r, 1)] as f64 * v0 + t[(r, 2)] as f64
                };
                let (eu, ev) = (tw(0) / k_down as f64, tw(1) / k_down as f64);
                let (u1, v1) = proj64(&cc.k, &cc, &p);
                let rel = ((u1 - eu).abs().max((v1 - ev).abs())) / eu.abs().max(ev.abs()).max(1.0);
                assert!(rel < 1e-5, "k={} rel err {:.2e}", k_down, rel);
            }
        }
    }
}
