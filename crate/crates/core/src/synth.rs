//! Procedural capsule-hand scenes: template skeleton, curl-based pose
//! generator, analytic ray-capsule renderer and the exact occupancy oracle
//! that every acceptance test measures against.

use crate::camera::Camera;
use crate::geom::{point_segment_distance_f64, Aabb, Vec3};
use crate::image_buf::{ImageBuf, MaskBuf};
use crate::rng::{self, purpose};
use crate::skeleton::{hand_parents, Handedness, Skeleton, BONE_COUNT};
use nalgebra::Matrix3;
use rand::Rng;
use rayon::prelude::*;

/// Fixed directional light and flat ambient term. The ambient floor keeps
/// hand colors consistent across views, which the carving stage relies on.
pub const AMBIENT: f32 = 0.75;
pub const DIFFUSE: f32 = 0.25;

pub fn light_dir() -> Vec3 {
    Vec3::new(0.3, -0.25, 0.9).normalize()
}

/// Open-hand template: wrist at the origin, fingers along +y, thumb toward
/// +x, all joints in the z=0 plane. Meters.
pub fn template_skeleton() -> Skeleton {
    let j = [
        [0.000, 0.000, 0.0],
        // thumb
        [0.034, 0.022, 0.0],
        [0.058, 0.042, 0.0],
        [0.072, 0.058, 0.0],
        [0.082, 0.070, 0.0],
        // index
        [0.027, 0.088, 0.0],
        [0.030, 0.122, 0.0],
        [0.031, 0.142, 0.0],
        [0.032, 0.158, 0.0],
        // middle
        [0.005, 0.092, 0.0],
        [0.005, 0.130, 0.0],
        [0.005, 0.152, 0.0],
        [0.005, 0.170, 0.0],
        // ring
        [-0.016, 0.088, 0.0],
        [-0.019, 0.122, 0.0],
        [-0.020, 0.144, 0.0],
        [-0.021, 0.160, 0.0],
        // pinky
        [-0.036, 0.078, 0.0],
        [-0.041, 0.104, 0.0],
        [-0.043, 0.120, 0.0],
        [-0.044, 0.133, 0.0],
    ];
    Skeleton::new(
        j.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
        Handedness::Right,
    )
}

/// Per-bone capsule radii (meters). Root bones model the palm slab.
pub fn template_radii() -> Vec<f32> {
    let mut radii = Vec::with_capacity(BONE_COUNT);
    let per_finger = [
        [0.013f32, 0.010, 0.009, 0.008], // thumb
        [0.014, 0.009, 0.008, 0.007],    // index
        [0.014, 0.009, 0.008, 0.007],    // middle
        [0.013, 0.008, 0.0075, 0.0065],  // ring
        [0.012, 0.007, 0.0065, 0.006],   // pinky
    ];
    for f in per_finger {
        radii.extend_from_slice(&f);
    }
    radii
}

/// Curl axes per finger: the in-palm MCP-to-MCP directions, so deformation
/// by per-bone rigid transforms reproduces generated poses exactly.
fn curl_axes(template: &Skeleton) -> [Vec3; 5] {
    let mcp = |f: usize| template.joints[1 + f * 4];
    let mut axes = [Vec3::zeros(); 5];
    for f in 0..4 {
        axes[f] = (mcp(f + 1) - mcp(f)).normalize();
    }
    axes[4] = (mcp(4) - mcp(3)).normalize();
    axes
}

fn rotation_about(axis: &Vec3, angle: f32) -> Matrix3<f32> {
    let k = Matrix3::new(0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Deterministic articulated pose. Articulation 0 returns the template
/// exactly; 1 curls every finger joint to a random fraction of its limit.
pub fn generate_pose(seed: u64, articulation: f32) -> Skeleton {
    let template = template_skeleton();
    if articulation == 0.0 {
        return template;
    }
    let axes = curl_axes(&template);
    let mut joints = template.joints.clone();
    let mut rng = rng::stream(&[purpose::POSE, seed]);
    for f in 0..5usize {
        let limits: [f32; 3] = if f == 0 { [0.7, 0.9, 0.8] } else { [1.3, 1.66, 1.2] };
        for (seg, limit) in limits.iter().enumerate() {
            let u: f32 = rng.gen_range(0.55..1.0);
            let angle = articulation * u * limit;
            let pivot_joint = 1 + f * 4 + seg;
            let pivot = joints[pivot_joint];
            let rot = rotation_about(&axes[f], angle);
            for j in pivot_joint + 1..=1 + f * 4 + 3 {
                joints[j] = pivot + rot * (joints[j] - pivot);
            }
        }
    }
    Skeleton { joints, handedness: Handedness::Right, parents: hand_parents() }
}

/// Identity appearance: base albedo plus a mild per-finger modulation.
#[derive(Clone, Debug)]
pub struct Identity {
    pub name: String,
    pub albedo: [f32; 3],
    pub finger_mod: [f32; 5],
}

/// Anchor palette keeps identities separated (pairwise RGB L2 > 0.2).
const ALBEDO_ANCHORS: [[f32; 3]; 4] = [
    [0.80, 0.40, 0.32],
    [0.32, 0.70, 0.38],
    [0.36, 0.44, 0.80],
    [0.78, 0.72, 0.34],
];

pub fn make_identity(index: usize, dataset_seed: u64) -> Identity {
    let anchor = ALBEDO_ANCHORS[index % ALBEDO_ANCHORS.len()];
    let mut rng = rng::stream(&[purpose::IDENTITY, dataset_seed, index as u64]);
    let mut albedo = [0.0f32; 3];
    for (a, base) in albedo.iter_mut().zip(anchor.iter()) {
        *a = (base + rng.gen_range(-0.02..0.02f32)).clamp(0.05, 0.95);
    }
    let mut finger_mod = [1.0f32; 5];
    for m in &mut finger_mod {
        *m = rng.gen_range(0.96..1.04);
    }
    Identity { name: format!("id{}", index), albedo, finger_mod }
}

/// Articulated capsule hand with appearance.
#[derive(Clone, Debug)]
pub struct CapsuleHand {
    pub skeleton: Skeleton,
    pub radii: Vec<f32>,
    pub identity: Identity,
}

impl CapsuleHand {
    pub fn new(skeleton: Skeleton, identity: Identity) -> Self {
        let radii = template_radii();
        debug_assert!(radii.iter().all(|r| (0.004..=0.015).contains(r)));
        CapsuleHand { skeleton, radii, identity }
    }

    /// Empty hand (no capsules), for background-only frames.
    pub fn empty() -> Self {
        CapsuleHand {
            skeleton: template_skeleton(),
            radii: Vec::new(),
            identity: make_identity(0, 0),
        }
    }

    pub fn bounding_box(&self, margin: f32) -> Aabb {
        let rmax = self.radii.iter().cloned().fold(0.0f32, f32::max);
        Aabb::from_points(&self.skeleton.joints, rmax + margin)
    }

    /// Exact membership test: inside iff within some bone's capsule radius.
    pub fn oracle_occupancy(&self, p: &Vec3) -> bool {
        let pf = [p.x as f64, p.y as f64, p.z as f64];
        for (b, (pj, cj)) in self.skeleton.bones().enumerate() {
            if b >= self.radii.len() {
                break;
            }
            let a = self.skeleton.joints[pj];
            let c = self.skeleton.joints[cj];
            let d = point_segment_distance_f64(
                &pf,
                &[a.x as f64, a.y as f64, a.z as f64],
                &[c.x as f64, c.y as f64, c.z as f64],
            );
            if d <= self.radii[b] as f64 {
                return true;
            }
        }
        false
    }
}

type V3 = [f64; 3];

fn sub(a: &V3, b: &V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &V3, b: &V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn axpy(a: &V3, s: f64, b: &V3) -> V3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

/// Nearest positive ray parameter hitting the capsule [a,b] with radius r.
/// f64 throughout so masks and the oracle agree at the boundary.
fn ray_capsule(o: &V3, d: &V3, a: &V3, b: &V3, r: f64) -> Option<f64> {
    let ba = sub(b, a);
    let len2 = dot(&ba, &ba);
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-9 && best.map_or(true, |bt| t < bt) {
            best = Some(t);
        }
    };
    if len2 > 1e-18 {
        let oa = sub(o, a);
        let dv = dot(d, &ba) / len2;
        let ov = dot(&oa, &ba) / len2;
        let n = axpy(d, -dv, &ba);
        let m = axpy(&oa, -ov, &ba);
        let qa = dot(&n, &n);
        let qb = 2.0 * dot(&m, &n);
        let qc = dot(&m, &m) - r * r;
        if qa > 1e-18 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sd = disc.sqrt();
                for t in [(-qb - sd) / (2.0 * qa), (-qb + sd) / (2.0 * qa)] {
                    let s = ov + t * dv;
                    if (0.0..=1.0).contains(&s) {
                        consider(t);
                    }
                }
            }
        }
    }
    // spherical caps
    for cap in [a, b] {
        let oc = sub(o, cap);
        let qb = 2.0 * dot(&oc, d);
        let qc = dot(&oc, &oc) - r * r;
        let disc = qb * qb - 4.0 * qc;
        if disc >= 0.0 {
            let sd = disc.sqrt();
            consider((-qb - sd) / 2.0);
            consider((-qb + sd) / 2.0);
        }
    }
    best
}

/// Closed-form render: RGB, hit mask and ray-distance depth (0 = miss).
/// Lambertian shading under the fixed light, black background.
pub fn render_analytic(hand: &CapsuleHand, cam: &Camera) -> (ImageBuf, MaskBuf, ImageBuf) {
    let (w, h) = (cam.width, cam.height);
    let mut rgb = ImageBuf::new(w, h, 3);
    let mut mask = MaskBuf::new(w, h);
    let mut depth = ImageBuf::new(w, h, 1);
    let origin = cam.center();
    let o64 = [origin.x as f64, origin.y as f64, origin.z as f64];
    let light = light_dir();
    let bones: Vec<(V3, V3, f64, usize)> = hand
        .skeleton
        .bones()
        .enumerate()
        .take(hand.radii.len())
        .map(|(bi, (p, c))| {
            let a = hand.skeleton.joints[p];
            let b = hand.skeleton.joints[c];
            (
                [a.x as f64, a.y as f64, a.z as f64],
                [b.x as f64, b.y as f64, b.z as f64],
                hand.radii[bi] as f64,
                bi,
            )
        })
        .collect();

    let rows: Vec<(Vec<f32>, Vec<bool>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row_rgb = vec![0.0f32; w * 3];
            let mut row_mask = vec![false; w];
            let mut row_depth = vec![0.0f32; w];
            for x in 0..w {
                let dir = cam.ray_dir(x as f32, y as f32);
                let d64 = [dir.x as f64, dir.y as f64, dir.z as f64];
                let mut hit: Option<(f64, usize)> = None;
                for (a, b, r, bi) in &bones {
                    if let Some(t) = ray_capsule(&o64, &d64, a, b, *r) {
                        if hit.map_or(true, |(bt, _)| t < bt) {
                            hit = Some((t, *bi));
                        }
                    }
                }
                if let Some((t, bi)) = hit {
                    let p = origin + dir * t as f32;
                    let (a, b, r, _) = &bones[*&bi];
                    let av = Vec3::new(a[0] as f32, a[1] as f32, a[2] as f32);
                    let bv = Vec3::new(b[0] as f32, b[1] as f32, b[2] as f32);
                    let ab = bv - av;
                    let s = if ab.norm_squared() > 0.0 {
                        ((p - av).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let normal = (p - (av + ab * s)) / *r as f32;
                    let shade = AMBIENT + DIFFUSE * normal.dot(&light).max(0.0);
                    let finger = Skeleton::bone_finger(bi);
                    let fm = hand.identity.finger_mod[finger];
                    for c in 0..3 {
                        row_rgb[x * 3 + c] = (hand.identity.albedo[c] * fm * shade).clamp(0.0, 1.0);
                    }
                    row_mask[x] = true;
                    row_depth[x] = t as f32;
                }
            }
            (row_rgb, row_mask, row_depth)
        })
        .collect();

    for (y, (r, m, d)) in rows.into_iter().enumerate() {
        rgb.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&r);
        mask.data[y * w..(y + 1) * w].copy_from_slice(&m);
        depth.data[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    (rgb, mask, depth)
}

/// Camera rig: a ring of the given radius around the scene center with a
/// deterministic elevation spiral plus seeded jitter.
pub fn camera_ring(
    n_views: usize,
    center: Vec3,
    radius: f32,
    focal: f32,
    size: usize,
    seed: u64,
) -> Vec<Camera> {
    let mut rng = rng::stream(&[purpose::CAMERA, seed]);
    (0..n_views)
        .map(|v| {
            let az = 2.0 * std::f32::consts::PI * v as f32 / n_views as f32
                + rng.gen_range(-0.05..0.05f32);
            let el_frac = (v as f32 + 0.5) / n_views as f32;
            let el = (-20.0 + 65.0 * el_frac).to_radians() + rng.gen_range(-0.03..0.03f32);
            let eye = center
                + Vec3::new(
                    radius * az.cos() * el.cos(),
                    radius * az.sin() * el.cos(),
                    radius * el.sin(),
                );
            Camera::look_at(eye, center, focal, size, size)
        })
        .collect()
}
