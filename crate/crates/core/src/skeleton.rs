//! Hand skeletons: canonicalization, mirroring, two-hand bookkeeping,
//! per-bone rigid deformation and 2D projection.
//!
//! Layout: 21 joints — wrist (0) plus four joints per finger in the order
//! thumb, index, middle, ring, pinky (MCP, PIP, DIP, TIP). Bone `b`
//! connects `parent(b+1)` to joint `b+1`, giving 20 bones.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::{point_segment_distance, Vec3};
use nalgebra::Matrix3;

pub const JOINT_COUNT: usize = 21;
pub const BONE_COUNT: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Handedness {
    Left,
    Right,
}

#[derive(Clone, Debug)]
pub struct Skeleton {
    pub joints: Vec<Vec3>,
    pub handedness: Handedness,
    pub parents: Vec<i32>,
}

/// Standard 21-joint parent table (wrist-rooted chains of four).
pub fn hand_parents() -> Vec<i32> {
    let mut parents = vec![-1i32];
    for finger in 0..5 {
        parents.push(0);
        for j in 1..4 {
            parents.push((1 + finger * 4 + j - 1) as i32);
        }
    }
    parents
}

impl Skeleton {
    pub fn new(joints: Vec<Vec3>, handedness: Handedness) -> Self {
        assert_eq!(joints.len(), JOINT_COUNT, "hand skeletons have 21 joints");
        Skeleton { joints, handedness, parents: hand_parents() }
    }

    pub fn root(&self) -> Vec3 {
        self.joints[0]
    }

    /// (parent joint, child joint) per bone, in bone-index order.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..self.joints.len()).map(move |j| (self.parents[j] as usize, j))
    }

    pub fn bone_endpoints(&self, bone: usize) -> (Vec3, Vec3) {
        let child = bone + 1;
        (self.joints[self.parents[child] as usize], self.joints[child])
    }

    pub fn bone_lengths(&self) -> Vec<f32> {
        self.bones().map(|(p, c)| (self.joints[c] - self.joints[p]).norm()).collect()
    }

    /// Finger index (0..5) owning a bone.
    pub fn bone_finger(bone: usize) -> usize {
        bone / 4
    }

    pub fn is_canonical(&self) -> bool {
        self.root().norm() <= 1e-6
    }
}

/// Root-centered copy: S̃ = S − 1ₙ·s₀ᵀ.
pub fn canonicalize(s: &Skeleton) -> Skeleton {
    let root = s.root();
    Skeleton {
        joints: s.joints.iter().map(|j| j - root).collect(),
        handedness: s.handedness,
        parents: s.parents.clone(),
    }
}

/// Negate x, keep y and z.
pub fn mirror_x(points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect()
}

/// Mirrored skeleton; handedness flips.
pub fn mirror_skeleton(s: &Skeleton) -> Skeleton {
    Skeleton {
        joints: mirror_x(&s.joints),
        handedness: match s.handedness {
            Handedness::Left => Handedness::Right,
            Handedness::Right => Handedness::Left,
        },
        parents: s.parents.clone(),
    }
}

/// Two-hand pose; scenes may omit the left hand.
#[derive(Clone, Debug)]
pub struct TwoHandPose {
    pub right: Skeleton,
    pub left: Option<Skeleton>,
}

impl TwoHandPose {
    pub fn right_only(right: Skeleton) -> Self {
        TwoHandPose { right, left: None }
    }

    /// Offset t = s₀ᴸ − s₀ᴿ where both hands are present.
    pub fn offset(&self) -> Option<Vec3> {
        self.left.as_ref().map(|l| l.root() - self.right.root())
    }
}

/// Right-hand query frame: points re-expressed root-centered, with the
/// canonicalized right skeleton as conditioning input.
pub fn right_query_frame(points: &[Vec3], right: &Skeleton) -> (Vec<Vec3>, Skeleton) {
    let root = right.root();
    (points.iter().map(|p| p - root).collect(), canonicalize(right))
}

/// Left-hand query frame: f(P − s₀ᴸ) with conditioning skeleton f(S̃ᴸ),
/// so one right-hand model serves both hands.
pub fn left_query_frame(points: &[Vec3], left: &Skeleton) -> (Vec<Vec3>, Skeleton) {
    let root = left.root();
    let shifted: Vec<Vec3> = points.iter().map(|p| p - root).collect();
    (mirror_x(&shifted), mirror_skeleton(&canonicalize(left)))
}

/// Rigid map taking observed-bone coordinates to canonical-bone coordinates.
#[derive(Clone, Copy, Debug)]
pub struct BoneTransform {
    pub rotation: Matrix3<f32>,
    pub translation: Vec3,
}

impl BoneTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> BoneTransform {
        let rt = self.rotation.transpose();
        BoneTransform { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Shortest-arc rotation taking unit vector `a` onto unit vector `b`.
/// Anti-parallel input picks a deterministic perpendicular axis.
fn shortest_arc(a: &Vec3, b: &Vec3) -> Matrix3<f32> {
    let cross = a.cross(b);
    let dot = a.dot(b);
    let s2 = cross.norm_squared();
    if s2 < 1e-14 {
        if dot > 0.0 {
            return Matrix3::identity();
        }
        // 180 degrees: rotate about any axis perpendicular to `a`
        let pick = if a.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
        let axis = (pick - a * pick.dot(a)).normalize();
        return rotation_about(&axis, std::f32::consts::PI);
    }
    // Rodrigues with sin/cos taken directly from the cross/dot products
    let k = cross_matrix(&cross);
    Matrix3::identity() + k + k * k * ((1.0 - dot) / s2)
}

fn cross_matrix(v: &Vec3) -> Matrix3<f32> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn rotation_about(axis: &Vec3, angle: f32) -> Matrix3<f32> {
    let k = cross_matrix(axis);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Twist reference for a bone: the in-palm direction between the owning
/// finger's MCP and a neighbor finger's MCP. MCP positions move rigidly
/// with the palm, so the reference co-rotates under rigid motions and
/// pins down the twist that a bare bone direction leaves free.
fn twist_reference(s: &Skeleton, bone: usize) -> Vec3 {
    let finger = Skeleton::bone_finger(bone);
    let neighbor = match finger {
        4 => 3,
        f => f + 1,
    };
    let mcp = |f: usize| s.joints[1 + f * 4];
    mcp(neighbor) - mcp(finger)
}

/// Orthonormal frame (bone direction, projected reference, cross).
fn bone_frame(dir: &Vec3, reference: &Vec3) -> Option<Matrix3<f32>> {
    let e1 = *dir;
    let raw = reference - e1 * reference.dot(&e1);
    let n = raw.norm();
    if n < 1e-6 * reference.norm().max(1e-9) {
        return None;
    }
    let e2 = raw / n;
    let e3 = e1.cross(&e2);
    Some(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Per-bone rigid transforms mapping the observed pose onto the canonical
/// pose. The rotation aligns bone directions exactly; the twist about the
/// bone axis is fixed by the skeleton-derived reference above (falling
/// back to the plain shortest-arc rotation when the reference degenerates).
pub fn bone_transforms(observed: &Skeleton, canonical: &Skeleton) -> Result<Vec<BoneTransform>> {
    assert_eq!(observed.parents, canonical.parents, "skeleton topology mismatch");
    let mut out = Vec::with_capacity(BONE_COUNT);
    for (bone, (p, c)) in observed.bones().enumerate() {
        let d_obs = observed.joints[c] - observed.joints[p];
        let d_can = canonical.joints[c] - canonical.joints[p];
        let (l_obs, l_can) = (d_obs.norm(), d_can.norm());
        if l_obs < 1e-9 || l_can < 1e-9 {
            return Err(Error::DegenerateBone { bone });
        }
        let e_obs = d_obs / l_obs;
        let e_can = d_can / l_can;
        let rotation = match (
            bone_frame(&e_obs, &twist_reference(observed, bone)),
            bone_frame(&e_can, &twist_reference(canonical, bone)),
        ) {
            (Some(f_obs), Some(f_can)) => f_can * f_obs.transpose(),
            _ => shortest_arc(&e_obs, &e_can),
        };
        let translation = canonical.joints[p] - rotation * observed.joints[p];
        out.push(BoneTransform { rotation, translation });
    }
    Ok(out)
}

/// Nearest-bone assignment by point-to-segment distance; ties take the
/// lowest bone index.
pub fn segment_points(points: &[Vec3], skeleton: &Skeleton) -> Vec<usize> {
    let bones: Vec<(Vec3, Vec3)> =
        (0..BONE_COUNT).map(|b| skeleton.bone_endpoints(b)).collect();
    points
        .iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for (b, (a, c)) in bones.iter().enumerate() {
                let d = point_segment_distance(p, a, c);
                if d < best_d {
                    best_d = d;
                    best = b;
                }
            }
            best
        })
        .collect()
}

/// Move points by the rigid transform of their assigned bone.
pub fn deform_with_segmentation(
    points: &[Vec3],
    segmentation: &[usize],
    transforms: &[BoneTransform],
) -> Vec<Vec3> {
    points
        .iter()
        .zip(segmentation.iter())
        .map(|(p, &b)| transforms[b].apply(p))
        .collect()
}

/// Segment against the observed skeleton, then apply per-bone transforms
/// into the canonical pose.
pub fn deform_to_canonical(
    points: &[Vec3],
    observed: &Skeleton,
    canonical: &Skeleton,
) -> Result<Vec<Vec3>> {
    let transforms = bone_transforms(observed, canonical)?;
    let seg = segment_points(points, observed);
    Ok(deform_with_segmentation(points, &seg, &transforms))
}

/// Pinhole projection of every joint; fails on joints behind the camera.
pub fn project_skeleton(s: &Skeleton, cam: &Camera) -> Result<Vec<(f32, f32)>> {
    s.joints
        .iter()
        .enumerate()
        .map(|(j, p)| cam.project(p).ok_or(Error::JointBehindCamera { joint: j }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::Rng;

    fn rot_z(angle: f32) -> Matrix3<f32> {
        rotation_about(&Vec3::new(0.0, 0.0, 1.0), angle)
    }

    fn rigidly_moved(s: &Skeleton, r: &Matrix3<f32>, t: &Vec3) -> Skeleton {
        Skeleton {
            joints: s.joints.iter().map(|j| r * j + t).collect(),
            handedness: s.handedness,
            parents: s.parents.clone(),
        }
    }

    #[test]
    fn canonicalize_moves_root_to_origin() {
        let mut s = synth::template_skeleton();
        for j in &mut s.joints {
            *j += Vec3::new(1.0, 2.0, 3.0);
        }
        let c = canonicalize(&s);
        assert_eq!(c.root(), Vec3::zeros());
    }

    #[test]
    fn canonicalize_is_idempotent_and_isometric() {
        let s = synth::generate_pose(11, 0.6);
        let c1 = canonicalize(&s);
        let c2 = canonicalize(&c1);
        for (a, b) in c1.joints.iter().zip(c2.joints.iter()) {
            assert_eq!(a, b);
        }
        for (l1, l2) in s.bone_lengths().iter().zip(c1.bone_lengths().iter()) {
            assert!((l1 - l2).abs() < 1e-7);
        }
    }

    #[test]
    fn mirror_x_negates_x_and_is_involution() {
        let p = vec![Vec3::new(0.1, 0.2, 0.3)];
        let m = mirror_x(&p);
        assert_eq!(m[0], Vec3::new(-0.1, 0.2, 0.3));
        assert_eq!(mirror_x(&m)[0], p[0]);
        let fixed = vec![Vec3::new(0.0, -1.0, 7.0)];
        assert_eq!(mirror_x(&fixed)[0], fixed[0]);
    }

    #[test]
    fn left_query_frame_maps_left_root_to_origin() {
        let mut left = mirror_skeleton(&synth::generate_pose(3, 0.4));
        for j in &mut left.joints {
            *j += Vec3::new(0.3, -0.1, 0.05);
        }
        let (pts, cond) = left_query_frame(&[left.root()], &left);
        assert_eq!(pts[0], Vec3::zeros());
        assert_eq!(cond.handedness, Handedness::Right);
        assert_eq!(cond.root(), Vec3::zeros());
    }

    #[test]
    fn right_query_frame_maps_right_wrist_to_origin() {
        let mut right = synth::generate_pose(3, 0.4);
        for j in &mut right.joints {
            *j += Vec3::new(-0.2, 0.4, 0.1);
        }
        let (pts, _) = right_query_frame(&[right.root()], &right);
        assert_eq!(pts[0], Vec3::zeros());
    }

    #[test]
    fn mirrored_scene_left_queries_equal_right_queries() {
        // a scene mirrored about x with hands relabeled yields the same
        // query set, bit for bit
        let mut right = synth::generate_pose(8, 0.5);
        for j in &mut right.joints {
            *j += Vec3::new(0.12, -0.07, 0.2);
        }
        let left = mirror_skeleton(&right);
        let mut rng = crate::rng::stream(&[42]);
        let pts: Vec<Vec3> = (0..64)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                )
            })
            .collect();
        let mirrored_pts = mirror_x(&pts);
        let (lq, lcond) = left_query_frame(&mirrored_pts, &left);
        let (rq, rcond) = right_query_frame(&pts, &right);
        for (a, b) in lq.iter().zip(rq.iter()) {
            assert_eq!(a, b, "query points must match bit-for-bit");
        }
        for (a, b) in lcond.joints.iter().zip(rcond.joints.iter()) {
            assert_eq!(a, b, "conditioning skeletons must match bit-for-bit");
        }
    }

    #[test]
    fn bone_transforms_identity_for_equal_skeletons() {
        let s = synth::generate_pose(5, 0.5);
        let ts = bone_transforms(&s, &s).unwrap();
        for t in ts {
            assert!((t.rotation - Matrix3::identity()).norm() < 1e-5);
            assert!(t.translation.norm() < 1e-6);
        }
    }

    #[test]
    fn bone_transforms_recover_rigid_motion() {
        let canonical = synth::generate_pose(5, 0.35);
        let r0 = rotation_about(&Vec3::new(0.3, -0.5, 0.8).normalize(), 0.9);
        let t0 = Vec3::new(0.05, -0.02, 0.1);
        let observed = rigidly_moved(&canonical, &r0, &t0);
        for bt in bone_transforms(&observed, &canonical).unwrap() {
            // recovered rotation must be R0ᵀ: angle of R·R0 away from I
            let err = (bt.rotation * r0 - Matrix3::identity()).norm();
            assert!(err < 1e-5, "rotation error {}", err);
        }
    }

    #[test]
    fn bone_transforms_handle_antiparallel_bones() {
        let canonical = synth::template_skeleton();
        let mut observed = canonical.clone();
        // flip the index TIP bone 180 degrees around its DIP joint
        let dip = observed.joints[7];
        let tip = observed.joints[8];
        observed.joints[8] = dip - (tip - dip);
        let ts = bone_transforms(&observed, &canonical).unwrap();
        let bone = 7; // child joint 8
        let r = ts[bone].rotation;
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-5);
        let (p, c) = observed.bone_endpoints(bone);
        let (pc, cc) = canonical.bone_endpoints(bone);
        let mapped = (ts[bone].apply(&c) - ts[bone].apply(&p)).normalize();
        let want = (cc - pc).normalize();
        assert!((mapped - want).norm() < 1e-5);
    }

    #[test]
    fn zero_length_bone_rejected_with_index() {
        let mut s = synth::template_skeleton();
        s.joints[8] = s.joints[7];
        match bone_transforms(&s, &synth::template_skeleton()) {
            Err(Error::DegenerateBone { bone }) => assert_eq!(bone, 7),
            other => panic!("expected DegenerateBone, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn deform_identity_when_poses_match() {
        let s = synth::generate_pose(2, 0.5);
        let pts = vec![Vec3::new(0.01, 0.05, 0.002), s.joints[6] + Vec3::new(0.003, 0.0, 0.001)];
        let out = deform_to_canonical(&pts, &s, &s).unwrap();
        for (a, b) in pts.iter().zip(out.iter()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn deform_maps_bone_axis_points_onto_canonical_axis() {
        let canonical = synth::template_skeleton();
        let observed = synth::generate_pose(17, 0.7);
        for bone in [1usize, 6, 11, 18] {
            let (a, b) = observed.bone_endpoints(bone);
            let p = a + (b - a) * 0.5;
            let out = deform_to_canonical(&[p], &observed, &canonical).unwrap()[0];
            let (ca, cb) = canonical.bone_endpoints(bone);
            let d = point_segment_distance(&out, &ca, &cb);
            assert!(d < 1e-6, "bone {} axis point missed by {}", bone, d);
        }
    }

    #[test]
    fn deform_roundtrip_with_frozen_segmentation_is_identity() {
        let canonical = synth::template_skeleton();
        let observed = synth::generate_pose(23, 0.6);
        let mut rng = crate::rng::stream(&[7]);
        let pts: Vec<Vec3> = (0..128)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.05..0.18),
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let fwd = bone_transforms(&observed, &canonical).unwrap();
        let bwd = bone_transforms(&canonical, &observed).unwrap();
        let seg = segment_points(&pts, &observed);
        let there = deform_with_segmentation(&pts, &seg, &fwd);
        let back = deform_with_segmentation(&there, &seg, &bwd);
        for (a, b) in pts.iter().zip(back.iter()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn deform_invariant_under_joint_rigid_motion() {
        let canonical = synth::template_skeleton();
        let observed = synth::generate_pose(31, 0.5);
        let mut rng = crate::rng::stream(&[13]);
        let pts: Vec<Vec3> = (0..64)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.05..0.18),
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let base = deform_to_canonical(&pts, &observed, &canonical).unwrap();
        let r = rot_z(1.1) * rotation_about(&Vec3::new(1.0, 0.0, 0.0), 0.4);
        let t = Vec3::new(0.2, -0.3, 0.15);
        let moved_skel = rigidly_moved(&observed, &r, &t);
        let moved_pts: Vec<Vec3> = pts.iter().map(|p| r * p + t).collect();
        let out = deform_to_canonical(&moved_pts, &moved_skel, &canonical).unwrap();
        for (a, b) in base.iter().zip(out.iter()) {
            assert!((a - b).norm() < 1e-5, "moved by {}", (a - b).norm());
        }
    }

    #[test]
    fn segmentation_is_deterministic() {
        let s = synth::generate_pose(3, 0.3);
        let mut rng = crate::rng::stream(&[21]);
        let pts: Vec<Vec3> = (0..256)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.05..0.18),
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        assert_eq!(segment_points(&pts, &s), segment_points(&pts, &s));
    }

    #[test]
    fn projection_rejects_joint_behind_camera() {
        let s = synth::template_skeleton();
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.08, 0.02),
            Vec3::new(0.0, 0.08, 0.5),
            200.0,
            65,
            65,
        );
        // camera sits inside the hand looking away: some joint is behind
        match project_skeleton(&s, &cam) {
            Err(Error::JointBehindCamera { .. }) => {}
            other => panic!("expected JointBehindCamera, got {:?}", other.map(|v| v.len())),
        }
    }
}
