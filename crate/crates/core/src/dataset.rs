//! On-disk dataset layout.
//!
//! ```text
//! DIR/cameras.json                  shared rig for every pose
//! DIR/meta.json                     identities, pose table, scene box
//! DIR/poses/<p>/skeleton.json
//! DIR/poses/<p>/view_<v>.png        RGB
//! DIR/poses/<p>/mask_<v>.png        binary
//! DIR/poses/<p>/depth_<v>.bin       optional f32 row-major, 0 = no hit
//! ```

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::image_buf::{ImageBuf, MaskBuf};
use crate::skeleton::{Handedness, Skeleton, JOINT_COUNT};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CameraJson {
    #[serde(rename = "K")]
    pub k: [[f32; 3]; 3],
    #[serde(rename = "R")]
    pub r: [[f32; 3]; 3],
    pub t: [f32; 3],
    pub width: usize,
    pub height: usize,
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let m = |mat: &Matrix3<f32>| {
            [
                [mat[(0, 0)], mat[(0, 1)], mat[(0, 2)]],
                [mat[(1, 0)], mat[(1, 1)], mat[(1, 2)]],
                [mat[(2, 0)], mat[(2, 1)], mat[(2, 2)]],
            ]
        };
        CameraJson { k: m(&c.k), r: m(&c.r), t: [c.t.x, c.t.y, c.t.z], width: c.width, height: c.height }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> Camera {
        let m = |a: &[[f32; 3]; 3]| {
            Matrix3::new(
                a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
            )
        };
        Camera::new(m(&self.k), m(&self.r), Vec3::new(self.t[0], self.t[1], self.t[2]), self.width, self.height)
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct SkeletonJson {
    pub handedness: String,
    pub joints: Vec<[f32; 3]>,
    pub parents: Vec<i32>,
}

impl From<&Skeleton> for SkeletonJson {
    fn from(s: &Skeleton) -> Self {
        SkeletonJson {
            handedness: match s.handedness {
                Handedness::Left => "left".into(),
                Handedness::Right => "right".into(),
            },
            joints: s.joints.iter().map(|j| [j.x, j.y, j.z]).collect(),
            parents: s.parents.clone(),
        }
    }
}

impl SkeletonJson {
    pub fn to_skeleton(&self) -> Result<Skeleton> {
        if self.joints.len() != JOINT_COUNT {
            return Err(Error::data(format!(
                "skeleton has {} joints, expected {}",
                self.joints.len(),
                JOINT_COUNT
            )));
        }
        let handedness = match self.handedness.as_str() {
            "left" => Handedness::Left,
            "right" => Handedness::Right,
            other => return Err(Error::data(format!("unknown handedness '{}'", other))),
        };
        Ok(Skeleton {
            joints: self.joints.iter().map(|j| Vec3::new(j[0], j[1], j[2])).collect(),
            handedness,
            parents: self.parents.clone(),
        })
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct IdentityMeta {
    pub name: String,
    pub albedo: [f32; 3],
    pub finger_mod: [f32; 5],
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct PoseMeta {
    pub dir: String,
    pub identity: usize,
    pub articulation: f32,
    pub seed: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct DatasetMeta {
    pub n_views: usize,
    pub image_size: usize,
    pub focal: f32,
    pub dataset_seed: u64,
    pub scene_box_min: [f32; 3],
    pub scene_box_max: [f32; 3],
    pub identities: Vec<IdentityMeta>,
    pub poses: Vec<PoseMeta>,
    pub has_depth: bool,
}

impl DatasetMeta {
    pub fn scene_box(&self) -> Aabb {
        Aabb::new(
            Vec3::new(self.scene_box_min[0], self.scene_box_min[1], self.scene_box_min[2]),
            Vec3::new(self.scene_box_max[0], self.scene_box_max[1], self.scene_box_max[2]),
        )
    }
}

// ── json + image helpers ────────────────────────────────────────────

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn save_png_rgb(path: &Path, img: &ImageBuf) -> Result<()> {
    assert_eq!(img.ch, 3);
    let mut out = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = img.pixel3(x, y);
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    out.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn load_png_rgb(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.into(), source: e })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageBuf::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set(x, y, c, p[c] as f32 / 255.0);
            }
        }
    }
    Ok(out)
}

pub fn save_png_mask(path: &Path, mask: &MaskBuf) -> Result<()> {
    let mut out = image::GrayImage::new(mask.w as u32, mask.h as u32);
    for y in 0..mask.h {
        for x in 0..mask.w {
            out.put_pixel(x as u32, y as u32, image::Luma([if mask.get(x, y) { 255 } else { 0 }]));
        }
    }
    out.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn load_png_mask(path: &Path) -> Result<MaskBuf> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.into(), source: e })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = MaskBuf::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get_pixel(x as u32, y as u32)[0] > 127);
        }
    }
    Ok(out)
}

pub fn save_depth_bin(path: &Path, depth: &ImageBuf) -> Result<()> {
    assert_eq!(depth.ch, 1);
    let mut bytes = Vec::with_capacity(depth.data.len() * 4);
    for v in &depth.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_depth_bin(path: &Path, w: usize, h: usize) -> Result<ImageBuf> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != w * h * 4 {
        return Err(Error::data(format!(
            "depth file {} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            w * h * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(ImageBuf { w, h, ch: 1, data })
}

// ── point cloud file ("OCPC") ───────────────────────────────────────

pub const CLOUD_MAGIC: &[u8; 4] = b"OCPC";

/// Binary cloud: magic, count u64, xyz f32 triplets, then optional u8 keep
/// labels (present iff the remaining byte count matches).
pub fn save_cloud(path: &Path, points: &[Vec3], labels: Option<&[bool]>) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + points.len() * 12);
    bytes.extend_from_slice(CLOUD_MAGIC);
    bytes.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        bytes.extend_from_slice(&p.x.to_le_bytes());
        bytes.extend_from_slice(&p.y.to_le_bytes());
        bytes.extend_from_slice(&p.z.to_le_bytes());
    }
    if let Some(labels) = labels {
        assert_eq!(labels.len(), points.len());
        bytes.extend(labels.iter().map(|&b| b as u8));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<(Vec<Vec3>, Option<Vec<bool>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != CLOUD_MAGIC {
        return Err(Error::data(format!("{} is not a point cloud file", path.display())));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let coord_end = 12 + count * 12;
    if bytes.len() < coord_end {
        return Err(Error::data(format!("{} is truncated", path.display())));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let at = 12 + i * 12;
        let f = |o: usize| f32::from_le_bytes(bytes[at + o..at + o + 4].try_into().unwrap());
        points.push(Vec3::new(f(0), f(4), f(8)));
    }
    let labels = match bytes.len() - coord_end {
        0 => None,
        n if n == count => Some(bytes[coord_end..].iter().map(|&b| b != 0).collect()),
        _ => return Err(Error::data(format!("{} has a malformed label block", path.display()))),
    };
    Ok((points, labels))
}

// ── dataset views ───────────────────────────────────────────────────

pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub cameras: Vec<Camera>,
    pub skeletons: Vec<Skeleton>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let meta: DatasetMeta = read_json(&root.join("meta.json"))?;
        let cam_json: Vec<CameraJson> = read_json(&root.join("cameras.json"))?;
        let cameras: Vec<Camera> = cam_json.iter().map(|c| c.to_camera()).collect();
        for c in &cameras {
            c.validate()?;
        }
        let mut skeletons = Vec::new();
        for pose in &meta.poses {
            let sj: SkeletonJson = read_json(&root.join("poses").join(&pose.dir).join("skeleton.json"))?;
            skeletons.push(sj.to_skeleton()?);
        }
        Ok(Dataset { root: root.into(), meta, cameras, skeletons })
    }

    pub fn n_poses(&self) -> usize {
        self.meta.poses.len()
    }

    pub fn pose_dir(&self, pose: usize) -> PathBuf {
        self.root.join("poses").join(&self.meta.poses[pose].dir)
    }

    pub fn load_view(&self, pose: usize, view: usize) -> Result<ImageBuf> {
        load_png_rgb(&self.pose_dir(pose).join(format!("view_{:02}.png", view)))
    }

    pub fn load_mask(&self, pose: usize, view: usize) -> Result<MaskBuf> {
        load_png_mask(&self.pose_dir(pose).join(format!("mask_{:02}.png", view)))
    }

    pub fn load_depth(&self, pose: usize, view: usize) -> Result<Option<ImageBuf>> {
        if !self.meta.has_depth {
            return Ok(None);
        }
        let path = self.pose_dir(pose).join(format!("depth_{:02}.bin", view));
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_depth_bin(&path, self.meta.image_size, self.meta.image_size)?))
    }

    pub fn identity_of_pose(&self, pose: usize) -> usize {
        self.meta.poses[pose].identity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_roundtrip_with_and_without_labels() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.5, 2.5, -3.5)];
        let labels = vec![true, false];
        let p1 = dir.path().join("a.ocpc");
        save_cloud(&p1, &pts, Some(&labels)).unwrap();
        let (rp, rl) = load_cloud(&p1).unwrap();
        assert_eq!(rp, pts);
        assert_eq!(rl, Some(labels));
        let p2 = dir.path().join("b.ocpc");
        save_cloud(&p2, &pts, None).unwrap();
        let (rp2, rl2) = load_cloud(&p2).unwrap();
        assert_eq!(rp2, pts);
        assert!(rl2.is_none());
    }

    #[test]
    fn camera_json_roundtrip() {
        let cam = Camera::look_at(Vec3::new(0.1, -0.4, 0.3), Vec3::zeros(), 250.0, 128, 96);
        let j = CameraJson::from(&cam);
        let back = j.to_camera();
        assert_eq!(back.k, cam.k);
        assert_eq!(back.r, cam.r);
        assert_eq!(back.t, cam.t);
        assert_eq!((back.width, back.height), (128, 96));
    }

    #[test]
    fn skeleton_json_roundtrip() {
        let s = crate::synth::generate_pose(3, 0.5);
        let j = SkeletonJson::from(&s);
        let back = j.to_skeleton().unwrap();
        assert_eq!(back.joints, s.joints);
        assert_eq!(back.parents, s.parents);
    }

    #[test]
    fn depth_bin_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = ImageBuf::new(4, 3, 1);
        for (i, v) in d.data.iter_mut().enumerate() {
            *v = i as f32 * 0.25;
        }
        let p = dir.path().join("d.bin");
        save_depth_bin(&p, &d).unwrap();
        let back = load_depth_bin(&p, 4, 3).unwrap();
        assert_eq!(back.data, d.data);
    }
}
