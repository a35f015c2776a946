//! Point cloud extraction from calibrated multi-view images: uniform
//! candidates in the hand bounding box, color-consistency filtering, then
//! mask reprojection.

use crate::camera::Camera;
use crate::geom::{Aabb, Vec3};
use crate::image_buf::{ImageBuf, MaskBuf};
use crate::rng::{self, purpose};
use rand::Rng;
use rayon::prelude::*;

/// Views whose stored depth is closer than the candidate by more than this
/// are treated as self-occluded and excluded from the color statistics.
pub const OCCLUSION_TOLERANCE_M: f32 = 0.01;

/// Per-candidate view samples and filter statistics.
pub struct CandidateCloud {
    pub points: Vec<Vec3>,
    /// `colors[point][view]`: None when out of frame or depth-occluded.
    pub colors: Vec<Vec<Option<[f32; 3]>>>,
    /// Channel-wise standard deviation over valid views, averaged.
    pub std: Vec<f32>,
    /// Fraction of all views whose mask contains the projection.
    pub mask_frac: Vec<f32>,
    pub keep: Vec<bool>,
}

/// Deterministic uniform samples inside the box.
pub fn sample_bbox(bbox: &Aabb, m: usize, seed: u64) -> Vec<Vec3> {
    assert!(bbox.volume() > 0.0, "carve bbox must have positive volume");
    let mut rng = rng::stream(&[purpose::CARVE, seed]);
    (0..m)
        .map(|_| {
            Vec3::new(
                rng.gen_range(bbox.min.x..bbox.max.x),
                rng.gen_range(bbox.min.y..bbox.max.y),
                rng.gen_range(bbox.min.z..bbox.max.z),
            )
        })
        .collect()
}

/// One calibrated input view.
pub struct CarveView<'a> {
    pub camera: &'a Camera,
    pub image: &'a ImageBuf,
    pub mask: &'a MaskBuf,
    pub depth: Option<&'a ImageBuf>,
}

/// Bilinear color lookup per projection. Out-of-frame projections and
/// depth-occluded views are excluded from the statistics.
pub fn project_and_sample(points: &[Vec3], views: &[CarveView]) -> Vec<Vec<Option<[f32; 3]>>> {
    points
        .par_iter()
        .map(|p| {
            views
                .iter()
                .map(|view| {
                    let (u, v) = view.camera.project(p)?;
                    let color = view.image.sample_bilinear(u, v)?;
                    if let Some(depth) = view.depth {
                        let xi = u.round() as i64;
                        let yi = v.round() as i64;
                        if xi >= 0 && yi >= 0 && (xi as usize) < depth.w && (yi as usize) < depth.h {
                            let stored = depth.get(xi as usize, yi as usize, 0);
                            let own = view.camera.ray_depth(p);
                            if stored > 0.0 && own > stored + OCCLUSION_TOLERANCE_M {
                                return None;
                            }
                        }
                    }
                    Some([color[0], color[1], color[2]])
                })
                .collect()
        })
        .collect()
}

/// Channel-wise standard deviation averaged over channels. Samples are
/// sorted into a canonical order first so the result is exactly invariant
/// under view permutations.
fn color_std(samples: &[[f32; 3]]) -> f32 {
    if samples.len() < 2 {
        return 0.0;
    }
    let mut sorted: Vec<[f32; 3]> = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut acc = 0.0f64;
    for c in 0..3 {
        let mean = sorted.iter().map(|s| s[c] as f64).sum::<f64>() / n;
        let var = sorted.iter().map(|s| (s[c] as f64 - mean).powi(2)).sum::<f64>() / n;
        acc += var.sqrt();
    }
    (acc / 3.0) as f32
}

/// Build the candidate cloud and apply both filter stages: the color
/// standard-deviation test first, the mask containment test second.
pub fn consistency_filter(
    points: Vec<Vec3>,
    views: &[CarveView],
    sigma_max: f32,
    mask_agreement: f32,
) -> CandidateCloud {
    assert!(mask_agreement > 0.0 && mask_agreement <= 1.0);
    let colors = project_and_sample(&points, views);
    let n_views = views.len() as f32;
    let stats: Vec<(f32, f32)> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let valid: Vec<[f32; 3]> = colors[i].iter().flatten().copied().collect();
            let std = color_std(&valid);
            let in_mask = views
                .iter()
                .filter(|view| {
                    view.camera
                        .project(p)
                        .map_or(false, |(u, v)| view.mask.contains_point(u, v))
                })
                .count();
            (std, in_mask as f32 / n_views)
        })
        .collect();
    let keep: Vec<bool> = stats
        .iter()
        .zip(colors.iter())
        .map(|((std, frac), views_valid)| {
            let has_color = views_valid.iter().any(|c| c.is_some());
            has_color && *std <= sigma_max && *frac >= mask_agreement
        })
        .collect();
    let (std, mask_frac) = stats.into_iter().unzip();
    CandidateCloud { points, colors, std, mask_frac, keep }
}

impl CandidateCloud {
    pub fn kept_points(&self) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(self.keep.iter())
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn rejected_points(&self) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(self.keep.iter())
            .filter(|(_, &k)| !k)
            .map(|(p, _)| *p)
            .collect()
    }
}
