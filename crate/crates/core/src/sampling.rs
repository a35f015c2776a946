//! Ray batches, occupancy-derived bounds, pruning and depth sampling.

use crate::camera::Camera;
use crate::geom::{Aabb, Vec3};
use crate::occupancy::{surface_march, OccGrid};
use crate::rng::{self, purpose};
use rand::Rng;
use rayon::prelude::*;

/// Full-image ray batch with per-ray bounds and alive flags.
pub struct RayBatch {
    pub origin: Vec3,
    pub dirs: Vec<Vec3>,
    pub width: usize,
    pub height: usize,
    pub t_near: Vec<f32>,
    pub t_far: Vec<f32>,
    pub alive: Vec<bool>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.alive[i]).collect()
    }

    pub fn pixel(&self, ray: usize) -> (usize, usize) {
        (ray % self.width, ray / self.width)
    }
}

/// One ray per pixel through the pixel center; origins at the camera
/// center, unit directions in world space.
pub fn generate_rays(cam: &Camera) -> RayBatch {
    let n = cam.width * cam.height;
    let mut dirs = Vec::with_capacity(n);
    for y in 0..cam.height {
        for x in 0..cam.width {
            dirs.push(cam.ray_dir(x as f32, y as f32));
        }
    }
    RayBatch {
        origin: cam.center(),
        dirs,
        width: cam.width,
        height: cam.height,
        t_near: vec![0.0; n],
        t_far: vec![0.0; n],
        alive: vec![false; n],
    }
}

/// Occupancy-derived per-ray bounds: the near bound is the first crossing
/// of `p_min`; the far bound is the earlier of the saturation crossing at
/// `p_max` past the near bound and `t_near + d_fix`. Rays with no crossing
/// are pruned.
pub fn compute_bounds(
    batch: &mut RayBatch,
    grid: &OccGrid,
    bbox: &Aabb,
    p_min: f32,
    p_max: f32,
    d_fix: f32,
) {
    let step = d_fix / 8.0;
    let origin = batch.origin;
    let results: Vec<Option<(f32, f32)>> = batch
        .dirs
        .par_iter()
        .map(|dir| {
            let (enter, exit) = bbox.intersect_ray(&origin, dir)?;
            let t0 = enter.max(0.0);
            if exit <= t0 {
                return None;
            }
            let mut field = |pts: &[Vec3]| pts.iter().map(|p| grid.sample(p)).collect::<Vec<_>>();
            let t_near = surface_march(&mut field, &origin, dir, t0, exit, step, p_min, 10)?;
            let cap = t_near + d_fix;
            let t_sat = surface_march(&mut field, &origin, dir, t_near, cap.min(exit), step, p_max, 10);
            let t_far = t_sat.map_or(cap, |t| t.min(cap)).max(t_near + step * 0.5);
            Some((t_near, t_far))
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some((near, far)) => {
                batch.t_near[i] = near;
                batch.t_far[i] = far;
                batch.alive[i] = true;
            }
            None => {
                batch.alive[i] = false;
            }
        }
    }
}

/// Fixed bounds from a scene box (the dense baseline: no pruning beyond
/// missing the box entirely).
pub fn compute_fixed_bounds(batch: &mut RayBatch, bbox: &Aabb) {
    let origin = batch.origin;
    for i in 0..batch.len() {
        match bbox.intersect_ray(&origin, &batch.dirs[i]) {
            Some((enter, exit)) if exit > enter.max(0.0) => {
                batch.t_near[i] = enter.max(0.0);
                batch.t_far[i] = exit;
                batch.alive[i] = true;
            }
            _ => batch.alive[i] = false,
        }
    }
}

/// Per-ray depth samples in CSR layout over the alive rays.
pub struct SampleSet {
    /// Alive ray indices into the batch, ascending.
    pub rays: Vec<usize>,
    /// CSR offsets: samples of `rays[i]` live in `offsets[i]..offsets[i+1]`.
    pub offsets: Vec<usize>,
    pub depths: Vec<f32>,
    /// True for depths added by hierarchical sampling.
    pub is_new: Vec<bool>,
}

impl SampleSet {
    pub fn n_samples(&self) -> usize {
        self.depths.len()
    }

    pub fn ray_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Segment lengths δ within a ray, the last segment closing at t_far.
    pub fn deltas(&self, i: usize, t_far: f32) -> Vec<f32> {
        let r = self.ray_range(i);
        let d = &self.depths[r.clone()];
        let mut out = Vec::with_capacity(d.len());
        for j in 0..d.len() {
            let next = if j + 1 < d.len() { d[j + 1] } else { t_far.max(d[j]) };
            out.push((next - d[j]).max(0.0));
        }
        out
    }

    pub fn positions(&self, batch: &RayBatch) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.depths.len());
        for (i, &ray) in self.rays.iter().enumerate() {
            let dir = batch.dirs[ray];
            for j in self.ray_range(i) {
                out.push(batch.origin + dir * self.depths[j]);
            }
        }
        out
    }
}

/// Stratified-uniform depths: exactly one sample per equal sub-interval of
/// [t_near, t_far]. Deterministic under (seed, frame, pixel).
pub fn uniform_samples(batch: &RayBatch, k_u: usize, seed: u64, frame: u64) -> SampleSet {
    assert!(k_u >= 2, "k_uniform must be at least 2, got {}", k_u);
    let rays = batch.alive_indices();
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    offsets.push(0);
    let mut depths = Vec::with_capacity(rays.len() * k_u);
    for &ray in &rays {
        let mut rng = rng::stream(&[purpose::RAY_SAMPLES, seed, frame, ray as u64]);
        let (near, far) = (batch.t_near[ray], batch.t_far[ray]);
        let bin = (far - near) / k_u as f32;
        for i in 0..k_u {
            let u: f32 = rng.gen_range(0.0..1.0);
            depths.push(near + bin * (i as f32 + u));
        }
        offsets.push(depths.len());
    }
    let n = depths.len();
    SampleSet { rays, offsets, depths, is_new: vec![false; n] }
}

pub struct HierarchicalReport {
    /// Alive rays whose weights were all zero (fell back to uniform).
    pub fallback_rays: usize,
}

/// Inverse-CDF sampling over the piecewise-constant distribution defined by
/// per-sample weights on the coarse segments (midpoint bins clipped to the
/// ray bounds), merged and re-sorted with the coarse depths.
pub fn hierarchical_samples(
    batch: &RayBatch,
    coarse: &SampleSet,
    weights: &[f32],
    k_h: usize,
    seed: u64,
    frame: u64,
) -> (SampleSet, HierarchicalReport) {
    assert_eq!(weights.len(), coarse.n_samples(), "one weight per coarse sample");
    assert!(weights.iter().all(|w| *w >= 0.0), "weights must be non-negative");
    let mut fallback = 0usize;
    let mut offsets = Vec::with_capacity(coarse.rays.len() + 1);
    offsets.push(0);
    let mut depths = Vec::new();
    let mut is_new = Vec::new();
    for (i, &ray) in coarse.rays.iter().enumerate() {
        let range = coarse.ray_range(i);
        let d = &coarse.depths[range.clone()];
        let w = &weights[range.clone()];
        let (near, far) = (batch.t_near[ray], batch.t_far[ray]);
        // midpoint bin edges: one bin per coarse sample
        let mut edges = Vec::with_capacity(d.len() + 1);
        edges.push(near);
        for j in 1..d.len() {
            edges.push(0.5 * (d[j - 1] + d[j]));
        }
        edges.push(far);
        let total: f32 = w.iter().sum();
        let mut rng = rng::stream(&[purpose::HIERARCHICAL, seed, frame, ray as u64]);
        let mut new_depths = Vec::with_capacity(k_h);
        if total <= 0.0 {
            fallback += 1;
            for _ in 0..k_h {
                new_depths.push(near + (far - near) * rng.gen_range(0.0..1.0f32));
            }
        } else {
            let cdf: Vec<f32> = {
                let mut acc = 0.0;
                w.iter()
                    .map(|wi| {
                        acc += wi / total;
                        acc
                    })
                    .collect()
            };
            for _ in 0..k_h {
                let u: f32 = rng.gen_range(0.0..1.0);
                let bin = cdf.iter().position(|&c| u <= c).unwrap_or(d.len() - 1);
                let c_lo = if bin == 0 { 0.0 } else { cdf[bin - 1] };
                let c_hi = cdf[bin];
                let frac = if c_hi > c_lo { (u - c_lo) / (c_hi - c_lo) } else { 0.5 };
                new_depths.push(edges[bin] + (edges[bin + 1] - edges[bin]) * frac);
            }
        }
        // merge (both sides sorted), dropping exact duplicates
        new_depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut merged: Vec<(f32, bool)> = Vec::with_capacity(d.len() + k_h);
        let (mut a, mut b) = (0usize, 0usize);
        while a < d.len() || b < new_depths.len() {
            let take_coarse = b >= new_depths.len() || (a < d.len() && d[a] <= new_depths[b]);
            if take_coarse {
                merged.push((d[a], false));
                a += 1;
            } else {
                merged.push((new_depths[b], true));
                b += 1;
            }
        }
        merged.dedup_by(|x, y| x.0 == y.0);
        for (t, new) in merged {
            depths.push(t);
            is_new.push(new);
        }
        offsets.push(depths.len());
    }
    (
        SampleSet { rays: coarse.rays.clone(), offsets, depths, is_new },
        HierarchicalReport { fallback_rays: fallback },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::WorldField;
    use crate::synth;

    fn look_cam() -> Camera {
        Camera::look_at(Vec3::new(0.0, -0.45, 0.15), Vec3::new(0.0, 0.08, 0.0), 220.0, 33, 33)
    }

    #[test]
    fn rays_unit_norm_and_principal_axis() {
        let cam = look_cam();
        let batch = generate_rays(&cam);
        for d in &batch.dirs {
            assert!((d.norm() - 1.0).abs() < 1e-6);
        }
        let center_ray = batch.dirs[16 * 33 + 16];
        let axis = (Vec3::new(0.0, 0.08, 0.0) - cam.center()).normalize();
        assert!((center_ray - axis).norm() < 1e-5);
    }

    #[test]
    fn center_ray_hits_the_capsule_it_aims_at() {
        let hand = synth::CapsuleHand::new(synth::template_skeleton(), synth::make_identity(0, 1));
        let (a, b) = hand.skeleton.bone_endpoints(9);
        let target = (a + b) * 0.5;
        let cam = Camera::look_at(Vec3::new(0.0, -0.45, 0.15), target, 220.0, 33, 33);
        let batch = generate_rays(&cam);
        let dir = batch.dirs[16 * 33 + 16];
        // march densely: the analytic oracle must flag points along the ray
        let hit = (0..400).any(|i| {
            let t = 0.3 + i as f32 * 0.001;
            hand.oracle_occupancy(&(batch.origin + dir * t))
        });
        assert!(hit);
    }

    struct BallField {
        center: Vec3,
        radius: f32,
    }

    impl WorldField for BallField {
        fn probs(&self, points: &[Vec3]) -> Vec<f32> {
            points
                .iter()
                .map(|p| {
                    let d = (p - self.center).norm();
                    1.0 / (1.0 + ((d - self.radius) * 600.0).exp())
                })
                .collect()
        }
        fn conditioned(&self, points: &[Vec3]) -> (Vec<f32>, Vec<f32>) {
            (self.probs(points), vec![0.0; points.len()])
        }
        fn feature_dim(&self) -> usize {
            1
        }
    }

    fn ball_setup() -> (RayBatch, Aabb, OccGrid, Vec3, f32) {
        let center = Vec3::new(0.0, 0.0, 0.0);
        let radius = 0.05f32;
        let field = BallField { center, radius };
        let bbox = Aabb::new(Vec3::repeat(-0.12), Vec3::repeat(0.12));
        let grid = OccGrid::build(&field, bbox, 0.0025);
        let cam = Camera::look_at(Vec3::new(0.0, -0.5, 0.0), center, 200.0, 33, 33);
        let batch = generate_rays(&cam);
        (batch, bbox, grid, center, radius)
    }

    #[test]
    fn bounds_prune_background_and_bracket_the_surface() {
        let (mut batch, bbox, grid, center, radius) = ball_setup();
        compute_bounds(&mut batch, &grid, &bbox, 0.1, 0.99, 0.02);
        // corner ray misses, center ray hits near the analytic entry
        assert!(!batch.alive[0], "corner ray must be pruned");
        let cidx = 16 * 33 + 16;
        assert!(batch.alive[cidx]);
        let analytic_entry = (center - batch.origin).norm() - radius;
        assert!(
            (batch.t_near[cidx] - analytic_entry).abs() <= 0.02 / 8.0,
            "t_near {} vs analytic {}",
            batch.t_near[cidx],
            analytic_entry
        );
        for i in 0..batch.len() {
            if batch.alive[i] {
                assert!(batch.t_near[i] >= 0.0);
                assert!(batch.t_far[i] > batch.t_near[i]);
                assert!(batch.t_far[i] - batch.t_near[i] <= 0.02 + 1e-5);
            }
        }
    }

    #[test]
    fn uniform_samples_stratified_inside_bounds() {
        let (mut batch, bbox, grid, _, _) = ball_setup();
        compute_bounds(&mut batch, &grid, &bbox, 0.1, 0.99, 0.02);
        let set = uniform_samples(&batch, 8, 1, 2);
        for (i, &ray) in set.rays.iter().enumerate() {
            let (near, far) = (batch.t_near[ray], batch.t_far[ray]);
            let bin = (far - near) / 8.0;
            let r = set.ray_range(i);
            let d = &set.depths[r];
            assert_eq!(d.len(), 8);
            for j in 0..8 {
                assert!(d[j] >= near + bin * j as f32 - 1e-6);
                assert!(d[j] <= near + bin * (j + 1) as f32 + 1e-6);
                if j > 0 {
                    assert!(d[j] > d[j - 1]);
                }
            }
        }
        // determinism
        let again = uniform_samples(&batch, 8, 1, 2);
        assert_eq!(set.depths, again.depths);
    }

    #[test]
    #[should_panic(expected = "k_uniform")]
    fn uniform_samples_reject_small_k() {
        let (batch, ..) = ball_setup();
        let _ = uniform_samples(&batch, 1, 0, 0);
    }

    #[test]
    fn one_hot_weights_concentrate_new_samples() {
        let (mut batch, bbox, grid, _, _) = ball_setup();
        compute_bounds(&mut batch, &grid, &bbox, 0.1, 0.99, 0.02);
        let coarse = uniform_samples(&batch, 8, 1, 3);
        let hot = 3usize;
        let mut weights = vec![0.0f32; coarse.n_samples()];
        for i in 0..coarse.rays.len() {
            weights[coarse.ray_range(i).start + hot] = 1.0;
        }
        let (merged, report) = hierarchical_samples(&batch, &coarse, &weights, 8, 5, 3);
        assert_eq!(report.fallback_rays, 0);
        for (i, &ray) in merged.rays.iter().enumerate() {
            let cr = coarse.ray_range(i);
            let d = &coarse.depths[cr.clone()];
            let (near, far) = (batch.t_near[ray], batch.t_far[ray]);
            let lo = if hot == 0 { near } else { 0.5 * (d[hot - 1] + d[hot]) };
            let hi = if hot + 1 < d.len() { 0.5 * (d[hot] + d[hot + 1]) } else { far };
            for j in merged.ray_range(i) {
                if merged.is_new[j] {
                    assert!(
                        merged.depths[j] >= lo - 1e-6 && merged.depths[j] <= hi + 1e-6,
                        "new depth {} outside one-hot segment [{}, {}]",
                        merged.depths[j],
                        lo,
                        hi
                    );
                }
            }
        }
    }

    #[test]
    fn merged_depths_strictly_ascending_and_deterministic() {
        let (mut batch, bbox, grid, _, _) = ball_setup();
        compute_bounds(&mut batch, &grid, &bbox, 0.1, 0.99, 0.02);
        let coarse = uniform_samples(&batch, 8, 7, 4);
        let weights: Vec<f32> = coarse.depths.iter().map(|d| (d * 37.0).sin().abs()).collect();
        let (m1, _) = hierarchical_samples(&batch, &coarse, &weights, 8, 9, 4);
        let (m2, _) = hierarchical_samples(&batch, &coarse, &weights, 9, 9, 4);
        for i in 0..m1.rays.len() {
            let r = m1.ray_range(i);
            for j in r.start + 1..r.end {
                assert!(m1.depths[j] > m1.depths[j - 1], "not strictly ascending");
            }
        }
        let (m1b, _) = hierarchical_samples(&batch, &coarse, &weights, 8, 9, 4);
        assert_eq!(m1.depths, m1b.depths);
        assert_ne!(m1.depths, m2.depths, "different seed should move samples");
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let (mut batch, bbox, grid, _, _) = ball_setup();
        compute_bounds(&mut batch, &grid, &bbox, 0.1, 0.99, 0.02);
        let coarse = uniform_samples(&batch, 8, 2, 5);
        let weights = vec![0.0f32; coarse.n_samples()];
        let (merged, report) = hierarchical_samples(&batch, &coarse, &weights, 8, 2, 5);
        assert_eq!(report.fallback_rays, coarse.rays.len());
        for (i, &ray) in merged.rays.iter().enumerate() {
            for j in merged.ray_range(i) {
                assert!(merged.depths[j] >= batch.t_near[ray] - 1e-6);
                assert!(merged.depths[j] <= batch.t_far[ray] + 1e-6);
            }
        }
    }

    #[test]
    fn inverse_cdf_matches_multinomial_for_uniform_weights() {
        // single synthetic ray with 8 equal-probability bins
        let batch = RayBatch {
            origin: Vec3::zeros(),
            dirs: vec![Vec3::new(0.0, 0.0, 1.0)],
            width: 1,
            height: 1,
            t_near: vec![0.0],
            t_far: vec![1.0],
            alive: vec![true],
        };
        let coarse = uniform_samples(&batch, 8, 11, 0);
        let weights = vec![1.0f32; 8];
        let mut counts = [0usize; 8];
        let draws_per_call = 8;
        let calls = 1250; // 10^4 draws
        for c in 0..calls {
            let (merged, _) = hierarchical_samples(&batch, &coarse, &weights, draws_per_call, 100 + c, 0);
            let cr = coarse.ray_range(0);
            let d = &coarse.depths[cr];
            for j in merged.ray_range(0) {
                if !merged.is_new[j] {
                    continue;
                }
                let t = merged.depths[j];
                let mut bin = 0;
                for k in 1..8 {
                    let edge = 0.5 * (d[k - 1] + d[k]);
                    if t >= edge {
                        bin = k;
                    }
                }
                counts[bin] += 1;
            }
        }
        let n = (draws_per_call * calls as usize) as f64;
        let p = 1.0 / 8.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (b, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n * p).abs();
            assert!(dev <= 3.0 * sigma, "bin {} count {} deviates {:.1}σ", b, c, dev / sigma);
        }
    }
}
