//! Skeleton-conditioned implicit hand model: a per-joint encoder with
//! max-pool global embedding conditions a residual point decoder that emits
//! an occupancy probability plus a feature vector per query point.
//!
//! One right-hand model serves both hands: left-hand queries are mirrored
//! into the right-hand frame before evaluation.

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::model::{self, Binder};
use crate::rng::{self, purpose};
use crate::skeleton::{
    bone_transforms, canonicalize, deform_with_segmentation, left_query_frame, mirror_skeleton,
    right_query_frame, segment_points, BoneTransform, Skeleton, TwoHandPose,
};
use occa_autodiff::{Adam, Graph, ParamStore, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Probabilities are kept strictly inside (0,1).
pub fn clamp_prob(p: f32) -> f32 {
    p.clamp(1e-7, 1.0 - f32::EPSILON / 2.0)
}

/// Signed two-hand probability: +p_r when the right hand dominates,
/// −p_l otherwise; ties resolve to the right hand.
pub fn signed_probability(p_r: f32, p_l: f32) -> f32 {
    debug_assert!((0.0..=1.0).contains(&p_r) && (0.0..=1.0).contains(&p_l));
    if p_r >= p_l {
        p_r
    } else {
        -p_l
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OccupancyNet {
    pub embed_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub feature_dim: usize,
    pub pe_freqs: usize,
}

/// Spatial scale (meters) normalizing decoder inputs.
const PE_SCALE: f32 = 0.2;

pub struct OccResult {
    pub probs: Vec<f32>,
    /// Row-major [K, feature_dim].
    pub features: Vec<f32>,
}

impl OccupancyNet {
    pub fn new(embed_dim: usize, width: usize, feature_dim: usize, pe_freqs: usize) -> Self {
        OccupancyNet { embed_dim, width, blocks: 4, feature_dim, pe_freqs }
    }

    pub fn pe_dim(&self) -> usize {
        3 * (1 + 2 * self.pe_freqs)
    }

    /// Register all parameters under the `occ.` prefix.
    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let mut r = rng::stream(&[purpose::OCC_INIT, seed]);
        model::register_linear(store, &mut r, "occ.enc.l1", 3, 64);
        model::register_linear(store, &mut r, "occ.enc.l2", 64, 64);
        model::register_linear(store, &mut r, "occ.enc.l3", 64, self.embed_dim);
        model::register_linear(store, &mut r, "occ.dec.in", self.pe_dim(), self.width);
        for b in 0..self.blocks {
            model::register_linear(store, &mut r, &format!("occ.dec.b{}.l1", b), self.width, self.width);
            model::register_linear(store, &mut r, &format!("occ.dec.b{}.l2", b), self.width, self.width);
            // conditioning starts inert: zero scale/shift from the embedding
            model::register_linear_zero(store, &format!("occ.dec.b{}.scale", b), self.embed_dim, self.width);
            model::register_linear_zero(store, &format!("occ.dec.b{}.shift", b), self.embed_dim, self.width);
        }
        model::register_linear(store, &mut r, "occ.dec.feat", self.width, self.feature_dim);
        // zero-initialized head: probability 1/2 everywhere before training
        model::register_linear_zero(store, "occ.dec.head", self.feature_dim, 1);
    }

    /// Embed a canonical (root-centered) skeleton. Rejects non-canonical
    /// input.
    pub fn encode(&self, g: &mut Graph, binder: &mut Binder, skel: &Skeleton) -> Result<Tensor> {
        let norm = skel.root().norm();
        if norm > 1e-6 {
            return Err(Error::NonCanonicalSkeleton { norm });
        }
        let mut data = Vec::with_capacity(skel.joints.len() * 3);
        for j in &skel.joints {
            data.extend_from_slice(&[j.x / PE_SCALE, j.y / PE_SCALE, j.z / PE_SCALE]);
        }
        let x = Tensor::from_vec(data, &[skel.joints.len(), 3]);
        let h = model::linear(g, binder, "occ.enc.l1", &x);
        let h = g.relu(&h);
        let h = model::linear(g, binder, "occ.enc.l2", &h);
        let h = g.relu(&h);
        let pooled = g.max_rows(&h);
        Ok(model::linear(g, binder, "occ.enc.l3", &pooled))
    }

    /// Decode query points under a skeleton embedding.
    /// Returns (logits [B,1], features [B,m]).
    pub fn decode(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        points: &[Vec3],
        emb: &Tensor,
    ) -> (Tensor, Tensor) {
        let b = points.len();
        let pe = model::positional_encoding(points, self.pe_freqs, PE_SCALE);
        let mut h = model::linear(g, binder, "occ.dec.in", &pe);
        for blk in 0..self.blocks {
            let a = g.relu(&h);
            let a = model::linear(g, binder, &format!("occ.dec.b{}.l1", blk), &a);
            let scale = model::linear(g, binder, &format!("occ.dec.b{}.scale", blk), emb);
            let shift = model::linear(g, binder, &format!("occ.dec.b{}.shift", blk), emb);
            let scale1 = g.add_const(&scale, 1.0);
            let scale_t = g.tile_rows(&scale1, b);
            let shift_t = g.tile_rows(&shift, b);
            let a = g.mul(&a, &scale_t);
            let a = g.add(&a, &shift_t);
            let a = g.relu(&a);
            let a = model::linear(g, binder, &format!("occ.dec.b{}.l2", blk), &a);
            h = g.add(&h, &a);
        }
        let t = g.relu(&h);
        let feat_pre = model::linear(g, binder, "occ.dec.feat", &t);
        let feat = g.relu(&feat_pre);
        let logits = model::linear(g, binder, "occ.dec.head", &feat);
        (logits, feat)
    }

    /// Frozen batched evaluation in a canonical hand frame.
    pub fn query(&self, store: &ParamStore, points: &[Vec3], skel: &Skeleton) -> Result<OccResult> {
        let mut g = Graph::new();
        let emb = self.encode(&mut g, &mut Binder::Frozen(store), skel)?;
        let m = self.feature_dim;
        let chunks: Vec<(Vec<f32>, Vec<f32>)> = points
            .par_chunks(4096)
            .map(|chunk| {
                let mut g = Graph::new();
                let mut binder = Binder::Frozen(store);
                let (logits, feat) = self.decode(&mut g, &mut binder, chunk, &emb);
                let probs: Vec<f32> =
                    logits.data().iter().map(|&z| clamp_prob(sigmoid(z))).collect();
                (probs, feat.data().to_vec())
            })
            .collect();
        let mut probs = Vec::with_capacity(points.len());
        let mut features = Vec::with_capacity(points.len() * m);
        for (p, f) in chunks {
            probs.extend(p);
            features.extend(f);
        }
        Ok(OccResult { probs, features })
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-hand probabilities for world points plus max-probability feature
/// selection (Eq.-style two-hand bookkeeping without deformation).
pub struct TwoHandResult {
    pub p_right: Vec<f32>,
    pub p_left: Vec<f32>,
    pub signed: Vec<f32>,
    pub features: Vec<f32>,
}

pub fn query_two_hands(
    net: &OccupancyNet,
    store: &ParamStore,
    points: &[Vec3],
    pose: &TwoHandPose,
) -> Result<TwoHandResult> {
    let (pts_r, cond_r) = right_query_frame(points, &pose.right);
    let right = net.query(store, &pts_r, &cond_r)?;
    let m = net.feature_dim;
    let (p_left, left_feat) = match &pose.left {
        Some(left) => {
            let (pts_l, cond_l) = left_query_frame(points, left);
            let res = net.query(store, &pts_l, &cond_l)?;
            (res.probs, Some(res.features))
        }
        None => (vec![0.0; points.len()], None),
    };
    let mut signed = Vec::with_capacity(points.len());
    let mut features = Vec::with_capacity(points.len() * m);
    for i in 0..points.len() {
        let (pr, pl) = (right.probs[i], p_left[i]);
        signed.push(signed_probability(pr, pl));
        let src = if pr >= pl || left_feat.is_none() {
            &right.features[i * m..(i + 1) * m]
        } else {
            &left_feat.as_ref().unwrap()[i * m..(i + 1) * m]
        };
        features.extend_from_slice(src);
    }
    Ok(TwoHandResult { p_right: right.probs, p_left, signed, features })
}

// ── world-frame fields ──────────────────────────────────────────────

/// Occupancy seen from world space: probabilities for ray bounding and
/// per-sample conditioning inputs for the renderer.
pub trait WorldField: Sync {
    fn probs(&self, points: &[Vec3]) -> Vec<f32>;
    /// (signed probability, features [K,m]) per point.
    fn conditioned(&self, points: &[Vec3]) -> (Vec<f32>, Vec<f32>);
    fn feature_dim(&self) -> usize;
}

/// Frozen model bound to an observed pose: world points are segmented and
/// rigidly deformed into the canonical pose before querying, so one
/// canonical-pose model serves every articulation.
pub struct PoseField<'a> {
    pub net: &'a OccupancyNet,
    pub store: &'a ParamStore,
    canonical: Skeleton,
    right_transforms: Vec<BoneTransform>,
    right_observed: Skeleton,
    left: Option<(Skeleton, Vec<BoneTransform>, Skeleton)>, // (canonical_left, transforms, observed)
}

impl<'a> PoseField<'a> {
    pub fn new(
        net: &'a OccupancyNet,
        store: &'a ParamStore,
        pose: &TwoHandPose,
        canonical: &Skeleton,
    ) -> Result<Self> {
        debug_assert!(canonical.is_canonical());
        let right_transforms = bone_transforms(&pose.right, canonical)?;
        let left = match &pose.left {
            Some(obs_left) => {
                let canonical_left = mirror_skeleton(canonical);
                let t = bone_transforms(obs_left, &canonical_left)?;
                Some((canonical_left, t, obs_left.clone()))
            }
            None => None,
        };
        Ok(PoseField {
            net,
            store,
            canonical: canonical.clone(),
            right_transforms,
            right_observed: pose.right.clone(),
            left,
        })
    }

    fn deform_right(&self, points: &[Vec3]) -> Vec<Vec3> {
        let seg = segment_points(points, &self.right_observed);
        deform_with_segmentation(points, &seg, &self.right_transforms)
    }

    fn query_right(&self, points: &[Vec3]) -> OccResult {
        let canonical_pts = self.deform_right(points);
        self.net
            .query(self.store, &canonical_pts, &self.canonical)
            .expect("canonical template query")
    }

    fn query_left(&self, points: &[Vec3]) -> Option<OccResult> {
        let (canonical_left, transforms, observed) = self.left.as_ref()?;
        let seg = segment_points(points, observed);
        let deformed = deform_with_segmentation(points, &seg, transforms);
        let (mirrored, cond) = left_query_frame(&deformed, canonical_left);
        Some(self.net.query(self.store, &mirrored, &cond).expect("mirrored template query"))
    }
}

impl<'a> WorldField for PoseField<'a> {
    fn probs(&self, points: &[Vec3]) -> Vec<f32> {
        let right = self.query_right(points);
        match self.query_left(points) {
            Some(left) => right
                .probs
                .iter()
                .zip(left.probs.iter())
                .map(|(&a, &b)| a.max(b))
                .collect(),
            None => right.probs,
        }
    }

    fn conditioned(&self, points: &[Vec3]) -> (Vec<f32>, Vec<f32>) {
        let m = self.net.feature_dim;
        let right = self.query_right(points);
        match self.query_left(points) {
            Some(left) => {
                let mut signed = Vec::with_capacity(points.len());
                let mut feat = Vec::with_capacity(points.len() * m);
                for i in 0..points.len() {
                    let (pr, pl) = (right.probs[i], left.probs[i]);
                    signed.push(signed_probability(pr, pl));
                    let src = if pr >= pl {
                        &right.features[i * m..(i + 1) * m]
                    } else {
                        &left.features[i * m..(i + 1) * m]
                    };
                    feat.extend_from_slice(src);
                }
                (signed, feat)
            }
            None => (right.probs, right.features),
        }
    }

    fn feature_dim(&self) -> usize {
        self.net.feature_dim
    }
}

/// Trilinear-interpolated probability cache used by the ray-bounds march.
pub struct OccGrid {
    pub aabb: Aabb,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl OccGrid {
    pub fn build(field: &dyn WorldField, aabb: Aabb, cell: f32) -> OccGrid {
        let size = aabb.size();
        let dims = [
            ((size.x / cell).ceil() as usize + 1).max(2),
            ((size.y / cell).ceil() as usize + 1).max(2),
            ((size.z / cell).ceil() as usize + 1).max(2),
        ];
        let mut points = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    points.push(Vec3::new(
                        aabb.min.x + size.x * x as f32 / (dims[0] - 1) as f32,
                        aabb.min.y + size.y * y as f32 / (dims[1] - 1) as f32,
                        aabb.min.z + size.z * z as f32 / (dims[2] - 1) as f32,
                    ));
                }
            }
        }
        let data: Vec<f32> = points
            .par_chunks(8192)
            .map(|chunk| field.probs(chunk))
            .flatten()
            .collect();
        OccGrid { aabb, dims, data }
    }

    pub fn sample(&self, p: &Vec3) -> f32 {
        let size = self.aabb.size();
        let fx = ((p.x - self.aabb.min.x) / size.x) * (self.dims[0] - 1) as f32;
        let fy = ((p.y - self.aabb.min.y) / size.y) * (self.dims[1] - 1) as f32;
        let fz = ((p.z - self.aabb.min.z) / size.z) * (self.dims[2] - 1) as f32;
        if fx < 0.0
            || fy < 0.0
            || fz < 0.0
            || fx > (self.dims[0] - 1) as f32
            || fy > (self.dims[1] - 1) as f32
            || fz > (self.dims[2] - 1) as f32
        {
            return 0.0;
        }
        let (x0, y0, z0) = (fx.floor() as usize, fy.floor() as usize, fz.floor() as usize);
        let (x1, y1, z1) = (
            (x0 + 1).min(self.dims[0] - 1),
            (y0 + 1).min(self.dims[1] - 1),
            (z0 + 1).min(self.dims[2] - 1),
        );
        let (ax, ay, az) = (fx - x0 as f32, fy - y0 as f32, fz - z0 as f32);
        let at = |x: usize, y: usize, z: usize| self.data[(z * self.dims[1] + y) * self.dims[0] + x];
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), ax);
        let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), ax);
        let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), ax);
        let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), ax);
        lerp(lerp(c00, c10, ay), lerp(c01, c11, ay), az)
    }
}

// ── surface extraction ──────────────────────────────────────────────

/// First crossing of `p_min` along [t0, t1], marched at `step` and refined
/// by `bisections` rounds between the bracketing samples.
pub fn surface_march(
    prob: &mut dyn FnMut(&[Vec3]) -> Vec<f32>,
    origin: &Vec3,
    dir: &Vec3,
    t0: f32,
    t1: f32,
    step: f32,
    p_min: f32,
    bisections: usize,
) -> Option<f32> {
    assert!(step > 0.0, "march step must be positive");
    if t1 <= t0 {
        return None;
    }
    let n = ((t1 - t0) / step).ceil() as usize + 1;
    let ts: Vec<f32> = (0..=n).map(|i| (t0 + i as f32 * step).min(t1)).collect();
    let pts: Vec<Vec3> = ts.iter().map(|&t| origin + dir * t).collect();
    let ps = prob(&pts);
    let first = ps.iter().position(|&p| p >= p_min)?;
    if first == 0 {
        return Some(ts[0]);
    }
    let (mut lo, mut hi) = (ts[first - 1], ts[first]);
    for _ in 0..bisections {
        let mid = 0.5 * (lo + hi);
        let p = prob(&[origin + dir * mid])[0];
        if p >= p_min {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Nearest surface depth of a canonical-frame model along a ray, marching
/// from t = 0 through the given box.
pub fn surface_extract(
    net: &OccupancyNet,
    store: &ParamStore,
    skel: &Skeleton,
    origin: &Vec3,
    dir: &Vec3,
    step: f32,
    p_min: f32,
    bbox: &Aabb,
) -> Result<Option<f32>> {
    let Some((enter, exit)) = bbox.intersect_ray(origin, dir) else {
        return Ok(None);
    };
    let t0 = enter.max(0.0);
    let skel = skel.clone();
    let mut field = |pts: &[Vec3]| net.query(store, pts, &skel).map(|r| r.probs).unwrap();
    Ok(surface_march(&mut field, origin, dir, t0, exit, step, p_min, 10))
}

// ── training ────────────────────────────────────────────────────────

pub struct LabeledPoints {
    pub points: Vec<Vec3>,
    pub labels: Vec<bool>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct IouPoint {
    pub step: usize,
    pub val_iou: f64,
    pub mean_loss: f64,
}

pub struct OccTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub stop_iou: f32,
    pub eval_every: usize,
    pub seed: u64,
}

/// Intersection-over-union of thresholded predictions against labels.
pub fn iou(pred_inside: &[bool], true_inside: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred_inside.iter().zip(true_inside.iter()) {
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binary cross-entropy training on a labeled canonical cloud with
/// balanced positive/negative batches. Reports validation IoU on a
/// held-out split and stops early once `stop_iou` is reached.
pub fn train_occupancy(
    net: &OccupancyNet,
    store: &mut ParamStore,
    data: &LabeledPoints,
    skel: &Skeleton,
    opts: &OccTrainOptions,
) -> Result<Vec<IouPoint>> {
    assert_eq!(data.points.len(), data.labels.len());
    let mut order: Vec<usize> = (0..data.points.len()).collect();
    let mut shuffle_rng = rng::stream(&[purpose::OCC_BATCH, opts.seed, 0]);
    for i in (1..order.len()).rev() {
        order.swap(i, shuffle_rng.gen_range(0..=i));
    }
    let n_val = (order.len() / 10).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let pos: Vec<usize> = train_idx.iter().copied().filter(|&i| data.labels[i]).collect();
    let neg: Vec<usize> = train_idx.iter().copied().filter(|&i| !data.labels[i]).collect();
    if pos.is_empty() {
        return Err(Error::data("occupancy training has no positive samples"));
    }
    if neg.is_empty() {
        return Err(Error::data("occupancy training has no negative samples"));
    }
    let val_points: Vec<Vec3> = val_idx.iter().map(|&i| data.points[i]).collect();
    let val_labels: Vec<bool> = val_idx.iter().map(|&i| data.labels[i]).collect();

    let mut adam = Adam::with(opts.lr, opts.beta1, opts.beta2, opts.eps);
    let mut history = Vec::new();
    let mut loss_acc = 0.0f64;
    let mut loss_n = 0usize;
    for step in 0..opts.steps {
        let mut rng = rng::stream(&[purpose::OCC_BATCH, opts.seed, step as u64 + 1]);
        let half = opts.batch / 2;
        let mut batch_pts = Vec::with_capacity(opts.batch);
        let mut batch_lab = Vec::with_capacity(opts.batch);
        for _ in 0..half {
            batch_pts.push(data.points[pos[rng.gen_range(0..pos.len())]]);
            batch_lab.push(1.0f32);
        }
        for _ in 0..(opts.batch - half) {
            batch_pts.push(data.points[neg[rng.gen_range(0..neg.len())]]);
            batch_lab.push(0.0f32);
        }
        let mut g = Graph::new();
        let mut binder = Binder::Train(store);
        let emb = net.encode(&mut g, &mut binder, skel)?;
        let (logits, _) = net.decode(&mut g, &mut binder, &batch_pts, &emb);
        let targets = Tensor::from_vec(batch_lab, &[opts.batch]);
        let loss = g.bce_with_logits(&logits.reshaped(&[opts.batch]), &targets);
        g.backward(&loss);
        store.collect_grads(&g);
        adam.step(store);
        loss_acc += loss.item() as f64;
        loss_n += 1;

        let last = step + 1 == opts.steps;
        if (step + 1) % opts.eval_every == 0 || last {
            let res = net.query(store, &val_points, skel)?;
            let pred: Vec<bool> = res.probs.iter().map(|&p| p > 0.5).collect();
            let val_iou = iou(&pred, &val_labels);
            history.push(IouPoint {
                step: step + 1,
                val_iou,
                mean_loss: loss_acc / loss_n.max(1) as f64,
            });
            loss_acc = 0.0;
            loss_n = 0;
            if val_iou >= opts.stop_iou as f64 {
                break;
            }
        }
    }
    Ok(history)
}
