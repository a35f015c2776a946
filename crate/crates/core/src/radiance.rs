//! Conditioned radiance function, discrete volume compositing and the
//! full-image render/training loop.
//!
//! Per sample the MLP consumes the occupancy feature vector, the signed
//! two-hand probability, a learnable per-identity appearance code and the
//! encoded view direction, and emits color, density and extra feature
//! channels for the upsampler. Compositing follows the standard emission-
//! absorption quadrature with segment lengths measured in millimeters
//! (see [`crate::DENSITY_UNIT_PER_M`]).

use crate::appearance::CodeTable;
use crate::camera::{crop_transform, Camera, Rect};
use crate::config::RunConfig;
use crate::error::Result;
use crate::geom::{Aabb, Vec3};
use crate::image_buf::{ImageBuf, MaskBuf};
use crate::model::{self, Binder};
use crate::occupancy::{OccGrid, WorldField};
use crate::rng::{self, purpose};
use crate::sampling::{
    compute_bounds, compute_fixed_bounds, generate_rays, hierarchical_samples, uniform_samples,
    RayBatch, SampleSet,
};
use crate::skeleton::{project_skeleton, Skeleton, TwoHandPose};
use crate::upsampler::{warp_crop, UpsamplerNet};
use crate::DENSITY_UNIT_PER_M;
use nalgebra::Matrix3;
use occa_autodiff::{Adam, Backward, Graph, ParamStore, Tensor};
use rand::Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Fixed shard count keeps gradient accumulation order independent of the
/// machine's thread count.
pub const TRAIN_SHARDS: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct RadianceNet {
    pub width: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub appearance_dim: usize,
    pub extra_dim: usize,
    pub view_dependent: bool,
    pub dir_freqs: usize,
}

impl RadianceNet {
    pub fn from_config(cfg: &RunConfig) -> Self {
        RadianceNet {
            width: cfg.width,
            depth: 8,
            feature_dim: cfg.feature_dim,
            appearance_dim: cfg.appearance_dim,
            extra_dim: cfg.extra_feature_dim,
            view_dependent: cfg.view_dependent,
            dir_freqs: 4,
        }
    }

    pub fn dir_dim(&self) -> usize {
        3 * (1 + 2 * self.dir_freqs)
    }

    /// Width of the conditioning block (everything except the code).
    pub fn cond_dim(&self) -> usize {
        self.feature_dim + 1 + self.dir_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.cond_dim() + self.appearance_dim
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let mut r = rng::stream(&[purpose::RENDER_INIT, seed]);
        model::register_linear(store, &mut r, "rad.l0", self.in_dim(), self.width);
        for l in 1..self.depth {
            model::register_linear(store, &mut r, &format!("rad.l{}", l), self.width, self.width);
        }
        model::register_linear(store, &mut r, "rad.head_c", self.width, 3);
        model::register_linear(store, &mut r, "rad.head_s", self.width, 1);
        // start nearly transparent: softplus(-4) per millimeter
        store.load_values("rad.head_s.b", &[1], vec![-4.0]);
        model::register_linear(store, &mut r, "rad.head_f", self.width, self.extra_dim);
    }

    /// inputs [S, in_dim] -> (color [S,3], sigma [S,1], extra [S,d]).
    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, inputs: &Tensor) -> (Tensor, Tensor, Tensor) {
        assert_eq!(inputs.shape()[1], self.in_dim(), "radiance input width");
        let mut h = model::linear(g, binder, "rad.l0", inputs);
        h = g.relu(&h);
        for l in 1..self.depth {
            h = model::linear(g, binder, &format!("rad.l{}", l), &h);
            h = g.relu(&h);
        }
        let c_pre = model::linear(g, binder, "rad.head_c", &h);
        let color = g.sigmoid(&c_pre);
        let s_pre = model::linear(g, binder, "rad.head_s", &h);
        let sigma = g.softplus(&s_pre);
        let extra = model::linear(g, binder, "rad.head_f", &h);
        (color, sigma, extra)
    }
}

/// Standalone per-sample evaluation (frozen): rows of conditioning inputs
/// under one appearance code.
pub fn eval_radiance(
    net: &RadianceNet,
    store: &ParamStore,
    codes: &CodeTable,
    cond_inputs: &Tensor,
    code_id: &str,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let mut g = Graph::new();
    let mut binder = Binder::Frozen(store);
    let code = codes.code_tensor(&mut g, &mut binder, code_id)?;
    let rows = cond_inputs.shape()[0];
    let code_t = g.tile_rows(&code, rows);
    let full = g.concat_cols(&[cond_inputs, &code_t]);
    let (c, s, f) = net.forward(&mut g, &mut binder, &full);
    Ok((c.to_vec(), s.to_vec(), f.to_vec()))
}

// ── compositing ─────────────────────────────────────────────────────

/// Forward compositing state kept for tests and the backward rule.
pub struct CompositeOut {
    /// [R, 4+d]: rgb, opacity, composited extra features.
    pub out: Vec<f32>,
    pub alpha: Vec<f32>,
    /// Transmittance before each sample.
    pub trans: Vec<f32>,
    /// Transmittance after the last sample of each ray.
    pub trans_final: Vec<f32>,
}

/// Emission-absorption quadrature over CSR rays:
/// α_i = 1 − exp(−σ_i δ_i), T_i = Π_{j<i}(1−α_j),
/// C = Σ T_i α_i c_i + T_end·bg; opacity and features use the same weights.
pub fn composite_forward(
    sigma: &[f32],
    color: &[f32],
    feat: &[f32],
    d: usize,
    deltas: &[f32],
    offsets: &[usize],
    bg: [f32; 3],
) -> CompositeOut {
    let rays = offsets.len() - 1;
    let stride = 4 + d;
    let mut out = vec![0.0f32; rays * stride];
    let mut alpha = vec![0.0f32; sigma.len()];
    let mut trans = vec![0.0f32; sigma.len()];
    let mut trans_final = vec![0.0f32; rays];
    for r in 0..rays {
        let mut t = 1.0f32;
        let row = &mut out[r * stride..(r + 1) * stride];
        for i in offsets[r]..offsets[r + 1] {
            let a = 1.0 - (-sigma[i] * deltas[i]).exp();
            alpha[i] = a;
            trans[i] = t;
            let w = t * a;
            for ch in 0..3 {
                row[ch] += w * color[i * 3 + ch];
            }
            row[3] += w;
            for j in 0..d {
                row[4 + j] += w * feat[i * d + j];
            }
            t *= 1.0 - a;
        }
        trans_final[r] = t;
        for ch in 0..3 {
            row[ch] += t * bg[ch];
        }
    }
    CompositeOut { out, alpha, trans, trans_final, }
}

struct CompositeRule {
    sigma: Arc<Vec<f32>>,
    color: Arc<Vec<f32>>,
    feat: Arc<Vec<f32>>,
    d: usize,
    deltas: Vec<f32>,
    offsets: Vec<usize>,
    bg: [f32; 3],
    alpha: Vec<f32>,
    trans: Vec<f32>,
}

impl Backward for CompositeRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let d = self.d;
        let stride = 4 + d;
        let mut g_sigma = vec![0.0f32; self.sigma.len()];
        let mut g_color = vec![0.0f32; self.color.len()];
        let mut g_feat = vec![0.0f32; self.feat.len()];
        for r in 0..self.offsets.len() - 1 {
            let row = &grad[r * stride..(r + 1) * stride];
            let range = self.offsets[r]..self.offsets[r + 1];
            // u_i: sensitivity of the loss to weight w_i
            let u = |i: usize| -> f32 {
                let mut v = row[3];
                for ch in 0..3 {
                    v += row[ch] * self.color[i * 3 + ch];
                }
                for j in 0..d {
                    v += row[4 + j] * self.feat[i * d + j];
                }
                v
            };
            let u_bg: f32 = (0..3).map(|ch| row[ch] * self.bg[ch]).sum();
            // suffix recurrence: rho_k aggregates everything behind sample k
            let mut rho = u_bg;
            for i in range.clone().rev() {
                let a = self.alpha[i];
                let t = self.trans[i];
                let ui = u(i);
                let d_alpha = t * (ui - rho);
                g_sigma[i] = d_alpha * self.deltas[i] * (1.0 - a);
                let w = t * a;
                for ch in 0..3 {
                    g_color[i * 3 + ch] = row[ch] * w;
                }
                for j in 0..d {
                    g_feat[i * d + j] = row[4 + j] * w;
                }
                rho = a * ui + (1.0 - a) * rho;
            }
        }
        vec![g_sigma, g_color, g_feat]
    }
}

/// Graph op wrapping [`composite_forward`]; sigma [S], color [S,3],
/// feat [S,d] -> [R, 4+d].
pub fn composite_op(
    g: &mut Graph,
    sigma: &Tensor,
    color: &Tensor,
    feat: &Tensor,
    deltas: Vec<f32>,
    offsets: Vec<usize>,
    bg: [f32; 3],
) -> Tensor {
    let d = if feat.numel() == 0 { 0 } else { feat.shape()[1] };
    let fwd = composite_forward(sigma.data(), color.data(), feat.data(), d, &deltas, &offsets, bg);
    let rays = offsets.len() - 1;
    let rule = CompositeRule {
        sigma: Arc::new(sigma.data().to_vec()),
        color: Arc::new(color.data().to_vec()),
        feat: Arc::new(feat.data().to_vec()),
        d,
        deltas,
        offsets,
        bg,
        alpha: fwd.alpha,
        trans: fwd.trans,
    };
    g.custom(&[sigma, color, feat], fwd.out, &[rays, 4 + d], Box::new(rule))
}

// ── full-image rendering ────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct RenderSettings {
    pub crop_size: usize,
    pub downscale: usize,
    pub margin: f32,
    pub jitter: (f32, f32),
    pub k_uniform: usize,
    pub k_hierarchical: usize,
    pub p_min: f32,
    pub p_max: f32,
    pub d_fix: f32,
    pub view_dependent: bool,
    pub seed: u64,
}

impl RenderSettings {
    pub fn from_config(cfg: &RunConfig, train: bool) -> Self {
        RenderSettings {
            crop_size: cfg.crop_size,
            downscale: cfg.downscale,
            margin: cfg.crop_margin,
            jitter: if train { (cfg.jitter_scale, cfg.jitter_shift) } else { (0.0, 0.0) },
            k_uniform: cfg.k_uniform,
            k_hierarchical: cfg.k_hierarchical,
            p_min: cfg.p_min,
            p_max: cfg.p_max,
            d_fix: cfg.d_fix,
            view_dependent: cfg.view_dependent,
            seed: cfg.seed_train,
        }
    }
}

/// Pixel bbox of the projected skeleton padded by the capsule radius.
pub fn hand_crop_bbox(pose: &TwoHandPose, cam: &Camera, margin: f32, pad_m: f32) -> Result<Rect> {
    let mut rect = Rect { x0: f32::INFINITY, y0: f32::INFINITY, x1: f32::NEG_INFINITY, y1: f32::NEG_INFINITY };
    let mut add = |skel: &Skeleton| -> Result<()> {
        let pts = project_skeleton(skel, cam)?;
        for (j, (u, v)) in pts.iter().enumerate() {
            let z = cam.to_camera(&skel.joints[j]).z;
            let pad = pad_m * cam.k[(0, 0)] / z.max(1e-3);
            rect.x0 = rect.x0.min(u - pad);
            rect.y0 = rect.y0.min(v - pad);
            rect.x1 = rect.x1.max(u + pad);
            rect.y1 = rect.y1.max(v + pad);
        }
        Ok(())
    };
    add(&pose.right)?;
    if let Some(left) = &pose.left {
        add(left)?;
    }
    Ok(rect.squared_with_margin(margin))
}

/// Everything a radiance pass needs for one frame, detached from any graph.
pub struct PreparedFrame {
    pub crop_t: Matrix3<f32>,
    pub cam_crop: Camera,
    pub batch: RayBatch,
    pub set: SampleSet,
    /// [S, cond_dim] conditioning rows (features ⊕ signed prob ⊕ dir enc).
    pub cond: Vec<f32>,
    pub deltas_mm: Vec<f32>,
    /// CSR offsets over alive rays (same as `set.offsets`).
    pub offsets: Vec<usize>,
    pub hierarchical_fallback_rays: usize,
}

/// Crop, cast, bound, prune and sample one frame; query the occupancy for
/// per-sample conditioning inputs.
#[allow(clippy::too_many_arguments)]
pub fn prepare_frame(
    net: &RadianceNet,
    field: &dyn WorldField,
    grid: &OccGrid,
    bbox: &Aabb,
    cam_full: &Camera,
    pose: &TwoHandPose,
    settings: &RenderSettings,
    frame_id: u64,
    jitter_step: Option<u64>,
) -> Result<PreparedFrame> {
    let bbox2d = hand_crop_bbox(pose, cam_full, settings.margin, 0.02)?;
    let (jitter, jitter_seed) = match jitter_step {
        Some(step) => (settings.jitter, rng::mix(&[settings.seed, frame_id, step])),
        None => ((0.0, 0.0), 0),
    };
    let crop_t = crop_transform(&bbox2d, (settings.crop_size, settings.crop_size), jitter, jitter_seed);
    let cam_crop = cam_full.cropped(&crop_t, settings.downscale, settings.crop_size, settings.crop_size);
    let mut batch = generate_rays(&cam_crop);
    compute_bounds(&mut batch, grid, bbox, settings.p_min, settings.p_max, settings.d_fix);

    let coarse = uniform_samples(&batch, settings.k_uniform, settings.seed, frame_id);
    let coarse_pos = coarse.positions(&batch);
    let (coarse_signed, coarse_feat) = field.conditioned(&coarse_pos);
    let weights: Vec<f32> = coarse_signed.iter().map(|s| s.abs()).collect();
    let (set, report) =
        hierarchical_samples(&batch, &coarse, &weights, settings.k_hierarchical, settings.seed, frame_id);

    // query only the depths hierarchical sampling added
    let mut new_pos = Vec::new();
    for (i, &ray) in set.rays.iter().enumerate() {
        let dir = batch.dirs[ray];
        for j in set.ray_range(i) {
            if set.is_new[j] {
                new_pos.push(batch.origin + dir * set.depths[j]);
            }
        }
    }
    let (new_signed, new_feat) = field.conditioned(&new_pos);

    let m = net.feature_dim;
    let n = set.n_samples();
    let dir_dim = net.dir_dim();
    let cond_dim = net.cond_dim();
    let mut cond = vec![0.0f32; n * cond_dim];
    let mut deltas_mm = Vec::with_capacity(n);
    let (mut ci, mut ni) = (0usize, 0usize);
    let mut row = 0usize;
    for (i, &ray) in set.rays.iter().enumerate() {
        let dir = batch.dirs[ray];
        let dir_enc = if settings.view_dependent {
            model::direction_encoding(&[dir], net.dir_freqs).to_vec()
        } else {
            vec![0.0; dir_dim]
        };
        let t_far = batch.t_far[ray];
        let ds = set.deltas(i, t_far);
        for (k, j) in set.ray_range(i).enumerate() {
            let (signed, feat_row): (f32, &[f32]) = if set.is_new[j] {
                let v = (new_signed[ni], &new_feat[ni * m..(ni + 1) * m]);
                ni += 1;
                v
            } else {
                let v = (coarse_signed[ci], &coarse_feat[ci * m..(ci + 1) * m]);
                ci += 1;
                v
            };
            let dst = &mut cond[row * cond_dim..(row + 1) * cond_dim];
            dst[..m].copy_from_slice(feat_row);
            dst[m] = signed;
            dst[m + 1..].copy_from_slice(&dir_enc);
            deltas_mm.push(ds[k] * DENSITY_UNIT_PER_M);
            row += 1;
        }
    }
    debug_assert_eq!(ci, coarse_signed.len());
    debug_assert_eq!(ni, new_signed.len());

    Ok(PreparedFrame {
        crop_t,
        cam_crop,
        batch,
        set,
        cond,
        deltas_mm,
        offsets: set.offsets.clone(),
        hierarchical_fallback_rays: report.fallback_rays,
    })
}

pub struct RenderedFrame {
    pub rgb: ImageBuf,
    /// [d, H, W] extra feature planes for the upsampler.
    pub feat_chw: Vec<f32>,
    pub opacity: ImageBuf,
    pub pruned: MaskBuf,
    pub crop_t: Matrix3<f32>,
    pub rays_alive: usize,
    pub samples_evaluated: usize,
    pub hierarchical_fallback_rays: usize,
}

pub const BACKGROUND: [f32; 3] = [0.0, 0.0, 0.0];

/// Frozen full pipeline for one frame: crop → rays → bounds/prune → 8+8
/// samples → occupancy conditioning → radiance → composite.
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    net: &RadianceNet,
    render_store: &ParamStore,
    codes: &CodeTable,
    field: &dyn WorldField,
    grid: &OccGrid,
    bbox: &Aabb,
    cam_full: &Camera,
    pose: &TwoHandPose,
    code_id: &str,
    settings: &RenderSettings,
    frame_id: u64,
) -> Result<RenderedFrame> {
    codes.param_name(code_id)?;
    let prep = prepare_frame(net, field, grid, bbox, cam_full, pose, settings, frame_id, None)?;
    let n = prep.set.n_samples();
    let cond_t = Tensor::from_vec(prep.cond.clone(), &[n, net.cond_dim()]);
    let (colors, sigmas, extras) = eval_radiance(net, render_store, codes, &cond_t, code_id)?;
    let comp = composite_forward(
        &sigmas,
        &colors,
        &extras,
        net.extra_dim,
        &prep.deltas_mm,
        &prep.offsets,
        BACKGROUND,
    );
    Ok(assemble_frame(net, &prep, comp))
}

fn assemble_frame(net: &RadianceNet, prep: &PreparedFrame, comp: CompositeOut) -> RenderedFrame {
    let (w, h) = (prep.batch.width, prep.batch.height);
    let d = net.extra_dim;
    let stride = 4 + d;
    let mut rgb = ImageBuf::new(w, h, 3);
    for c in 0..3 {
        for i in 0..w * h {
            rgb.data[i * 3 + c] = BACKGROUND[c];
        }
    }
    let mut feat_chw = vec![0.0f32; d * h * w];
    let mut opacity = ImageBuf::new(w, h, 1);
    let mut pruned = MaskBuf::new(w, h);
    for i in 0..w * h {
        pruned.data[i] = !prep.batch.alive[i];
    }
    for (i, &ray) in prep.set.rays.iter().enumerate() {
        let (x, y) = prep.batch.pixel(ray);
        let row = &comp.out[i * stride..(i + 1) * stride];
        for c in 0..3 {
            rgb.set(x, y, c, row[c].clamp(0.0, 1.0));
        }
        opacity.set(x, y, 0, row[3]);
        for j in 0..d {
            feat_chw[j * h * w + y * w + x] = row[4 + j];
        }
    }
    RenderedFrame {
        rgb,
        feat_chw,
        opacity,
        pruned,
        crop_t: prep.crop_t,
        rays_alive: prep.batch.alive_count(),
        samples_evaluated: prep.set.n_samples(),
        hierarchical_fallback_rays: prep.hierarchical_fallback_rays,
    }
}

/// Dense-baseline render: fixed scene-box bounds, no pruning, `k_dense`
/// uniform samples per ray, no hierarchical pass.
#[allow(clippy::too_many_arguments)]
pub fn render_frame_dense(
    net: &RadianceNet,
    render_store: &ParamStore,
    codes: &CodeTable,
    field: &dyn WorldField,
    scene_box: &Aabb,
    cam_full: &Camera,
    pose: &TwoHandPose,
    code_id: &str,
    settings: &RenderSettings,
    k_dense: usize,
    frame_id: u64,
) -> Result<RenderedFrame> {
    codes.param_name(code_id)?;
    let bbox2d = hand_crop_bbox(pose, cam_full, settings.margin, 0.02)?;
    let crop_t = crop_transform(&bbox2d, (settings.crop_size, settings.crop_size), (0.0, 0.0), 0);
    let cam_crop = cam_full.cropped(&crop_t, settings.downscale, settings.crop_size, settings.crop_size);
    let mut batch = generate_rays(&cam_crop);
    compute_fixed_bounds(&mut batch, scene_box);
    let set = uniform_samples(&batch, k_dense, settings.seed, frame_id);
    let positions = set.positions(&batch);
    let (signed, feat) = field.conditioned(&positions);

    let m = net.feature_dim;
    let cond_dim = net.cond_dim();
    let dir_dim = net.dir_dim();
    let mut cond = vec![0.0f32; set.n_samples() * cond_dim];
    let mut deltas_mm = Vec::with_capacity(set.n_samples());
    let mut row = 0usize;
    for (i, &ray) in set.rays.iter().enumerate() {
        let dir = batch.dirs[ray];
        let dir_enc = if settings.view_dependent {
            model::direction_encoding(&[dir], net.dir_freqs).to_vec()
        } else {
            vec![0.0; dir_dim]
        };
        let ds = set.deltas(i, batch.t_far[ray]);
        for (k, j) in set.ray_range(i).enumerate() {
            let dst = &mut cond[row * cond_dim..(row + 1) * cond_dim];
            dst[..m].copy_from_slice(&feat[j * m..(j + 1) * m]);
            dst[m] = signed[j];
            dst[m + 1..].copy_from_slice(&dir_enc);
            deltas_mm.push(ds[k] * DENSITY_UNIT_PER_M);
            row += 1;
        }
    }
    let cond_t = Tensor::from_vec(cond, &[set.n_samples(), cond_dim]);
    let (colors, sigmas, extras) = eval_radiance(net, render_store, codes, &cond_t, code_id)?;
    let comp = composite_forward(
        &sigmas,
        &colors,
        &extras,
        net.extra_dim,
        &deltas_mm,
        &set.offsets,
        BACKGROUND,
    );
    let prep = PreparedFrame {
        crop_t,
        cam_crop,
        batch,
        set,
        cond: Vec::new(),
        deltas_mm,
        offsets: Vec::new(),
        hierarchical_fallback_rays: 0,
    };
    let mut frame = assemble_frame(net, &prep, comp);
    frame.samples_evaluated = prep.set.n_samples();
    Ok(frame)
}

// ── training ────────────────────────────────────────────────────────

pub struct FrameRef {
    pub pose: usize,
    pub view: usize,
}

/// Borrowed view of everything the trainer reads.
pub struct TrainScene<'a> {
    pub cameras: &'a [Camera],
    /// Full-resolution ground truth images indexed [pose][view].
    pub images: &'a [Vec<ImageBuf>],
    pub poses: &'a [TwoHandPose],
    pub fields: Vec<&'a dyn WorldField>,
    pub grids: &'a [OccGrid],
    pub bboxes: &'a [Aabb],
    pub identity_of_pose: &'a [String],
    pub scene_box: Aabb,
}

pub struct RenderTrainOptions {
    pub steps: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub w_l1: f32,
    pub w_mse: f32,
    pub code_reg: f32,
    pub sigma_reg: f32,
    pub seed: u64,
    /// Evaluate a probe frame every N steps and stop at the target PSNR.
    pub probe: Option<ProbeSpec>,
}

pub struct ProbeSpec {
    pub frame: FrameRef,
    pub code_id: String,
    pub every: usize,
    pub target_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainLogPoint {
    pub step: usize,
    pub loss: f64,
}

pub struct RenderTrainReport {
    pub curve: Vec<TrainLogPoint>,
    pub steps_run: usize,
    pub probe_psnr: Option<f64>,
}

struct ShardOutput {
    grads: std::collections::HashMap<String, Vec<f32>>,
}

/// End-to-end renderer training: full-image shard-parallel radiance
/// backward, upsampler and appearance codes trained jointly against the
/// low- and full-resolution crops, plus code and empty-space density
/// regularizers. The occupancy store stays frozen throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_renderer(
    net: &RadianceNet,
    upsampler: &UpsamplerNet,
    codes: &CodeTable,
    render_store: &mut ParamStore,
    scene: &TrainScene,
    frames: &[FrameRef],
    settings: &RenderSettings,
    opts: &RenderTrainOptions,
) -> Result<RenderTrainReport> {
    assert!(!frames.is_empty(), "training needs at least one frame");
    let mut adam = Adam::with(opts.lr, opts.beta1, opts.beta2, opts.eps);
    let mut curve = Vec::new();
    let d = net.extra_dim;
    let low = settings.crop_size / settings.downscale;
    let mut probe_psnr = None;
    let mut steps_run = 0;

    for step in 0..opts.steps {
        steps_run = step + 1;
        let fr = &frames[step % frames.len()];
        let pose_i = fr.pose;
        let cam = &scene.cameras[fr.view];
        let frame_id = rng::mix(&[fr.pose as u64, fr.view as u64]);
        let prep = prepare_frame(
            net,
            scene.fields[pose_i],
            &scene.grids[pose_i],
            &scene.bboxes[pose_i],
            cam,
            &scene.poses[pose_i],
            settings,
            frame_id,
            Some(step as u64),
        )?;
        let code_id = scene.identity_of_pose[pose_i].clone();

        // ground-truth crops for this step's jittered transform
        let gt_high = warp_crop(
            &scene.images[pose_i][fr.view],
            &prep.crop_t,
            settings.crop_size,
            settings.crop_size,
        )?;
        let gt_low = gt_high.downscale(settings.downscale);

        // radiance forward per shard (parallel, deterministic outputs)
        let n_rays = prep.set.rays.len();
        let shard_ranges: Vec<(usize, usize)> = (0..TRAIN_SHARDS)
            .map(|s| {
                let lo = n_rays * s / TRAIN_SHARDS;
                let hi = n_rays * (s + 1) / TRAIN_SHARDS;
                (lo, hi)
            })
            .collect();
        let cond_dim = net.cond_dim();

        struct ShardFwd {
            graph: Graph,
            binder_bindings: Vec<(String, Tensor)>,
            out: Tensor,
            rays: Vec<usize>,
        }

        let store_ref: &ParamStore = render_store;
        let mut shards: Vec<ShardFwd> = shard_ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let mut g = Graph::new();
                let mut binder = Binder::shard(store_ref);
                let s0 = prep.offsets[lo];
                let s1 = prep.offsets[hi];
                let rows = s1 - s0;
                let cond = Tensor::from_vec(
                    prep.cond[s0 * cond_dim..s1 * cond_dim].to_vec(),
                    &[rows, cond_dim],
                );
                let code = binder.get(&mut g, &format!("app.code.{}", code_id));
                let code_t = g.tile_rows(&code, rows);
                let full = g.concat_cols(&[&cond, &code_t]);
                let (color, sigma, extra) = net.forward(&mut g, &mut binder, &full);
                let offsets: Vec<usize> = prep.offsets[lo..=hi].iter().map(|o| o - s0).collect();
                let out = composite_op(
                    &mut g,
                    &sigma.reshaped(&[rows]),
                    &color,
                    &extra,
                    prep.deltas_mm[s0..s1].to_vec(),
                    offsets,
                    BACKGROUND,
                );
                let bindings = match binder {
                    Binder::Shard { bindings, .. } => bindings,
                    _ => unreachable!(),
                };
                ShardFwd {
                    graph: g,
                    binder_bindings: bindings,
                    out,
                    rays: prep.set.rays[lo..hi].to_vec(),
                }
            })
            .collect();

        // assemble the low-res frame from shard outputs
        let stride = 4 + d;
        let mut frame_chw = vec![0.0f32; (3 + d) * low * low];
        for c in 0..3 {
            for i in 0..low * low {
                frame_chw[c * low * low + i] = BACKGROUND[c];
            }
        }
        for shard in &shards {
            for (k, &ray) in shard.rays.iter().enumerate() {
                let (x, y) = prep.batch.pixel(ray);
                let row = &shard.out.data()[k * stride..(k + 1) * stride];
                for c in 0..3 {
                    frame_chw[c * low * low + y * low + x] = row[c];
                }
                for j in 0..d {
                    frame_chw[(3 + j) * low * low + y * low + x] = row[4 + j];
                }
            }
        }

        // frame graph: upsampler + image losses against both resolutions
        let mut fg = Graph::new();
        let frame_leaf = fg.leaf(&Tensor::from_vec(frame_chw, &[3 + d, low, low]));
        let mut up_binder = Binder::Train(&mut *render_store);
        let up_out = upsampler.forward(&mut fg, &mut up_binder, &frame_leaf);
        let gt_low_t = Tensor::from_vec(gt_low.to_chw(), &[3, low, low]);
        let gt_high_t =
            Tensor::from_vec(gt_high.to_chw(), &[3, settings.crop_size, settings.crop_size]);
        let low_rgb = {
            let flat = frame_leaf.reshaped(&[3 + d, low * low]);
            let s = fg.slice_rows(&flat, 0, 3);
            s.reshaped(&[3, low, low])
        };
        let l1_low = fg.l1_loss(&low_rgb, &gt_low_t);
        let mse_low = fg.mse_loss(&low_rgb, &gt_low_t);
        let l1_high = fg.l1_loss(&up_out, &gt_high_t);
        let mse_high = fg.mse_loss(&up_out, &gt_high_t);
        let l1 = fg.add(&l1_low, &l1_high);
        let mse = fg.add(&mse_low, &mse_high);
        let l1w = fg.scale(&l1, 0.5 * opts.w_l1);
        let msew = fg.scale(&mse, 0.5 * opts.w_mse);
        let frame_loss = fg.add(&l1w, &msew);
        fg.backward(&frame_loss);
        let mut loss_value = frame_loss.item() as f64;
        let frame_grad = fg.grad(&frame_leaf).expect("frame gradient").to_vec();
        if let Binder::Train(store) = up_binder {
            store.collect_grads(&fg);
        }

        // seed each shard with the loss gradient of its pixels
        let shard_outputs: Vec<ShardOutput> = shards
            .par_iter_mut()
            .map(|shard| {
                let mut seeds = vec![0.0f32; shard.rays.len() * stride];
                for (k, &ray) in shard.rays.iter().enumerate() {
                    let (x, y) = prep.batch.pixel(ray);
                    for c in 0..3 {
                        seeds[k * stride + c] = frame_grad[c * low * low + y * low + x];
                    }
                    for j in 0..d {
                        seeds[k * stride + 4 + j] = frame_grad[(3 + j) * low * low + y * low + x];
                    }
                }
                let out = shard.out.clone();
                shard.graph.backward_seeded(&[(&out, &seeds)]);
                let mut grads = std::collections::HashMap::new();
                for (name, t) in &shard.binder_bindings {
                    if let Some(grad) = shard.graph.grad(t) {
                        let acc = grads
                            .entry(name.clone())
                            .or_insert_with(|| vec![0.0f32; grad.len()]);
                        for (a, b) in acc.iter_mut().zip(grad.iter()) {
                            *a += *b;
                        }
                    }
                }
                ShardOutput { grads }
            })
            .collect();
        for out in shard_outputs {
            render_store.add_grads(&out.grads);
        }

        // appearance-code regularizer
        if opts.code_reg > 0.0 {
            let mut g = Graph::new();
            let mut binder = Binder::Train(&mut *render_store);
            let reg = codes.regularizer(&mut g, &mut binder, opts.code_reg);
            g.backward(&reg);
            loss_value += reg.item() as f64;
            if let Binder::Train(store) = binder {
                store.collect_grads(&g);
            }
        }

        // empty-space density suppression keeps dense-bounds renders clean
        if opts.sigma_reg > 0.0 {
            let mut rng = rng::stream(&[purpose::EMPTY_SPACE, opts.seed, step as u64]);
            let mut pts = Vec::with_capacity(128);
            let sb = &scene.scene_box;
            for _ in 0..512 {
                if pts.len() >= 128 {
                    break;
                }
                let p = Vec3::new(
                    rng.gen_range(sb.min.x..sb.max.x),
                    rng.gen_range(sb.min.y..sb.max.y),
                    rng.gen_range(sb.min.z..sb.max.z),
                );
                if scene.grids[pose_i].sample(&p) < 0.01 {
                    pts.push(p);
                }
            }
            if !pts.is_empty() {
                let (signed, feat) = scene.fields[pose_i].conditioned(&pts);
                let m = net.feature_dim;
                let mut cond = vec![0.0f32; pts.len() * cond_dim];
                for (i, p) in pts.iter().enumerate() {
                    let dir_enc = if settings.view_dependent {
                        let dir = (p - prep.batch.origin).normalize();
                        model::direction_encoding(&[dir], net.dir_freqs).to_vec()
                    } else {
                        vec![0.0; net.dir_dim()]
                    };
                    let dst = &mut cond[i * cond_dim..(i + 1) * cond_dim];
                    dst[..m].copy_from_slice(&feat[i * m..(i + 1) * m]);
                    dst[m] = signed[i];
                    dst[m + 1..].copy_from_slice(&dir_enc);
                }
                let mut g = Graph::new();
                let mut binder = Binder::Train(&mut *render_store);
                let cond_t = Tensor::from_vec(cond, &[pts.len(), cond_dim]);
                let code = binder.get(&mut g, &format!("app.code.{}", code_id));
                let code_t = g.tile_rows(&code, pts.len());
                let full = g.concat_cols(&[&cond_t, &code_t]);
                let (_, sigma, _) = net.forward(&mut g, &mut binder, &full);
                let mean_sigma = g.mean(&sigma);
                let reg = g.scale(&mean_sigma, opts.sigma_reg);
                g.backward(&reg);
                loss_value += reg.item() as f64;
                if let Binder::Train(store) = binder {
                    store.collect_grads(&g);
                }
            }
        }

        adam.step(render_store);
        curve.push(TrainLogPoint { step, loss: loss_value });

        if let Some(probe) = &opts.probe {
            if (step + 1) % probe.every == 0 || step + 1 == opts.steps {
                let psnr = probe_frame(net, upsampler, codes, render_store, scene, settings, probe)?;
                probe_psnr = Some(psnr);
                if psnr >= probe.target_psnr {
                    break;
                }
            }
        }
    }
    Ok(RenderTrainReport { curve, steps_run, probe_psnr })
}

fn probe_frame(
    net: &RadianceNet,
    _upsampler: &UpsamplerNet,
    codes: &CodeTable,
    render_store: &ParamStore,
    scene: &TrainScene,
    settings: &RenderSettings,
    probe: &ProbeSpec,
) -> Result<f64> {
    let eval_settings = RenderSettings { jitter: (0.0, 0.0), ..*settings };
    let pose_i = probe.frame.pose;
    let frame = render_frame(
        net,
        render_store,
        codes,
        scene.fields[pose_i],
        &scene.grids[pose_i],
        &scene.bboxes[pose_i],
        &scene.cameras[probe.frame.view],
        &scene.poses[pose_i],
        &probe.code_id,
        &eval_settings,
        rng::mix(&[pose_i as u64, probe.frame.view as u64]),
    )?;
    let gt_high = warp_crop(
        &scene.images[pose_i][probe.frame.view],
        &frame.crop_t,
        settings.crop_size,
        settings.crop_size,
    )?;
    let gt_low = gt_high.downscale(settings.downscale);
    Ok(crate::metrics::psnr(&frame.rgb, &gt_low))
}
