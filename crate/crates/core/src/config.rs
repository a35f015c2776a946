//! Run configuration: flat `key = value` text with `[section]` headers and
//! `#` comments. Every field has a default; unknown sections or keys are
//! rejected with their names.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [dataset]
    pub dataset_dir: String,
    pub views_train: Vec<usize>,
    pub views_test: Vec<usize>,
    pub poses: usize,
    pub identities: usize,
    pub image_size: usize,
    pub focal: f32,
    pub ring_radius: f32,
    // [output]
    pub output_dir: String,
    // [crop]
    pub crop_size: usize,
    pub downscale: usize,
    pub crop_margin: f32,
    pub jitter_scale: f32,
    pub jitter_shift: f32,
    // [sampling]
    pub k_uniform: usize,
    pub k_hierarchical: usize,
    pub p_min: f32,
    pub p_max: f32,
    pub d_fix: f32,
    // [model]
    pub width: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub appearance_dim: usize,
    pub extra_feature_dim: usize,
    pub view_dependent: bool,
    pub pe_freqs: usize,
    // [optim]
    pub lr_occ: f32,
    pub lr_render: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub occ_steps: usize,
    pub occ_batch: usize,
    pub occ_stop_iou: f32,
    pub render_steps: usize,
    // [loss]
    pub w_l1: f32,
    pub w_mse: f32,
    pub code_reg: f32,
    pub sigma_reg: f32,
    // [carve]
    pub carve_candidates: usize,
    pub sigma_max: f32,
    pub mask_agreement: f32,
    // [eval]
    pub bench_frames: usize,
    // [seeds]
    pub seed_dataset: u64,
    pub seed_train: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: "data/synth".into(),
            views_train: vec![0, 1, 2, 3, 4, 5, 6, 7],
            views_test: vec![8, 9],
            poses: 6,
            identities: 2,
            image_size: 256,
            focal: 300.0,
            ring_radius: 0.5,
            output_dir: "runs/default".into(),
            crop_size: 128,
            downscale: 2,
            crop_margin: 1.45,
            jitter_scale: 0.05,
            jitter_shift: 3.0,
            k_uniform: 8,
            k_hierarchical: 8,
            p_min: 0.1,
            p_max: 0.99,
            d_fix: 0.02,
            width: 128,
            feature_dim: 32,
            embed_dim: 64,
            appearance_dim: 16,
            extra_feature_dim: 8,
            view_dependent: true,
            pe_freqs: 6,
            lr_occ: 1e-3,
            lr_render: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            occ_steps: 6000,
            occ_batch: 1024,
            occ_stop_iou: 0.965,
            render_steps: 2500,
            w_l1: 0.6,
            w_mse: 0.4,
            code_reg: 1e-3,
            sigma_reg: 0.01,
            carve_candidates: 400_000,
            sigma_max: 0.08,
            mask_agreement: 1.0,
            bench_frames: 8,
            seed_dataset: 7,
            seed_train: 42,
        }
    }
}

fn parse_list(v: &str, line: usize) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config { line, msg: format!("bad list entry '{}'", s.trim()) })
        })
        .collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! parse_as {
    ($v:expr, $line:expr, $ty:ty) => {
        $v.parse::<$ty>().map_err(|_| Error::Config {
            line: $line,
            msg: format!("cannot parse '{}' as {}", $v, stringify!($ty)),
        })?
    };
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "dataset" | "output" | "crop" | "sampling" | "model" | "optim" | "loss"
                    | "carve" | "eval" | "seeds" => {}
                    other => {
                        return Err(Error::Config {
                            line: line_no,
                            msg: format!("unknown section '{}'", other),
                        })
                    }
                }
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Config { line: line_no, msg: format!("expected key = value, got '{}'", line) });
            };
            let key = line[..eq].trim();
            let v = line[eq + 1..].trim();
            match (section.as_str(), key) {
                ("dataset", "dir") => cfg.dataset_dir = v.to_string(),
                ("dataset", "views_train") => cfg.views_train = parse_list(v, line_no)?,
                ("dataset", "views_test") => cfg.views_test = parse_list(v, line_no)?,
                ("dataset", "poses") => cfg.poses = parse_as!(v, line_no, usize),
                ("dataset", "identities") => cfg.identities = parse_as!(v, line_no, usize),
                ("dataset", "image_size") => cfg.image_size = parse_as!(v, line_no, usize),
                ("dataset", "focal") => cfg.focal = parse_as!(v, line_no, f32),
                ("dataset", "ring_radius") => cfg.ring_radius = parse_as!(v, line_no, f32),
                ("output", "dir") => cfg.output_dir = v.to_string(),
                ("crop", "size") => cfg.crop_size = parse_as!(v, line_no, usize),
                ("crop", "downscale") => cfg.downscale = parse_as!(v, line_no, usize),
                ("crop", "margin") => cfg.crop_margin = parse_as!(v, line_no, f32),
                ("crop", "jitter_scale") => cfg.jitter_scale = parse_as!(v, line_no, f32),
                ("crop", "jitter_shift") => cfg.jitter_shift = parse_as!(v, line_no, f32),
                ("sampling", "k_uniform") => cfg.k_uniform = parse_as!(v, line_no, usize),
                ("sampling", "k_hierarchical") => cfg.k_hierarchical = parse_as!(v, line_no, usize),
                ("sampling", "p_min") => cfg.p_min = parse_as!(v, line_no, f32),
                ("sampling", "p_max") => cfg.p_max = parse_as!(v, line_no, f32),
                ("sampling", "d_fix") => cfg.d_fix = parse_as!(v, line_no, f32),
                ("model", "width") => cfg.width = parse_as!(v, line_no, usize),
                ("model", "feature_dim") => cfg.feature_dim = parse_as!(v, line_no, usize),
                ("model", "embed_dim") => cfg.embed_dim = parse_as!(v, line_no, usize),
                ("model", "appearance_dim") => cfg.appearance_dim = parse_as!(v, line_no, usize),
                ("model", "extra_feature_dim") => {
                    cfg.extra_feature_dim = parse_as!(v, line_no, usize)
                }
                ("model", "view_dependent") => cfg.view_dependent = parse_as!(v, line_no, bool),
                ("model", "pe_freqs") => cfg.pe_freqs = parse_as!(v, line_no, usize),
                ("optim", "lr_occ") => cfg.lr_occ = parse_as!(v, line_no, f32),
                ("optim", "lr_render") => cfg.lr_render = parse_as!(v, line_no, f32),
                ("optim", "beta1") => cfg.beta1 = parse_as!(v, line_no, f32),
                ("optim", "beta2") => cfg.beta2 = parse_as!(v, line_no, f32),
                ("optim", "eps") => cfg.eps = parse_as!(v, line_no, f32),
                ("optim", "occ_steps") => cfg.occ_steps = parse_as!(v, line_no, usize),
                ("optim", "occ_batch") => cfg.occ_batch = parse_as!(v, line_no, usize),
                ("optim", "occ_stop_iou") => cfg.occ_stop_iou = parse_as!(v, line_no, f32),
                ("optim", "render_steps") => cfg.render_steps = parse_as!(v, line_no, usize),
                ("loss", "w_l1") => cfg.w_l1 = parse_as!(v, line_no, f32),
                ("loss", "w_mse") => cfg.w_mse = parse_as!(v, line_no, f32),
                ("loss", "code_reg") => cfg.code_reg = parse_as!(v, line_no, f32),
                ("loss", "sigma_reg") => cfg.sigma_reg = parse_as!(v, line_no, f32),
                ("carve", "candidates") => cfg.carve_candidates = parse_as!(v, line_no, usize),
                ("carve", "sigma_max") => cfg.sigma_max = parse_as!(v, line_no, f32),
                ("carve", "mask_agreement") => cfg.mask_agreement = parse_as!(v, line_no, f32),
                ("eval", "bench_frames") => cfg.bench_frames = parse_as!(v, line_no, usize),
                ("seeds", "dataset") => cfg.seed_dataset = parse_as!(v, line_no, u64),
                ("seeds", "train") => cfg.seed_train = parse_as!(v, line_no, u64),
                (sec, key) => {
                    return Err(Error::Config {
                        line: line_no,
                        msg: format!("unknown key '{}' in section [{}]", key, sec),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "[dataset]\ndir = {}\nviews_train = {}\nviews_test = {}\nposes = {}\nidentities = {}\nimage_size = {}\nfocal = {}\nring_radius = {}\n\n",
            self.dataset_dir, fmt_list(&self.views_train), fmt_list(&self.views_test), self.poses,
            self.identities, self.image_size, self.focal, self.ring_radius
        );
        let _ = write!(s, "[output]\ndir = {}\n\n", self.output_dir);
        let _ = write!(
            s,
            "[crop]\nsize = {}\ndownscale = {}\nmargin = {}\njitter_scale = {}\njitter_shift = {}\n\n",
            self.crop_size, self.downscale, self.crop_margin, self.jitter_scale, self.jitter_shift
        );
        let _ = write!(
            s,
            "[sampling]\nk_uniform = {}\nk_hierarchical = {}\np_min = {}\np_max = {}\nd_fix = {}\n\n",
            self.k_uniform, self.k_hierarchical, self.p_min, self.p_max, self.d_fix
        );
        let _ = write!(
            s,
            "[model]\nwidth = {}\nfeature_dim = {}\nembed_dim = {}\nappearance_dim = {}\nextra_feature_dim = {}\nview_dependent = {}\npe_freqs = {}\n\n",
            self.width, self.feature_dim, self.embed_dim, self.appearance_dim,
            self.extra_feature_dim, self.view_dependent, self.pe_freqs
        );
        let _ = write!(
            s,
            "[optim]\nlr_occ = {}\nlr_render = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nocc_steps = {}\nocc_batch = {}\nocc_stop_iou = {}\nrender_steps = {}\n\n",
            self.lr_occ, self.lr_render, self.beta1, self.beta2, self.eps, self.occ_steps,
            self.occ_batch, self.occ_stop_iou, self.render_steps
        );
        let _ = write!(
            s,
            "[loss]\nw_l1 = {}\nw_mse = {}\ncode_reg = {}\nsigma_reg = {}\n\n",
            self.w_l1, self.w_mse, self.code_reg, self.sigma_reg
        );
        let _ = write!(
            s,
            "[carve]\ncandidates = {}\nsigma_max = {}\nmask_agreement = {}\n\n",
            self.carve_candidates, self.sigma_max, self.mask_agreement
        );
        let _ = write!(s, "[eval]\nbench_frames = {}\n\n", self.bench_frames);
        let _ = write!(s, "[seeds]\ndataset = {}\ntrain = {}\n", self.seed_dataset, self.seed_train);
        s
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.views_train {
            if self.views_test.contains(v) {
                return Err(Error::data(format!(
                    "view {} appears in both views_train and views_test",
                    v
                )));
            }
        }
        if self.views_train.is_empty() {
            return Err(Error::data("views_train is empty"));
        }
        if self.k_uniform < 2 {
            return Err(Error::data("k_uniform must be at least 2"));
        }
        if self.downscale < 1 || self.crop_size % self.downscale != 0 {
            return Err(Error::data("crop size must be divisible by downscale"));
        }
        if !(0.0..1.0).contains(&self.p_min) || !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::data("p_min/p_max must lie in (0,1)"));
        }
        if self.mask_agreement <= 0.0 || self.mask_agreement > 1.0 {
            return Err(Error::data("mask_agreement must lie in (0,1]"));
        }
        if self.poses == 0 || self.identities == 0 || self.poses < self.identities {
            return Err(Error::data("poses must be >= identities >= 1"));
        }
        Ok(())
    }

    /// Total number of camera views the dataset must contain.
    pub fn n_views(&self) -> usize {
        self.views_train.iter().chain(self.views_test.iter()).max().map_or(0, |m| m + 1)
    }

    /// Rendered (low) resolution after crop and downscale.
    pub fn render_size(&self) -> usize {
        self.crop_size / self.downscale
    }
}
