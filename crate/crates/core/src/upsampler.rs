//! ×2 convolutional refinement of the low-resolution render and the
//! affine warp pair used around it.
//!
//! The network sees RGB plus the renderer's extra feature channels,
//! applies residual 3×3 blocks, upsamples ×2 (nearest) and refines, then
//! adds a bilinear-upsampled RGB skip and clamps. The final convolution is
//! zero-initialized so an untrained model reproduces plain bilinear
//! upsampling exactly.

use crate::camera::Rect;
use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;
use crate::model::{self, Binder};
use crate::rng::{self, purpose};
use nalgebra::Matrix3;
use occa_autodiff::{Graph, ParamStore, Tensor};

pub const UPSAMPLER_WIDTH: usize = 32;
pub const UPSAMPLER_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct UpsamplerNet {
    /// Extra feature channels alongside RGB.
    pub extra_dim: usize,
}

impl UpsamplerNet {
    pub fn new(extra_dim: usize) -> Self {
        UpsamplerNet { extra_dim }
    }

    pub fn in_channels(&self) -> usize {
        3 + self.extra_dim
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let mut r = rng::stream(&[purpose::RENDER_INIT, seed, 0xC0]);
        model::register_conv(store, &mut r, "up.head", self.in_channels(), UPSAMPLER_WIDTH);
        for b in 0..UPSAMPLER_BLOCKS {
            model::register_conv(store, &mut r, &format!("up.b{}.c1", b), UPSAMPLER_WIDTH, UPSAMPLER_WIDTH);
            model::register_conv(store, &mut r, &format!("up.b{}.c2", b), UPSAMPLER_WIDTH, UPSAMPLER_WIDTH);
        }
        model::register_conv(store, &mut r, "up.post", UPSAMPLER_WIDTH, UPSAMPLER_WIDTH);
        // zero residual output: untrained network == bilinear upsample
        model::register_conv_zero(store, "up.out", UPSAMPLER_WIDTH, 3);
    }

    /// frame: [3+d, H, W] (RGB first) -> [3, 2H, 2W].
    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, frame: &Tensor) -> Tensor {
        let shape = frame.shape().to_vec();
        assert_eq!(shape.len(), 3, "upsampler expects [C,H,W]");
        assert_eq!(
            shape[0],
            self.in_channels(),
            "channel-count mismatch: frame has {}, model wants {}",
            shape[0],
            self.in_channels()
        );
        let (h, w) = (shape[1], shape[2]);
        let rgb = {
            let flat = frame.reshaped(&[self.in_channels(), h * w]);
            let sliced = g.slice_rows(&flat, 0, 3);
            sliced.reshaped(&[3, h, w])
        };
        let mut hid = model::conv(g, binder, "up.head", frame);
        hid = g.relu(&hid);
        for b in 0..UPSAMPLER_BLOCKS {
            let a = model::conv(g, binder, &format!("up.b{}.c1", b), &hid);
            let a = g.relu(&a);
            let a = model::conv(g, binder, &format!("up.b{}.c2", b), &a);
            hid = g.add(&hid, &a);
        }
        let up = g.upsample2x_nearest(&hid);
        let up = model::conv(g, binder, "up.post", &up);
        let up = g.relu(&up);
        let residual = model::conv(g, binder, "up.out", &up);
        let skip = g.upsample2x_bilinear(&rgb);
        let sum = g.add(&residual, &skip);
        g.clamp01(&sum)
    }

    /// Frozen convenience pass on an interleaved image + feature planes.
    pub fn upsample(&self, store: &ParamStore, rgb: &ImageBuf, feat_chw: &[f32]) -> ImageBuf {
        assert_eq!(rgb.ch, 3);
        let (h, w) = (rgb.h, rgb.w);
        assert_eq!(feat_chw.len(), self.extra_dim * h * w);
        let mut chw = rgb.to_chw();
        chw.extend_from_slice(feat_chw);
        let frame = Tensor::from_vec(chw, &[self.in_channels(), h, w]);
        let mut g = Graph::new();
        let out = self.forward(&mut g, &mut Binder::Frozen(store), &frame);
        ImageBuf::from_chw(out.data(), w * 2, h * 2, 3)
    }
}

/// Forward warp of a full image into the crop rectangle defined by the
/// affine `t` (crop pixel q samples the source at t⁻¹·q).
pub fn warp_crop(src: &ImageBuf, t: &Matrix3<f32>, crop_w: usize, crop_h: usize) -> Result<ImageBuf> {
    let ti = t.try_inverse().ok_or_else(|| Error::data("crop transform is singular"))?;
    let mut out = ImageBuf::new(crop_w, crop_h, src.ch);
    for y in 0..crop_h {
        for x in 0..crop_w {
            // integer pixel centers, matching the camera convention
            let q = ti * nalgebra::Vector3::new(x as f32, y as f32, 1.0);
            if let Some(c) = src.sample_bilinear(q.x / q.z, q.y / q.z) {
                for (ch, v) in c.iter().enumerate() {
                    out.set(x, y, ch, *v);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse warp: place the cropped image back into the full frame, filling
/// pixels outside the crop with the background color.
pub fn restore_full(
    crop: &ImageBuf,
    t: &Matrix3<f32>,
    full_w: usize,
    full_h: usize,
    background: [f32; 3],
) -> Result<ImageBuf> {
    if t.determinant().abs() < 1e-12 {
        return Err(Error::data("crop transform is singular"));
    }
    let mut out = ImageBuf::new(full_w, full_h, 3);
    for y in 0..full_h {
        for x in 0..full_w {
            let q = t * nalgebra::Vector3::new(x as f32, y as f32, 1.0);
            match crop.sample_bilinear(q.x / q.z, q.y / q.z) {
                Some(c) => {
                    for ch in 0..3 {
                        out.set(x, y, ch, c[ch.min(c.len() - 1)]);
                    }
                }
                None => {
                    for ch in 0..3 {
                        out.set(x, y, ch, background[ch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scale factor of the upsampler (the crop-to-render downscale it undoes).
pub fn scale_factor() -> usize {
    2
}
