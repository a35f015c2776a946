//! PSNR / SSIM image metrics and run reports.

use crate::image_buf::ImageBuf;
use serde::{Deserialize, Serialize};

/// Identical images report this cap instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

/// 10·log10(1/MSE) over all channels; inputs in [0,1] and equal shapes.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> f64 {
    assert_eq!(
        (a.w, a.h, a.ch),
        (b.w, b.h, b.ch),
        "psnr shape mismatch: {}x{}x{} vs {}x{}x{}",
        a.w,
        a.h,
        a.ch,
        b.w,
        b.h,
        b.ch
    );
    debug_assert!(a.data.iter().chain(b.data.iter()).all(|v| (-1e-6..=1.0 + 1e-6).contains(v)));
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn to_luma(img: &ImageBuf) -> Vec<f64> {
    let mut out = vec![0.0; img.w * img.h];
    for y in 0..img.h {
        for x in 0..img.w {
            out[y * img.w + x] = if img.ch >= 3 {
                let p = img.pixel3(x, y);
                LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64
            } else {
                img.get(x, y, 0) as f64
            };
        }
    }
    out
}

/// Windowed SSIM: luminance conversion, uniform 8×8 sliding windows,
/// k1=0.01, k2=0.03, L=1; mean over windows.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> f64 {
    ssim_windowed(a, b, 8)
}

pub fn ssim_windowed(a: &ImageBuf, b: &ImageBuf, window: usize) -> f64 {
    assert_eq!((a.w, a.h), (b.w, b.h), "ssim shape mismatch");
    assert!(
        a.w >= window && a.h >= window,
        "image {}x{} smaller than the {} px window",
        a.w,
        a.h,
        window
    );
    let la = to_luma(a);
    let lb = to_luma(b);
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(a.h - window) {
        for x0 in 0..=(a.w - window) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let (va, vb) = (la[y * a.w + x], lb[y * a.w + x]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct FrameMetric {
    pub frame: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rays_alive: usize,
    pub samples_evaluated: usize,
    pub ms: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct MetricReport {
    pub frames: Vec<FrameMetric>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ms: f64,
    pub lpips: String,
    pub pruned_inside_eroded_mask: usize,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetric>, pruned_inside_eroded_mask: usize) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        let mean_ms = frames.iter().map(|f| f.ms).sum::<f64>() / n;
        MetricReport {
            frames,
            mean_psnr,
            mean_ssim,
            mean_ms,
            lpips: "n/a".into(),
            pruned_inside_eroded_mask,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(w: usize, h: usize, v: f32) -> ImageBuf {
        ImageBuf::filled(w, h, 3, v)
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = constant(16, 16, 0.4);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
    }

    #[test]
    fn uniform_difference_is_twenty_db() {
        let a = constant(16, 16, 0.5);
        let b = constant(16, 16, 0.6);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn checkerboard_vs_inverse_is_zero_db() {
        let mut a = ImageBuf::new(16, 16, 3);
        let mut b = ImageBuf::new(16, 16, 3);
        for y in 0..16 {
            for x in 0..16 {
                let v = ((x + y) % 2) as f32;
                for c in 0..3 {
                    a.set(x, y, c, v);
                    b.set(x, y, c, 1.0 - v);
                }
            }
        }
        assert!(psnr(&a, &b).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn psnr_rejects_shape_mismatch() {
        let _ = psnr(&constant(8, 8, 0.1), &constant(8, 9, 0.1));
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut a = ImageBuf::new(16, 16, 3);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i % 97) as f32 / 97.0).clamp(0.0, 1.0);
        }
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_negative_image_scores_below_one() {
        let mut a = ImageBuf::new(16, 16, 3);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i / 3 % 16) as f32) / 15.0;
        }
        let b = ImageBuf { w: a.w, h: a.h, ch: a.ch, data: a.data.iter().map(|v| 1.0 - v).collect() };
        assert!(ssim(&a, &b) < 0.9);
    }

    #[test]
    fn ssim_constant_images_match_closed_form_luminance_term() {
        let a = constant(16, 16, 0.2);
        let b = constant(16, 16, 0.8);
        let got = ssim(&a, &b);
        // variance and covariance are zero, so only the luminance term remains
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * 0.2 * 0.8 + c1) / (0.2f64 * 0.2 + 0.8 * 0.8 + c1);
        assert!((got - want).abs() < 1e-9, "got {} want {}", got, want);
    }

    #[test]
    #[should_panic(expected = "smaller than")]
    fn ssim_rejects_tiny_images() {
        let _ = ssim(&constant(4, 4, 0.1), &constant(4, 4, 0.1));
    }

    #[test]
    fn metric_symmetry() {
        let mut a = ImageBuf::new(16, 16, 3);
        let mut b = ImageBuf::new(16, 16, 3);
        for i in 0..a.data.len() {
            a.data[i] = ((i * 31 % 101) as f32 / 101.0).clamp(0.0, 1.0);
            b.data[i] = ((i * 53 % 89) as f32 / 89.0).clamp(0.0, 1.0);
        }
        assert!((psnr(&a, &b) - psnr(&b, &a)).abs() < 1e-12);
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-9);
    }
}
