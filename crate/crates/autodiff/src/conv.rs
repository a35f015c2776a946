//! 3×3 convolution and ×2 upsampling ops for the image pipeline.

use crate::graph::{sgemm, sgemm_nt, sgemm_tn, Backward, Graph};
use crate::Tensor;
use std::sync::Arc;

/// im2col for 3×3, stride 1, zero padding 1: [C,H,W] -> [C*9, H*W].
fn im2col(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut cols = vec![0.0f32; c * 9 * hw];
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = ch * hw + sy as usize * w;
                    let dst = row + y * w;
                    let (x0, x1) = match kx {
                        0 => (1usize, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for x in x0..x1 {
                        let sx = (x as isize + kx as isize - 1) as usize;
                        cols[dst + x] = input[src + sx];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column matrix back into image layout (adjoint of im2col).
fn col2im(cols: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut img = vec![0.0f32; c * hw];
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = ch * hw + sy as usize * w;
                    let src = row + y * w;
                    let (x0, x1) = match kx {
                        0 => (1usize, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for x in x0..x1 {
                        let sx = (x as isize + kx as isize - 1) as usize;
                        img[dst + sx] += cols[src + x];
                    }
                }
            }
        }
    }
    img
}

struct Conv2dRule {
    input: Arc<Vec<f32>>,
    kernel: Arc<Vec<f32>>,
    has_bias: bool,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
}

impl Backward for Conv2dRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let (c, h, w, o) = (self.c, self.h, self.w, self.o);
        let hw = h * w;
        let cols = im2col(&self.input, c, h, w);
        // dK[o, c9] = G[o, hw] · colsᵀ
        let mut gk = vec![0.0f32; o * c * 9];
        sgemm_nt(o, hw, c * 9, grad, &cols, &mut gk);
        // dcols[c9, hw] = Kᵀ · G
        let mut gcols = vec![0.0f32; c * 9 * hw];
        sgemm_tn(c * 9, o, hw, &self.kernel, grad, &mut gcols);
        let gin = col2im(&gcols, c, h, w);
        let mut out = vec![gin, gk];
        if self.has_bias {
            let gb = (0..o).map(|oc| grad[oc * hw..(oc + 1) * hw].iter().sum()).collect();
            out.push(gb);
        }
        out
    }
}

#[derive(Clone, Copy)]
enum UpKind {
    Nearest,
    Bilinear,
}

struct Upsample2xRule {
    kind: UpKind,
    c: usize,
    h: usize,
    w: usize,
}

/// Source index/weight pairs for one output coordinate (align_corners=false).
fn bilinear_taps(dst: usize, src_len: usize) -> [(usize, f32); 2] {
    let s = (dst as f32 + 0.5) / 2.0 - 0.5;
    let floor = s.floor();
    let frac = s - floor;
    let i0 = (floor.max(0.0) as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    if s < 0.0 {
        [(0, 1.0), (0, 0.0)]
    } else {
        [(i0, 1.0 - frac), (i1, frac)]
    }
}

fn upsample2x(kind: UpKind, input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0f32; c * oh * ow];
    match kind {
        UpKind::Nearest => {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        out[ch * oh * ow + y * ow + x] = input[ch * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
        }
        UpKind::Bilinear => {
            for ch in 0..c {
                for y in 0..oh {
                    let ty = bilinear_taps(y, h);
                    for x in 0..ow {
                        let tx = bilinear_taps(x, w);
                        let mut v = 0.0;
                        for (yi, wy) in ty {
                            for (xi, wx) in tx {
                                v += wy * wx * input[ch * h * w + yi * w + xi];
                            }
                        }
                        out[ch * oh * ow + y * ow + x] = v;
                    }
                }
            }
        }
    }
    out
}

impl Backward for Upsample2xRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let (c, h, w) = (self.c, self.h, self.w);
        let (oh, ow) = (h * 2, w * 2);
        let mut g = vec![0.0f32; c * h * w];
        match self.kind {
            UpKind::Nearest => {
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            g[ch * h * w + (y / 2) * w + x / 2] += grad[ch * oh * ow + y * ow + x];
                        }
                    }
                }
            }
            UpKind::Bilinear => {
                for ch in 0..c {
                    for y in 0..oh {
                        let ty = bilinear_taps(y, h);
                        for x in 0..ow {
                            let tx = bilinear_taps(x, w);
                            let gv = grad[ch * oh * ow + y * ow + x];
                            for (yi, wy) in ty {
                                for (xi, wx) in tx {
                                    g[ch * h * w + yi * w + xi] += wy * wx * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![g]
    }
}

impl Graph {
    /// 3×3 convolution, stride 1, zero padding 1: input [C,H,W] with kernel
    /// [O,C,3,3] (and optional bias [O]) -> [O,H,W].
    pub fn conv2d(&mut self, input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Tensor {
        assert_eq!(input.shape().len(), 3, "conv2d input must be [C,H,W], got {:?}", input.shape());
        assert_eq!(kernel.shape().len(), 4, "conv2d kernel must be [O,C,3,3]");
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (o, kc, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        assert!(kh == 3 && kw == 3, "only 3x3 kernels are supported, got {}x{}", kh, kw);
        assert_eq!(kc, c, "conv2d channel mismatch: input {} vs kernel {}", c, kc);
        if let Some(b) = bias {
            assert_eq!(b.numel(), o, "conv2d bias length {} vs {} output channels", b.numel(), o);
        }
        let hw = h * w;
        let cols = im2col(input.data(), c, h, w);
        let mut out = vec![0.0f32; o * hw];
        sgemm(o, c * 9, hw, kernel.data(), &cols, &mut out);
        if let Some(b) = bias {
            for oc in 0..o {
                let bv = b.data()[oc];
                for v in &mut out[oc * hw..(oc + 1) * hw] {
                    *v += bv;
                }
            }
        }
        let rule = Conv2dRule {
            input: input.data.clone(),
            kernel: kernel.data.clone(),
            has_bias: bias.is_some(),
            c,
            h,
            w,
            o,
        };
        match bias {
            Some(b) => self.custom(&[input, kernel, b], out, &[o, h, w], Box::new(rule)),
            None => self.custom(&[input, kernel], out, &[o, h, w], Box::new(rule)),
        }
    }

    /// Nearest-neighbor ×2 upsample [C,H,W] -> [C,2H,2W].
    pub fn upsample2x_nearest(&mut self, input: &Tensor) -> Tensor {
        let (c, h, w) = chw(input);
        let out = upsample2x(UpKind::Nearest, input.data(), c, h, w);
        let rule = Upsample2xRule { kind: UpKind::Nearest, c, h, w };
        self.custom(&[input], out, &[c, h * 2, w * 2], Box::new(rule))
    }

    /// Bilinear ×2 upsample (align_corners=false) [C,H,W] -> [C,2H,2W].
    pub fn upsample2x_bilinear(&mut self, input: &Tensor) -> Tensor {
        let (c, h, w) = chw(input);
        let out = upsample2x(UpKind::Bilinear, input.data(), c, h, w);
        let rule = Upsample2xRule { kind: UpKind::Bilinear, c, h, w };
        self.custom(&[input], out, &[c, h * 2, w * 2], Box::new(rule))
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected [C,H,W], got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// Detached bilinear ×2 used outside the graph (shared with the op above).
pub fn bilinear_upsample2x(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    upsample2x(UpKind::Bilinear, input, c, h, w)
}
