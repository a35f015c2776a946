//! In-memory float images and binary masks.

/// Row-major interleaved float image, values in [0,1] by convention.
/// Pixel (x, y) is centered at integer coordinates (x, y).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub w: usize,
    pub h: usize,
    pub ch: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(w: usize, h: usize, ch: usize) -> Self {
        ImageBuf { w, h, ch, data: vec![0.0; w * h * ch] }
    }

    pub fn filled(w: usize, h: usize, ch: usize, v: f32) -> Self {
        ImageBuf { w, h, ch, data: vec![v; w * h * ch] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * self.ch + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.w + x) * self.ch + c] = v;
    }

    pub fn pixel3(&self, x: usize, y: usize) -> [f32; 3] {
        debug_assert!(self.ch >= 3);
        let i = (y * self.w + x) * self.ch;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear sample at continuous coordinates (pixel centers on integers).
    /// Returns `None` outside the image rectangle.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> Option<Vec<f32>> {
        if x < 0.0 || y < 0.0 || x > (self.w - 1) as f32 || y > (self.h - 1) as f32 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let mut out = vec![0.0f32; self.ch];
        for (c, o) in out.iter_mut().enumerate() {
            let v00 = self.get(x0, y0, c);
            let v10 = self.get(x1, y0, c);
            let v01 = self.get(x0, y1, c);
            let v11 = self.get(x1, y1, c);
            *o = v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy;
        }
        Some(out)
    }

    /// Channels-first copy [C,H,W] for the convolution ops.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.ch {
                    out[c * self.h * self.w + y * self.w + x] = self.get(x, y, c);
                }
            }
        }
        out
    }

    pub fn from_chw(data: &[f32], w: usize, h: usize, ch: usize) -> Self {
        assert_eq!(data.len(), w * h * ch);
        let mut img = ImageBuf::new(w, h, ch);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    img.set(x, y, c, data[c * h * w + y * w + x]);
                }
            }
        }
        img
    }

    /// Box-filter downscale by an integer factor.
    pub fn downscale(&self, k: usize) -> ImageBuf {
        assert!(k >= 1 && self.w % k == 0 && self.h % k == 0, "downscale factor {}", k);
        let mut out = ImageBuf::new(self.w / k, self.h / k, self.ch);
        let inv = 1.0 / (k * k) as f32;
        for y in 0..out.h {
            for x in 0..out.w {
                for c in 0..self.ch {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += self.get(x * k + dx, y * k + dy, c);
                        }
                    }
                    out.set(x, y, c, s * inv);
                }
            }
        }
        out
    }
}

/// Binary mask with the same pixel conventions as [`ImageBuf`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBuf {
    pub w: usize,
    pub h: usize,
    pub data: Vec<bool>,
}

impl MaskBuf {
    pub fn new(w: usize, h: usize) -> Self {
        MaskBuf { w, h, data: vec![false; w * h] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    /// Nearest-pixel containment for continuous coordinates; false outside.
    pub fn contains_point(&self, x: f32, y: f32) -> bool {
        let xi = x.round();
        let yi = y.round();
        if xi < 0.0 || yi < 0.0 || xi >= self.w as f32 || yi >= self.h as f32 {
            return false;
        }
        self.get(xi as usize, yi as usize)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn morph(&self, iterations: usize, dilate: bool) -> MaskBuf {
        let mut cur = self.clone();
        for _ in 0..iterations {
            let mut next = cur.clone();
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut any = false;
                    'n: for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                            let v = if nx < 0 || ny < 0 || nx >= self.w as i32 || ny >= self.h as i32
                            {
                                // outside counts as background
                                false
                            } else {
                                cur.get(nx as usize, ny as usize)
                            };
                            if v == dilate {
                                any = true;
                                break 'n;
                            }
                        }
                    }
                    next.set(x, y, if dilate { any } else { !any });
                }
            }
            cur = next;
        }
        cur
    }

    /// 8-connected dilation by `px` pixels.
    pub fn dilate(&self, px: usize) -> MaskBuf {
        self.morph(px, true)
    }

    /// 8-connected erosion by `px` pixels.
    pub fn erode(&self, px: usize) -> MaskBuf {
        self.morph(px, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint() {
        let mut img = ImageBuf::new(2, 2, 1);
        img.set(0, 0, 0, 0.0);
        img.set(1, 0, 0, 1.0);
        img.set(0, 1, 0, 1.0);
        img.set(1, 1, 0, 2.0);
        let v = img.sample_bilinear(0.5, 0.5).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!(img.sample_bilinear(-0.1, 0.0).is_none());
    }

    #[test]
    fn chw_roundtrip() {
        let mut img = ImageBuf::new(3, 2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let back = ImageBuf::from_chw(&img.to_chw(), 3, 2, 3);
        assert_eq!(img, back);
    }

    #[test]
    fn erode_then_dilate_shrinks() {
        let mut m = MaskBuf::new(7, 7);
        for y in 2..5 {
            for x in 2..5 {
                m.set(x, y, true);
            }
        }
        let e = m.erode(1);
        assert_eq!(e.count(), 1);
        assert!(e.get(3, 3));
        let d = m.dilate(1);
        assert_eq!(d.count(), 25);
    }

    #[test]
    fn downscale_box_average() {
        let mut img = ImageBuf::new(2, 2, 1);
        img.data = vec![0.0, 1.0, 1.0, 0.0];
        let d = img.downscale(2);
        assert_eq!(d.w, 1);
        assert!((d.get(0, 0, 0) - 0.5).abs() < 1e-6);
    }
}
