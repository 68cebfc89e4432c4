//! Dense row-major `(height, width, channels)` grids of `f64`.
//!
//! Frames, latents, flow fields and masks all share this storage so the
//! sampling and resampling helpers only have to be written once.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Grid {
    /// Zero-filled grid.
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::filled(h, w, c, 0.0)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Grid {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "grid ({h}, {w}, {c}) needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Grid { h, w, c, data })
    }

    /// Builds a grid by evaluating `f(y, x, k)` at every element.
    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    data.push(f(y, x, k));
                }
            }
        }
        Grid { h, w, c, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, y: usize, x: usize, k: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && k < self.c);
        (y * self.w + x) * self.c + k
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[self.index(y, x, k)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, k: usize, value: f64) {
        let i = self.index(y, x, k);
        self.data[i] = value;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(y, x, 0);
        let c = self.c;
        &mut self.data[i..i + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two grids of equal shape.
    pub fn zip_with(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "grid shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched grids");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear sample of channel `k` at real coordinates `(y, x)`.
    /// Coordinates are clamped to the valid rectangle first.
    #[inline]
    pub fn sample_bilinear(&self, y: f64, x: f64, k: usize) -> f64 {
        let (x0, x1, fx) = bilinear_axis(x, self.w);
        let (y0, y1, fy) = bilinear_axis(y, self.h);
        let a = self.get(y0, x0, k);
        let b = self.get(y0, x1, k);
        let c = self.get(y1, x0, k);
        let d = self.get(y1, x1, k);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize_bilinear(&self, h2: usize, w2: usize) -> Grid {
        let sy = self.h as f64 / h2 as f64;
        let sx = self.w as f64 / w2 as f64;
        let mut out = Grid::zeros(h2, w2, self.c);
        for y in 0..h2 {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..w2 {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                for k in 0..self.c {
                    out.set(y, x, k, self.sample_bilinear(fy, fx, k));
                }
            }
        }
        out
    }

    /// Nearest-neighbour resize with pixel-center alignment.
    pub fn resize_nearest(&self, h2: usize, w2: usize) -> Grid {
        let sy = self.h as f64 / h2 as f64;
        let sx = self.w as f64 / w2 as f64;
        Grid::from_fn(h2, w2, self.c, |y, x, k| {
            let sy = (((y as f64 + 0.5) * sy).floor() as usize).min(self.h - 1);
            let sx = (((x as f64 + 0.5) * sx).floor() as usize).min(self.w - 1);
            self.get(sy, sx, k)
        })
    }

    /// Box-filter downsample by an integer factor. Output extent is
    /// `ceil(h / factor) x ceil(w / factor)`; edge cells average only the
    /// pixels they actually cover.
    pub fn area_downsample(&self, factor: usize) -> Grid {
        assert!(factor >= 1, "downsample factor must be >= 1");
        let h2 = self.h.div_ceil(factor);
        let w2 = self.w.div_ceil(factor);
        let mut out = Grid::zeros(h2, w2, self.c);
        for y2 in 0..h2 {
            for x2 in 0..w2 {
                let ys = y2 * factor..((y2 + 1) * factor).min(self.h);
                let xs = x2 * factor..((x2 + 1) * factor).min(self.w);
                let count = (ys.len() * xs.len()) as f64;
                let acc = out.pixel_mut(y2, x2);
                for y in ys.clone() {
                    for x in xs.clone() {
                        for (a, v) in acc.iter_mut().zip(self.pixel(y, x)) {
                            *a += v;
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a /= count;
                }
            }
        }
        out
    }
}

#[inline]
fn bilinear_axis(p: f64, n: usize) -> (usize, usize, f64) {
    let p = p.clamp(0.0, (n - 1) as f64);
    let p0 = p.floor();
    let i0 = p0 as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - p0)
}
