//! Dense optical flow: block-matching estimation, backward warping,
//! forward-backward confidence, occlusion masks and resolution resampling.
//!
//! Convention used throughout the crate: `estimate_flow(src, dst)` returns a
//! field defined on the pixel grid of `src` whose value at `p` is the
//! displacement to the matching location in `dst`. Consequently
//! `warp(dst, &estimate_flow(src, dst))` is `dst` resampled onto `src`'s grid.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Default occlusion threshold, `e^-1`: a forward-backward residual of one
/// pixel sits exactly on the boundary.
pub const DEFAULT_TAU_OCC: f64 = 0.368;

/// Per-pixel displacement `(u, v)` in pixels; `u` horizontal, `v` vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Grid);

impl FlowField {
    pub fn new(grid: Grid) -> Result<Self> {
        let (h, w, c) = grid.shape();
        if c != 2 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "flow field must be (h, w, 2), got ({h}, {w}, {c})"
            )));
        }
        for p in grid.data().chunks_exact(2) {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Format("flow field holds a non-finite value".into()));
            }
            if p[0].abs() > w as f64 || p[1].abs() > h as f64 {
                return Err(Error::Format(format!(
                    "flow ({}, {}) exceeds the {w}x{h} frame",
                    p[0], p[1]
                )));
            }
        }
        Ok(FlowField(grid))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Grid::zeros(h, w, 2))
    }

    pub fn constant(h: usize, w: usize, u: f64, v: f64) -> Result<Self> {
        FlowField::new(Grid::from_fn(h, w, 2, |_, _, k| if k == 0 { u } else { v }))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[inline]
    pub fn u(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 0)
    }

    #[inline]
    pub fn v(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 1)
    }

    /// Multiplies every displacement by `factor`.
    pub fn scaled(&self, factor: f64) -> FlowField {
        FlowField(self.0.map(|d| d * factor))
    }
}

/// Forward-backward confidence in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Grid);

impl ConfidenceMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Shape("confidence map must have one channel".into()));
        }
        if grid.data().iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Format("confidence values must lie in (0, 1]".into()));
        }
        Ok(ConfidenceMap(grid))
    }

    pub fn ones(h: usize, w: usize) -> Self {
        ConfidenceMap(Grid::filled(h, w, 1, 1.0))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 0)
    }

    /// Bilinear resample; confidences stay inside `(0, 1]` because bilinear
    /// weights are convex.
    pub fn resample(&self, h2: usize, w2: usize) -> ConfidenceMap {
        ConfidenceMap(self.0.resize_bilinear(h2, w2))
    }
}

/// `1` marks occluded / unreliable pixels, which keep their own content when
/// latents are fused; `0` marks pixels that take warped content. Soft values
/// in `[0, 1]` are accepted for blending.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask(Grid);

impl OcclusionMask {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Shape("occlusion mask must have one channel".into()));
        }
        if grid.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::Format("mask values must lie in [0, 1]".into()));
        }
        Ok(OcclusionMask(grid))
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Result<Self> {
        OcclusionMask::new(Grid::filled(h, w, 1, value))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 0)
    }

    pub fn is_binary(&self) -> bool {
        self.0.data().iter().all(|&m| m == 0.0 || m == 1.0)
    }
}

/// Candidate displacements in tie-break order: smallest squared magnitude
/// first, then raster order (row, then column).
fn search_order(search: usize) -> Vec<(isize, isize)> {
    let s = search as isize;
    let mut out: Vec<(isize, isize)> = (-s..=s)
        .flat_map(|dy| (-s..=s).map(move |dx| (dy, dx)))
        .collect();
    out.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    out
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Exhaustive integer block matching.
///
/// For each pixel the displacement within `±search` minimising the sum of
/// squared differences over a `block x block` patch wins; exact ties go to
/// the smallest displacement, then raster order. Patch reads clamp to the
/// frame border.
pub fn estimate_flow(src: &Grid, dst: &Grid, block: usize, search: usize) -> Result<FlowField> {
    if !src.same_shape(dst) {
        return Err(Error::Shape(format!(
            "flow frames differ: {:?} vs {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    if block == 0 {
        return Err(Error::Parameter("block size must be >= 1".into()));
    }
    let (h, w, c) = src.shape();
    let lo = -((block as isize - 1) / 2);
    let hi = lo + block as isize;
    let order = search_order(search);
    let mut out = Grid::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            let mut best = (f64::INFINITY, 0isize, 0isize);
            for &(dy, dx) in &order {
                let mut cost = 0.0;
                for oy in lo..hi {
                    let sy = clamp_index(y as isize + oy, h);
                    let ty = clamp_index(y as isize + oy + dy, h);
                    for ox in lo..hi {
                        let sx = clamp_index(x as isize + ox, w);
                        let tx = clamp_index(x as isize + ox + dx, w);
                        let a = src.pixel(sy, sx);
                        let b = dst.pixel(ty, tx);
                        for k in 0..c {
                            let d = a[k] - b[k];
                            cost += d * d;
                        }
                    }
                    if cost >= best.0 {
                        break;
                    }
                }
                if cost < best.0 {
                    best = (cost, dy, dx);
                }
            }
            out.set(y, x, 0, best.2 as f64);
            out.set(y, x, 1, best.1 as f64);
        }
    }
    FlowField::new(out)
}

/// Backward warp: `out(p) = grid(p + flow(p))`, bilinear, clamped.
pub fn warp(grid: &Grid, flow: &FlowField) -> Result<Grid> {
    let (h, w, c) = grid.shape();
    if flow.resolution() != (h, w) {
        return Err(Error::Shape(format!(
            "flow is {:?} but grid is {:?}",
            flow.resolution(),
            (h, w)
        )));
    }
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let sy = y as f64 + flow.v(y, x);
            let sx = x as f64 + flow.u(y, x);
            for k in 0..c {
                out.set(y, x, k, grid.sample_bilinear(sy, sx, k));
            }
        }
    }
    Ok(out)
}

/// Squared forward-backward residual `|f(p) + b(p + f(p))|^2` at one pixel.
#[inline]
fn fb_residual_sq(fwd: &FlowField, bwd: &FlowField, y: usize, x: usize) -> f64 {
    let u = fwd.u(y, x);
    let v = fwd.v(y, x);
    let sy = y as f64 + v;
    let sx = x as f64 + u;
    let bu = bwd.grid().sample_bilinear(sy, sx, 0);
    let bv = bwd.grid().sample_bilinear(sy, sx, 1);
    let ru = u + bu;
    let rv = v + bv;
    ru * ru + rv * rv
}

/// Forward-backward consistency confidence `exp(-|f(p) + b(p + f(p))|^2)`.
pub fn fb_confidence(fwd: &FlowField, bwd: &FlowField) -> Result<ConfidenceMap> {
    if fwd.resolution() != bwd.resolution() {
        return Err(Error::Shape(format!(
            "forward flow {:?} and backward flow {:?} differ",
            fwd.resolution(),
            bwd.resolution()
        )));
    }
    let (h, w) = fwd.resolution();
    // exp underflows to 0 for residuals above ~27 px; clamp to the smallest
    // positive value so the map stays inside (0, 1].
    let grid = Grid::from_fn(h, w, 1, |y, x, _| {
        (-fb_residual_sq(fwd, bwd, y, x))
            .exp()
            .max(f64::MIN_POSITIVE)
    });
    Ok(ConfidenceMap(grid))
}

/// Thresholds the forward-backward confidence: `1` (occluded) where
/// `sigma < tau_occ`, else `0`.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField, tau_occ: f64) -> Result<OcclusionMask> {
    if !(tau_occ > 0.0 && tau_occ <= 1.0) {
        return Err(Error::Parameter(format!(
            "tau_occ must be in (0, 1], got {tau_occ}"
        )));
    }
    let conf = fb_confidence(fwd, bwd)?;
    Ok(mask_from_confidence(&conf, tau_occ))
}

pub(crate) fn mask_from_confidence(conf: &ConfidenceMap, tau_occ: f64) -> OcclusionMask {
    OcclusionMask(conf.grid().map(|s| if s < tau_occ { 1.0 } else { 0.0 }))
}

/// Bilinear resample to `(h2, w2)`; `u` scales by `w2 / w` and `v` by `h2 / h`.
pub fn resample_flow(flow: &FlowField, h2: usize, w2: usize) -> Result<FlowField> {
    if h2 == 0 || w2 == 0 {
        return Err(Error::Parameter(
            "target resolution must be non-zero".into(),
        ));
    }
    let (h, w) = flow.resolution();
    if (h, w) == (h2, w2) {
        return Ok(flow.clone());
    }
    let su = w2 as f64 / w as f64;
    let sv = h2 as f64 / h as f64;
    let mut g = flow.grid().resize_bilinear(h2, w2);
    for p in g.data_mut().chunks_exact_mut(2) {
        p[0] *= su;
        p[1] *= sv;
    }
    FlowField::new(g)
}

/// Nearest-neighbour resample; binary masks stay binary.
pub fn resample_mask(mask: &OcclusionMask, h2: usize, w2: usize) -> Result<OcclusionMask> {
    if h2 == 0 || w2 == 0 {
        return Err(Error::Parameter(
            "target resolution must be non-zero".into(),
        ));
    }
    Ok(OcclusionMask(mask.grid().resize_nearest(h2, w2)))
}
