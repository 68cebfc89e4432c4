//! Image-quality (PSNR, SSIM) and temporal-consistency (warping error,
//! interpolation error) measurements.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, FlowField, OcclusionMask};
use crate::grid::Grid;
use crate::video::FrameSequence;

/// Per-frame values plus their mean (`None` when there are no values).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Series {
    #[serde(with = "values")]
    pub per_frame: Vec<f64>,
    #[serde(with = "opt_value")]
    pub mean: Option<f64>,
}

impl Series {
    pub fn new(per_frame: Vec<f64>) -> Self {
        let mean = mean(&per_frame);
        Series { per_frame, mean }
    }
}

/// Warping error, reported raw and multiplied by 10^3.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WarpSeries {
    #[serde(with = "values")]
    pub per_frame: Vec<f64>,
    #[serde(with = "opt_value")]
    pub mean: Option<f64>,
    #[serde(with = "opt_value")]
    pub mean_x1e3: Option<f64>,
}

impl WarpSeries {
    pub fn new(per_frame: Vec<f64>) -> Self {
        let mean = mean(&per_frame);
        WarpSeries {
            per_frame,
            mean,
            mean_x1e3: mean.map(|m| m * 1e3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: Series,
    pub ssim: Series,
    pub e_warp: WarpSeries,
    pub e_inter: Series,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    /// PSNR may be `+inf` (identical frames); everything else must be finite.
    pub fn check_finite(&self) -> Result<()> {
        let bad = |name: &str, v: f64| Error::Serialization(format!("non-finite {name} value {v}"));
        for &v in self.psnr.per_frame.iter().chain(self.psnr.mean.iter()) {
            if v.is_nan() || v == f64::NEG_INFINITY {
                return Err(bad("psnr", v));
            }
        }
        let others = [
            ("ssim", &self.ssim.per_frame, &self.ssim.mean),
            ("e_warp", &self.e_warp.per_frame, &self.e_warp.mean),
            ("e_warp", &self.e_warp.per_frame, &self.e_warp.mean_x1e3),
            ("e_inter", &self.e_inter.per_frame, &self.e_inter.mean),
        ];
        for (name, values, m) in others {
            if let Some(&v) = values.iter().chain(m.iter()).find(|v| !v.is_finite()) {
                return Err(bad(name, v));
            }
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Encoded {
    Num(f64),
    Text(String),
}

fn encode(v: f64) -> Encoded {
    if v == f64::INFINITY {
        Encoded::Text("inf".into())
    } else {
        Encoded::Num(v)
    }
}

fn decode<E: serde::de::Error>(e: Encoded) -> std::result::Result<f64, E> {
    match e {
        Encoded::Num(v) => Ok(v),
        Encoded::Text(s) if s == "inf" => Ok(f64::INFINITY),
        Encoded::Text(s) => Err(E::custom(format!("unexpected metric value {s:?}"))),
    }
}

mod values {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| encode(x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        Vec::<Encoded>::deserialize(d)?
            .into_iter()
            .map(decode)
            .collect()
    }
}

mod opt_value {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.map(encode).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<f64>, D::Error> {
        Option::<Encoded>::deserialize(d)?.map(decode).transpose()
    }
}

fn check_same(a: &Grid, b: &Grid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "frames differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

/// Peak signal-to-noise ratio with peak 1.0. Identical frames give `+inf`.
pub fn psnr(a: &Grid, b: &Grid) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn luminance(frame: &Grid) -> Vec<f64> {
    let c = frame.channels() as f64;
    frame
        .data()
        .chunks_exact(frame.channels())
        .map(|p| p.iter().sum::<f64>() / c)
        .collect()
}

/// Mean SSIM over non-overlapping 8x8 windows of the channel-mean luminance.
/// Windows at the right and bottom edges are clipped to the frame.
pub fn ssim(a: &Grid, b: &Grid) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, _) = a.shape();
    let la = luminance(a);
    let lb = luminance(b);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in (0..h).step_by(SSIM_WINDOW) {
        for x0 in (0..w).step_by(SSIM_WINDOW) {
            let ys = y0..(y0 + SSIM_WINDOW).min(h);
            let xs = x0..(x0 + SSIM_WINDOW).min(w);
            let n = (ys.len() * xs.len()) as f64;
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in ys.clone() {
                for x in xs.clone() {
                    sa += la[y * w + x];
                    sb += lb[y * w + x];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in ys.clone() {
                for x in xs.clone() {
                    let da = la[y * w + x] - ma;
                    let db = lb[y * w + x] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Warping error per adjacent pair.
///
/// `fields[t - 1]` lives on frame `t`'s grid and points into frame `t - 1`,
/// so `warp(frame[t - 1], fields[t - 1])` aligns the previous frame onto
/// frame `t`. The error is the mean squared difference over non-occluded
/// pixels (all channels); a pair whose pixels are all occluded scores 0.
pub fn warping_error(
    seq: &FrameSequence,
    fields: &[FlowField],
    masks: Option<&[OcclusionMask]>,
) -> Result<Vec<f64>> {
    let n = seq.len();
    let pairs = n.saturating_sub(1);
    if fields.len() != pairs {
        return Err(Error::Config(format!(
            "warping error needs {pairs} flows for {n} frames, got {}",
            fields.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != pairs {
            return Err(Error::Config(format!(
                "warping error needs {pairs} masks, got {}",
                m.len()
            )));
        }
    }
    let frames = seq.frames();
    let mut out = Vec::with_capacity(pairs);
    for t in 1..n {
        let warped = flow::warp(&frames[t - 1], &fields[t - 1])?;
        let cur = &frames[t];
        let (h, w, c) = cur.shape();
        let mask = masks.map(|m| &m[t - 1]);
        if let Some(m) = mask {
            if m.resolution() != (h, w) {
                return Err(Error::Shape("mask resolution differs from frames".into()));
            }
        }
        let (mut acc, mut weight) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let keep = mask.map_or(1.0, |m| 1.0 - m.value(y, x));
                if keep == 0.0 {
                    continue;
                }
                for k in 0..c {
                    let d = cur.get(y, x, k) - warped.get(y, x, k);
                    acc += keep * d * d;
                }
                weight += keep * c as f64;
            }
        }
        out.push(if weight > 0.0 { acc / weight } else { 0.0 });
    }
    Ok(out)
}

/// Interpolation error per interior frame `t` in `1..n-1`.
///
/// `fwd[t - 1]` warps frame `t - 1` onto frame `t + 1`'s grid and `bwd[t - 1]`
/// warps frame `t + 1` onto frame `t - 1`'s grid. Halving each field gives the
/// midpoint; the two half-warps are averaged and compared to frame `t` by
/// RMS, scaled by 255.
pub fn interpolation_error(
    seq: &FrameSequence,
    fwd: &[FlowField],
    bwd: &[FlowField],
) -> Result<Vec<f64>> {
    let n = seq.len();
    if n < 3 {
        return Err(Error::TooShort(format!(
            "interpolation error needs at least 3 frames, got {n}"
        )));
    }
    if fwd.len() != n - 2 || bwd.len() != n - 2 {
        return Err(Error::Config(format!(
            "interpolation error needs {} flows each way, got {} and {}",
            n - 2,
            fwd.len(),
            bwd.len()
        )));
    }
    let frames = seq.frames();
    let mut out = Vec::with_capacity(n - 2);
    for t in 1..n - 1 {
        let from_prev = flow::warp(&frames[t - 1], &fwd[t - 1].scaled(0.5))?;
        let from_next = flow::warp(&frames[t + 1], &bwd[t - 1].scaled(0.5))?;
        let target = frames[t].data();
        let sq: f64 = from_prev
            .data()
            .iter()
            .zip(from_next.data())
            .zip(target)
            .map(|((a, b), f)| {
                let d = 0.5 * (a + b) - f;
                d * d
            })
            .sum();
        out.push((sq / target.len() as f64).sqrt() * 255.0);
    }
    Ok(out)
}

/// Flows and masks that the consistency metrics need, estimated once from a
/// reference sequence so competing outputs are scored against the same motion.
#[derive(Debug, Clone)]
pub struct MetricFlows {
    pub warp_fields: Vec<FlowField>,
    pub warp_masks: Vec<OcclusionMask>,
    pub inter_fwd: Vec<FlowField>,
    pub inter_bwd: Vec<FlowField>,
}

impl MetricFlows {
    pub fn estimate(
        seq: &FrameSequence,
        block: usize,
        search: usize,
        tau_occ: f64,
    ) -> Result<Self> {
        let frames = seq.frames();
        let n = frames.len();
        let mut warp_fields = Vec::new();
        let mut warp_masks = Vec::new();
        for t in 1..n {
            let field = flow::estimate_flow(&frames[t], &frames[t - 1], block, search)?;
            let back = flow::estimate_flow(&frames[t - 1], &frames[t], block, search)?;
            warp_masks.push(flow::occlusion_mask(&field, &back, tau_occ)?);
            warp_fields.push(field);
        }
        let mut inter_fwd = Vec::new();
        let mut inter_bwd = Vec::new();
        for t in 1..n.saturating_sub(1) {
            inter_fwd.push(flow::estimate_flow(
                &frames[t + 1],
                &frames[t - 1],
                block,
                2 * search,
            )?);
            inter_bwd.push(flow::estimate_flow(
                &frames[t - 1],
                &frames[t + 1],
                block,
                2 * search,
            )?);
        }
        Ok(MetricFlows {
            warp_fields,
            warp_masks,
            inter_fwd,
            inter_bwd,
        })
    }
}

/// Consistency metrics always; PSNR/SSIM only when a reference is given.
pub fn evaluate(
    seq: &FrameSequence,
    reference: Option<&FrameSequence>,
    flows: &MetricFlows,
) -> Result<MetricsReport> {
    let (psnr_v, ssim_v) = match reference {
        Some(r) => {
            if r.len() != seq.len() {
                return Err(Error::Shape(format!(
                    "reference has {} frames, output has {}",
                    r.len(),
                    seq.len()
                )));
            }
            let mut p = Vec::new();
            let mut s = Vec::new();
            for (a, b) in seq.frames().iter().zip(r.frames()) {
                p.push(psnr(a, b)?);
                s.push(ssim(a, b)?);
            }
            (p, s)
        }
        None => (Vec::new(), Vec::new()),
    };
    let e_warp = warping_error(seq, &flows.warp_fields, Some(&flows.warp_masks))?;
    let e_inter = if seq.len() >= 3 {
        interpolation_error(seq, &flows.inter_fwd, &flows.inter_bwd)?
    } else {
        Vec::new()
    };
    Ok(MetricsReport {
        psnr: Series::new(psnr_v),
        ssim: Series::new(ssim_v),
        e_warp: WarpSeries::new(e_warp),
        e_inter: Series::new(e_inter),
        metadata: BTreeMap::new(),
    })
}
