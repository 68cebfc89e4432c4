//! Random instance generators and brute-force scalar-loop oracles shared by
//! the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steadyvr::flow::{ConfidenceMap, FlowField, OcclusionMask};
use steadyvr::tokenmerge::{TokenChunk, TokenMatrix};
use steadyvr::{FrameSequence, Grid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Grid {
    Grid::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
}

/// Components bounded by `max` and by the frame extent.
pub fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, max: f64) -> FlowField {
    let (mu, mv) = (max.min(w as f64), max.min(h as f64));
    FlowField::new(Grid::from_fn(h, w, 2, |_, _, k| {
        let m = if k == 0 { mu } else { mv };
        rng.random_range(-m..=m)
    }))
    .unwrap()
}

pub fn random_int_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, max: i32) -> FlowField {
    let (mu, mv) = (max.min(w as i32), max.min(h as i32));
    FlowField::new(Grid::from_fn(h, w, 2, |_, _, k| {
        let m = if k == 0 { mu } else { mv };
        rng.random_range(-m..=m) as f64
    }))
    .unwrap()
}

pub fn random_confidence(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ConfidenceMap {
    ConfidenceMap::new(Grid::from_fn(h, w, 1, |_, _, _| {
        rng.random_range(0.01..=1.0)
    }))
    .unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> OcclusionMask {
    OcclusionMask::new(Grid::from_fn(h, w, 1, |_, _, _| {
        if rng.random_bool(0.3) {
            1.0
        } else {
            0.0
        }
    }))
    .unwrap()
}

pub fn random_seq(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> FrameSequence {
    FrameSequence::new(
        (0..n)
            .map(|_| random_grid(rng, h, w, 3, 0.0, 1.0))
            .collect(),
    )
    .unwrap()
}

/// Chunk with random shape inside the given bounds; padding appears when
/// `pad` is set.
pub fn random_chunk(
    rng: &mut ChaCha8Rng,
    max_b: usize,
    max_side: usize,
    max_c: usize,
    pad: bool,
) -> TokenChunk {
    let b = rng.random_range(1..=max_b);
    let hl = rng.random_range(1..=max_side);
    let wl = rng.random_range(1..=max_side);
    let (hc, wc) = if pad {
        (rng.random_range(1..=hl), rng.random_range(1..=wl))
    } else {
        (hl, wl)
    };
    let c = rng.random_range(1..=max_c);
    let tokens = (0..b * hl * wl * c)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let target = rng.random_range(0..b);
    TokenChunk::new(tokens, b, (hl, wl), (hc, wc), c, target).unwrap()
}

pub fn rows(m: &TokenMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn psnr_oracle(a: &Grid, b: &Grid) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        sum += (x - y) * (x - y);
    }
    let mse = sum / a.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}

pub fn bilinear(g: &Grid, y: f64, x: f64, k: usize) -> f64 {
    let (h, w) = (g.height(), g.width());
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = if y0 + 1 < h { y0 + 1 } else { h - 1 };
    let x1 = if x0 + 1 < w { x0 + 1 } else { w - 1 };
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = g.get(y0, x0, k) * (1.0 - tx) + g.get(y0, x1, k) * tx;
    let bottom = g.get(y1, x0, k) * (1.0 - tx) + g.get(y1, x1, k) * tx;
    top * (1.0 - ty) + bottom * ty
}

pub fn warp_oracle(g: &Grid, f: &FlowField) -> Grid {
    let mut out = Grid::zeros(g.height(), g.width(), g.channels());
    for y in 0..g.height() {
        for x in 0..g.width() {
            for k in 0..g.channels() {
                let v = bilinear(g, y as f64 + f.v(y, x), x as f64 + f.u(y, x), k);
                out.set(y, x, k, v);
            }
        }
    }
    out
}

pub fn fb_confidence_oracle(fwd: &FlowField, bwd: &FlowField) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 0..fwd.height() {
        for x in 0..fwd.width() {
            let (u, v) = (fwd.u(y, x), fwd.v(y, x));
            let by = y as f64 + v;
            let bx = x as f64 + u;
            let bu = bilinear(bwd.grid(), by, bx, 0);
            let bv = bilinear(bwd.grid(), by, bx, 1);
            let r2 = (u + bu) * (u + bu) + (v + bv) * (v + bv);
            out.push((-r2).exp());
        }
    }
    out
}

pub fn cosine_oracle(src: &[Vec<f64>], tar: &[Vec<f64>]) -> Vec<Vec<f64>> {
    src.iter()
        .map(|s| {
            tar.iter()
                .map(|t| {
                    let mut dot = 0.0;
                    let mut ns = 0.0;
                    let mut nt = 0.0;
                    for k in 0..s.len() {
                        dot += s[k] * t[k];
                        ns += s[k] * s[k];
                        nt += t[k] * t[k];
                    }
                    if ns == 0.0 || nt == 0.0 {
                        0.0
                    } else {
                        dot / (ns.sqrt() * nt.sqrt())
                    }
                })
                .collect()
        })
        .collect()
}

pub fn spatial_oracle(
    scores: &[Vec<f64>],
    src_pos: &[(f64, f64)],
    tar_pos: &[(f64, f64)],
    r: f64,
) -> Vec<Vec<f64>> {
    let mut out = scores.to_vec();
    for i in 0..scores.len() {
        for j in 0..tar_pos.len() {
            let dx = src_pos[i].0 - tar_pos[j].0;
            let dy = src_pos[i].1 - tar_pos[j].1;
            let tau = ((dx * dx + dy * dy) / r).floor();
            out[i][j] = scores[i][j] * (-tau).exp();
        }
    }
    out
}

/// First maximum of each row.
pub fn argmax_oracle(scores: &[Vec<f64>]) -> Vec<(usize, f64)> {
    scores
        .iter()
        .map(|row| {
            let mut best = 0;
            for j in 0..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (best, row[best])
        })
        .collect()
}

/// Per source `(frame, position)` on an `h x w` token grid: target cell
/// index or `None`, and the ranking criterion.
pub fn flow_corr_oracle(
    h: usize,
    w: usize,
    slots: &[(usize, usize)],
    flows: &[Option<(FlowField, ConfidenceMap)>],
) -> Vec<(Option<usize>, f64)> {
    let mut out = Vec::new();
    for &(f, p) in slots {
        let (flow, conf) = flows[f].as_ref().unwrap();
        let y = p / w;
        let x = p % w;
        let ty = (y as f64 + flow.v(y, x)).round();
        let tx = (x as f64 + flow.u(y, x)).round();
        if ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w {
            out.push((Some(ty as usize * w + tx as usize), conf.value(y, x)));
        } else {
            out.push((None, 0.0));
        }
    }
    out
}

/// Mean of every target row with the source rows merged into it.
pub fn group_means_oracle(
    src: &[Vec<f64>],
    tar: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (j, t) in tar.iter().enumerate() {
        let mut sum = t.clone();
        let mut n = 1.0;
        for &(s, tj) in pairs {
            if tj == j {
                for k in 0..sum.len() {
                    sum[k] += src[s][k];
                }
                n += 1.0;
            }
        }
        out.push(sum.iter().map(|v| v / n).collect());
    }
    out
}

pub fn e_warp_oracle(frames: &[Grid], fields: &[FlowField], masks: &[OcclusionMask]) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 1..frames.len() {
        let warped = warp_oracle(&frames[t - 1], &fields[t - 1]);
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in 0..frames[t].height() {
            for x in 0..frames[t].width() {
                if masks[t - 1].value(y, x) == 1.0 {
                    continue;
                }
                for k in 0..3 {
                    let d = frames[t].get(y, x, k) - warped.get(y, x, k);
                    sum += d * d;
                    count += 1.0;
                }
            }
        }
        out.push(if count > 0.0 { sum / count } else { 0.0 });
    }
    out
}

pub fn e_inter_oracle(frames: &[Grid], fwd: &[FlowField], bwd: &[FlowField]) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 1..frames.len() - 1 {
        let (f, b) = (&fwd[t - 1], &bwd[t - 1]);
        let cur = &frames[t];
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in 0..cur.height() {
            for x in 0..cur.width() {
                for k in 0..3 {
                    let a = bilinear(
                        &frames[t - 1],
                        y as f64 + 0.5 * f.v(y, x),
                        x as f64 + 0.5 * f.u(y, x),
                        k,
                    );
                    let c = bilinear(
                        &frames[t + 1],
                        y as f64 + 0.5 * b.v(y, x),
                        x as f64 + 0.5 * b.u(y, x),
                        k,
                    );
                    let d = 0.5 * (a + c) - cur.get(y, x, k);
                    sum += d * d;
                    count += 1.0;
                }
            }
        }
        out.push((sum / count).sqrt() * 255.0);
    }
    out
}

/// Exhaustive block matching without early exit; ties resolved explicitly.
pub fn estimate_flow_oracle(
    src: &Grid,
    dst: &Grid,
    block: usize,
    search: usize,
) -> Vec<(i64, i64)> {
    let (h, w) = (src.height() as i64, src.width() as i64);
    let s = search as i64;
    let lo = -((block as i64 - 1) / 2);
    let hi = lo + block as i64;
    let cl = |v: i64, n: i64| v.max(0).min(n - 1) as usize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, i64, i64, i64)> = None;
            for dy in -s..=s {
                for dx in -s..=s {
                    let mut cost = 0.0;
                    for oy in lo..hi {
                        for ox in lo..hi {
                            for k in 0..src.channels() {
                                let a = src.get(cl(y + oy, h), cl(x + ox, w), k);
                                let b = dst.get(cl(y + oy + dy, h), cl(x + ox + dx, w), k);
                                cost += (a - b) * (a - b);
                            }
                        }
                    }
                    let mag = dy * dy + dx * dx;
                    let better = match best {
                        None => true,
                        Some((c, m, by, bx)) => {
                            cost < c || (cost == c && (mag, dy, dx) < (m, by, bx))
                        }
                    };
                    if better {
                        best = Some((cost, mag, dy, dx));
                    }
                }
            }
            let (_, _, dy, dx) = best.unwrap();
            out.push((dx, dy));
        }
    }
    out
}

/// Per-pixel blend `m * own + (1 - m) * warp(source, flow)`.
pub fn blend_oracle(own: &Grid, source: &Grid, flow: &FlowField, mask: &OcclusionMask) -> Grid {
    let warped = warp_oracle(source, flow);
    let mut out = own.clone();
    for y in 0..own.height() {
        for x in 0..own.width() {
            let m = mask.value(y, x);
            for k in 0..own.channels() {
                out.set(
                    y,
                    x,
                    k,
                    m * own.get(y, x, k) + (1.0 - m) * warped.get(y, x, k),
                );
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
