//! A small deterministic latent-diffusion denoiser and DDIM sampler.
//!
//! The denoiser is untrained. It is conditioned on the low-quality latent
//! and built like a two-level UNet: two down blocks and two up blocks, each
//! a token projection followed by self-attention and a residual add. Every
//! self-attention call goes through an optional [`AttentionHook`]; the
//! sampler offers the predicted clean latents of a batch to an optional
//! [`LatentHook`] at every step.
//!
//! Without hooks each frame attends only to its own tokens, so sampling a
//! batch is exactly sampling its frames one at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::latentwarp::{predict_x0, LatentGrid};
use crate::tokenmerge::{attend_per_frame, Attention, TokenChunk, TokenMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub abars: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion timesteps `T`.
    pub fn len(&self) -> usize {
        self.abars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abars.is_empty()
    }
}

/// Linear-beta schedule with `T` steps.
pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(Error::Parameter("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut abars = Vec::with_capacity(t);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        abars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        abars,
    })
}

/// The schedule every sampler in this crate uses: `T = 1000`, betas from
/// `1e-4` to `0.02`.
pub fn default_schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02).expect("constant parameters are valid")
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    let abar = *sched
        .abars
        .get(t)
        .ok_or_else(|| Error::Index(format!("timestep {t} outside schedule of {}", sched.len())))?;
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    let data = x0.data.zip_with(&eps.data, |x, e| a * x + b * e)?;
    Ok(LatentGrid {
        data,
        frame_index: x0.frame_index,
        step: t,
    })
}

/// Timesteps visited by a `steps`-step sampler, in denoising order:
/// `floor(k * T / steps)` for `k = steps - 1, ..., 0`.
pub fn timesteps(sched: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > sched.len() {
        return Err(Error::Parameter(format!(
            "steps must be in [1, {}], got {steps}",
            sched.len()
        )));
    }
    Ok((0..steps).rev().map(|k| k * sched.len() / steps).collect())
}

/// Gaussian noise latent from `(seed, stream)`.
pub fn gaussian_latent(h: usize, w: usize, c: usize, seed: u64, stream: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..h * w * c)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Grid::from_vec(h, w, c, data).expect("length matches")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Down,
    Up,
}

/// One attention site in the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub kind: BlockKind,
    /// 0 at latent resolution, 1 after one 2x pooling.
    pub level: usize,
}

/// Where the sampler is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    /// 0 for the first (noisiest) step.
    pub index: usize,
    pub steps: usize,
    pub t: usize,
    pub abar_t: f64,
    pub abar_prev: f64,
}

impl StepContext {
    /// Fraction of the sampler already completed before this step.
    pub fn progress(&self) -> f64 {
        self.index as f64 / self.steps as f64
    }
}

/// Replaces the predicted clean latents of a batch.
pub trait LatentHook {
    fn active(&self, ctx: &StepContext) -> bool;
    fn apply(&mut self, ctx: &StepContext, x0: &[LatentGrid]) -> Result<Vec<LatentGrid>>;
}

/// Wraps a self-attention call. `attention` is the layer's own per-token
/// transform; the hook decides how tokens are grouped before it runs.
pub trait AttentionHook {
    fn active(&self, ctx: &StepContext, block: BlockInfo) -> bool;
    fn apply(
        &mut self,
        ctx: &StepContext,
        block: BlockInfo,
        chunk: &TokenChunk,
        attention: &mut Attention<'_>,
    ) -> Result<TokenChunk>;
}

#[derive(Default)]
pub struct HookSet<'a> {
    pub latent: Option<&'a mut dyn LatentHook>,
    pub attention: Option<&'a mut dyn AttentionHook>,
}

impl HookSet<'_> {
    pub fn none() -> Self {
        HookSet::default()
    }
}

/// How often each hook actually fired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HookStats {
    pub latent_calls: usize,
    pub attention_calls: usize,
}

impl std::ops::AddAssign for HookStats {
    fn add_assign(&mut self, o: HookStats) {
        self.latent_calls += o.latent_calls;
        self.attention_calls += o.attention_calls;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserParams {
    pub hidden: usize,
    /// Latent channels.
    pub channels: usize,
    /// Residual gain of every attention block.
    pub gain: f64,
    /// Inverse temperature of the attention softmax.
    pub sharpness: f64,
    /// Largest deviation the denoiser may add on top of the condition.
    pub detail: f64,
    /// Assumed spread of the clean latent around the condition.
    pub spread: f64,
}

impl Default for DenoiserParams {
    fn default() -> Self {
        DenoiserParams {
            hidden: 12,
            channels: 3,
            gain: 1.0,
            sharpness: 4.0,
            detail: 0.15,
            spread: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
}

impl Linear {
    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (rows as f64).sqrt();
        let w = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Linear { rows, cols, w }
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.cols..(i + 1) * self.cols];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
    }
}

/// Seeded stand-in for a noise-prediction network.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub seed: u64,
    pub params: DenoiserParams,
    input: Linear,
    blocks: [Linear; 4],
    output: Linear,
}

const BLOCKS: [BlockInfo; 4] = [
    BlockInfo {
        kind: BlockKind::Down,
        level: 0,
    },
    BlockInfo {
        kind: BlockKind::Down,
        level: 1,
    },
    BlockInfo {
        kind: BlockKind::Up,
        level: 1,
    },
    BlockInfo {
        kind: BlockKind::Up,
        level: 0,
    },
];

/// Per-frame token maps of one batch at one resolution.
struct Tokens {
    h: usize,
    w: usize,
    c: usize,
    frames: Vec<Vec<f64>>,
}

impl Tokens {
    fn zeros(b: usize, h: usize, w: usize, c: usize) -> Self {
        Tokens {
            h,
            w,
            c,
            frames: vec![vec![0.0; h * w * c]; b],
        }
    }
}

fn rms_norm(x: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
}

/// Tied-weight softmax attention: every token is query, key and value.
pub fn self_attention(m: &TokenMatrix, sharpness: f64) -> TokenMatrix {
    let n = m.rows();
    let c = m.cols();
    let scale = sharpness / c as f64;
    let mut out = TokenMatrix::zeros(n, c);
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let q = m.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, l) in logits.iter_mut().enumerate() {
            *l = scale * q.iter().zip(m.row(j)).map(|(a, b)| a * b).sum::<f64>();
            max = max.max(*l);
        }
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        let row = out.row_mut(i);
        for (j, &l) in logits.iter().enumerate() {
            let p = l / total;
            for (o, v) in row.iter_mut().zip(m.row(j)) {
                *o += p * v;
            }
        }
    }
    out
}

impl ToyDenoiser {
    pub fn new(seed: u64, params: DenoiserParams) -> Result<Self> {
        if params.hidden == 0 || params.channels == 0 {
            return Err(Error::Parameter(
                "denoiser needs hidden and channel counts >= 1".into(),
            ));
        }
        for (name, v) in [
            ("gain", params.gain),
            ("sharpness", params.sharpness),
            ("detail", params.detail),
            ("spread", params.spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "denoiser {name} must be finite and >= 0"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = params.hidden;
        let input = Linear::random(2 * params.channels, c, &mut rng);
        let blocks = [
            Linear::random(c, c, &mut rng),
            Linear::random(c, c, &mut rng),
            Linear::random(c, c, &mut rng),
            Linear::random(c, c, &mut rng),
        ];
        let output = Linear::random(c, params.channels, &mut rng);
        Ok(ToyDenoiser {
            seed,
            params,
            input,
            blocks,
            output,
        })
    }

    /// Clean-latent estimate `D(x_t, cond)` for every frame of a batch.
    ///
    /// `target_index` names the batch member whose tokens serve as merge
    /// targets when an attention hook is active.
    pub fn predict(
        &self,
        x_t: &[Grid],
        cond: &[Grid],
        target_index: usize,
        ctx: &StepContext,
        hook: Option<&mut (dyn AttentionHook + '_)>,
        stats: &mut HookStats,
    ) -> Result<Vec<Grid>> {
        let b = x_t.len();
        if b == 0 || cond.len() != b {
            return Err(Error::Shape(format!(
                "{} latents with {} conditions",
                b,
                cond.len()
            )));
        }
        let (h, w, cl) = x_t[0].shape();
        if cl != self.params.channels {
            return Err(Error::Shape(format!(
                "latent has {cl} channels, denoiser expects {}",
                self.params.channels
            )));
        }
        if x_t.iter().chain(cond).any(|g| g.shape() != (h, w, cl)) {
            return Err(Error::Shape(
                "batch latents and conditions must share a shape".into(),
            ));
        }
        if target_index >= b {
            return Err(Error::Index(format!(
                "target {target_index} outside batch of {b}"
            )));
        }
        let c = self.params.hidden;
        let abar = ctx.abar_t;
        let sa = abar.sqrt();
        let spread = self.params.spread;
        let denom = (abar * spread * spread + 1.0 - abar).sqrt();
        let (hp, wp) = (h.div_ceil(2) * 2, w.div_ceil(2) * 2);

        let mut t0 = Tokens::zeros(b, hp, wp, c);
        let mut feat = vec![0.0; 2 * cl];
        for f in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let xt = x_t[f].pixel(y, x);
                    let cd = cond[f].pixel(y, x);
                    for k in 0..cl {
                        feat[k] = (xt[k] - sa * cd[k]) / denom;
                        feat[cl + k] = cd[k];
                    }
                    let p = (y * wp + x) * c;
                    self.input.apply_into(&feat, &mut t0.frames[f][p..p + c]);
                }
            }
        }

        let mut hook = hook;
        let content0 = (h, w);
        let content1 = (h.div_ceil(2), w.div_ceil(2));
        let d1 = self.block(0, t0, content0, target_index, ctx, &mut hook, stats)?;
        let pooled = pool2(&d1);
        let d2 = self.block(1, pooled, content1, target_index, ctx, &mut hook, stats)?;
        let u1 = self.block(2, d2, content1, target_index, ctx, &mut hook, stats)?;
        let mut up = upsample2(&u1);
        for (uf, sf) in up.frames.iter_mut().zip(&d1.frames) {
            for (u, s) in uf.iter_mut().zip(sf) {
                *u += s;
            }
        }
        let u2 = self.block(3, up, content0, target_index, ctx, &mut hook, stats)?;

        let mut out = Vec::with_capacity(b);
        let mut normed = vec![0.0; c];
        let mut o = vec![0.0; cl];
        for (f, cf) in cond.iter().enumerate().take(b) {
            let mut g = Grid::zeros(h, w, cl);
            for y in 0..h {
                for x in 0..w {
                    let p = (y * wp + x) * c;
                    rms_norm(&u2.frames[f][p..p + c], &mut normed);
                    self.output.apply_into(&normed, &mut o);
                    let cd = cf.pixel(y, x);
                    for (k, v) in g.pixel_mut(y, x).iter_mut().enumerate() {
                        *v = cd[k] + self.params.detail * o[k].tanh();
                    }
                }
            }
            out.push(g);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        index: usize,
        mut tokens: Tokens,
        content: (usize, usize),
        target_index: usize,
        ctx: &StepContext,
        hook: &mut Option<&mut (dyn AttentionHook + '_)>,
        stats: &mut HookStats,
    ) -> Result<Tokens> {
        let info = BLOCKS[index];
        let proj = &self.blocks[index];
        let (b, hw, c) = (tokens.frames.len(), tokens.h * tokens.w, tokens.c);
        let mut projected = Vec::with_capacity(b * hw * c);
        let mut normed = vec![0.0; c];
        let mut p = vec![0.0; c];
        for frame in &tokens.frames {
            for tok in frame.chunks_exact(c) {
                rms_norm(tok, &mut normed);
                proj.apply_into(&normed, &mut p);
                projected.extend_from_slice(&p);
            }
        }
        let chunk = TokenChunk::new(projected, b, (tokens.h, tokens.w), content, c, target_index)?;
        let sharpness = self.params.sharpness;
        let mut attention = |m: &TokenMatrix| self_attention(m, sharpness);
        let attended = match hook {
            Some(hk) if hk.active(ctx, info) => {
                stats.attention_calls += 1;
                let out = hk.apply(ctx, info, &chunk, &mut attention)?;
                if out.shape() != chunk.shape() || out.layout() != chunk.layout() {
                    return Err(Error::Shape(format!(
                        "attention hook returned {:?}, expected {:?}",
                        out.shape(),
                        chunk.shape()
                    )));
                }
                out
            }
            _ => attend_per_frame(&chunk, &mut attention)?,
        };
        let gain = self.params.gain;
        for (f, frame) in tokens.frames.iter_mut().enumerate() {
            for (t, a) in frame.iter_mut().zip(attended.frame_tokens(f)) {
                *t += gain * a;
            }
        }
        Ok(tokens)
    }
}

fn pool2(t: &Tokens) -> Tokens {
    let (h2, w2, c) = (t.h / 2, t.w / 2, t.c);
    let mut out = Tokens::zeros(t.frames.len(), h2, w2, c);
    for (src, dst) in t.frames.iter().zip(out.frames.iter_mut()) {
        for y in 0..h2 {
            for x in 0..w2 {
                let o = &mut dst[(y * w2 + x) * c..(y * w2 + x + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * t.w + 2 * x + dx) * c;
                    for (ov, sv) in o.iter_mut().zip(&src[s..s + c]) {
                        *ov += 0.25 * sv;
                    }
                }
            }
        }
    }
    out
}

fn upsample2(t: &Tokens) -> Tokens {
    let (h2, w2, c) = (t.h * 2, t.w * 2, t.c);
    let mut out = Tokens::zeros(t.frames.len(), h2, w2, c);
    for (src, dst) in t.frames.iter().zip(out.frames.iter_mut()) {
        for y in 0..h2 {
            for x in 0..w2 {
                let s = ((y / 2) * t.w + x / 2) * c;
                dst[(y * w2 + x) * c..(y * w2 + x + 1) * c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    out
}

/// One DDIM (eta = 0) step over a batch.
///
/// The predicted noise is recovered from the denoiser's clean estimate, the
/// latent hook may replace the clean estimates, and the update is
/// `sqrt(abar_prev) * x0 + sqrt(1 - abar_prev) * eps`.
pub fn denoise_step(
    x_t: &[LatentGrid],
    cond: &[Grid],
    target_index: usize,
    ctx: &StepContext,
    denoiser: &ToyDenoiser,
    hooks: &mut HookSet<'_>,
    stats: &mut HookStats,
) -> Result<Vec<LatentGrid>> {
    let xs: Vec<Grid> = x_t.iter().map(|l| l.data.clone()).collect();
    let d = denoiser.predict(
        &xs,
        cond,
        target_index,
        ctx,
        hooks.attention.as_deref_mut(),
        stats,
    )?;
    let (sa, sb) = (ctx.abar_t.sqrt(), (1.0 - ctx.abar_t).sqrt());
    let mut eps = Vec::with_capacity(x_t.len());
    let mut x0 = Vec::with_capacity(x_t.len());
    for (l, dg) in x_t.iter().zip(d) {
        let e = l.data.zip_with(&dg, |x, dv| (x - sa * dv) / sb)?;
        let e = LatentGrid {
            data: e,
            frame_index: l.frame_index,
            step: ctx.t,
        };
        x0.push(predict_x0(l, &e, ctx.abar_t)?);
        eps.push(e);
    }
    if let Some(hk) = hooks.latent.as_deref_mut() {
        if hk.active(ctx) {
            stats.latent_calls += 1;
            let replaced = hk.apply(ctx, &x0)?;
            if replaced.len() != x0.len()
                || replaced
                    .iter()
                    .zip(&x0)
                    .any(|(r, o)| r.data.shape() != o.data.shape())
            {
                return Err(Error::Shape("latent hook changed the batch shape".into()));
            }
            x0 = replaced;
        }
    }
    let (pa, pb) = (ctx.abar_prev.sqrt(), (1.0 - ctx.abar_prev).sqrt());
    x0.iter()
        .zip(&eps)
        .map(|(x, e)| {
            Ok(LatentGrid {
                data: x.data.zip_with(&e.data, |xv, ev| pa * xv + pb * ev)?,
                frame_index: x.frame_index,
                step: ctx.t,
            })
        })
        .collect()
}

/// Callback that sees the batch after every sampler step.
pub type StepObserver<'a> = dyn FnMut(&StepContext, &[LatentGrid]) + 'a;

/// Runs `steps` DDIM steps from `x_T`. `observer` sees the batch after
/// every step.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    x_t: Vec<LatentGrid>,
    cond: &[Grid],
    target_index: usize,
    denoiser: &ToyDenoiser,
    hooks: &mut HookSet<'_>,
    sched: &NoiseSchedule,
    steps: usize,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<(Vec<LatentGrid>, HookStats)> {
    let ts = timesteps(sched, steps)?;
    let mut stats = HookStats::default();
    let mut x = x_t;
    for (index, &t) in ts.iter().enumerate() {
        let abar_prev = ts.get(index + 1).map_or(1.0, |&tp| sched.abars[tp]);
        let ctx = StepContext {
            index,
            steps,
            t,
            abar_t: sched.abars[t],
            abar_prev,
        };
        x = denoise_step(&x, cond, target_index, &ctx, denoiser, hooks, &mut stats)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&ctx, &x);
        }
    }
    Ok((x, stats))
}
