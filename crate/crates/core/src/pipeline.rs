//! End-to-end restoration: batching, keyframes, flow precomputation, stage
//! gating and the sampling loop with both mechanisms attached.
//!
//! Frames are "encoded" by area downsampling and "decoded" by bilinear
//! upsampling; there is no learned autoencoder.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, CorrMode, FlowParams};
use crate::error::{Error, Result};
use crate::flow::{self, ConfidenceMap, FlowField, OcclusionMask};
use crate::grid::Grid;
use crate::latentwarp::{propagate_to_batch, warp_keyframe_chain, LatentGrid};
use crate::metrics::{evaluate, MetricFlows, MetricsReport};
use crate::synth::{degrade, synthetic_video, SynthParams};
use crate::tokenmerge::{
    anneal_ratio, hybrid_merge_pass, AnnealParams, Attention, MergeMode, TokenChunk, TokenFlow,
};
use crate::toydiff::{
    default_schedule, forward_diffuse, gaussian_latent, sample, AttentionHook, BlockInfo,
    BlockKind, HookSet, HookStats, LatentHook, StepContext, ToyDenoiser,
};
use crate::video::FrameSequence;

/// Contiguous batches with one keyframe each.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<Range<usize>>,
    /// Absolute frame index of each batch's keyframe.
    pub keyframe_of: Vec<usize>,
    pub seed: u64,
}

/// Splits `n` frames into batches of `b` and draws a keyframe uniformly
/// inside each.
pub fn plan_batches(n: usize, b: usize, seed: u64) -> Result<BatchPlan> {
    if n == 0 || b == 0 {
        return Err(Error::Parameter(format!(
            "need at least one frame and batch size >= 1, got n = {n}, B = {b}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let batches: Vec<Range<usize>> = (0..n).step_by(b).map(|s| s..(s + b).min(n)).collect();
    let keyframe_of = batches
        .iter()
        .map(|r| rng.random_range(r.clone()))
        .collect();
    Ok(BatchPlan {
        batch_size: b,
        batches,
        keyframe_of,
        seed,
    })
}

/// Which mechanism fires at which step.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub hlw_until: f64,
    /// `[start, stop)` in step indices.
    pub tome_range: (usize, usize),
    pub anneal: AnnealParams,
    pub down_mode: CorrMode,
    pub up_mode: CorrMode,
    pub radius: f64,
}

impl StageSchedule {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        Ok(StageSchedule {
            hlw_until: cfg.hlw_until,
            tome_range: (cfg.tome.start, cfg.tome_stop()),
            anneal: cfg.anneal()?,
            down_mode: cfg.tome.down_mode,
            up_mode: cfg.tome.up_mode,
            radius: cfg.tome.radius,
        })
    }

    pub fn hlw_active(&self, ctx: &StepContext) -> bool {
        ctx.progress() < self.hlw_until
    }

    pub fn tome_active(&self, step: usize) -> bool {
        (self.tome_range.0..self.tome_range.1).contains(&step)
    }

    pub fn hlw_enabled(&self) -> bool {
        self.hlw_until > 0.0
    }

    pub fn tome_enabled(&self) -> bool {
        self.tome_range.0 < self.tome_range.1
    }

    fn mode(&self, kind: BlockKind) -> CorrMode {
        match kind {
            BlockKind::Down => self.down_mode,
            BlockKind::Up => self.up_mode,
        }
    }

    fn needs_flow(&self) -> bool {
        self.hlw_enabled()
            || (self.tome_enabled()
                && (self.down_mode == CorrMode::Flow || self.up_mode == CorrMode::Flow))
    }
}

/// Flow from one frame into another, with its forward-backward confidence
/// and occlusion mask, all on the first frame's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFlow {
    pub flow: FlowField,
    pub confidence: ConfidenceMap,
    pub mask: OcclusionMask,
}

impl PairFlow {
    pub fn estimate(src: &Grid, dst: &Grid, params: &FlowParams) -> Result<Self> {
        let fwd = flow::estimate_flow(src, dst, params.block, params.search)?;
        let bwd = flow::estimate_flow(dst, src, params.block, params.search)?;
        let confidence = flow::fb_confidence(&fwd, &bwd)?;
        let mask = flow::occlusion_mask(&fwd, &bwd, params.tau_occ)?;
        Ok(PairFlow {
            flow: fwd,
            confidence,
            mask,
        })
    }

    pub fn resampled(&self, h: usize, w: usize) -> Result<Self> {
        Ok(PairFlow {
            flow: flow::resample_flow(&self.flow, h, w)?,
            confidence: self.confidence.resample(h, w),
            mask: flow::resample_mask(&self.mask, h, w)?,
        })
    }

    /// The same flow on the grid of a 2x2-pooled token map: cells average
    /// their (possibly partial) 2x2 block and displacements halve.
    pub fn pooled2(&self) -> Result<Self> {
        let flow = FlowField::new(self.flow.grid().area_downsample(2).map(|d| d * 0.5))?;
        let confidence = ConfidenceMap::new(self.confidence.grid().area_downsample(2))?;
        let mask = flow::resample_mask(&self.mask, flow.height(), flow.width())?;
        Ok(PairFlow {
            flow,
            confidence,
            mask,
        })
    }

    fn token_flow(&self) -> TokenFlow {
        TokenFlow {
            flow: self.flow.clone(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Flows one batch needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFlows {
    /// Member into keyframe, by position in the batch; `None` at the keyframe.
    pub members: Vec<Option<PairFlow>>,
    /// This batch's keyframe into the previous batch's keyframe.
    pub chain: Option<PairFlow>,
}

impl BatchFlows {
    fn map(&self, f: impl Fn(&PairFlow) -> Result<PairFlow>) -> Result<Self> {
        Ok(BatchFlows {
            members: self
                .members
                .iter()
                .map(|m| m.as_ref().map(&f).transpose())
                .collect::<Result<_>>()?,
            chain: self.chain.as_ref().map(&f).transpose()?,
        })
    }
}

/// All flows of a restore run at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBank {
    pub resolution: (usize, usize),
    pub batches: Vec<BatchFlows>,
}

impl FlowBank {
    pub fn resampled(&self, h: usize, w: usize) -> Result<Self> {
        Ok(FlowBank {
            resolution: (h, w),
            batches: self
                .batches
                .iter()
                .map(|b| b.map(|p| p.resampled(h, w)))
                .collect::<Result<_>>()?,
        })
    }

    /// See [`PairFlow::pooled2`].
    pub fn pooled2(&self) -> Result<Self> {
        let (h, w) = self.resolution;
        Ok(FlowBank {
            resolution: (h.div_ceil(2), w.div_ceil(2)),
            batches: self
                .batches
                .iter()
                .map(|b| b.map(PairFlow::pooled2))
                .collect::<Result<_>>()?,
        })
    }
}

/// Estimates keyframe-chain and keyframe-to-member flows on the input frames.
pub fn precompute_flows(
    seq: &FrameSequence,
    plan: &BatchPlan,
    params: &FlowParams,
) -> Result<FlowBank> {
    let frames = seq.frames();
    let mut batches = Vec::with_capacity(plan.batches.len());
    for (bi, range) in plan.batches.iter().enumerate() {
        let key = plan.keyframe_of[bi];
        let members = range
            .clone()
            .map(|m| {
                (m != key)
                    .then(|| PairFlow::estimate(&frames[m], &frames[key], params))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let chain = if bi > 0 {
            Some(PairFlow::estimate(
                &frames[key],
                &frames[plan.keyframe_of[bi - 1]],
                params,
            )?)
        } else {
            None
        };
        batches.push(BatchFlows { members, chain });
    }
    Ok(FlowBank {
        resolution: seq.resolution(),
        batches,
    })
}

struct HlwHook<'a> {
    schedule: &'a StageSchedule,
    keypos: usize,
    key_frame: usize,
    flows: &'a BatchFlows,
    /// Previous batch's updated keyframe estimate per step.
    previous: Option<&'a [Option<Grid>]>,
    record: Vec<Option<Grid>>,
}

impl LatentHook for HlwHook<'_> {
    fn active(&self, ctx: &StepContext) -> bool {
        self.schedule.hlw_active(ctx)
    }

    fn apply(&mut self, ctx: &StepContext, x0: &[LatentGrid]) -> Result<Vec<LatentGrid>> {
        let mut key = x0[self.keypos].clone();
        let prev = self
            .previous
            .and_then(|p| p.get(ctx.index))
            .and_then(Option::as_ref);
        if let (Some(chain), Some(prev)) = (self.flows.chain.as_ref(), prev) {
            let prev = LatentGrid {
                data: prev.clone(),
                frame_index: self.key_frame,
                step: ctx.t,
            };
            let mut out = warp_keyframe_chain(
                &[prev, key],
                std::slice::from_ref(&chain.flow),
                std::slice::from_ref(&chain.mask),
            )?;
            key = out.pop().expect("two keyframes in, two out");
        }
        self.record[ctx.index] = Some(key.data.clone());
        let mut batch = x0.to_vec();
        batch[self.keypos] = key.clone();
        let flows: Vec<Option<FlowField>> = self
            .flows
            .members
            .iter()
            .map(|m| m.as_ref().map(|p| p.flow.clone()))
            .collect();
        let masks: Vec<Option<OcclusionMask>> = self
            .flows
            .members
            .iter()
            .map(|m| m.as_ref().map(|p| p.mask.clone()))
            .collect();
        propagate_to_batch(&key, &batch, &flows, &masks)
    }
}

struct TomeHook<'a> {
    schedule: &'a StageSchedule,
    /// Member flows at each token level, by position in the batch.
    flows: [Vec<Option<TokenFlow>>; 2],
}

impl AttentionHook for TomeHook<'_> {
    fn active(&self, ctx: &StepContext, _: BlockInfo) -> bool {
        self.schedule.tome_active(ctx.index)
    }

    fn apply(
        &mut self,
        ctx: &StepContext,
        block: BlockInfo,
        chunk: &TokenChunk,
        attention: &mut Attention<'_>,
    ) -> Result<TokenChunk> {
        let r_i = anneal_ratio(ctx.index, &self.schedule.anneal);
        let mode = match self.schedule.mode(block.kind) {
            CorrMode::Flow => MergeMode::Flow(&self.flows[block.level]),
            CorrMode::Cosine => MergeMode::Cosine {
                spatial_radius: None,
            },
            CorrMode::CosineSpatial => MergeMode::Cosine {
                spatial_radius: Some(self.schedule.radius),
            },
        };
        hybrid_merge_pass(chunk, mode, r_i, attention)
    }
}

/// Restored frames plus what happened on the way.
#[derive(Debug, Clone)]
pub struct RestoreOutput {
    pub frames: FrameSequence,
    /// Final clean latent of every frame.
    pub latents: Vec<Grid>,
    pub stats: HookStats,
    pub plan: BatchPlan,
}

pub fn encode(frame: &Grid, scale: usize) -> Grid {
    frame.area_downsample(scale)
}

pub fn decode(latent: &Grid, h: usize, w: usize) -> Grid {
    latent.resize_bilinear(h, w).map(|v| v.clamp(0.0, 1.0))
}

fn initial_latent(cond: &Grid, frame: usize, cfg: &Config, t_first: usize) -> Result<LatentGrid> {
    let (h, w, c) = cond.shape();
    let eps = LatentGrid::new(
        gaussian_latent(h, w, c, cfg.seed, frame as u64),
        frame,
        t_first,
    )?;
    let x0 = LatentGrid::new(cond.clone(), frame, t_first)?;
    forward_diffuse(&x0, t_first, &eps, &default_schedule())
}

/// Restores `seq` batch by batch in frame order.
pub fn restore(seq: &FrameSequence, cfg: &Config) -> Result<RestoreOutput> {
    let plan = plan_batches(seq.len(), cfg.batch_size, cfg.seed)?;
    let order: Vec<usize> = (0..plan.batches.len()).collect();
    restore_in_order(seq, cfg, &order)
}

/// Like [`restore`] but visits batches in `order`. Keyframe chaining needs
/// the previous batch first, so any other order is rejected while latent
/// warping is on.
pub fn restore_in_order(
    seq: &FrameSequence,
    cfg: &Config,
    order: &[usize],
) -> Result<RestoreOutput> {
    let schedule = StageSchedule::from_config(cfg)?;
    let plan = plan_batches(seq.len(), cfg.batch_size, cfg.seed)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..plan.batches.len()).collect::<Vec<_>>() {
        return Err(Error::Config(format!(
            "batch order must be a permutation of 0..{}",
            plan.batches.len()
        )));
    }
    if schedule.hlw_enabled() && order.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Config(
            "keyframe chaining needs batches in frame order".into(),
        ));
    }
    let sched = default_schedule();
    let denoiser = ToyDenoiser::new(cfg.seed, cfg.denoiser)?;
    let (h, w) = seq.resolution();
    let conds: Vec<Grid> = seq
        .frames()
        .iter()
        .map(|f| encode(f, cfg.latent_scale))
        .collect();
    let (hl, wl) = (conds[0].height(), conds[0].width());
    let t_first = crate::toydiff::timesteps(&sched, cfg.steps)?[0];

    let banks = if schedule.needs_flow() && seq.len() > 1 {
        let latent = precompute_flows(seq, &plan, &cfg.flow)?.resampled(hl, wl)?;
        let pooled = latent.pooled2()?;
        Some([latent, pooled])
    } else {
        None
    };

    let mut latents: Vec<Option<Grid>> = vec![None; seq.len()];
    let mut stats = HookStats::default();
    let mut previous_key: Option<Vec<Option<Grid>>> = None;
    for &bi in order {
        let range = plan.batches[bi].clone();
        let key = plan.keyframe_of[bi];
        let keypos = key - range.start;
        let cond = &conds[range.clone()];
        let x_t = range
            .clone()
            .map(|f| initial_latent(&conds[f], f, cfg, t_first))
            .collect::<Result<Vec<_>>>()?;

        let empty = BatchFlows {
            members: vec![None; range.len()],
            chain: None,
        };
        let lat_flows = banks.as_ref().map_or(&empty, |b| &b[0].batches[bi]);
        let token_flows = |level: usize| -> Vec<Option<TokenFlow>> {
            match &banks {
                Some(b) => b[level].batches[bi]
                    .members
                    .iter()
                    .map(|m| m.as_ref().map(PairFlow::token_flow))
                    .collect(),
                None => vec![None; range.len()],
            }
        };
        let mut hlw = HlwHook {
            schedule: &schedule,
            keypos,
            key_frame: key,
            flows: lat_flows,
            previous: previous_key.as_deref(),
            record: vec![None; cfg.steps],
        };
        let mut tome = TomeHook {
            schedule: &schedule,
            flows: [token_flows(0), token_flows(1)],
        };
        let mut hooks = HookSet {
            latent: schedule
                .hlw_enabled()
                .then_some(&mut hlw as &mut dyn LatentHook),
            attention: schedule
                .tome_enabled()
                .then_some(&mut tome as &mut dyn AttentionHook),
        };
        let (out, batch_stats) = sample(
            x_t, cond, keypos, &denoiser, &mut hooks, &sched, cfg.steps, None,
        )?;
        stats += batch_stats;
        previous_key = Some(hlw.record);
        for l in out {
            latents[l.frame_index] = Some(l.data);
        }
    }
    let latents: Vec<Grid> = latents
        .into_iter()
        .map(|l| l.expect("every batch sampled"))
        .collect();
    let frames = FrameSequence::new(latents.iter().map(|l| decode(l, h, w)).collect())?;
    Ok(RestoreOutput {
        frames,
        latents,
        stats,
        plan,
    })
}

/// Samples every frame on its own with no hooks: the image-model baseline.
pub fn restore_per_frame(seq: &FrameSequence, cfg: &Config) -> Result<RestoreOutput> {
    cfg.validate()?;
    let plan = plan_batches(seq.len(), cfg.batch_size, cfg.seed)?;
    let sched = default_schedule();
    let denoiser = ToyDenoiser::new(cfg.seed, cfg.denoiser)?;
    let (h, w) = seq.resolution();
    let t_first = crate::toydiff::timesteps(&sched, cfg.steps)?[0];
    let mut latents = Vec::with_capacity(seq.len());
    for (f, frame) in seq.frames().iter().enumerate() {
        let cond = encode(frame, cfg.latent_scale);
        let x_t = initial_latent(&cond, f, cfg, t_first)?;
        let (out, _) = sample(
            vec![x_t],
            std::slice::from_ref(&cond),
            0,
            &denoiser,
            &mut HookSet::none(),
            &sched,
            cfg.steps,
            None,
        )?;
        latents.push(out.into_iter().next().expect("one frame in, one out").data);
    }
    let frames = FrameSequence::new(latents.iter().map(|l| decode(l, h, w)).collect())?;
    Ok(RestoreOutput {
        frames,
        latents,
        stats: HookStats::default(),
        plan,
    })
}

/// One line of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub down_mode: CorrMode,
    pub up_mode: CorrMode,
    pub hlw_until: f64,
    pub tome_start: usize,
    pub tome_stop: usize,
    pub e_warp: f64,
    pub e_warp_x1e3: f64,
    pub e_inter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub correspondence: Vec<AblationRow>,
    pub stages: Vec<AblationRow>,
    pub metadata: BTreeMap<String, String>,
}

/// Down/up correspondence variants on top of `base`.
pub fn correspondence_variants(base: &Config) -> Vec<(String, Config)> {
    use CorrMode::*;
    [
        ("flow/flow", Flow, Flow),
        ("cos/cos", Cosine, Cosine),
        ("cos/flow", Cosine, Flow),
        ("flow/cos", Flow, Cosine),
        ("flow/cos+spatial", Flow, CosineSpatial),
    ]
    .into_iter()
    .map(|(name, down, up)| {
        let mut c = base.clone();
        c.tome.down_mode = down;
        c.tome.up_mode = up;
        (name.to_string(), c)
    })
    .collect()
}

/// Stage variants, with early, mid and late meaning thirds of the steps.
pub fn stage_variants(base: &Config) -> Vec<(String, Config)> {
    let s = base.steps;
    let third = (s as f64 / 3.0).round() as usize;
    let variant = |name: &str, hlw: f64, tome_stop: usize| {
        let mut c = base.clone();
        c.hlw_until = hlw;
        c.tome.start = 0;
        c.tome.stop = Some(tome_stop);
        (name.to_string(), c)
    };
    vec![
        variant("none", 0.0, 0),
        variant("hlw early + tome early", 1.0 / 3.0, third),
        variant("hlw early-mid + tome all", 2.0 / 3.0, s),
        variant("hlw all + tome all", 1.0, s),
        variant("hlw early + tome all", 1.0 / 3.0, s),
    ]
}

/// Restores under each variant and scores the output against `flows`.
pub fn ablate(
    seq: &FrameSequence,
    variants: &[(String, Config)],
    flows: &MetricFlows,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|(name, cfg)| {
            let out = restore(seq, cfg)?;
            let report = evaluate(&out.frames, None, flows)?;
            let e_warp = report.e_warp.mean.unwrap_or(0.0);
            Ok(AblationRow {
                name: name.clone(),
                down_mode: cfg.tome.down_mode,
                up_mode: cfg.tome.up_mode,
                hlw_until: cfg.hlw_until,
                tome_start: cfg.tome.start,
                tome_stop: cfg.tome_stop(),
                e_warp,
                e_warp_x1e3: e_warp * 1e3,
                e_inter: report.e_inter.mean.unwrap_or(0.0),
            })
        })
        .collect()
}

/// Both ablation grids for `seq`, scored against flows of `seq` itself.
pub fn ablation_table(seq: &FrameSequence, cfg: &Config) -> Result<AblationTable> {
    cfg.validate()?;
    let flows = MetricFlows::estimate(seq, cfg.flow.block, cfg.flow.search, cfg.flow.tau_occ)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("frames".into(), seq.len().to_string());
    metadata.insert("config".into(), cfg.to_text());
    Ok(AblationTable {
        correspondence: ablate(seq, &correspondence_variants(cfg), &flows)?,
        stages: ablate(seq, &stage_variants(cfg), &flows)?,
        metadata,
    })
}

/// Settings for the synthetic demo.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSettings {
    pub video: SynthParams,
    pub scale: usize,
    pub noise: f64,
    pub config: Config,
}

impl DemoSettings {
    pub fn new(seed: u64) -> Self {
        let config = Config {
            seed,
            steps: 20,
            ..Config::default()
        };
        DemoSettings {
            video: SynthParams {
                seed,
                ..SynthParams::default()
            },
            scale: 4,
            noise: 0.04,
            config,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemoOutput {
    pub hq: FrameSequence,
    pub lq: FrameSequence,
    pub baseline: RestoreOutput,
    pub ours: RestoreOutput,
    pub baseline_report: MetricsReport,
    pub ours_report: MetricsReport,
}

/// Synthesizes, degrades and restores a video with and without both
/// mechanisms, scoring each against the clean video and the motion of the
/// degraded input.
pub fn run_demo(settings: &DemoSettings) -> Result<DemoOutput> {
    let cfg = &settings.config;
    cfg.validate()?;
    let hq = synthetic_video(&settings.video)?;
    let lq = degrade(&hq, settings.scale, settings.noise, settings.video.seed)?;
    let mut off = cfg.clone();
    off.disable_hlw();
    off.disable_tome();
    let baseline = restore(&lq, &off)?;
    let ours = restore(&lq, cfg)?;
    let flows = MetricFlows::estimate(&lq, cfg.flow.block, cfg.flow.search, cfg.flow.tau_occ)?;
    let mut baseline_report = evaluate(&baseline.frames, Some(&hq), &flows)?;
    let mut ours_report = evaluate(&ours.frames, Some(&hq), &flows)?;
    baseline_report
        .metadata
        .insert("variant".into(), "baseline".into());
    ours_report.metadata.insert("variant".into(), "ours".into());
    for r in [&mut baseline_report, &mut ours_report] {
        r.metadata.insert("seed".into(), cfg.seed.to_string());
        r.metadata.insert("frames".into(), hq.len().to_string());
    }
    Ok(DemoOutput {
        hq,
        lq,
        baseline,
        ours,
        baseline_report,
        ours_report,
    })
}
