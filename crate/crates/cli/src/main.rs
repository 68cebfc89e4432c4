use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use steadyvr::config::{config_help, Config, FlowParams};
use steadyvr::flow::{estimate_flow, fb_confidence};
use steadyvr::mediaio::{
    read_frames, write_atomic, write_flo, write_frames, write_report, write_rtf, RawTensor,
};
use steadyvr::metrics::{evaluate, MetricFlows, MetricsReport};
use steadyvr::pipeline::{ablation_table, restore, run_demo, DemoSettings};

#[derive(Parser)]
#[command(
    name = "steadyvr",
    version,
    about = "Temporally consistent video restoration on a toy latent-diffusion model",
    after_long_help = config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate flows between adjacent frames. Writes flow_NNNNN.flo (frame
    /// N+1 into frame N, on frame N+1's grid) and conf_NNNNN.rtf.
    Flow(FlowCmd),
    /// Restore a frame directory.
    Restore(RestoreCmd),
    /// Measure temporal consistency, plus PSNR/SSIM against a reference.
    Metrics(MetricsCmd),
    /// Run the correspondence and stage ablation grids.
    Ablate(AblateCmd),
    /// Synthesize, degrade and restore a test video with and without the
    /// consistency mechanisms.
    Demo(DemoCmd),
}

#[derive(Args)]
struct FlowArgs {
    /// Block-matching patch size.
    #[arg(long, default_value_t = FlowParams::default().block)]
    block: usize,
    /// Block-matching search radius in pixels.
    #[arg(long, default_value_t = FlowParams::default().search)]
    search: usize,
    /// Occlusion threshold on forward-backward confidence.
    #[arg(long, default_value_t = FlowParams::default().tau_occ)]
    tau_occ: f64,
}

#[derive(Args)]
struct FlowCmd {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flow: FlowArgs,
}

#[derive(Args)]
struct RestoreCmd {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write every frame's final latent as latents/frame_NNNNN.rtf.
    #[arg(long)]
    dump_latents: bool,
    /// Disable hierarchical latent warping.
    #[arg(long)]
    no_hlw: bool,
    /// Disable token merging.
    #[arg(long)]
    no_tome: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricsCmd {
    #[arg(long = "in")]
    input: PathBuf,
    /// Reference frames. Enables PSNR/SSIM; consistency flows are then
    /// estimated on the reference instead of the input.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flow: FlowArgs,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DemoCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of frames to synthesize.
    #[arg(long, default_value_t = 24)]
    frames: usize,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn cmd_flow(c: &FlowCmd) -> Result<()> {
    let seq = read_frames(&c.input)?;
    let frames = seq.frames();
    let mut outputs = Vec::new();
    for t in 1..frames.len() {
        let fwd = estimate_flow(&frames[t], &frames[t - 1], c.flow.block, c.flow.search)?;
        let bwd = estimate_flow(&frames[t - 1], &frames[t], c.flow.block, c.flow.search)?;
        let conf = fb_confidence(&fwd, &bwd)?;
        outputs.push((fwd, RawTensor::from_grid(conf.grid())));
    }
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    for (i, (flow, conf)) in outputs.iter().enumerate() {
        write_flo(flow, &c.out.join(format!("flow_{i:05}.flo")))?;
        write_rtf(conf, &c.out.join(format!("conf_{i:05}.rtf")))?;
    }
    Ok(())
}

fn cmd_restore(c: &RestoreCmd) -> Result<()> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.no_hlw {
        cfg.disable_hlw();
    }
    if c.no_tome {
        cfg.disable_tome();
    }
    cfg.validate()?;
    let seq = read_frames(&c.input)?;
    let out = restore(&seq, &cfg)?;
    write_frames(&out.frames, &c.out)?;
    if c.dump_latents {
        let dir = c.out.join("latents");
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, l) in out.latents.iter().enumerate() {
            write_rtf(
                &RawTensor::from_grid(l),
                &dir.join(format!("frame_{i:05}.rtf")),
            )?;
        }
    }
    Ok(())
}

fn cmd_metrics(c: &MetricsCmd) -> Result<()> {
    let seq = read_frames(&c.input)?;
    let reference = c.reference.as_deref().map(read_frames).transpose()?;
    let motion = reference.as_ref().unwrap_or(&seq);
    let flows = MetricFlows::estimate(motion, c.flow.block, c.flow.search, c.flow.tau_occ)?;
    let mut report = evaluate(&seq, reference.as_ref(), &flows)?;
    report
        .metadata
        .insert("frames".into(), seq.len().to_string());
    report.metadata.insert(
        "flows_from".into(),
        if reference.is_some() { "ref" } else { "in" }.into(),
    );
    write_report(&report, &c.out)?;
    Ok(())
}

fn cmd_ablate(c: &AblateCmd) -> Result<()> {
    let cfg = load_config(c.config.as_deref())?;
    let seq = read_frames(&c.input)?;
    let table = ablation_table(&seq, &cfg)?;
    let json = serde_json::to_string_pretty(&table)?;
    write_atomic(&c.out, json.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct DemoReport<'a> {
    baseline: &'a MetricsReport,
    ours: &'a MetricsReport,
}

fn cmd_demo(c: &DemoCmd) -> Result<()> {
    let mut settings = DemoSettings::new(c.seed);
    settings.video.frames = c.frames;
    let out = run_demo(&settings)?;
    let report = DemoReport {
        baseline: &out.baseline_report,
        ours: &out.ours_report,
    };
    for (name, seq) in [
        ("hq", &out.hq),
        ("lq", &out.lq),
        ("baseline", &out.baseline.frames),
        ("ours", &out.ours.frames),
    ] {
        write_frames(seq, &c.out.join(name))?;
    }
    write_atomic(
        &c.out.join("config.txt"),
        settings.config.to_text().as_bytes(),
    )?;
    write_atomic(
        &c.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Flow(c) => cmd_flow(c),
        Command::Restore(c) => cmd_restore(c),
        Command::Metrics(c) => cmd_metrics(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Demo(c) => cmd_demo(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
