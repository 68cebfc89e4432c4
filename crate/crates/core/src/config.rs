//! Run configuration and its `key = value` text format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::DEFAULT_TAU_OCC;
use crate::tokenmerge::AnnealParams;
use crate::toydiff::DenoiserParams;

/// Token correspondence used by a family of attention blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrMode {
    Flow,
    Cosine,
    /// Cosine similarity weighted by spatial distance.
    CosineSpatial,
}

impl CorrMode {
    pub fn name(self) -> &'static str {
        match self {
            CorrMode::Flow => "flow",
            CorrMode::Cosine => "cosine",
            CorrMode::CosineSpatial => "cosine_spatial",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "flow" => Some(CorrMode::Flow),
            "cosine" => Some(CorrMode::Cosine),
            "cosine_spatial" => Some(CorrMode::CosineSpatial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub block: usize,
    pub search: usize,
    pub tau_occ: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            block: 5,
            search: 6,
            tau_occ: DEFAULT_TAU_OCC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TomeParams {
    pub r: f64,
    pub delta: f64,
    /// Anneal start; `None` means 60% of the step count.
    pub i_beg: Option<usize>,
    /// Anneal end; `None` means the step count.
    pub i_end: Option<usize>,
    pub radius: f64,
    /// First step with merging.
    pub start: usize,
    /// One past the last step with merging; `None` means the step count.
    pub stop: Option<usize>,
    pub down_mode: CorrMode,
    pub up_mode: CorrMode,
}

impl Default for TomeParams {
    fn default() -> Self {
        TomeParams {
            r: 0.8,
            delta: 1.0,
            i_beg: None,
            i_end: None,
            radius: 4.0,
            start: 0,
            stop: None,
            down_mode: CorrMode::Flow,
            up_mode: CorrMode::CosineSpatial,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Latent warping runs while the completed fraction of steps is below this.
    pub hlw_until: f64,
    pub tome: TomeParams,
    pub flow: FlowParams,
    pub latent_scale: usize,
    pub denoiser: DenoiserParams,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            batch_size: 8,
            steps: 50,
            seed: 0,
            hlw_until: 0.2,
            tome: TomeParams::default(),
            flow: FlowParams::default(),
            latent_scale: 4,
            denoiser: DenoiserParams::default(),
        }
    }
}

/// Every key the text format accepts, with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("batch_size", "frames per batch (default 8)"),
    ("steps", "DDIM sampling steps, 1..=1000 (default 50)"),
    (
        "seed",
        "seed for noise, keyframes and denoiser weights (default 0)",
    ),
    (
        "hlw_until",
        "latent warping runs while step/steps < this, in [0, 1] (default 0.2)",
    ),
    ("tome.r", "base merging ratio in [0, 1] (default 0.8)"),
    ("tome.delta", "annealing speed > 0 (default 1)"),
    (
        "tome.i_beg",
        "step where annealing starts (default 60% of steps)",
    ),
    (
        "tome.i_end",
        "step where the ratio reaches 0 (default steps)",
    ),
    (
        "tome.R",
        "spatial radius in squared token units > 0 (default 4)",
    ),
    ("tome.start", "first step with token merging (default 0)"),
    (
        "tome.stop",
        "one past the last step with token merging (default steps)",
    ),
    (
        "tome.down_mode",
        "down-block correspondence: flow | cosine | cosine_spatial (default flow)",
    ),
    (
        "tome.up_mode",
        "up-block correspondence: flow | cosine | cosine_spatial (default cosine_spatial)",
    ),
    ("flow.block", "block-matching patch size >= 1 (default 5)"),
    (
        "flow.search",
        "block-matching search radius in pixels (default 6)",
    ),
    (
        "flow.tau_occ",
        "occlusion threshold on forward-backward confidence, in (0, 1] (default 0.368)",
    ),
    (
        "latent_scale",
        "frame-to-latent downsampling factor >= 1 (default 4)",
    ),
];

/// Help text listing [`CONFIG_KEYS`].
pub fn config_help() -> String {
    let mut s =
        String::from("Config file keys (one `key = value` per line, `#` starts a comment):\n");
    for (k, d) in CONFIG_KEYS {
        let _ = writeln!(s, "  {k:<16} {d}");
    }
    s
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value `{value}` for {key}")))
}

impl Config {
    /// Parses the text format on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_num(key, value, line)?,
            "steps" => self.steps = parse_num(key, value, line)?,
            "seed" => self.seed = parse_num(key, value, line)?,
            "hlw_until" => self.hlw_until = parse_num(key, value, line)?,
            "tome.r" => self.tome.r = parse_num(key, value, line)?,
            "tome.delta" => self.tome.delta = parse_num(key, value, line)?,
            "tome.i_beg" => self.tome.i_beg = Some(parse_num(key, value, line)?),
            "tome.i_end" => self.tome.i_end = Some(parse_num(key, value, line)?),
            "tome.R" => self.tome.radius = parse_num(key, value, line)?,
            "tome.start" => self.tome.start = parse_num(key, value, line)?,
            "tome.stop" => self.tome.stop = Some(parse_num(key, value, line)?),
            "tome.down_mode" | "tome.up_mode" => {
                let mode = CorrMode::parse(value).ok_or_else(|| {
                    Error::Config(format!("line {line}: unknown mode `{value}` for {key}"))
                })?;
                if key == "tome.down_mode" {
                    self.tome.down_mode = mode;
                } else {
                    self.tome.up_mode = mode;
                }
            }
            "flow.block" => self.flow.block = parse_num(key, value, line)?,
            "flow.search" => self.flow.search = parse_num(key, value, line)?,
            "flow.tau_occ" => self.flow.tau_occ = parse_num(key, value, line)?,
            "latent_scale" => self.latent_scale = parse_num(key, value, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
        }
        Ok(())
    }

    /// Renders every key with its resolved value.
    pub fn to_text(&self) -> String {
        let (i_beg, i_end) = self.anneal_range();
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "hlw_until = {}", self.hlw_until);
        let _ = writeln!(s, "tome.r = {}", self.tome.r);
        let _ = writeln!(s, "tome.delta = {}", self.tome.delta);
        let _ = writeln!(s, "tome.i_beg = {i_beg}");
        let _ = writeln!(s, "tome.i_end = {i_end}");
        let _ = writeln!(s, "tome.R = {}", self.tome.radius);
        let _ = writeln!(s, "tome.start = {}", self.tome.start);
        let _ = writeln!(s, "tome.stop = {}", self.tome_stop());
        let _ = writeln!(s, "tome.down_mode = {}", self.tome.down_mode.name());
        let _ = writeln!(s, "tome.up_mode = {}", self.tome.up_mode.name());
        let _ = writeln!(s, "flow.block = {}", self.flow.block);
        let _ = writeln!(s, "flow.search = {}", self.flow.search);
        let _ = writeln!(s, "flow.tau_occ = {}", self.flow.tau_occ);
        let _ = writeln!(s, "latent_scale = {}", self.latent_scale);
        s
    }

    pub fn anneal_range(&self) -> (usize, usize) {
        let i_beg = self
            .tome
            .i_beg
            .unwrap_or_else(|| (0.6 * self.steps as f64).round() as usize);
        (i_beg, self.tome.i_end.unwrap_or(self.steps))
    }

    pub fn tome_stop(&self) -> usize {
        self.tome.stop.unwrap_or(self.steps)
    }

    pub fn anneal(&self) -> Result<AnnealParams> {
        let (i_beg, i_end) = self.anneal_range();
        AnnealParams::new(self.tome.r, self.tome.delta, i_beg, i_end)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Turns latent warping off.
    pub fn disable_hlw(&mut self) {
        self.hlw_until = 0.0;
    }

    /// Turns token merging off by emptying its step range.
    pub fn disable_tome(&mut self) {
        self.tome.start = 0;
        self.tome.stop = Some(0);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(1..=1000).contains(&self.steps) {
            return bad(format!("steps must be in [1, 1000], got {}", self.steps));
        }
        if !(0.0..=1.0).contains(&self.hlw_until) {
            return bad(format!(
                "hlw_until must be in [0, 1], got {}",
                self.hlw_until
            ));
        }
        let (_, i_end) = self.anneal_range();
        if i_end > self.steps {
            return bad(format!("tome.i_end {i_end} exceeds steps {}", self.steps));
        }
        self.anneal()?;
        if !(self.tome.radius > 0.0 && self.tome.radius.is_finite()) {
            return bad(format!("tome.R must be > 0, got {}", self.tome.radius));
        }
        let stop = self.tome_stop();
        if self.tome.start > stop || stop > self.steps {
            return bad(format!(
                "tome range [{}, {stop}) must lie within [0, {}]",
                self.tome.start, self.steps
            ));
        }
        if self.flow.block == 0 {
            return bad("flow.block must be >= 1".into());
        }
        if !(self.flow.tau_occ > 0.0 && self.flow.tau_occ <= 1.0) {
            return bad(format!(
                "flow.tau_occ must be in (0, 1], got {}",
                self.flow.tau_occ
            ));
        }
        if self.latent_scale == 0 {
            return bad("latent_scale must be >= 1".into());
        }
        Ok(())
    }
}
