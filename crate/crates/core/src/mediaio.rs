//! Readers and writers for frames (binary PNM), flows (Middlebury `.flo`),
//! raw tensors (`RTF1`) and JSON metric reports.
//!
//! Every writer goes through a temporary file in the destination directory
//! that is renamed into place once fully written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::grid::Grid;
use crate::metrics::MetricsReport;
use crate::video::FrameSequence;

/// Middlebury tag: the bytes `PIEH`, i.e. the little-endian f32 202021.25.
pub const FLO_MAGIC: f32 = 202021.25;
pub const RTF_MAGIC: &[u8; 4] = b"RTF1";

/// Writes `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// Lists PNM files of a directory in lexicographic filename order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_pnm(&path) {
            paths.push(path);
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(paths)
}

pub fn read_frames(dir: &Path) -> Result<FrameSequence> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for path in &paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let frame = decode_pnm(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(first) = frames.first() {
            let first: &Grid = first;
            if first.shape() != frame.shape() {
                return Err(Error::Shape(format!(
                    "{} is {:?}, earlier frames are {:?}",
                    path.display(),
                    frame.shape(),
                    first.shape()
                )));
            }
        }
        frames.push(frame);
    }
    FrameSequence::new(frames)
}

/// Writes `frame_00000.ppm`, `frame_00001.ppm`, ... into `dir` (created if
/// missing).
pub fn write_frames(seq: &FrameSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames().iter().enumerate() {
        let path = dir.join(format!("frame_{i:05}.ppm"));
        write_atomic(&path, &encode_ppm(frame))?;
    }
    Ok(())
}

/// Decodes binary PGM (P5) or PPM (P6) with maxval 255. Gray input is
/// replicated into three channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_slice() {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported PNM magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = parse_header_number(bytes, &mut pos)?;
    let height = parse_header_number(bytes, &mut pos)?;
    let maxval = parse_header_number(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PNM dimensions must be non-zero".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!(
            "PNM maxval must be 255, got {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after PNM header".into())),
    }
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Format(format!(
            "PNM raster truncated: need {need} bytes, found {}",
            raster.len()
        )));
    }
    let mut grid = Grid::zeros(height, width, 3);
    for (i, px) in grid.data_mut().chunks_exact_mut(3).enumerate() {
        if channels == 1 {
            px.fill(raster[i] as f64 / 255.0);
        } else {
            for k in 0..3 {
                px[k] = raster[i * 3 + k] as f64 / 255.0;
            }
        }
    }
    Ok(grid)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("PNM header truncated".into())),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() || *b == b'#' {
            break;
        }
        *pos += 1;
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::Format(format!(
                "bad PNM header field {:?}",
                String::from_utf8_lossy(&tok)
            ))
        })
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes an RGB grid as binary PPM (P6); values are `round(v * 255)`
/// clamped to `[0, 255]`.
pub fn encode_ppm(frame: &Grid) -> Vec<u8> {
    assert_eq!(frame.channels(), 3, "PPM frames carry three channels");
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.data().iter().map(|&v| quantize(v)));
    out
}

/// Encodes a single-channel grid as binary PGM (P5).
pub fn encode_pgm(gray: &Grid) -> Vec<u8> {
    assert_eq!(gray.channels(), 1, "PGM frames carry one channel");
    let mut out = format!("P5\n{} {}\n255\n", gray.width(), gray.height()).into_bytes();
    out.extend(gray.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.resolution();
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for &d in flow.grid().data() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Length(format!(
            ".flo header needs 12 bytes, got {}",
            bytes.len()
        )));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {magic}")));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!(
            ".flo dimensions {w}x{h} must be non-zero"
        )));
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format(".flo dimensions overflow".into()))?;
    let payload = &bytes[12..];
    if payload.len() != need {
        return Err(Error::Length(format!(
            ".flo payload for {w}x{h} needs {need} bytes, got {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FlowField::new(Grid::from_vec(h, w, 2, data)?)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    write_atomic(path, &encode_flo(flow))
}

/// N-dimensional little-endian `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Length(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(RawTensor { dims, data })
    }

    /// `(h, w, c)` tensor from a grid, narrowed to `f32`.
    pub fn from_grid(grid: &Grid) -> Self {
        let (h, w, c) = grid.shape();
        RawTensor {
            dims: vec![h, w, c],
            data: grid.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_grid(&self) -> Result<Grid> {
        match self.dims.as_slice() {
            &[h, w, c] => Grid::from_vec(h, w, c, self.data.iter().map(|&v| v as f64).collect()),
            &[h, w] => Grid::from_vec(h, w, 1, self.data.iter().map(|&v| v as f64).collect()),
            d => Err(Error::Shape(format!("tensor of dims {d:?} is not a grid"))),
        }
    }
}

pub fn encode_rtf(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(RTF_MAGIC);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_rtf(bytes: &[u8]) -> Result<RawTensor> {
    if bytes.len() < 8 {
        return Err(Error::Length("RTF header truncated".into()));
    }
    if &bytes[0..4] != RTF_MAGIC {
        return Err(Error::Format("bad RTF magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dims_end = 8 + rank * 4;
    if bytes.len() < dims_end {
        return Err(Error::Length("RTF dims truncated".into()));
    }
    let dims: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("RTF dims overflow".into()))?;
    let payload = &bytes[dims_end..];
    if payload.len() != n * 4 {
        return Err(Error::Length(format!(
            "RTF payload for {dims:?} needs {} bytes, got {}",
            n * 4,
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("RTF payload holds a non-finite value".into()));
    }
    Ok(RawTensor { dims, data })
}

pub fn read_rtf(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rtf(&bytes)
}

pub fn write_rtf(t: &RawTensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_rtf(t))
}

/// Pretty-printed JSON; fails on NaN or negative infinity anywhere in the
/// report.
pub fn report_to_json(report: &MetricsReport) -> Result<String> {
    report.check_finite()?;
    serde_json::to_string_pretty(report).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut text = report_to_json(report)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
}
