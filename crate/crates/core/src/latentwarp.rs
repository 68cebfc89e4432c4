//! Hierarchical latent warping.
//!
//! Predicted clean latents are first pulled along the keyframe chain (each
//! keyframe from its already-updated predecessor), then pushed from every
//! keyframe into the other members of its batch. Occluded pixels (`M = 1`)
//! keep their own value.

use crate::error::{Error, Result};
use crate::flow::{warp, FlowField, OcclusionMask};
use crate::grid::Grid;

/// One frame's latent at a denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: Grid,
    pub frame_index: usize,
    pub step: usize,
}

impl LatentGrid {
    pub fn new(data: Grid, frame_index: usize, step: usize) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::Format(format!(
                "latent for frame {frame_index} holds a non-finite value"
            )));
        }
        Ok(LatentGrid {
            data,
            frame_index,
            step,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.data.height(), self.data.width())
    }

    fn with_data(&self, data: Grid) -> LatentGrid {
        LatentGrid {
            data,
            frame_index: self.frame_index,
            step: self.step,
        }
    }
}

/// `(x_t - sqrt(1 - abar) * eps) / sqrt(abar)`.
pub fn predict_x0(x_t: &LatentGrid, eps: &LatentGrid, abar_t: f64) -> Result<LatentGrid> {
    if !(abar_t > 0.0 && abar_t <= 1.0) {
        return Err(Error::Parameter(format!(
            "abar must be in (0, 1], got {abar_t}"
        )));
    }
    let a = abar_t.sqrt();
    let b = (1.0 - abar_t).sqrt();
    let data = x_t.data.zip_with(&eps.data, |x, e| (x - b * e) / a)?;
    Ok(x_t.with_data(data))
}

/// `M * own + (1 - M) * W(source, flow)`, with `flow` on `own`'s grid
/// pointing into `source`.
pub fn warp_blend(
    own: &Grid,
    source: &Grid,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<Grid> {
    let (h, w, c) = own.shape();
    if source.shape() != (h, w, c) || flow.resolution() != (h, w) || mask.resolution() != (h, w) {
        return Err(Error::Shape(format!(
            "latent {:?}, source {:?}, flow {:?} and mask {:?} must share a resolution",
            own.shape(),
            source.shape(),
            flow.resolution(),
            mask.resolution()
        )));
    }
    let warped = warp(source, flow)?;
    let mut out = own.clone();
    for y in 0..h {
        for x in 0..w {
            let m = mask.value(y, x);
            let wp = warped.pixel(y, x);
            for (o, &s) in out.pixel_mut(y, x).iter_mut().zip(wp) {
                *o = m * *o + (1.0 - m) * s;
            }
        }
    }
    Ok(out)
}

/// Warps each keyframe from its updated predecessor. `flows[i - 1]` and
/// `masks[i - 1]` relate keyframe `i` to keyframe `i - 1`.
pub fn warp_keyframe_chain(
    keyframes: &[LatentGrid],
    flows: &[FlowField],
    masks: &[OcclusionMask],
) -> Result<Vec<LatentGrid>> {
    let n = keyframes.len();
    if flows.len() + 1 != n.max(1) || masks.len() != flows.len() {
        return Err(Error::Config(format!(
            "{n} keyframes need {} flows and masks, got {} and {}",
            n.saturating_sub(1),
            flows.len(),
            masks.len()
        )));
    }
    let mut out: Vec<LatentGrid> = Vec::with_capacity(n);
    for (i, kf) in keyframes.iter().enumerate() {
        if i == 0 {
            out.push(kf.clone());
            continue;
        }
        let data = warp_blend(&kf.data, &out[i - 1].data, &flows[i - 1], &masks[i - 1])?;
        out.push(kf.with_data(data));
    }
    Ok(out)
}

/// Warps every non-keyframe member directly from the keyframe. `flows[m]`
/// and `masks[m]` belong to `batch[m]`; entries for the keyframe itself (or
/// any member whose frame index equals the keyframe's) are ignored and may
/// be `None`.
pub fn propagate_to_batch(
    keyframe: &LatentGrid,
    batch: &[LatentGrid],
    flows: &[Option<FlowField>],
    masks: &[Option<OcclusionMask>],
) -> Result<Vec<LatentGrid>> {
    if flows.len() != batch.len() || masks.len() != batch.len() {
        return Err(Error::Config(format!(
            "batch of {} needs as many flows and masks, got {} and {}",
            batch.len(),
            flows.len(),
            masks.len()
        )));
    }
    batch
        .iter()
        .zip(flows.iter().zip(masks))
        .map(|(member, (flow, mask))| {
            if member.frame_index == keyframe.frame_index {
                return Ok(member.clone());
            }
            match (flow, mask) {
                (Some(f), Some(m)) => {
                    Ok(member.with_data(warp_blend(&member.data, &keyframe.data, f, m)?))
                }
                _ => Err(Error::Config(format!(
                    "no flow or mask for batch member {}",
                    member.frame_index
                ))),
            }
        })
        .collect()
}

/// Writes a modified clean-latent estimate back by re-noising with the
/// step's predicted noise: `sqrt(abar) * x0 + sqrt(1 - abar) * eps`.
pub fn renoise(x0: &LatentGrid, eps: &LatentGrid, abar_t: f64) -> Result<LatentGrid> {
    if !(abar_t > 0.0 && abar_t <= 1.0) {
        return Err(Error::Parameter(format!(
            "abar must be in (0, 1], got {abar_t}"
        )));
    }
    let a = abar_t.sqrt();
    let b = (1.0 - abar_t).sqrt();
    let data = x0.data.zip_with(&eps.data, |x, e| a * x + b * e)?;
    Ok(x0.with_data(data))
}
