use crate::error::{Error, Result};
use crate::grid::Grid;

/// Ordered RGB frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Grid>,
    /// Informational only; never used in computation.
    pub frame_rate: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Grid>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("frame sequence is empty".into()))?;
        let (h, w, c) = first.shape();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "frames must be (h >= 1, w >= 1, 3), got ({h}, {w}, {c})"
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != (h, w, c) {
                return Err(Error::Shape(format!(
                    "frame {i} has shape {:?}, expected {:?}",
                    f.shape(),
                    (h, w, c)
                )));
            }
            if let Some(v) = f.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Format(format!(
                    "frame {i} holds value {v} outside [0, 1]"
                )));
            }
        }
        Ok(FrameSequence {
            frames,
            frame_rate: None,
        })
    }

    pub fn frames(&self) -> &[Grid] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Grid> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` shared by every frame.
    pub fn resolution(&self) -> (usize, usize) {
        (self.frames[0].height(), self.frames[0].width())
    }
}
