//! Synthetic test videos and the degradation applied before restoration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::video::FrameSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Content velocity `(vx, vy)` in pixels per frame.
    pub velocity: (f64, f64),
    /// Content rotation about the frame centre, radians per frame.
    pub angular: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            frames: 24,
            height: 44,
            width: 44,
            velocity: (0.75, 0.35),
            angular: 0.01,
            seed: 0,
        }
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

/// Smooth multi-frequency colour texture that translates and rotates
/// rigidly over time.
pub fn synthetic_video(p: &SynthParams) -> Result<FrameSequence> {
    if p.frames == 0 || p.height == 0 || p.width == 0 {
        return Err(Error::Parameter(
            "synthetic video needs frames, height and width >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let waves: Vec<Wave> = (0..7)
        .map(|_| {
            let freq = rng.random_range(0.12..0.55);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            Wave {
                kx: freq * dir.cos(),
                ky: freq * dir.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
            }
        })
        .collect();
    let norm = 1.0 / (waves.len() as f64).sqrt();
    let (cy, cx) = ((p.height as f64 - 1.0) / 2.0, (p.width as f64 - 1.0) / 2.0);
    let frames = (0..p.frames)
        .map(|t| {
            let t = t as f64;
            let (s, c) = (-p.angular * t).sin_cos();
            Grid::from_fn(p.height, p.width, 3, |y, x, k| {
                let dx = x as f64 - cx - p.velocity.0 * t;
                let dy = y as f64 - cy - p.velocity.1 * t;
                let wx = c * dx - s * dy;
                let wy = s * dx + c * dy;
                let v: f64 = waves
                    .iter()
                    .map(|w| w.amp[k] * (w.kx * wx + w.ky * wy + w.phase).sin())
                    .sum();
                1.0 / (1.0 + (-2.0 * v * norm).exp())
            })
        })
        .collect();
    FrameSequence::new(frames)
}

/// Area-downsamples every frame by `factor`, adds Gaussian noise of standard
/// deviation `sigma` (independently seeded per frame), clamps to `[0, 1]`
/// and upsamples bilinearly back to the original size.
pub fn degrade(seq: &FrameSequence, factor: usize, sigma: f64, seed: u64) -> Result<FrameSequence> {
    if factor == 0 {
        return Err(Error::Parameter("degradation factor must be >= 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let noise = Normal::new(0.0, sigma).expect("sigma checked");
    let (h, w) = seq.resolution();
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let mut low = f.area_downsample(factor);
            for v in low.data_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            low.resize_bilinear(h, w).map(|v| v.clamp(0.0, 1.0))
        })
        .collect();
    FrameSequence::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_is_deterministic_and_moves() {
        let p = SynthParams {
            frames: 3,
            ..SynthParams::default()
        };
        let a = synthetic_video(&p).unwrap();
        assert_eq!(a, synthetic_video(&p).unwrap());
        assert_eq!(a.resolution(), (44, 44));
        assert!(a.frames()[0].max_abs_diff(&a.frames()[1]) > 0.01);
        let other = synthetic_video(&SynthParams { seed: 1, ..p }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn pure_translation_is_a_shift() {
        let p = SynthParams {
            frames: 2,
            velocity: (2.0, 0.0),
            angular: 0.0,
            ..SynthParams::default()
        };
        let v = synthetic_video(&p).unwrap();
        let (f0, f1) = (&v.frames()[0], &v.frames()[1]);
        for y in 0..44 {
            for x in 2..44 {
                for k in 0..3 {
                    assert!((f1.get(y, x, k) - f0.get(y, x - 2, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degrade_keeps_shape_and_range() {
        let v = synthetic_video(&SynthParams {
            frames: 2,
            ..SynthParams::default()
        })
        .unwrap();
        let d = degrade(&v, 4, 0.05, 3).unwrap();
        assert_eq!(d.resolution(), v.resolution());
        assert_eq!(d, degrade(&v, 4, 0.05, 3).unwrap());
        assert!(degrade(&v, 0, 0.05, 3).is_err());
        assert!(degrade(&v, 4, -1.0, 3).is_err());
    }
}
