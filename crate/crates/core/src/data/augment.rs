//! Weak and strong augmentation pipelines.
//!
//! Weak: zero-padded random crop plus horizontal flip. Strong: integer
//! translation, per-channel brightness/contrast jitter, and a cutout
//! mask — a fixed shape-agnostic op set that works on synthetic and
//! grayscale data alike. Every draw comes from a stream keyed by
//! (policy seed, kind, epoch, example index), so augmentation is
//! bit-exactly reproducible and trivially parallel.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Identity,
    Weak,
    Strong,
}

/// Augmentation parameters. `seed` keys the per-(epoch, index) streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: AugKind,
    /// Weak: zero padding before the random crop, in pixels.
    pub crop_padding: usize,
    /// Weak: horizontal flip probability.
    pub flip_prob: f64,
    /// Strong: maximum absolute translation, in pixels.
    pub translate_max: usize,
    /// Strong: additive per-channel brightness amplitude.
    pub brightness_jitter: f64,
    /// Strong: multiplicative per-channel contrast amplitude around the
    /// channel mean.
    pub contrast_jitter: f64,
    /// Strong: cutout square side as a fraction of min(height, width).
    pub cutout_fraction: f64,
    pub seed: u64,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            kind: AugKind::Identity,
            crop_padding: 0,
            flip_prob: 0.0,
            translate_max: 0,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            cutout_fraction: 0.0,
            seed: 0,
        }
    }

    /// Random crop with padding and horizontal flip.
    pub fn weak(crop_padding: usize, flip_prob: f64, seed: u64) -> Self {
        Self {
            kind: AugKind::Weak,
            crop_padding,
            flip_prob,
            translate_max: 0,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            cutout_fraction: 0.0,
            seed,
        }
    }

    /// Default strong policy: ±2px translation, ±0.25 brightness,
    /// ±0.5 contrast, cutout of a third of the short side.
    pub fn strong(seed: u64) -> Self {
        Self {
            kind: AugKind::Strong,
            crop_padding: 0,
            flip_prob: 0.5,
            translate_max: 2,
            brightness_jitter: 0.25,
            contrast_jitter: 0.5,
            cutout_fraction: 0.34,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn stream_tag(&self) -> u64 {
        match self.kind {
            AugKind::Identity => 0,
            AugKind::Weak => tag::AUGMENT_WEAK,
            AugKind::Strong => tag::AUGMENT_STRONG,
        }
    }
}

/// Augment one [C, H, W] image. Output stays in [0, 1] with the input
/// shape; the identity policy returns the input unchanged.
pub fn augment(
    x: &Array3<f32>,
    policy: &AugmentationPolicy,
    epoch: usize,
    index: usize,
) -> Result<Array3<f32>> {
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("augment input outside [0, 1]"));
    }
    if policy.kind == AugKind::Identity {
        return Ok(x.clone());
    }
    let mut rng = derive_rng(
        policy.seed,
        &[policy.stream_tag(), epoch as u64, index as u64],
    );
    let mut out = x.clone();
    match policy.kind {
        AugKind::Identity => unreachable!(),
        AugKind::Weak => {
            let p = policy.crop_padding;
            let dy = rng.gen_range(0..=2 * p) as isize - p as isize;
            let dx = rng.gen_range(0..=2 * p) as isize - p as isize;
            if dy != 0 || dx != 0 {
                out = shift(&out, dy, dx);
            }
            if rng.gen_bool(policy.flip_prob) {
                out = hflip(&out);
            }
        }
        AugKind::Strong => {
            let t = policy.translate_max as isize;
            let dy = rng.gen_range(-t..=t);
            let dx = rng.gen_range(-t..=t);
            if dy != 0 || dx != 0 {
                out = shift(&out, dy, dx);
            }
            let (c, h, w) = out.dim();
            for ci in 0..c {
                let b = rng.gen_range(-policy.brightness_jitter..=policy.brightness_jitter) as f32;
                let g =
                    1.0 + rng.gen_range(-policy.contrast_jitter..=policy.contrast_jitter) as f32;
                let mut chan = out.index_axis_mut(ndarray::Axis(0), ci);
                let mean = chan.iter().sum::<f32>() / (h * w) as f32;
                for v in chan.iter_mut() {
                    *v = (mean + (*v - mean) * g + b).clamp(0.0, 1.0);
                }
            }
            let side = ((h.min(w) as f64) * policy.cutout_fraction).round() as usize;
            if side > 0 {
                let cy = rng.gen_range(0..h);
                let cx = rng.gen_range(0..w);
                let y0 = cy.saturating_sub(side / 2);
                let x0 = cx.saturating_sub(side / 2);
                let y1 = (y0 + side).min(h);
                let x1 = (x0 + side).min(w);
                for ci in 0..c {
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            out[[ci, yy, xx]] = 0.5;
                        }
                    }
                }
            }
        }
    }
    debug_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    Ok(out)
}

/// Translate by (dy, dx), zero-filling uncovered pixels.
fn shift(x: &Array3<f32>, dy: isize, dx: isize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h as isize {
            let sy = y - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xx in 0..w as isize {
                let sx = xx - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[[ci, y as usize, xx as usize]] = x[[ci, sy as usize, sx as usize]];
            }
        }
    }
    out
}

fn hflip(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, xx)| x[[ci, y, w - 1 - xx]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Array3<f32> {
        Array3::from_shape_fn((2, 5, 5), |(c, i, j)| ((c + 2 * i + 3 * j) % 9) as f32 / 9.0)
    }

    #[test]
    fn identity_is_bit_exact() {
        let x = sample();
        let out = augment(&x, &AugmentationPolicy::identity(), 3, 17).unwrap();
        assert_eq!(x, out);
    }

    #[test]
    fn degenerate_weak_is_identity() {
        let x = sample();
        let policy = AugmentationPolicy::weak(0, 0.0, 5);
        let out = augment(&x, &policy, 0, 0).unwrap();
        assert_eq!(x, out);
    }

    #[test]
    fn fixed_stream_reproduces_bit_exactly() {
        let x = sample();
        for policy in [
            AugmentationPolicy::weak(2, 0.5, 9),
            AugmentationPolicy::strong(9),
        ] {
            let a = augment(&x, &policy, 4, 123).unwrap();
            let b = augment(&x, &policy, 4, 123).unwrap();
            assert_eq!(a, b);
            let c = augment(&x, &policy, 5, 123).unwrap();
            // different epoch gives an independent draw; with 5×5 inputs a
            // collision with the epoch-4 output is overwhelmingly unlikely
            // for the strong policy but possible for weak, so only check
            // reproducibility strictly.
            let _ = c;
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let x = sample();
        for policy in [
            AugmentationPolicy::weak(2, 0.5, 1),
            AugmentationPolicy::strong(1),
        ] {
            for idx in 0..50 {
                let out = augment(&x, &policy, 0, idx).unwrap();
                assert_eq!(out.dim(), x.dim());
                assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn rejects_out_of_range_input() {
        let mut x = sample();
        x[[0, 0, 0]] = 2.0;
        assert!(augment(&x, &AugmentationPolicy::identity(), 0, 0).is_err());
    }

    #[test]
    fn flip_reverses_columns() {
        let x = sample();
        let flipped = hflip(&x);
        assert_eq!(flipped[[0, 2, 0]], x[[0, 2, 4]]);
        assert_eq!(hflip(&flipped), x);
    }
}
