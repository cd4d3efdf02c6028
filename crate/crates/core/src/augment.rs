//! Tumor-localized intensity augmentation: `α·I + β` inside the mask,
//! identity elsewhere, clamped to [0, 1]. Meant to run after any spatial
//! augmentation in a training pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{MaskVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub alpha_range: [f64; 2],
    pub beta_range: [f64; 2],
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            alpha_range: [0.5, 1.5],
            beta_range: [-0.2, 0.2],
            probability: 0.3,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.alpha_range;
        let [b0, b1] = self.beta_range;
        if !(a0 > 0.0 && a0 <= a1 && a1.is_finite()) {
            return Err(Error::invalid(format!("alpha range must be a positive interval, got [{a0}, {a1}]")));
        }
        if !(b0 <= b1 && b0.is_finite() && b1.is_finite()) {
            return Err(Error::invalid(format!("beta range must be an interval, got [{b0}, {b1}]")));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid(format!("probability must be in [0,1], got {}", self.probability)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOutcome {
    pub applied: bool,
    pub alpha: f64,
    pub beta: f64,
}

/// `α·I + β` clamped to [0, 1] on mask voxels; other voxels are copied.
pub fn apply_intensity(v: &Volume, m: &MaskVolume, alpha: f64, beta: f64) -> Result<Volume> {
    if !v.same_grid(m) {
        return Err(Error::GridMismatch(format!(
            "volume {:?}@{:?} vs mask {:?}@{:?}",
            v.shape, v.spacing_mm, m.shape, m.spacing_mm
        )));
    }
    let mut out = v.clone();
    for (x, inside) in out.data.iter_mut().zip(&m.data) {
        if *inside != 0 {
            *x = (alpha * *x as f64 + beta).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Seeded source of augmentation draws. Every call consumes the same amount
/// of randomness whether or not the perturbation is applied.
#[derive(Debug, Clone)]
pub struct TumorAugmenter {
    params: AugmentParams,
    rng: ChaCha8Rng,
}

impl TumorAugmenter {
    pub fn new(params: AugmentParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            params,
        })
    }

    pub fn draw(&mut self) -> AugmentOutcome {
        let u: f64 = self.rng.random();
        let alpha = uniform(&mut self.rng, self.params.alpha_range);
        let beta = uniform(&mut self.rng, self.params.beta_range);
        AugmentOutcome {
            applied: u < self.params.probability,
            alpha,
            beta,
        }
    }

    pub fn augment(&mut self, v: &Volume, m: &MaskVolume) -> Result<(Volume, AugmentOutcome)> {
        if !v.same_grid(m) {
            return Err(Error::GridMismatch(format!("volume {:?} vs mask {:?}", v.shape, m.shape)));
        }
        let mut out = self.draw();
        if m.count() == 0 {
            out.applied = false;
        }
        if !out.applied {
            return Ok((v.clone(), out));
        }
        Ok((apply_intensity(v, m, out.alpha, out.beta)?, out))
    }
}

/// One augmentation draw seeded from `p.seed`.
pub fn tumor_aware(v: &Volume, m: &MaskVolume, p: &AugmentParams) -> Result<(Volume, AugmentOutcome)> {
    TumorAugmenter::new(*p)?.augment(v, m)
}
