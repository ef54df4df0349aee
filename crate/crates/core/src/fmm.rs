//! Frequency mixing: target-styled, source-labelled images built by taking
//! the low DCT band from a target image and the high band from a source.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{Image, Plane};
use crate::spectral::{apply_mask, dct2, idct2, make_band_mask, BandMask, Spectrum, DEFAULT_LOW_FRACTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    /// Per-axis fraction of the DCT grid taken from the target.
    pub low_fraction: f64,
    /// Probability that a training sample is replaced by a mixed one.
    pub replace_prob: f64,
    /// Clamp mixed pixels to `[0,1]`.
    pub clip_output: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            low_fraction: DEFAULT_LOW_FRACTION,
            replace_prob: 0.5,
            clip_output: true,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.low_fraction) {
            return Err(Error::Config(format!(
                "mix.low_fraction {} outside [0, 1]",
                self.low_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(Error::Config(format!(
                "mix.replace_prob {} outside [0, 1]",
                self.replace_prob
            )));
        }
        Ok(())
    }
}

fn check_unit_range(img: &Image, what: &str) -> Result<()> {
    if img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has values outside [0, 1]")))
    }
}

/// `idct2(low ⊙ T + high ⊙ S)` from precomputed spectra; no clipping.
pub fn mix_spectra(source: &Spectrum, target: &Spectrum, band: &BandMask) -> Result<Plane> {
    if source.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "source {:?} vs target {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let low = apply_mask(target, band.low())?;
    let high = apply_mask(source, band.high())?;
    idct2(&low.add(&high)?)
}

/// Mixed image before clipping.
pub fn mix_unclipped(source: &Image, target: &Image, low_fraction: f64) -> Result<Plane> {
    if source.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "source {:?} vs target {:?}",
            source.shape(),
            target.shape()
        )));
    }
    check_unit_range(source, "source")?;
    check_unit_range(target, "target")?;
    let (h, w) = source.shape();
    let band = make_band_mask(h, w, low_fraction)?;
    mix_spectra(&dct2(source)?, &dct2(target)?, &band)
}

/// Target-styled version of `source`; carries the source's label.
pub fn mix(source: &Image, target: &Image, cfg: &MixConfig) -> Result<Image> {
    cfg.validate()?;
    let out = mix_unclipped(source, target, cfg.low_fraction)?;
    Ok(if cfg.clip_output { out.clamp01() } else { out })
}

/// The replacement draw used everywhere mixing is stochastic. For each
/// sample in order: draw `u ~ U[0,1)`; if `u < p`, draw a target index
/// uniformly from `0..n_targets` (with replacement across samples).
pub fn plan_replacements<R: Rng>(n: usize, n_targets: usize, p: f64, rng: &mut R) -> Vec<Option<usize>> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            (u < p).then(|| rng.gen_range(0..n_targets))
        })
        .collect()
}

/// Replaces each source independently with probability `replace_prob` by a
/// mix with a uniformly drawn target. Labels are passed through untouched.
/// The stream is `ChaCha8Rng::seed_from_u64(rng_seed)` consumed by
/// [`plan_replacements`].
pub fn mix_batch(
    sources: &[(Image, usize)],
    targets: &[Image],
    cfg: &MixConfig,
    rng_seed: u64,
) -> Result<Vec<(Image, usize)>> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty target pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let plan = plan_replacements(sources.len(), targets.len(), cfg.replace_prob, &mut rng);
    sources
        .iter()
        .zip(plan)
        .map(|((img, label), pick)| match pick {
            Some(j) => Ok((mix(img, &targets[j], cfg)?, *label)),
            None => Ok((img.clone(), *label)),
        })
        .collect()
}

/// Squared DCT-coefficient energy inside and outside the low band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub low_energy: f64,
    pub high_energy: f64,
}

impl EnergyReport {
    pub fn total(&self) -> f64 {
        self.low_energy + self.high_energy
    }
}

pub fn spectral_energy_report(img: &Image, low_fraction: f64) -> Result<EnergyReport> {
    check_unit_range(img, "image")?;
    band_energies(img, low_fraction)
}

/// Band energies of an arbitrary finite plane (no range check).
pub fn band_energies(x: &Plane, low_fraction: f64) -> Result<EnergyReport> {
    let (h, w) = x.shape();
    let band = make_band_mask(h, w, low_fraction)?;
    let s = dct2(x)?;
    let mut low = 0.0;
    let mut high = 0.0;
    for u in 0..h {
        for v in 0..w {
            let c = s.coeffs().get(u, v);
            if band.in_low_band(u, v) {
                low += c * c;
            } else {
                high += c * c;
            }
        }
    }
    Ok(EnergyReport {
        low_energy: low,
        high_energy: high,
    })
}
