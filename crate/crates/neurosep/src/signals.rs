//! Core waveform math: mixture construction, SI-SDR / SDR, power helpers.
//!
//! Everything in this module is a pure function over `f64` samples; the rest
//! of the crate builds on (and is tested against) these definitions.

use crate::error::{Error, Result};

/// Fixed audio sample rate for the whole artifact.
pub const SAMPLE_RATE: u32 = 8000;

/// Guard for degenerate ratios in SI-SDR / SDR.
pub const EPS: f64 = 1e-8;

/// Cap (and floor, negated) for SI-SDR / SDR in dB.
pub const CAP_DB: f64 = 100.0;

/// Mono waveform at a fixed sample rate.
///
/// Invariants: finite samples, length >= 1, rate > 0. `new` validates them.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::DegenerateSignal("empty waveform".into()));
        }
        if rate == 0 {
            return Err(Error::DegenerateSignal("zero sample rate".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::DegenerateSignal("non-finite sample".into()));
        }
        Ok(Self { samples, rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    /// Mean squared amplitude over the full window (no silence trimming).
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn crop(&self, start: usize, len: usize) -> Result<AudioSignal> {
        if start + len > self.samples.len() || len == 0 {
            return Err(Error::Data(format!(
                "crop [{start}, {}) out of bounds for signal of length {}",
                start + len,
                self.samples.len()
            )));
        }
        Ok(AudioSignal {
            samples: self.samples[start..start + len].to_vec(),
            rate: self.rate,
        })
    }
}

pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn sum_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_equal_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Scales the interferer so that 10*log10(P_target / P_interferer) == `snr_db`
/// and returns `(target + scaled_interferer, scaled_interferer)`.
///
/// The target is never rescaled, so loss references stay fixed.
pub fn mix_at_snr(
    target: &AudioSignal,
    interferer: &AudioSignal,
    snr_db: f64,
) -> Result<(AudioSignal, AudioSignal)> {
    check_equal_len(&target.samples, &interferer.samples)?;
    if target.rate != interferer.rate {
        return Err(Error::Data(format!(
            "sample-rate mismatch: {} vs {}",
            target.rate, interferer.rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Data(format!("non-finite snr {snr_db}")));
    }
    let p_t = target.power();
    let p_i = interferer.power();
    if p_t <= 0.0 || p_i <= 0.0 {
        return Err(Error::DegenerateSignal(
            "zero-power input to mix_at_snr".into(),
        ));
    }
    let gain = (p_t / p_i).sqrt() * 10f64.powf(-snr_db / 20.0);
    let scaled: Vec<f64> = interferer.samples.iter().map(|s| s * gain).collect();
    let mixture: Vec<f64> = target
        .samples
        .iter()
        .zip(&scaled)
        .map(|(t, i)| t + i)
        .collect();
    Ok((
        AudioSignal {
            samples: mixture,
            rate: target.rate,
        },
        AudioSignal {
            samples: scaled,
            rate: target.rate,
        },
    ))
}

/// Scale-invariant SDR in dB over raw slices.
///
/// The regular path is the plain projection formula, so it is exactly
/// scale invariant; `EPS`-relative branches handle the degenerate cases:
/// a vanished error term returns `CAP_DB`, a vanished projection (zero or
/// orthogonal estimate) returns `-CAP_DB`.
pub fn si_sdr_slice(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_equal_len(reference, estimate)?;
    let ref_energy = sum_square(reference);
    if ref_energy <= 0.0 {
        return Err(Error::DegenerateSignal("zero-power reference".into()));
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let proj_energy = alpha * alpha * ref_energy;
    let err_energy: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    if proj_energy <= EPS * err_energy {
        // Zero or (numerically) orthogonal estimate.
        return Ok(-CAP_DB);
    }
    if err_energy <= EPS * proj_energy {
        return Ok(CAP_DB);
    }
    Ok((10.0 * (proj_energy / err_energy).log10()).clamp(-CAP_DB, CAP_DB))
}

/// Plain (scale-dependent) SDR in dB: 10*log10(||s||^2 / ||s - s_hat||^2).
pub fn sdr_slice(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_equal_len(reference, estimate)?;
    let ref_energy = sum_square(reference);
    if ref_energy <= 0.0 {
        return Err(Error::DegenerateSignal("zero-power reference".into()));
    }
    let err_energy: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| {
            let d = r - e;
            d * d
        })
        .sum();
    if err_energy <= EPS * ref_energy {
        return Ok(CAP_DB);
    }
    Ok((10.0 * (ref_energy / err_energy).log10()).clamp(-CAP_DB, CAP_DB))
}

pub fn si_sdr(reference: &AudioSignal, estimate: &AudioSignal) -> Result<f64> {
    si_sdr_slice(&reference.samples, &estimate.samples)
}

pub fn sdr(reference: &AudioSignal, estimate: &AudioSignal) -> Result<f64> {
    sdr_slice(&reference.samples, &estimate.samples)
}
