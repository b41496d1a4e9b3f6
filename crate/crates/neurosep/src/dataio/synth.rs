//! Synthetic cocktail-party generator.
//!
//! Stimuli are amplitude-modulated filtered noise with syllabic-rate (2-8 Hz)
//! envelopes. EEG channels are random spatial mixings of the attended
//! envelope (weight `attn_gain`), the unattended envelope (weight
//! `attn_gain / 4`) and per-channel pink noise, sampled at the EEG processing
//! rate. With `attn_gain = 0` the EEG carries no attention information by
//! construction.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::seeds::{rng_for, TAG_SYNTH};
use crate::dataio::{samples_per_frame, EEGSignal, Trial, TrialSet};
use crate::error::{Error, Result};
use crate::signals::{AudioSignal, SAMPLE_RATE};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_subjects: u32,
    pub n_trials: u32,
    pub duration_s: f64,
    pub eeg_channels: usize,
    pub eeg_rate: f64,
    /// Strength of the attended envelope in the EEG, in [0, 1].
    pub attn_gain: f64,
    /// Pink-noise level added to every channel.
    pub noise_level: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 2,
            n_trials: 4,
            duration_s: 30.0,
            eeg_channels: 16,
            eeg_rate: SAMPLE_RATE as f64 / 60.0,
            attn_gain: 1.0,
            noise_level: 0.3,
        }
    }
}

/// Generates a fully reproducible trial set: same seed, same bits.
pub fn synth_cocktail(cfg: &SynthConfig, seed: u64) -> Result<TrialSet> {
    if cfg.duration_s <= 0.0 {
        return Err(Error::Config("non-positive trial duration".into()));
    }
    if cfg.eeg_channels == 0 {
        return Err(Error::Config("EEG channel count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.attn_gain) {
        return Err(Error::Config(format!(
            "attn_gain {} outside [0, 1]",
            cfg.attn_gain
        )));
    }
    if cfg.noise_level < 0.0 {
        return Err(Error::Config("negative noise_level".into()));
    }
    let spf = samples_per_frame(SAMPLE_RATE, cfg.eeg_rate)?;
    // Trial length snapped to whole EEG frames.
    let n_frames = ((cfg.duration_s * SAMPLE_RATE as f64 / spf as f64).round() as usize).max(1);
    let n_samples = n_frames * spf;

    let leak_gain = cfg.attn_gain / 4.0;
    let mut trials = Vec::new();
    for subject in 0..cfg.n_subjects {
        for trial in 0..cfg.n_trials {
            let mut rng = rng_for(seed, &[TAG_SYNTH, subject as u64, trial as u64]);
            let attended = speechlike_stimulus(&mut rng, n_samples);
            let unattended = speechlike_stimulus(&mut rng, n_samples);
            let env_att = standardized_envelope(&attended, spf, n_frames);
            let env_un = standardized_envelope(&unattended, spf, n_frames);

            let mut channels = Array2::zeros((cfg.eeg_channels, n_frames));
            for c in 0..cfg.eeg_channels {
                let w_att: f64 = rng.gen_range(-1.0..1.0);
                let w_un: f64 = rng.gen_range(-1.0..1.0);
                let pink = standardized_pink(&mut rng, n_frames);
                for f in 0..n_frames {
                    channels[[c, f]] = w_att * cfg.attn_gain * env_att[f]
                        + w_un * leak_gain * env_un[f]
                        + cfg.noise_level * pink[f];
                }
            }

            trials.push(Trial {
                subject,
                trial,
                attended: AudioSignal {
                    samples: attended,
                    rate: SAMPLE_RATE,
                },
                unattended: AudioSignal {
                    samples: unattended,
                    rate: SAMPLE_RATE,
                },
                eeg: EEGSignal::new(channels, cfg.eeg_rate)?,
                attended_label: (rng.gen::<bool>()) as u8,
            });
        }
    }
    Ok(TrialSet {
        trials,
        eeg_rate: cfg.eeg_rate,
    })
}

/// Filtered-noise carrier modulated by a 2-8 Hz envelope; unit RMS * 0.1.
fn speechlike_stimulus(rng: &mut ChaCha8Rng, n_samples: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    // Syllabic envelope: three random sinusoids in 2-8 Hz, half-rectified.
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(2.0..8.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let amp_sum: f64 = comps.iter().map(|c| c.2).sum();

    // Speech-band carrier: white noise through a crude 300-3400 Hz bandpass
    // (difference of one-pole low-passes).
    let alpha_hi = 1.0 - (-std::f64::consts::TAU * 3400.0 / fs).exp();
    let alpha_lo = 1.0 - (-std::f64::consts::TAU * 300.0 / fs).exp();
    let mut lp_hi = 0.0;
    let mut lp_lo = 0.0;

    let mut out = Vec::with_capacity(n_samples);
    let mut energy = 0.0;
    for n in 0..n_samples {
        let t = n as f64 / fs;
        let raw: f64 = comps
            .iter()
            .map(|(f, p, a)| a * (std::f64::consts::TAU * f * t + p).sin())
            .sum::<f64>()
            / amp_sum;
        let env = (0.5 + 0.6 * raw).max(0.0);
        let white: f64 = rng.gen_range(-1.0..1.0);
        lp_hi += alpha_hi * (white - lp_hi);
        lp_lo += alpha_lo * (white - lp_lo);
        let carrier = lp_hi - lp_lo;
        let s = env * carrier;
        energy += s * s;
        out.push(s);
    }
    let rms = (energy / n_samples as f64).sqrt().max(1e-12);
    let gain = 0.1 / rms;
    for s in &mut out {
        *s *= gain;
    }
    out
}

/// Block-mean |x| envelope at the EEG rate, standardized to zero mean and
/// unit variance over the trial.
fn standardized_envelope(stim: &[f64], spf: usize, n_frames: usize) -> Vec<f64> {
    let mut env: Vec<f64> = (0..n_frames)
        .map(|f| {
            stim[f * spf..(f + 1) * spf]
                .iter()
                .map(|s| s.abs())
                .sum::<f64>()
                / spf as f64
        })
        .collect();
    standardize(&mut env);
    env
}

/// Paul Kellet's economy pink-noise filter, standardized.
fn standardized_pink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let white: f64 = rng.gen_range(-1.0..1.0);
            b0 = 0.99765 * b0 + white * 0.0990460;
            b1 = 0.96300 * b1 + white * 0.2965164;
            b2 = 0.57000 * b2 + white * 1.0526913;
            b0 + b1 + b2 + white * 0.1848
        })
        .collect();
    standardize(&mut out);
    out
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let istd = 1.0 / var.sqrt().max(1e-12);
    for v in x.iter_mut() {
        *v = (*v - mean) * istd;
    }
}

/// Pearson correlation helper used by the generator tests.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(attn_gain: f64, noise_level: f64) -> SynthConfig {
        SynthConfig {
            n_subjects: 1,
            n_trials: 2,
            duration_s: 4.0,
            eeg_channels: 4,
            attn_gain,
            noise_level,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small_cfg(0.8, 0.3);
        let a = synth_cocktail(&cfg, 123).unwrap();
        let b = synth_cocktail(&cfg, 123).unwrap();
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(ta.attended.samples, tb.attended.samples);
            assert_eq!(ta.unattended.samples, tb.unattended.samples);
            assert_eq!(ta.eeg.channels, tb.eeg.channels);
            assert_eq!(ta.attended_label, tb.attended_label);
        }
        let c = synth_cocktail(&cfg, 124).unwrap();
        assert_ne!(
            a.trials[0].attended.samples,
            c.trials[0].attended.samples
        );
    }

    #[test]
    fn paired_samples_satisfy_invariants() {
        let set = synth_cocktail(&small_cfg(1.0, 0.2), 5).unwrap();
        for trial in &set.trials {
            trial.paired_full().validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small_cfg(0.5, 0.1);
        cfg.duration_s = 0.0;
        assert!(matches!(synth_cocktail(&cfg, 1), Err(Error::Config(_))));
        let mut cfg = small_cfg(0.5, 0.1);
        cfg.eeg_channels = 0;
        assert!(matches!(synth_cocktail(&cfg, 1), Err(Error::Config(_))));
        let mut cfg = small_cfg(0.5, 0.1);
        cfg.attn_gain = 1.5;
        assert!(matches!(synth_cocktail(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn informative_eeg_correlates_with_attended_envelope() {
        let cfg = small_cfg(1.0, 0.0);
        let set = synth_cocktail(&cfg, 9).unwrap();
        let spf = set.samples_per_eeg_frame().unwrap();
        let trial = &set.trials[0];
        let frames = trial.eeg.num_frames();
        let env = standardized_envelope(&trial.attended.samples, spf, frames);
        let best = (0..trial.eeg.num_channels())
            .map(|c| pearson(trial.eeg.channels.row(c).as_slice().unwrap(), &env).abs())
            .fold(0.0, f64::max);
        assert!(best > 0.9, "noiseless EEG should track the envelope, got {best}");
    }

    #[test]
    fn zero_gain_eeg_carries_no_attention_information() {
        // Mean |corr| with attended vs unattended envelopes must be
        // indistinguishable over 200 samples.
        let cfg = SynthConfig {
            n_subjects: 5,
            n_trials: 10,
            duration_s: 4.0,
            eeg_channels: 4,
            attn_gain: 0.0,
            noise_level: 0.5,
            ..SynthConfig::default()
        };
        let set = synth_cocktail(&cfg, 31).unwrap();
        let spf = set.samples_per_eeg_frame().unwrap();
        let mut sum_att = 0.0;
        let mut sum_un = 0.0;
        let mut count = 0.0;
        for trial in &set.trials {
            let frames = trial.eeg.num_frames();
            let env_a = standardized_envelope(&trial.attended.samples, spf, frames);
            let env_u = standardized_envelope(&trial.unattended.samples, spf, frames);
            for c in 0..trial.eeg.num_channels() {
                let row = trial.eeg.channels.row(c);
                let ch = row.as_slice().unwrap();
                sum_att += pearson(ch, &env_a).abs();
                sum_un += pearson(ch, &env_u).abs();
                count += 1.0;
            }
        }
        assert!(count >= 200.0);
        let delta = (sum_att / count - sum_un / count).abs();
        assert!(delta < 0.02, "attention leak in gain-0 EEG: {delta}");
    }
}
