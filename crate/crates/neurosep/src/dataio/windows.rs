//! Window sampling: random training crops with SNR augmentation and
//! deterministic evaluation window enumeration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::seeds::{rng_for, TAG_EVAL_WINDOW};
use crate::dataio::splits::{Split, SplitManifest};
use crate::dataio::{PairedSample, Trial, TrialSet};
use crate::error::{Error, Result};
use crate::signals::{mix_at_snr, SAMPLE_RATE};

fn window_samples(window_s: f64, spf: usize) -> usize {
    (((window_s * SAMPLE_RATE as f64) / spf as f64).round() as usize).max(1) * spf
}

fn cut_sample(
    trial: &Trial,
    spf: usize,
    start: usize,
    len: usize,
    snr_db: f64,
) -> Result<PairedSample> {
    let target = trial.attended.crop(start, len)?;
    let interferer_raw = trial.unattended.crop(start, len)?;
    let (mixture, interferer) = mix_at_snr(&target, &interferer_raw, snr_db)?;
    let eeg = trial.eeg.crop_frames(start / spf, len / spf)?;
    let sample = PairedSample {
        mixture,
        target,
        interferer,
        eeg,
        subject: trial.subject,
        trial: trial.trial,
        attended_label: trial.attended_label,
        window: (
            start as f64 / SAMPLE_RATE as f64,
            len as f64 / SAMPLE_RATE as f64,
        ),
        snr_db,
    };
    debug_assert!(sample.validate().is_ok());
    Ok(sample)
}

/// Draws one random training window: uniform trial, uniform frame-aligned
/// start within the split region, interferer mixed at snr ~ U(snr_range).
pub fn sample_training_window(
    set: &TrialSet,
    manifest: &SplitManifest,
    split: Split,
    window_s: f64,
    snr_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<PairedSample> {
    let spf = set.samples_per_eeg_frame()?;
    let len = window_samples(window_s, spf);
    let t_idx = rng.gen_range(0..set.trials.len());
    let trial = &set.trials[t_idx];
    let entry = manifest
        .entry(trial.subject, trial.trial)
        .ok_or_else(|| Error::Data(format!("trial {}/{} missing from split manifest", trial.subject, trial.trial)))?;
    let region = entry.regions[split.index()];
    if len > region.len {
        return Err(Error::Data(format!(
            "window of {len} samples exceeds the {:?} region ({} samples) of trial {}/{}",
            split, region.len, trial.subject, trial.trial
        )));
    }
    let max_offset_frames = (region.len - len) / spf;
    let start = region.start + rng.gen_range(0..=max_offset_frames) * spf;
    let snr = if snr_range.0 == snr_range.1 {
        snr_range.0
    } else {
        rng.gen_range(snr_range.0..snr_range.1)
    };
    cut_sample(trial, spf, start, len, snr)
}

#[derive(Debug, Clone)]
pub struct EvalWindowSpec {
    /// Window lengths in seconds.
    pub lengths_s: Vec<f64>,
    /// Cap on windows per (trial, length); 0 means no cap.
    pub max_per_trial: usize,
    /// SNR range for the deterministic per-window draws.
    pub snr_range: (f64, f64),
    pub seed: u64,
}

/// Deterministically tiles each trial's split region with non-overlapping
/// windows of every requested length; per-window SNRs come from a seeded
/// stream, so two invocations yield identical samples.
pub fn eval_windows(
    set: &TrialSet,
    manifest: &SplitManifest,
    split: Split,
    spec: &EvalWindowSpec,
) -> Result<Vec<PairedSample>> {
    let spf = set.samples_per_eeg_frame()?;
    let mut out = Vec::new();
    for (t_idx, trial) in set.trials.iter().enumerate() {
        let entry = manifest
            .entry(trial.subject, trial.trial)
            .ok_or_else(|| Error::Data("trial missing from split manifest".into()))?;
        let region = entry.regions[split.index()];
        for (l_idx, &window_s) in spec.lengths_s.iter().enumerate() {
            let len = window_samples(window_s, spf);
            if len > region.len {
                continue;
            }
            let mut count = region.len / len;
            if spec.max_per_trial > 0 {
                count = count.min(spec.max_per_trial);
            }
            let mut rng = rng_for(
                spec.seed,
                &[
                    TAG_EVAL_WINDOW,
                    split.index() as u64,
                    t_idx as u64,
                    l_idx as u64,
                ],
            );
            for w in 0..count {
                let start = region.start + w * len;
                let snr = if spec.snr_range.0 == spec.snr_range.1 {
                    spec.snr_range.0
                } else {
                    rng.gen_range(spec.snr_range.0..spec.snr_range.1)
                };
                out.push(cut_sample(trial, spf, start, len, snr)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no evaluation windows fit the {split:?} split"
        )));
    }
    Ok(out)
}
