//! Per-trial contiguous train/validation/test splits.
//!
//! Each trial is partitioned into three contiguous stimulus regions whose
//! order is drawn per trial, so no stimulus window can appear in two splits.
//! Region boundaries are snapped to whole EEG frames to keep audio and EEG
//! crops aligned exactly.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::seeds::{rng_for, TAG_SPLIT};
use crate::dataio::TrialSet;
use crate::error::{Error, Result};
use crate::signals::SAMPLE_RATE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Contiguous region within a trial, in audio samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub len: usize,
}

impl Region {
    pub fn start_s(&self) -> f64 {
        self.start as f64 / SAMPLE_RATE as f64
    }

    pub fn dur_s(&self) -> f64 {
        self.len as f64 / SAMPLE_RATE as f64
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSplit {
    pub subject: u32,
    pub trial: u32,
    /// Regions indexed by `Split::index()`.
    pub regions: [Region; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub entries: Vec<TrialSplit>,
}

impl SplitManifest {
    pub fn entry(&self, subject: u32, trial: u32) -> Option<&TrialSplit> {
        self.entries
            .iter()
            .find(|e| e.subject == subject && e.trial == trial)
    }

    /// Exhaustive pairwise disjointness check over all stimulus regions.
    pub fn check_disjoint(&self) -> Result<()> {
        for entry in &self.entries {
            for i in 0..3 {
                for j in (i + 1)..3 {
                    if entry.regions[i].overlaps(&entry.regions[j]) {
                        return Err(Error::Data(format!(
                            "split regions overlap in subject {} trial {}",
                            entry.subject, entry.trial
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Splits every trial into contiguous train/val/test regions at the given
/// ratios (default 75/12.5/12.5), region order randomized per trial.
///
/// `min_window_s` is the smallest window the caller intends to sample; each
/// region must fit at least one such window.
pub fn make_splits(
    set: &TrialSet,
    ratios: (f64, f64, f64),
    seed: u64,
    min_window_s: f64,
) -> Result<SplitManifest> {
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if !((sum - 1.0).abs() < 1e-9) || r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let spf = set.samples_per_eeg_frame()?;
    let min_window = ((min_window_s * SAMPLE_RATE as f64 / spf as f64).round() as usize).max(1)
        * spf;

    let mut entries = Vec::with_capacity(set.trials.len());
    for trial in &set.trials {
        let total = trial.duration_samples();
        let total_frames = total / spf;
        // Frame counts per split; remainder goes to train.
        let val_frames = ((total_frames as f64) * r_val).round() as usize;
        let test_frames = ((total_frames as f64) * r_test).round() as usize;
        let train_frames = total_frames
            .checked_sub(val_frames + test_frames)
            .ok_or_else(|| {
                Error::Data(format!(
                    "trial {}/{} too short to split",
                    trial.subject, trial.trial
                ))
            })?;
        let lens = [train_frames * spf, val_frames * spf, test_frames * spf];
        for (split, len) in Split::ALL.iter().zip(lens) {
            if len < min_window {
                return Err(Error::Data(format!(
                    "trial {}/{} too short: {:?} region of {len} samples cannot fit a {min_window}-sample window",
                    trial.subject, trial.trial, split
                )));
            }
        }

        let mut order = [Split::Train, Split::Val, Split::Test];
        let mut rng = rng_for(seed, &[TAG_SPLIT, trial.subject as u64, trial.trial as u64]);
        order.shuffle(&mut rng);

        let mut regions = [Region { start: 0, len: 0 }; 3];
        let mut offset = 0;
        for role in order {
            let len = lens[role.index()];
            regions[role.index()] = Region { start: offset, len };
            offset += len;
        }
        entries.push(TrialSplit {
            subject: trial.subject,
            trial: trial.trial,
            regions,
        });
    }
    let manifest = SplitManifest {
        seed,
        ratios,
        entries,
    };
    manifest.check_disjoint()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{synth_cocktail, SynthConfig};

    fn set_of(n_trials: u32, duration_s: f64) -> TrialSet {
        synth_cocktail(
            &SynthConfig {
                n_subjects: 1,
                n_trials,
                duration_s,
                eeg_channels: 2,
                ..SynthConfig::default()
            },
            77,
        )
        .unwrap()
    }

    #[test]
    fn sixty_second_trials_split_45_75_75() {
        let set = set_of(8, 60.0);
        let m = make_splits(&set, (0.75, 0.125, 0.125), 3, 1.0).unwrap();
        assert_eq!(m.entries.len(), 8);
        for e in &m.entries {
            assert_eq!(e.regions[Split::Train.index()].len, 45 * 8000);
            assert_eq!(e.regions[Split::Val.index()].len, 60000); // 7.5 s
            assert_eq!(e.regions[Split::Test.index()].len, 60000);
        }
    }

    #[test]
    fn splits_are_deterministic_and_seed_sensitive() {
        let set = set_of(6, 24.0);
        let a = make_splits(&set, (0.75, 0.125, 0.125), 11, 1.0).unwrap();
        let b = make_splits(&set, (0.75, 0.125, 0.125), 11, 1.0).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = make_splits(&set, (0.75, 0.125, 0.125), 12, 1.0).unwrap();
        // With 6 trials and 6 possible orders a different seed almost surely
        // permutes at least one trial's region order.
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn regions_are_disjoint_and_cover_trial() {
        let set = set_of(5, 17.0);
        let m = make_splits(&set, (0.75, 0.125, 0.125), 4, 0.5).unwrap();
        m.check_disjoint().unwrap();
        for (e, trial) in m.entries.iter().zip(&set.trials) {
            let total: usize = e.regions.iter().map(|r| r.len).sum();
            assert_eq!(total, trial.duration_samples());
        }
    }

    #[test]
    fn too_short_trial_is_named_in_error() {
        let set = set_of(1, 4.0);
        let err = make_splits(&set, (0.75, 0.125, 0.125), 4, 2.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trial 0/0"), "unhelpful error: {msg}");
    }

    #[test]
    fn ratio_deviation_is_within_one_window() {
        let set = set_of(3, 13.7);
        let m = make_splits(&set, (0.75, 0.125, 0.125), 4, 0.5).unwrap();
        for (e, trial) in m.entries.iter().zip(&set.trials) {
            let total = trial.duration_samples() as f64;
            for (region, ratio) in e.regions.iter().zip([0.75, 0.125, 0.125]) {
                let window = 0.5 * 8000.0;
                assert!(
                    (region.len as f64 - total * ratio).abs() <= window,
                    "region len {} deviates from ratio {ratio} of {total}",
                    region.len
                );
            }
        }
    }
}
