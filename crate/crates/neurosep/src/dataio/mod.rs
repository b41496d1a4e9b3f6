//! Dataset construction: synthetic cocktail-party trials with EEG-like
//! signals, interchange-format ingestion, split manifests, and window
//! sampling with SNR augmentation.

pub mod interchange;
pub mod seeds;
pub mod splits;
pub mod synth;
pub mod windows;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::signals::AudioSignal;

pub use interchange::{ingest_interchange, write_dataset, IngestReport, ManifestEntry};
pub use splits::{make_splits, Region, Split, SplitManifest};
pub use synth::{synth_cocktail, SynthConfig};
pub use windows::{eval_windows, sample_training_window, EvalWindowSpec};

/// C-channel EEG time series with its own sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EEGSignal {
    /// `channels x frames`, microvolt-scale arbitrary units.
    pub channels: Array2<f64>,
    /// Frames per second; need not be integer (default 8000/60 Hz).
    pub rate: f64,
}

impl EEGSignal {
    pub fn new(channels: Array2<f64>, rate: f64) -> Result<Self> {
        if channels.nrows() == 0 || channels.ncols() == 0 {
            return Err(Error::Data("empty EEG signal".into()));
        }
        if !(rate > 0.0) {
            return Err(Error::Data(format!("non-positive EEG rate {rate}")));
        }
        if channels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite EEG value".into()));
        }
        Ok(EEGSignal { channels, rate })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.channels.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.channels.ncols() as f64 / self.rate
    }

    pub fn crop_frames(&self, start: usize, len: usize) -> Result<EEGSignal> {
        if start + len > self.num_frames() || len == 0 {
            return Err(Error::Data(format!(
                "EEG crop [{start}, {}) out of bounds for {} frames",
                start + len,
                self.num_frames()
            )));
        }
        Ok(EEGSignal {
            channels: self
                .channels
                .slice(ndarray::s![.., start..start + len])
                .to_owned(),
            rate: self.rate,
        })
    }

    /// Time-major view (`frames x channels`) for the sequence encoders.
    pub fn time_major(&self) -> Array2<f64> {
        self.channels.t().as_standard_layout().to_owned()
    }
}

/// One aligned (mixture, target, interferer, EEG) example.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub mixture: AudioSignal,
    pub target: AudioSignal,
    pub interferer: AudioSignal,
    pub eeg: EEGSignal,
    pub subject: u32,
    pub trial: u32,
    /// Which presented stimulus the EEG attends (trial metadata).
    pub attended_label: u8,
    /// (start, duration) in seconds within the source trial.
    pub window: (f64, f64),
    /// SNR the interferer was scaled to when mixing (dB).
    pub snr_db: f64,
}

impl PairedSample {
    /// Checks the structural invariants: additive mixture, equal lengths,
    /// EEG duration consistent with the audio duration within one frame.
    pub fn validate(&self) -> Result<()> {
        if self.target.len() != self.mixture.len() || self.interferer.len() != self.mixture.len()
        {
            return Err(Error::LengthMismatch {
                left: self.target.len(),
                right: self.mixture.len(),
            });
        }
        let max_dev = self
            .mixture
            .samples
            .iter()
            .zip(self.target.samples.iter().zip(&self.interferer.samples))
            .map(|(m, (t, i))| (m - (t + i)).abs())
            .fold(0.0, f64::max);
        if max_dev >= 1e-6 {
            return Err(Error::Data(format!(
                "mixture deviates from target + interferer by {max_dev}"
            )));
        }
        if self.attended_label > 1 {
            return Err(Error::Data(format!(
                "attended label {} outside {{0, 1}}",
                self.attended_label
            )));
        }
        let audio_s = self.mixture.duration_s();
        let eeg_s = self.eeg.duration_s();
        if (audio_s - eeg_s).abs() > 1.0 / self.eeg.rate + 1e-9 {
            return Err(Error::Data(format!(
                "EEG duration {eeg_s} s inconsistent with audio duration {audio_s} s"
            )));
        }
        Ok(())
    }
}

/// One listening trial: two stimuli, one attended, EEG recorded while
/// attending to `attended`.
#[derive(Debug, Clone)]
pub struct Trial {
    pub subject: u32,
    pub trial: u32,
    pub attended: AudioSignal,
    pub unattended: AudioSignal,
    pub eeg: EEGSignal,
    pub attended_label: u8,
}

impl Trial {
    /// Full-trial paired sample with the natural (unscaled) mixture.
    pub fn paired_full(&self) -> PairedSample {
        let mixture: Vec<f64> = self
            .attended
            .samples
            .iter()
            .zip(&self.unattended.samples)
            .map(|(a, b)| a + b)
            .collect();
        PairedSample {
            mixture: AudioSignal {
                samples: mixture,
                rate: self.attended.rate,
            },
            target: self.attended.clone(),
            interferer: self.unattended.clone(),
            eeg: self.eeg.clone(),
            subject: self.subject,
            trial: self.trial,
            attended_label: self.attended_label,
            window: (0.0, self.attended.duration_s()),
            snr_db: 10.0 * (self.attended.power() / self.unattended.power()).log10(),
        }
    }

    pub fn duration_samples(&self) -> usize {
        self.attended.len()
    }
}

/// A dataset of trials sharing one EEG processing rate.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
    pub eeg_rate: f64,
}

impl TrialSet {
    /// Audio samples per EEG frame; errors unless the audio rate is an
    /// integer multiple of the EEG rate (within float tolerance).
    pub fn samples_per_eeg_frame(&self) -> Result<usize> {
        samples_per_frame(crate::signals::SAMPLE_RATE, self.eeg_rate)
    }
}

pub fn samples_per_frame(audio_rate: u32, eeg_rate: f64) -> Result<usize> {
    let ratio = audio_rate as f64 / eeg_rate;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "audio rate {audio_rate} is not an integer multiple of EEG rate {eeg_rate}"
        )));
    }
    Ok(rounded as usize)
}
