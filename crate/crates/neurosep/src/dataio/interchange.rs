//! Interchange format for real paired recordings.
//!
//! A dataset directory holds one JSONL manifest plus WAV and EEGB files:
//!
//! - EEGB: magic "EEGB", version u8, channels u16, rate f64, n_samples u64,
//!   all little-endian, followed by row-major (channel-major) f32 samples.
//! - Manifest: one JSON object per line:
//!   `{subject, trial, audio_attended, audio_unattended, eeg, attended_label}`
//!   with file paths relative to the manifest.
//!
//! Any converter that produces these two artifacts from raw acquisitions is
//! a valid ingest source.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{EEGSignal, Trial, TrialSet};
use crate::error::{Error, Result};
use crate::signals::SAMPLE_RATE;
use crate::wav;

const EEGB_MAGIC: &[u8; 4] = b"EEGB";
const EEGB_VERSION: u8 = 1;

pub fn write_eegb(path: &Path, eeg: &EEGSignal) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EEGB_MAGIC)?;
    w.write_all(&[EEGB_VERSION])?;
    let channels = u16::try_from(eeg.num_channels())
        .map_err(|_| Error::Data("more than 65535 EEG channels".into()))?;
    w.write_all(&channels.to_le_bytes())?;
    w.write_all(&eeg.rate.to_le_bytes())?;
    w.write_all(&(eeg.num_frames() as u64).to_le_bytes())?;
    for c in 0..eeg.num_channels() {
        for f in 0..eeg.num_frames() {
            w.write_all(&(eeg.channels[[c, f]] as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_eegb(path: &Path) -> Result<EEGSignal> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 4 + 1 + 2 + 8 + 8];
    r.read_exact(&mut head)
        .map_err(|e| Error::Data(format!("{}: truncated EEGB header: {e}", path.display())))?;
    if &head[0..4] != EEGB_MAGIC {
        return Err(Error::Data(format!(
            "{}: malformed header (bad magic)",
            path.display()
        )));
    }
    if head[4] != EEGB_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported EEGB version {}",
            path.display(),
            head[4]
        )));
    }
    let channels = u16::from_le_bytes([head[5], head[6]]) as usize;
    let rate = f64::from_le_bytes(head[7..15].try_into().unwrap());
    let frames = u64::from_le_bytes(head[15..23].try_into().unwrap()) as usize;
    if channels == 0 || frames == 0 || !(rate > 0.0) {
        return Err(Error::Data(format!(
            "{}: malformed header (channels={channels}, frames={frames}, rate={rate})",
            path.display()
        )));
    }
    let mut data = vec![0u8; channels * frames * 4];
    r.read_exact(&mut data)
        .map_err(|e| Error::Data(format!("{}: truncated EEGB payload: {e}", path.display())))?;
    let mut m = Array2::zeros((channels, frames));
    for c in 0..channels {
        for f in 0..frames {
            let off = (c * frames + f) * 4;
            m[[c, f]] =
                f32::from_le_bytes([data[off], data[off + 1], data[off + 2], data[off + 3]])
                    as f64;
        }
    }
    EEGSignal::new(m, rate)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject: u32,
    pub trial: u32,
    pub audio_attended: String,
    pub audio_unattended: String,
    pub eeg: String,
    pub attended_label: u8,
}

/// Writes a trial set to `dir` in interchange layout; returns the manifest
/// path. File names are deterministic.
pub fn write_dataset(dir: &Path, set: &TrialSet) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut mw = BufWriter::new(File::create(&manifest_path)?);
    for trial in &set.trials {
        let stem = format!("s{:03}_t{:03}", trial.subject, trial.trial);
        let att = format!("{stem}_attended.wav");
        let unatt = format!("{stem}_unattended.wav");
        let eeg = format!("{stem}.eegb");
        wav::write_wav_f32(&dir.join(&att), &trial.attended)?;
        wav::write_wav_f32(&dir.join(&unatt), &trial.unattended)?;
        write_eegb(&dir.join(&eeg), &trial.eeg)?;
        let entry = ManifestEntry {
            subject: trial.subject,
            trial: trial.trial,
            audio_attended: att,
            audio_unattended: unatt,
            eeg,
            attended_label: trial.attended_label,
        };
        serde_json::to_writer(&mut mw, &entry)
            .map_err(|e| Error::Data(format!("manifest write: {e}")))?;
        mw.write_all(b"\n")?;
    }
    mw.flush()?;
    Ok(manifest_path)
}

#[derive(Debug)]
pub struct IngestReport {
    pub set: TrialSet,
    /// Entries dropped during validation, with the reason.
    pub rejected: Vec<(ManifestEntry, String)>,
}

/// Reads a manifest and its referenced files into a validated trial set.
///
/// If `target_eeg_rate` is set, EEG is resampled by integer-factor block-mean
/// decimation; a non-integer factor is a config error. Samples whose audio
/// and EEG durations disagree by more than one EEG frame are rejected with a
/// logged reason rather than failing the whole ingest.
pub fn ingest_interchange(
    manifest_path: &Path,
    target_eeg_rate: Option<f64>,
) -> Result<IngestReport> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(File::open(manifest_path)?);
    let mut trials = Vec::new();
    let mut rejected = Vec::new();
    let mut eeg_rate: Option<f64> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed manifest line: {e}",
                manifest_path.display(),
                lineno + 1
            ))
        })?;

        let attended = wav::read_wav(&base.join(&entry.audio_attended))?;
        let unattended = wav::read_wav(&base.join(&entry.audio_unattended))?;
        let mut eeg = read_eegb(&base.join(&entry.eeg))?;
        if let Some(target) = target_eeg_rate {
            eeg = decimate_eeg(&eeg, target)?;
        }

        if attended.rate != SAMPLE_RATE || unattended.rate != SAMPLE_RATE {
            rejected.push((
                entry,
                format!(
                    "audio rate {} != expected {}",
                    attended.rate.min(unattended.rate),
                    SAMPLE_RATE
                ),
            ));
            continue;
        }
        if attended.len() != unattended.len() {
            rejected.push((
                entry,
                format!(
                    "stimulus length mismatch: {} vs {}",
                    attended.len(),
                    unattended.len()
                ),
            ));
            continue;
        }
        let audio_s = attended.duration_s();
        let eeg_s = eeg.duration_s();
        if (audio_s - eeg_s).abs() > 1.0 / eeg.rate + 1e-9 {
            rejected.push((
                entry,
                format!("duration mismatch beyond one frame: audio {audio_s} s vs EEG {eeg_s} s"),
            ));
            continue;
        }
        if entry.attended_label > 1 {
            rejected.push((entry, "attended_label outside {0, 1}".into()));
            continue;
        }
        match eeg_rate {
            None => eeg_rate = Some(eeg.rate),
            Some(r) if (r - eeg.rate).abs() > 1e-9 => {
                rejected.push((entry, format!("EEG rate {} differs from dataset rate {r}", eeg.rate)));
                continue;
            }
            _ => {}
        }

        trials.push(Trial {
            subject: entry.subject,
            trial: entry.trial,
            attended,
            unattended,
            eeg,
            attended_label: entry.attended_label,
        });
    }

    for (entry, reason) in &rejected {
        eprintln!(
            "ingest: rejected subject {} trial {}: {reason}",
            entry.subject, entry.trial
        );
    }
    let eeg_rate = eeg_rate.ok_or_else(|| {
        Error::Data(format!("{}: no usable samples", manifest_path.display()))
    })?;
    Ok(IngestReport {
        set: TrialSet { trials, eeg_rate },
        rejected,
    })
}

/// Integer-factor decimation by block mean (acts as a crude anti-alias).
fn decimate_eeg(eeg: &EEGSignal, target_rate: f64) -> Result<EEGSignal> {
    if (eeg.rate - target_rate).abs() < 1e-9 {
        return Ok(eeg.clone());
    }
    let factor_f = eeg.rate / target_rate;
    let factor = factor_f.round();
    if factor < 1.0 || (factor_f - factor).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "EEG rate {} is not an integer multiple of target rate {target_rate}",
            eeg.rate
        )));
    }
    let factor = factor as usize;
    let out_frames = eeg.num_frames() / factor;
    if out_frames == 0 {
        return Err(Error::Data("EEG too short to decimate".into()));
    }
    let mut out = Array2::zeros((eeg.num_channels(), out_frames));
    for c in 0..eeg.num_channels() {
        for f in 0..out_frames {
            let mut acc = 0.0;
            for k in 0..factor {
                acc += eeg.channels[[c, f * factor + k]];
            }
            out[[c, f]] = acc / factor as f64;
        }
    }
    EEGSignal::new(out, eeg.rate / factor as f64)
}
