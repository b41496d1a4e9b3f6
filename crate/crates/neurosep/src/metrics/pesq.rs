//! PESQ adapter. The algorithm itself is out of scope; when an external
//! scorer is configured it is invoked as `cmd <ref.wav> <deg.wav>` and must
//! print a single float. Without one, the metric is recorded as absent with
//! a reason and never fails an evaluation run.

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::signals::AudioSignal;
use crate::wav;

#[derive(Debug, Clone, Default, PartialEq)]
pub enum PesqBackend {
    #[default]
    Disabled,
    /// Path or name of an executable scoring `cmd ref.wav deg.wav -> float`.
    Command(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PesqOutcome {
    pub value: Option<f64>,
    pub reason: Option<String>,
}

impl PesqOutcome {
    fn absent(reason: impl Into<String>) -> Self {
        PesqOutcome {
            value: None,
            reason: Some(reason.into()),
        }
    }
}

fn run_scorer(cmd: &str, reference: &Path, degraded: &Path) -> Result<f64, String> {
    let output = Command::new(cmd)
        .arg(reference)
        .arg(degraded)
        .output()
        .map_err(|e| format!("failed to launch '{cmd}': {e}"))?;
    if !output.status.success() {
        return Err(format!("'{cmd}' exited with {}", output.status));
    }
    let text = String::from_utf8_lossy(&output.stdout);
    text.split_whitespace()
        .last()
        .and_then(|t| t.parse::<f64>().ok())
        .ok_or_else(|| format!("'{cmd}' printed no parsable score: {text:?}"))
}

/// PESQ improvement: score(s, s_hat) - score(s, x), or absent-with-reason.
pub fn pesqi(
    backend: &PesqBackend,
    clean: &AudioSignal,
    mixture: &AudioSignal,
    estimate: &AudioSignal,
    workdir: &Path,
) -> PesqOutcome {
    let cmd = match backend {
        PesqBackend::Disabled => {
            return PesqOutcome::absent("no external PESQ scorer configured")
        }
        PesqBackend::Command(c) => c,
    };
    let write = |name: &str, sig: &AudioSignal| -> Result<PathBuf, String> {
        let path = workdir.join(name);
        wav::write_wav_f32(&path, sig).map_err(|e| e.to_string())?;
        Ok(path)
    };
    let run = || -> Result<f64, String> {
        let r = write("pesq_ref.wav", clean)?;
        let d = write("pesq_deg.wav", estimate)?;
        let m = write("pesq_mix.wav", mixture)?;
        let enhanced = run_scorer(cmd, &r, &d)?;
        let baseline = run_scorer(cmd, &r, &m)?;
        Ok(enhanced - baseline)
    };
    match run() {
        Ok(v) => PesqOutcome {
            value: Some(v),
            reason: None,
        },
        Err(reason) => PesqOutcome::absent(reason),
    }
}
