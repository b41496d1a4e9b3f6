//! Evaluation: SI-SDRi, SDRi, STOIi, the PESQ adapter, PPR, and per-sample
//! result tables (including the scatter emitter's input).

pub mod pesq;
pub mod stoi;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aad::AadModel;
use crate::dataio::PairedSample;
use crate::eeg_encoder::EegEncoder;
use crate::error::Result;
use crate::extractor::Extractor;
use crate::nn::layers::Mode;
use crate::nn::params::{Binder, ParamStore};
use crate::nn::tape::Tape;
use crate::signals::{sdr_slice, si_sdr_slice, AudioSignal};
use pesq::PesqBackend;

/// Per-sample evaluation record (one JSONL row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResult {
    /// Absolute SI-SDR of the reported stream against the target (dB).
    pub si_sdr: f64,
    pub si_sdri_target: f64,
    pub si_sdri_interferer: f64,
    pub sdri: f64,
    pub stoii: Option<f64>,
    pub pesqi: Option<f64>,
    /// Probability of a correct EEG/stimulus association, when the AAD
    /// branch was evaluated.
    pub aad_prob: Option<f64>,
    pub window_s: f64,
    pub subject: u32,
    pub trial: u32,
    pub snr_db: f64,
}

/// si_sdr(s, s_hat) - si_sdr(s, x).
pub fn si_sdri(reference: &[f64], mixture: &[f64], estimate: &[f64]) -> Result<f64> {
    Ok(si_sdr_slice(reference, estimate)? - si_sdr_slice(reference, mixture)?)
}

/// sdr(s, s_hat) - sdr(s, x).
pub fn sdri(reference: &[f64], mixture: &[f64], estimate: &[f64]) -> Result<f64> {
    Ok(sdr_slice(reference, estimate)? - sdr_slice(reference, mixture)?)
}

/// Percentage of samples with a positive target SI-SDRi that is also higher
/// than the SI-SDRi with respect to the interferer.
pub fn ppr(results: &[SampleResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .filter(|r| r.si_sdri_target > 0.0 && r.si_sdri_target > r.si_sdri_interferer)
        .count();
    100.0 * hits as f64 / results.len() as f64
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScatterPoint {
    pub window_s: f64,
    pub si_sdri_target: f64,
    /// Probability of correct association (already flipped for the label).
    pub aad_prob: f64,
}

/// Rows for the scatter emitter; samples without an evaluated AAD branch
/// are colored at 0.5 (no information).
pub fn scatter_data(results: &[SampleResult]) -> Vec<ScatterPoint> {
    results
        .iter()
        .map(|r| ScatterPoint {
            window_s: r.window_s,
            si_sdri_target: r.si_sdri_target,
            aad_prob: r.aad_prob.unwrap_or(0.5),
        })
        .collect()
}

/// How the reported stream is selected from the two outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    /// Stream 0 is the target by training convention (EEG-conditioned model).
    FixedStream,
    /// Ground-truth association: the stream with the higher SI-SDR vs the
    /// target (upper-bound protocol).
    Oracle,
    /// A trained AAD picks the stream (cascade protocol).
    AadPick,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub association: Association,
    /// Evaluate the AAD branch for the correct-association probability.
    pub with_aad: bool,
    pub compute_stoi: bool,
    pub pesq: PesqBackend,
    /// Condition the extractor on EEG (false for the PIT baselines).
    pub eeg_conditioning: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            association: Association::FixedStream,
            with_aad: true,
            compute_stoi: true,
            pesq: PesqBackend::Disabled,
            eeg_conditioning: true,
        }
    }
}

/// Evaluates one sample end to end; pure function, safe to parallelize.
fn evaluate_one(
    store: &ParamStore,
    ee: &EegEncoder,
    se: &Extractor,
    aad: &AadModel,
    eeg_rate: f64,
    sample: &PairedSample,
    opts: &EvalOptions,
    workdir: &std::path::Path,
) -> Result<SampleResult> {
    let tape = Tape::inference();
    let bind = Binder::new(&tape, store);
    let mode = Mode::Eval;

    let needs_eeg = opts.eeg_conditioning || opts.with_aad;
    let eeg_rep = if needs_eeg {
        Some(ee.forward(&bind, &sample.eeg, &mode)?)
    } else {
        None
    };
    let mix = tape.leaf(
        ndarray::Array2::from_shape_vec(
            (sample.mixture.len(), 1),
            sample.mixture.samples.clone(),
        )
        .expect("column"),
    );
    let conditioning = if opts.eeg_conditioning {
        Some((eeg_rep.expect("eeg required"), eeg_rate))
    } else {
        None
    };
    let (out0, out1) = se.forward(&bind, mix, conditioning, &mode)?;

    let s = &sample.target.samples;
    let b = &sample.interferer.samples;
    let x = &sample.mixture.samples;
    let v0 = tape.value(out0).column(0).to_vec();
    let v1 = tape.value(out1).column(0).to_vec();

    // AAD probability on the two output streams in fixed presentation order.
    let y_hat = if opts.with_aad {
        let rep = eeg_rep.expect("eeg required");
        Some(tape.scalar(aad.forward(&bind, rep, out0, out1, &mode)?))
    } else {
        None
    };

    // Which stream does the protocol report as the extraction?
    let stream0_is_target = si_sdr_slice(s, &v0)? >= si_sdr_slice(s, &v1)?;
    let (chosen, aad_prob) = match opts.association {
        Association::FixedStream => {
            // Stream 0 is the target by convention, so the ground-truth
            // label is y = 1 and y_hat is already P(correct).
            (&v0, y_hat)
        }
        Association::Oracle => {
            let chosen = if stream0_is_target { &v0 } else { &v1 };
            let prob = y_hat.map(|p| if stream0_is_target { p } else { 1.0 - p });
            (chosen, prob)
        }
        Association::AadPick => {
            let p = y_hat.expect("AadPick association requires with_aad");
            let chosen = if p >= 0.5 { &v0 } else { &v1 };
            let prob = if stream0_is_target { p } else { 1.0 - p };
            (chosen, Some(prob))
        }
    };

    let stoii = if opts.compute_stoi {
        let est = AudioSignal {
            samples: chosen.clone(),
            rate: sample.mixture.rate,
        };
        Some(stoi::stoii(&sample.target, &sample.mixture, &est)?)
    } else {
        None
    };
    let pesqi = match &opts.pesq {
        PesqBackend::Disabled => None,
        backend => {
            let est = AudioSignal {
                samples: chosen.clone(),
                rate: sample.mixture.rate,
            };
            pesq::pesqi(backend, &sample.target, &sample.mixture, &est, workdir).value
        }
    };

    Ok(SampleResult {
        si_sdr: si_sdr_slice(s, chosen)?,
        si_sdri_target: si_sdri(s, x, chosen)?,
        si_sdri_interferer: si_sdri(b, x, chosen)?,
        sdri: sdri(s, x, chosen)?,
        stoii,
        pesqi,
        aad_prob,
        window_s: sample.window.1,
        subject: sample.subject,
        trial: sample.trial,
        snr_db: sample.snr_db,
    })
}

/// Scores a list of samples in parallel (order preserved).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_samples(
    store: &ParamStore,
    ee: &EegEncoder,
    se: &Extractor,
    aad: &AadModel,
    eeg_rate: f64,
    samples: &[PairedSample],
    opts: &EvalOptions,
    workdir: &std::path::Path,
) -> Result<Vec<SampleResult>> {
    samples
        .par_iter()
        .map(|s| evaluate_one(store, ee, se, aad, eeg_rate, s, opts, workdir))
        .collect()
}

/// Aggregate over a result list.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean_si_sdr: f64,
    pub mean_si_sdri: f64,
    pub mean_sdri: f64,
    pub mean_stoii: Option<f64>,
    pub mean_pesqi: Option<f64>,
    pub pesqi_absent_reason: Option<String>,
    pub ppr: f64,
}

pub fn summarize(results: &[SampleResult], pesq_reason: Option<String>) -> Summary {
    let n = results.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SampleResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&SampleResult) -> Option<f64>| {
        let vals: Vec<f64> = results.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Summary {
        count: results.len(),
        mean_si_sdr: mean(&|r| r.si_sdr),
        mean_si_sdri: mean(&|r| r.si_sdri_target),
        mean_sdri: mean(&|r| r.sdri),
        mean_stoii: mean_opt(&|r| r.stoii),
        mean_pesqi: mean_opt(&|r| r.pesqi),
        pesqi_absent_reason: pesq_reason,
        ppr: ppr(results),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn result(t: f64, i: f64) -> SampleResult {
        SampleResult {
            si_sdr: 0.0,
            si_sdri_target: t,
            si_sdri_interferer: i,
            sdri: 0.0,
            stoii: None,
            pesqi: None,
            aad_prob: None,
            window_s: 1.0,
            subject: 0,
            trial: 0,
            snr_db: 0.0,
        }
    }

    #[test]
    fn si_sdri_of_the_mixture_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(si_sdri(&s, &x, &x).unwrap(), 0.0);
        // perfect reconstruction improves by cap - baseline > 0
        assert!(si_sdri(&s, &x, &s).unwrap() > 0.0);
    }

    #[test]
    fn si_sdri_is_scale_invariant_where_sdri_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = e.iter().map(|v| 3.0 * v).collect();
        let a = si_sdri(&s, &x, &e).unwrap();
        let b = si_sdri(&s, &x, &scaled).unwrap();
        assert!((a - b).abs() < 1e-6);
        let c = sdri(&s, &x, &e).unwrap();
        let d = sdri(&s, &x, &scaled).unwrap();
        assert!((c - d).abs() > 0.5);
    }

    #[test]
    fn ppr_brute_force_examples() {
        // 3 of 4 constructed samples satisfy both conditions.
        let rs = vec![
            result(5.0, 1.0),   // pass
            result(0.5, -2.0),  // pass
            result(-0.1, -5.0), // fail: not positive
            result(4.0, 6.0),   // fail: interferer higher
        ];
        assert_eq!(ppr(&rs[..]), 50.0);
        let rs = vec![result(5.0, 1.0), result(0.5, -2.0), result(3.0, 0.0), result(-1.0, -3.0)];
        assert_eq!(ppr(&rs), 75.0);
        // all perfect
        let rs = vec![result(10.0, -10.0); 5];
        assert_eq!(ppr(&rs), 100.0);
    }

    proptest! {
        #[test]
        fn ppr_matches_brute_force_and_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..40);
            let mut rs: Vec<SampleResult> = (0..n)
                .map(|_| result(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)))
                .collect();
            // brute force re-count
            let mut hits = 0usize;
            for r in &rs {
                if r.si_sdri_target > 0.0 && r.si_sdri_target > r.si_sdri_interferer {
                    hits += 1;
                }
            }
            let expect = 100.0 * hits as f64 / n as f64;
            prop_assert_eq!(ppr(&rs), expect);
            prop_assert!((0.0..=100.0).contains(&ppr(&rs)));
            // permutation invariance
            use rand::seq::SliceRandom;
            rs.shuffle(&mut rng);
            prop_assert_eq!(ppr(&rs), expect);
        }
    }

    #[test]
    fn scatter_rows_carry_correct_probability() {
        let mut r = result(3.0, 1.0);
        r.aad_prob = Some(0.9);
        r.window_s = 2.5;
        let pts = scatter_data(&[r.clone(), result(1.0, 0.0)]);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].aad_prob, 0.9);
        assert_eq!(pts[0].window_s, 2.5);
        assert_eq!(pts[1].aad_prob, 0.5);
    }
}
