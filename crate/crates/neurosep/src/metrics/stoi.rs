//! Short-time objective intelligibility (STOI).
//!
//! Definition used here: signals are brought to the 10 kHz analysis rate by
//! zero-insertion upsampling and a low-pass FIR (5/4 rational resampling from
//! 8 kHz); 25.6 ms Hann frames with 50% overlap and a 512-point FFT feed 15
//! one-third-octave bands starting at 150 Hz; within every 384 ms (30-frame)
//! segment the degraded band envelope is normalized to the clean one's
//! energy, clipped at -15 dB relative SDR, and compared by zero-mean
//! normalized correlation; the score is the average over bands and segments.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::signals::AudioSignal;

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256; // 25.6 ms at 10 kHz
const HOP: usize = 128;
const FFT_LEN: usize = 512;
const N_BANDS: usize = 15;
const MIN_CENTER_HZ: f64 = 150.0;
const SEGMENT_FRAMES: usize = 30; // 384 ms
const CLIP_BETA_DB: f64 = -15.0;

/// Rational resampler: zero-insert by `up`, windowed-sinc low-pass at the
/// tighter Nyquist, take every `down`-th sample.
pub fn resample_zero_insert(x: &[f64], up: usize, down: usize, in_rate: f64) -> Vec<f64> {
    let hi_rate = in_rate * up as f64;
    let cutoff = (in_rate / 2.0).min(hi_rate / (2.0 * down as f64));
    // Windowed sinc, 10 zero crossings per side at the cutoff.
    let half = (10.0 * hi_rate / (2.0 * cutoff)).ceil() as isize;
    let taps = 2 * half + 1;
    let mut h = Vec::with_capacity(taps as usize);
    for i in -half..=half {
        let t = i as f64 / hi_rate;
        let sinc = if i == 0 {
            2.0 * cutoff / hi_rate
        } else {
            (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * i as f64)
        };
        let w = 0.5
            + 0.5
                * (std::f64::consts::PI * i as f64 / half as f64)
                    .cos();
        h.push(sinc * w * up as f64);
    }

    let hi_len = x.len() * up;
    let out_len = hi_len / down;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let center = (m * down) as isize;
        // y[center] = sum_k h[k] * xz[center - (k - half)] where xz is the
        // zero-stuffed signal: only indices divisible by `up` contribute.
        let mut acc = 0.0;
        for (k, &hv) in h.iter().enumerate() {
            let idx = center - (k as isize - half);
            if idx >= 0 && (idx as usize) % up == 0 {
                let src = (idx as usize) / up;
                if src < x.len() {
                    acc += hv * x[src];
                }
            }
        }
        out.push(acc);
    }
    out
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
        })
        .collect()
}

/// One-third-octave band energies: `bands x frames`.
fn band_envelopes(x: &[f64]) -> Vec<Vec<f64>> {
    let window = hann(FRAME);
    let n_frames = if x.len() < FRAME {
        0
    } else {
        (x.len() - FRAME) / HOP + 1
    };
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(FFT_LEN);

    // Band membership per FFT bin.
    let bin_hz = STOI_RATE as f64 / FFT_LEN as f64;
    let mut bands: Vec<(f64, f64)> = Vec::with_capacity(N_BANDS);
    for k in 0..N_BANDS {
        let cf = MIN_CENTER_HZ * 2f64.powf(k as f64 / 3.0);
        bands.push((cf * 2f64.powf(-1.0 / 6.0), cf * 2f64.powf(1.0 / 6.0)));
    }

    let mut env = vec![vec![0.0; n_frames]; N_BANDS];
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
    for m in 0..n_frames {
        for i in 0..FFT_LEN {
            let v = if i < FRAME {
                x[m * HOP + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (j, &(lo, hi)) in bands.iter().enumerate() {
            let mut acc = 0.0;
            for (bin, v) in buf.iter().enumerate().take(FFT_LEN / 2 + 1) {
                let f = bin as f64 * bin_hz;
                if f >= lo && f < hi {
                    acc += v.norm_sqr();
                }
            }
            env[j][m] = acc.sqrt();
        }
    }
    env
}

/// STOI score in [-1, 1]; inputs must share length and rate.
pub fn stoi(clean: &AudioSignal, degraded: &AudioSignal) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::LengthMismatch {
            left: clean.len(),
            right: degraded.len(),
        });
    }
    if clean.rate != degraded.rate {
        return Err(Error::Data(format!(
            "rate mismatch {} vs {}",
            clean.rate, degraded.rate
        )));
    }
    let (x10, y10) = match clean.rate {
        STOI_RATE => (clean.samples.clone(), degraded.samples.clone()),
        8000 => (
            resample_zero_insert(&clean.samples, 5, 4, 8000.0),
            resample_zero_insert(&degraded.samples, 5, 4, 8000.0),
        ),
        other => {
            return Err(Error::Data(format!(
                "unsupported sample rate {other} for STOI"
            )))
        }
    };

    let xe = band_envelopes(&x10);
    let ye = band_envelopes(&y10);
    let n_frames = xe[0].len();
    if n_frames < SEGMENT_FRAMES {
        return Err(Error::Data(format!(
            "signal too short for STOI: {n_frames} frames < one {SEGMENT_FRAMES}-frame segment"
        )));
    }

    let clip = 1.0 + 10f64.powf(-CLIP_BETA_DB / 20.0);
    let eps = 1e-12;
    let mut acc = 0.0;
    let mut count = 0usize;
    for m in SEGMENT_FRAMES..=n_frames {
        let lo = m - SEGMENT_FRAMES;
        for j in 0..N_BANDS {
            let x = &xe[j][lo..m];
            let y = &ye[j][lo..m];
            let xn: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = xn / (yn + eps);
            // normalize then clip against the clean envelope
            let yp: Vec<f64> = y
                .iter()
                .zip(x)
                .map(|(yv, xv)| (yv * scale).min(clip * xv))
                .collect();
            acc += zero_mean_correlation(x, &yp, eps);
            count += 1;
        }
    }
    Ok((acc / count as f64).clamp(-1.0, 1.0))
}

fn zero_mean_correlation(x: &[f64], y: &[f64], eps: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt() + eps)
}

/// STOI improvement of the estimate over the unprocessed mixture.
pub fn stoii(clean: &AudioSignal, mixture: &AudioSignal, estimate: &AudioSignal) -> Result<f64> {
    Ok(stoi(clean, estimate)? - stoi(clean, mixture)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn speechish(seed: u64, n: usize) -> AudioSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lp = 0.0;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                let env = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
                let white: f64 = rng.gen_range(-1.0..1.0);
                lp += 0.6 * (white - lp);
                env * lp
            })
            .collect();
        AudioSignal::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn identical_signals_score_one() {
        let s = speechish(1, 8000);
        let v = stoi(&s, &s).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "stoi(s, s) = {v}");
    }

    #[test]
    fn stoii_of_the_mixture_itself_is_zero() {
        let s = speechish(2, 8000);
        let n = speechish(3, 8000);
        let mix = AudioSignal::new(
            s.samples.iter().zip(&n.samples).map(|(a, b)| a + b).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let v = stoii(&s, &mix, &mix).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn noisier_estimates_score_lower() {
        let s = speechish(4, 16000);
        let noise = speechish(5, 16000);
        let mk = |g: f64| {
            AudioSignal::new(
                s.samples
                    .iter()
                    .zip(&noise.samples)
                    .map(|(a, b)| a + g * b)
                    .collect(),
                SAMPLE_RATE,
            )
            .unwrap()
        };
        let light = stoi(&s, &mk(0.2)).unwrap();
        let heavy = stoi(&s, &mk(2.0)).unwrap();
        assert!(light > heavy, "light {light} vs heavy {heavy}");
        assert!(light > 0.8);
    }

    #[test]
    fn too_short_signal_errors() {
        let s = speechish(6, 2000); // 0.25 s < one 384 ms segment
        assert!(stoi(&s, &s).is_err());
    }

    #[test]
    fn resampler_preserves_a_band_limited_tone() {
        // A 500 Hz tone at 8 kHz must come out as a 500 Hz tone at 10 kHz.
        let n = 8000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 500.0 * i as f64 / 8000.0).sin())
            .collect();
        let y = resample_zero_insert(&x, 5, 4, 8000.0);
        assert_eq!(y.len(), n * 5 / 4);
        // compare against the analytic tone away from the edges
        let mut max_err = 0.0f64;
        for m in 200..y.len() - 200 {
            let t = m as f64 / 10_000.0;
            let want = (2.0 * std::f64::consts::PI * 500.0 * t).sin();
            max_err = max_err.max((y[m] - want).abs());
        }
        assert!(max_err < 0.01, "resampled tone error {max_err}");
    }
}
