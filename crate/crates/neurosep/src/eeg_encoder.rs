//! EEG sequence encoder: linear input projection, sinusoidal positional
//! encoding, and a stack of pre-norm single-head self-attention blocks.
//! The output sequence keeps the input frame rate and is shared by the
//! extractor (as conditioning) and the AAD branch.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::EEGSignal;
use crate::error::{Error, Result};
use crate::nn::attention::AttnBlock;
use crate::nn::layers::{sinusoidal_pe, Linear, Mode};
use crate::nn::params::{Binder, ParamStore};
use crate::nn::tape::Var;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EegEncoderCfg {
    /// EEG input channels C.
    pub channels: usize,
    /// Model width N.
    pub n_dim: usize,
    /// Number of self-attention blocks.
    pub blocks: usize,
    /// Feedforward width multiplier (width = ff_mult * n_dim).
    pub ff_mult: usize,
    pub dropout: f64,
}

impl Default for EegEncoderCfg {
    fn default() -> Self {
        // Depth/width/dropout mirror the stimuli-encoder settings; the
        // encoder internals are otherwise unconstrained, so everything is
        // config-exposed.
        EegEncoderCfg {
            channels: 64,
            n_dim: 64,
            blocks: 5,
            ff_mult: 4,
            dropout: 0.1,
        }
    }
}

pub struct EegEncoder {
    in_proj: Linear,
    blocks: Vec<AttnBlock>,
    pub cfg: EegEncoderCfg,
}

impl EegEncoder {
    pub const PREFIX: &'static str = "ee";

    pub fn new(store: &mut ParamStore, cfg: &EegEncoderCfg, rng: &mut ChaCha8Rng) -> Self {
        let p = Self::PREFIX;
        let in_proj = Linear::new(store, &format!("{p}.in_proj"), cfg.channels, cfg.n_dim, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                AttnBlock::new(
                    store,
                    &format!("{p}.block{i}"),
                    cfg.n_dim,
                    cfg.ff_mult * cfg.n_dim,
                    cfg.dropout,
                    rng,
                )
            })
            .collect();
        EegEncoder {
            in_proj,
            blocks,
            cfg: cfg.clone(),
        }
    }

    /// Encodes a `frames x C` EEG window into `frames x N`.
    pub fn forward(&self, bind: &Binder, eeg: &EEGSignal, mode: &Mode) -> Result<Var> {
        if eeg.num_channels() != self.cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "EEG has {} channels, encoder expects {}",
                eeg.num_channels(),
                self.cfg.channels
            )));
        }
        let t = bind.tape;
        let x = t.leaf(eeg.time_major());
        let mut h = self.in_proj.apply(bind, x);
        h = t.add_const(h, &sinusoidal_pe(h.rows(), self.cfg.n_dim));
        for block in &self.blocks {
            h = block.apply(bind, h, mode);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::seeds::rng_for;
    use crate::nn::tape::Tape;
    use ndarray::Array2;
    use rand::Rng;

    fn tiny_encoder() -> (ParamStore, EegEncoder) {
        let mut store = ParamStore::new();
        let cfg = EegEncoderCfg {
            channels: 4,
            n_dim: 8,
            blocks: 2,
            ff_mult: 4,
            dropout: 0.1,
        };
        let mut rng = rng_for(1, &[crate::dataio::seeds::TAG_INIT]);
        let enc = EegEncoder::new(&mut store, &cfg, &mut rng);
        (store, enc)
    }

    fn eeg_from(m: Array2<f64>, rate: f64) -> EEGSignal {
        EEGSignal::new(m, rate).unwrap()
    }

    fn run(store: &ParamStore, enc: &EegEncoder, eeg: &EEGSignal) -> Array2<f64> {
        let tape = Tape::inference();
        let bind = Binder::new(&tape, store);
        tape.value(enc.forward(&bind, eeg, &Mode::Eval).unwrap())
    }

    #[test]
    fn output_length_equals_input_length() {
        let (store, enc) = tiny_encoder();
        for frames in [1usize, 7, 200] {
            let eeg = eeg_from(Array2::from_elem((4, frames), 0.1), 133.0);
            let out = run(&store, &enc, &eeg);
            assert_eq!(out.dim(), (frames, 8));
        }
    }

    #[test]
    fn eval_mode_is_bit_deterministic() {
        let (store, enc) = tiny_encoder();
        let eeg = eeg_from(Array2::zeros((4, 25)), 133.0);
        let a = run(&store, &enc, &eeg);
        let b = run(&store, &enc, &eeg);
        assert_eq!(a, b);
    }

    #[test]
    fn channel_count_mismatch_errors() {
        let (store, enc) = tiny_encoder();
        let eeg = eeg_from(Array2::zeros((5, 10)), 133.0);
        let tape = Tape::inference();
        let bind = Binder::new(&tape, &store);
        assert!(matches!(
            enc.forward(&bind, &eeg, &Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_parameter() {
        let mut store = ParamStore::new();
        let cfg = EegEncoderCfg {
            channels: 3,
            n_dim: 6,
            blocks: 2,
            ff_mult: 2,
            dropout: 0.1, // eval mode disables it
        };
        let mut rng = rng_for(2, &[crate::dataio::seeds::TAG_INIT]);
        let enc = EegEncoder::new(&mut store, &cfg, &mut rng);
        let mut probe_rng = rng_for(3, &[1]);
        let eeg = eeg_from(
            Array2::from_shape_fn((3, 9), |_| probe_rng.gen_range(-1.0..1.0)),
            133.0,
        );
        let readout = Array2::from_shape_fn((9, 6), |_| probe_rng.gen_range(-1.0..1.0));

        let ids: Vec<_> = store.ids().collect();
        let report = crate::nn::gradcheck::grad_check(&mut store, &ids, 1e-5, |tape, bind| {
            let out = enc.forward(bind, &eeg, &Mode::Eval).unwrap();
            tape.sum_all(tape.mul_const(out, &readout))
        });
        assert_eq!(report.checked_scalars, store.num_scalars());
        report.assert_below(1e-4);
    }

    #[test]
    fn time_permutation_does_not_commute() {
        // Positional encoding breaks permutation equivariance: permuting
        // input frames and inverse-permuting the output differs from the
        // direct forward pass.
        let (store, enc) = tiny_encoder();
        let mut rng = rng_for(5, &[9]);
        let m = Array2::from_shape_fn((4, 12), |_| rng.gen_range(-1.0..1.0));
        let direct = run(&store, &enc, &eeg_from(m.clone(), 133.0));

        // Rotate frames by 3 as the permutation.
        let frames = 12usize;
        let shift = 3usize;
        let mut permuted = Array2::zeros((4, frames));
        for f in 0..frames {
            for c in 0..4 {
                permuted[[c, (f + shift) % frames]] = m[[c, f]];
            }
        }
        let out_perm = run(&store, &enc, &eeg_from(permuted, 133.0));
        // Inverse-permute output rows.
        let mut unpermuted = Array2::zeros(direct.dim());
        for f in 0..frames {
            let row = out_perm.row((f + shift) % frames);
            unpermuted.row_mut(f).assign(&row);
        }
        let max_diff = (&direct - &unpermuted)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-6, "permutation unexpectedly commuted");
    }
}
