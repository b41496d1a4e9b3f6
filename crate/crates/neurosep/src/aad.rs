//! Auxiliary auditory attention detector.
//!
//! Two candidate stimuli and the EEG representation are embedded into a
//! common space (shared stimuli encoder, linear EEG adapter); frame-wise
//! dot products give two similarity score sequences, and a small
//! convolutional decoder with adaptive average pooling turns them into the
//! probability that the first presented stimulus is the attended one.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::AttnBlock;
use crate::nn::layers::{conv_out_len, sinusoidal_pe, Conv1d, LayerNorm, Linear, Mode, Prelu};
use crate::nn::params::{Binder, ParamStore};
use crate::nn::tape::Var;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AadCfg {
    /// Model width N (shared with the EEG encoder).
    pub n_dim: usize,
    /// Stimuli-encoder front-end kernel (samples).
    pub stim_kernel: usize,
    /// Stimuli-encoder front-end stride (samples).
    pub stim_stride: usize,
    /// Self-attention layers in the stimuli encoder.
    pub attn_layers: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Attention-decoder convolution kernel (score frames).
    pub decide_kernel: usize,
    /// Attention-decoder convolution stride.
    pub decide_stride: usize,
}

impl Default for AadCfg {
    fn default() -> Self {
        AadCfg {
            n_dim: 64,
            stim_kernel: 120,
            stim_stride: 60,
            attn_layers: 5,
            ff_mult: 4,
            dropout: 0.1,
            decide_kernel: 15,
            decide_stride: 7,
        }
    }
}

/// Probability that the first presented stimulus is the attended one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AadDecision {
    pub y_hat: f64,
}

pub struct AadModel {
    stim_conv: Conv1d,
    stim_ln: LayerNorm,
    stim_lin: Linear,
    stim_blocks: Vec<AttnBlock>,
    adapter: Linear,
    dec_conv1: Conv1d,
    dec_prelu: Prelu,
    dec_conv2: Conv1d,
    pub cfg: AadCfg,
}

impl AadModel {
    pub const PREFIX: &'static str = "aad";

    pub fn new(store: &mut ParamStore, cfg: &AadCfg, rng: &mut ChaCha8Rng) -> Self {
        let p = Self::PREFIX;
        let n = cfg.n_dim;
        AadModel {
            stim_conv: Conv1d::new(
                store,
                &format!("{p}.stim_conv"),
                1,
                2 * n,
                cfg.stim_kernel,
                cfg.stim_stride,
                rng,
            ),
            stim_ln: LayerNorm::new(store, &format!("{p}.stim_ln"), 2 * n),
            stim_lin: Linear::new(store, &format!("{p}.stim_lin"), 2 * n, n, rng),
            stim_blocks: (0..cfg.attn_layers)
                .map(|i| {
                    AttnBlock::new(
                        store,
                        &format!("{p}.stim_block{i}"),
                        n,
                        cfg.ff_mult * n,
                        cfg.dropout,
                        rng,
                    )
                })
                .collect(),
            adapter: Linear::new(store, &format!("{p}.adapter"), n, n, rng),
            dec_conv1: Conv1d::new(
                store,
                &format!("{p}.dec_conv1"),
                2,
                2,
                cfg.decide_kernel,
                cfg.decide_stride,
                rng,
            ),
            dec_prelu: Prelu::new(store, &format!("{p}.dec_prelu")),
            dec_conv2: Conv1d::new(
                store,
                &format!("{p}.dec_conv2"),
                2,
                1,
                cfg.decide_kernel,
                cfg.decide_stride,
                rng,
            ),
            cfg: cfg.clone(),
        }
    }

    /// Minimum similarity-sequence length the decision head accepts (both
    /// stacked convolutions must emit at least one frame).
    pub fn min_decide_len(&self) -> usize {
        // conv2 needs `decide_kernel` input frames; conv1 emits one frame per
        // `decide_stride` starting at `decide_kernel`.
        self.cfg.decide_kernel + (self.cfg.decide_kernel - 1) * self.cfg.decide_stride
    }

    /// Embeds an `T x 1` stimulus waveform into `L x N` at the EEG frame
    /// resolution (conv front end + ReLU + layer norm + linear + positional
    /// encoding + self-attention stack). Weights are shared between the two
    /// presented stimuli.
    pub fn encode_stimulus(&self, bind: &Binder, w: Var, mode: &Mode) -> Result<Var> {
        if conv_out_len(w.rows(), self.cfg.stim_kernel, self.cfg.stim_stride).is_none() {
            return Err(Error::ShapeMismatch(format!(
                "stimulus of {} samples is shorter than the {}-sample kernel",
                w.rows(),
                self.cfg.stim_kernel
            )));
        }
        let t = bind.tape;
        let h = t.relu(self.stim_conv.apply(bind, w));
        let h = self.stim_ln.apply(bind, h);
        let mut h = self.stim_lin.apply(bind, h);
        h = t.add_const(h, &sinusoidal_pe(h.rows(), self.cfg.n_dim));
        for block in &self.stim_blocks {
            h = block.apply(bind, h, mode);
        }
        Ok(h)
    }

    /// Frame-wise linear adaptation of the EEG representation (N -> N).
    pub fn adapt_eeg(&self, bind: &Binder, eeg_rep: Var) -> Var {
        self.adapter.apply(bind, eeg_rep)
    }

    /// Per-frame inner products over the common length of both sequences.
    pub fn similarity(bind: &Binder, eeg_rep: Var, stim_rep: Var) -> Result<Var> {
        if eeg_rep.cols() != stim_rep.cols() {
            return Err(Error::ShapeMismatch(format!(
                "similarity width mismatch: {} vs {}",
                eeg_rep.cols(),
                stim_rep.cols()
            )));
        }
        let t = bind.tape;
        let l = eeg_rep.rows().min(stim_rep.rows());
        let a = if eeg_rep.rows() > l {
            t.slice_rows(eeg_rep, 0, l)
        } else {
            eeg_rep
        };
        let b = if stim_rep.rows() > l {
            t.slice_rows(stim_rep, 0, l)
        } else {
            stim_rep
        };
        Ok(t.row_sum(t.mul(a, b)))
    }

    /// Attention decoder over two `L x 1` score sequences, presentation
    /// order preserved in the channel order.
    pub fn decide(&self, bind: &Binder, score_a: Var, score_b: Var) -> Result<Var> {
        if score_a.rows() != score_b.rows() {
            return Err(Error::LengthMismatch {
                left: score_a.rows(),
                right: score_b.rows(),
            });
        }
        let min_len = self.min_decide_len();
        if score_a.rows() < min_len {
            return Err(Error::ShapeMismatch(format!(
                "similarity sequences of {} frames are too short for the attention decoder (minimum {min_len})",
                score_a.rows()
            )));
        }
        let t = bind.tape;
        let scores = t.concat_cols(score_a, score_b); // L x 2
        let h = self.dec_conv1.apply(bind, scores);
        let h = self.dec_prelu.apply(bind, h);
        let h = self.dec_conv2.apply(bind, h); // L2 x 1
        let pooled = t.mean_rows(h); // adaptive average pooling to one value
        Ok(t.sigmoid(pooled))
    }

    /// Full AAD pass: adapted EEG representation vs two candidate stimuli
    /// (vars so separated signals can backpropagate into the extractor).
    pub fn forward(
        &self,
        bind: &Binder,
        eeg_rep: Var,
        stim_first: Var,
        stim_second: Var,
        mode: &Mode,
    ) -> Result<Var> {
        let adapted = self.adapt_eeg(bind, eeg_rep);
        let rep_first = self.encode_stimulus(bind, stim_first, mode)?;
        let rep_second = self.encode_stimulus(bind, stim_second, mode)?;
        let score_first = Self::similarity(bind, adapted, rep_first)?;
        let score_second = Self::similarity(bind, adapted, rep_second)?;
        self.decide(bind, score_first, score_second)
    }
}
