//! Pre-norm single-head self-attention block with a position-wise
//! feedforward, the shared sequence-encoder unit of the EEG and stimuli
//! encoders.

use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{dropout, LayerNorm, Linear, Mode};
use crate::nn::params::{Binder, ParamStore};
use crate::nn::tape::Var;

pub struct AttnBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    dim: usize,
    dropout_p: f64,
}

impl AttnBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        ff_dim: usize,
        dropout_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AttnBlock {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), dim),
            wq: Linear::new(store, &format!("{prefix}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), dim),
            ff1: Linear::new(store, &format!("{prefix}.ff1"), dim, ff_dim, rng),
            ff2: Linear::new(store, &format!("{prefix}.ff2"), ff_dim, dim, rng),
            dim,
            dropout_p,
        }
    }

    /// `x` is `L x dim`; output has the same shape.
    pub fn apply(&self, bind: &Binder, x: Var, mode: &Mode) -> Var {
        let t = bind.tape;
        debug_assert_eq!(x.cols(), self.dim);

        let h = self.ln1.apply(bind, x);
        let q = self.wq.apply(bind, h);
        let k = self.wk.apply(bind, h);
        let v = self.wv.apply(bind, h);
        let scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / (self.dim as f64).sqrt());
        let attn = t.softmax_rows(scores);
        let ctx = self.wo.apply(bind, t.matmul(attn, v));
        let x = t.add(x, dropout(t, ctx, self.dropout_p, mode));

        let h2 = self.ln2.apply(bind, x);
        let mid = dropout(t, t.relu(self.ff1.apply(bind, h2)), self.dropout_p, mode);
        let ff = self.ff2.apply(bind, mid);
        t.add(x, dropout(t, ff, self.dropout_p, mode))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    #[test]
    fn block_preserves_shape_and_is_deterministic_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let block = AttnBlock::new(&mut store, "t.b0", 8, 32, 0.1, &mut rng);
        let x = Array2::from_shape_fn((13, 8), |_| rng.gen_range(-1.0..1.0));

        let run = || {
            let tape = Tape::inference();
            let bind = Binder::new(&tape, &store);
            let xv = tape.leaf(x.clone());
            tape.value(block.apply(&bind, xv, &Mode::Eval))
        };
        let a = run();
        assert_eq!(a.dim(), (13, 8));
        assert_eq!(a, run());
    }

    #[test]
    fn attention_mixes_across_time() {
        // Changing one input frame must change other output frames
        // (softmax attention attends globally).
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let block = AttnBlock::new(&mut store, "t.b0", 4, 16, 0.0, &mut rng);
        let x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let mut x2 = x.clone();
        x2[[0, 0]] += 0.5;

        let eval = |m: &Array2<f64>| {
            let tape = Tape::inference();
            let bind = Binder::new(&tape, &store);
            let xv = tape.leaf(m.clone());
            tape.value(block.apply(&bind, xv, &Mode::Eval))
        };
        let a = eval(&x);
        let b = eval(&x2);
        let tail_diff: f64 = (&a - &b)
            .rows()
            .into_iter()
            .skip(1)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(tail_diff > 1e-9);
    }
}
