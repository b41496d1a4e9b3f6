//! Bidirectional GRU over batched sequences laid out inside one matrix.
//!
//! The dual-path blocks store a chunked latent as a `(n_seq * seq_len) x N`
//! matrix and alternate which axis plays the sequence role, so the GRU takes
//! a row-layout description instead of a 3-D tensor: the element of sequence
//! `s` at step `t` lives in row `s * stride_seq + t * stride_step`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::nn::params::{xavier, zeros, Binder, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};

struct GruDir {
    w: ParamId, // in x 3H, gate order [z | r | n]
    u: ParamId, // H x 3H
    b: ParamId, // 1 x 3H
}

impl GruDir {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        GruDir {
            w: store.add(format!("{prefix}.w"), xavier(rng, in_dim, 3 * hidden)),
            u: store.add(format!("{prefix}.u"), xavier(rng, hidden, 3 * hidden)),
            b: store.add(format!("{prefix}.b"), zeros(1, 3 * hidden)),
        }
    }
}

pub struct BiGru {
    fwd: GruDir,
    bwd: GruDir,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Row layout of packed sequences; see module docs.
#[derive(Clone, Copy, Debug)]
pub struct SeqLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub stride_seq: usize,
    pub stride_step: usize,
}

impl SeqLayout {
    fn step_rows(&self, t: usize) -> Vec<usize> {
        (0..self.n_seq)
            .map(|s| s * self.stride_seq + t * self.stride_step)
            .collect()
    }
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BiGru {
            fwd: GruDir::new(store, &format!("{prefix}.fwd"), in_dim, hidden, rng),
            bwd: GruDir::new(store, &format!("{prefix}.bwd"), in_dim, hidden, rng),
            in_dim,
            hidden,
        }
    }

    fn run_dir(
        &self,
        bind: &Binder,
        dir: &GruDir,
        x: Var,
        layout: &SeqLayout,
        reverse: bool,
    ) -> Vec<Var> {
        let t = bind.tape;
        let h0 = t.leaf(ndarray::Array2::zeros((layout.n_seq, self.hidden)));
        let hd = self.hidden;
        let mut h = h0;
        let mut outputs = vec![h0; layout.seq_len];
        let steps: Vec<usize> = if reverse {
            (0..layout.seq_len).rev().collect()
        } else {
            (0..layout.seq_len).collect()
        };
        let w = bind.var(dir.w);
        let u = bind.var(dir.u);
        let b = bind.var(dir.b);
        for step in steps {
            let xin = t.gather_rows(x, Rc::new(layout.step_rows(step)));
            let px = t.add_row(t.matmul(xin, w), b);
            let ph = t.matmul(h, u);
            let z = t.sigmoid(t.add(t.slice_cols(px, 0, hd), t.slice_cols(ph, 0, hd)));
            let r = t.sigmoid(t.add(
                t.slice_cols(px, hd, 2 * hd),
                t.slice_cols(ph, hd, 2 * hd),
            ));
            let n = t.tanh(t.add(
                t.slice_cols(px, 2 * hd, 3 * hd),
                t.mul(r, t.slice_cols(ph, 2 * hd, 3 * hd)),
            ));
            // h' = n + z * (h - n)
            h = t.add(n, t.mul(z, t.sub(h, n)));
            outputs[step] = h;
        }
        outputs
    }

    fn pack(&self, tape: &Tape, outputs: Vec<Var>, layout: &SeqLayout) -> Var {
        // outputs[t] is n_seq x H; stack to (seq_len * n_seq) then permute
        // rows back into the caller's layout.
        let stacked = tape.concat_rows(&outputs); // row = t * n_seq + s
        let rows = layout.n_seq * layout.seq_len;
        let mut perm = vec![0usize; rows];
        for s in 0..layout.n_seq {
            for t in 0..layout.seq_len {
                perm[s * layout.stride_seq + t * layout.stride_step] = t * layout.n_seq + s;
            }
        }
        tape.gather_rows(stacked, Rc::new(perm))
    }

    /// `x` rows follow `layout`; returns the same layout with `2 * hidden`
    /// columns (forward and backward states concatenated).
    pub fn apply(&self, bind: &Binder, x: Var, layout: &SeqLayout) -> Var {
        debug_assert_eq!(x.cols(), self.in_dim);
        debug_assert_eq!(x.rows(), layout.n_seq * layout.seq_len);
        let t = bind.tape;
        let f = self.run_dir(bind, &self.fwd, x, layout, false);
        let b = self.run_dir(bind, &self.bwd, x, layout, true);
        let fp = self.pack(t, f, layout);
        let bp = self.pack(t, b, layout);
        t.concat_cols(fp, bp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn forward(store: &ParamStore, gru: &BiGru, x: &Array2<f64>, layout: &SeqLayout) -> Array2<f64> {
        let tape = Tape::inference();
        let bind = Binder::new(&tape, store);
        let xv = tape.leaf(x.clone());
        tape.value(gru.apply(&bind, xv, layout))
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "t.gru", 3, 5, &mut rng);
        let layout = SeqLayout {
            n_seq: 4,
            seq_len: 6,
            stride_seq: 6,
            stride_step: 1,
        };
        let x = Array2::from_shape_fn((24, 3), |_| rng.gen_range(-1.0..1.0));
        let y = forward(&store, &gru, &x, &layout);
        assert_eq!(y.dim(), (24, 10));
        assert_eq!(y, forward(&store, &gru, &x, &layout));
    }

    #[test]
    fn sequences_are_independent() {
        // Modifying one sequence must not change another one's output.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "t.gru", 2, 4, &mut rng);
        let layout = SeqLayout {
            n_seq: 3,
            seq_len: 5,
            stride_seq: 5,
            stride_step: 1,
        };
        let x = Array2::from_shape_fn((15, 2), |_| rng.gen_range(-1.0..1.0));
        let mut x2 = x.clone();
        x2[[0, 0]] += 1.0; // sequence 0, step 0
        let a = forward(&store, &gru, &x, &layout);
        let b = forward(&store, &gru, &x2, &layout);
        // rows 5..15 belong to sequences 1 and 2
        for r in 5..15 {
            for c in 0..8 {
                assert_eq!(a[[r, c]], b[[r, c]], "row {r} col {c} leaked");
            }
        }
        // sequence 0 must have changed somewhere
        let diff: f64 = (0..5)
            .map(|r| {
                (0..8)
                    .map(|c| (a[[r, c]] - b[[r, c]]).abs())
                    .sum::<f64>()
            })
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn backward_direction_sees_the_future() {
        // In the backward half, step 0 depends on the last step's input.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "t.gru", 2, 3, &mut rng);
        let layout = SeqLayout {
            n_seq: 1,
            seq_len: 4,
            stride_seq: 4,
            stride_step: 1,
        };
        let x = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let mut x2 = x.clone();
        x2[[3, 0]] += 1.0;
        let a = forward(&store, &gru, &x, &layout);
        let b = forward(&store, &gru, &x2, &layout);
        // forward half of step 0 unchanged, backward half changed
        for c in 0..3 {
            assert_eq!(a[[0, c]], b[[0, c]]);
        }
        let bwd_diff: f64 = (3..6).map(|c| (a[[0, c]] - b[[0, c]]).abs()).sum();
        assert!(bwd_diff > 1e-9);
    }

    #[test]
    fn transposed_layout_matches_contiguous() {
        // Running over the "columns" of a chunk grid equals running over a
        // transposed contiguous grid.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "t.gru", 2, 3, &mut rng);
        let n_seq = 3;
        let seq_len = 4;
        let x = Array2::from_shape_fn((12, 2), |_| rng.gen_range(-1.0..1.0));

        // layout A: row = s*4 + t (sequence-major)
        let la = SeqLayout {
            n_seq,
            seq_len,
            stride_seq: seq_len,
            stride_step: 1,
        };
        let ya = forward(&store, &gru, &x, &la);

        // layout B over xT where row = t*3 + s: same sequences, transposed
        let mut xt = Array2::zeros((12, 2));
        for s in 0..n_seq {
            for t in 0..seq_len {
                for c in 0..2 {
                    xt[[t * n_seq + s, c]] = x[[s * seq_len + t, c]];
                }
            }
        }
        let lb = SeqLayout {
            n_seq,
            seq_len,
            stride_seq: 1,
            stride_step: n_seq,
        };
        let yb = forward(&store, &gru, &xt, &lb);
        for s in 0..n_seq {
            for t in 0..seq_len {
                for c in 0..6 {
                    let a = ya[[s * seq_len + t, c]];
                    let b = yb[[t * n_seq + s, c]];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
