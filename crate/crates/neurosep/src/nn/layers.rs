//! Layer primitives built on the tape: linear, 1-D convolution, overlap-add
//! transposed convolution, layer norm, PReLU, dropout, positional encoding.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::params::{xavier, zeros, Binder, ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-6;

/// Forward-pass mode. Training mode draws dropout masks from the supplied
/// stream; eval mode is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r std::cell::RefCell<ChaCha8Rng>),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{prefix}.w"), xavier(rng, in_dim, out_dim));
        let b = store.add(format!("{prefix}.b"), zeros(1, out_dim));
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, bind: &Binder, x: Var) -> Var {
        let t = bind.tape;
        let y = t.matmul(x, bind.var(self.w));
        match self.b {
            Some(b) => t.add_row(y, bind.var(b)),
            None => y,
        }
    }
}

/// Valid (no padding) 1-D convolution over a `T x in_ch` sequence.
///
/// Weight layout is `(kernel * in_ch) x out_ch`, with the kernel tap as the
/// outer index, matching the im2col row layout `[tap0 ch0.., tap1 ch0..]`.
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Output length of a valid convolution, if at least one frame fits.
pub fn conv_out_len(input_len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if input_len < kernel {
        None
    } else {
        Some((input_len - kernel) / stride + 1)
    }
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            xavier(rng, kernel * in_ch, out_ch),
        );
        let b = store.add(format!("{prefix}.b"), zeros(1, out_ch));
        Conv1d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn out_len(&self, input_len: usize) -> Option<usize> {
        conv_out_len(input_len, self.kernel, self.stride)
    }

    pub fn apply(&self, bind: &Binder, x: Var) -> Var {
        let t = bind.tape;
        debug_assert_eq!(x.cols(), self.in_ch, "conv input channel mismatch");
        let frames = self
            .out_len(x.rows())
            .expect("conv input shorter than kernel");
        let mut idx = Vec::with_capacity(frames * self.kernel);
        for f in 0..frames {
            for k in 0..self.kernel {
                idx.push(f * self.stride + k);
            }
        }
        let patches = t.gather_rows(x, Rc::new(idx)); // (frames*kernel) x in_ch
        let cols = t.reshape(patches, frames, self.kernel * self.in_ch);
        t.add_row(t.matmul(cols, bind.var(self.w)), bind.var(self.b))
    }
}

/// Transposed 1-D convolution to a single output channel, by overlap-add of
/// per-frame kernels: frame `l` contributes `x[l] . W` at offset `l * stride`.
pub struct Deconv1d {
    pub w: ParamId, // N x kernel
    pub b: ParamId, // 1 x 1
    pub kernel: usize,
    pub stride: usize,
}

impl Deconv1d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{prefix}.w"), xavier(rng, in_dim, kernel));
        let b = store.add(format!("{prefix}.b"), zeros(1, 1));
        Deconv1d {
            w,
            b,
            kernel,
            stride,
        }
    }

    /// `x` is `L x N`; output is `out_len x 1`, truncating or zero-padding
    /// the overlap-add result to `out_len`.
    pub fn apply(&self, bind: &Binder, x: Var, out_len: usize) -> Var {
        let t = bind.tape;
        let frames = x.rows();
        let natural = (frames - 1) * self.stride + self.kernel;
        let buf_len = natural.max(out_len);
        let contrib = t.matmul(x, bind.var(self.w)); // L x kernel
        let flat = t.reshape(contrib, frames * self.kernel, 1);
        let mut idx = Vec::with_capacity(frames * self.kernel);
        for f in 0..frames {
            for k in 0..self.kernel {
                idx.push(f * self.stride + k);
            }
        }
        let added = t.scatter_rows(flat, Rc::new(idx), buf_len);
        let trimmed = if buf_len > out_len {
            t.slice_rows(added, 0, out_len)
        } else {
            added
        };
        t.add_row(trimmed, bind.var(self.b))
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{prefix}.g"), super::params::ones(1, dim));
        let beta = store.add(format!("{prefix}.b"), zeros(1, dim));
        LayerNorm { gamma, beta }
    }

    pub fn apply(&self, bind: &Binder, x: Var) -> Var {
        bind.tape
            .layer_norm(x, bind.var(self.gamma), bind.var(self.beta), LN_EPS)
    }
}

pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, prefix: &str) -> Self {
        let slope = store.add(
            format!("{prefix}.slope"),
            Array2::from_elem((1, 1), 0.25),
        );
        Prelu { slope }
    }

    pub fn apply(&self, bind: &Binder, x: Var) -> Var {
        bind.tape.prelu(x, bind.var(self.slope))
    }
}

/// Inverted dropout; identity in eval mode or when p == 0.
pub fn dropout(tape: &Tape, x: Var, p: f64, mode: &Mode) -> Var {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mut r = rng.borrow_mut();
            let mask = Array2::from_shape_fn((x.rows(), x.cols()), |_| {
                if r.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            drop(r);
            tape.mul_const(x, &mask)
        }
        _ => x,
    }
}

/// Standard sinusoidal positional encoding, `len x dim`.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
