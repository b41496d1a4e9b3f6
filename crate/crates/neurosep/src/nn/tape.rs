//! Reverse-mode autodiff over `ndarray::Array2<f64>`.
//!
//! Every tensor on the tape is a row-major matrix: waveforms are `T x 1`,
//! frame sequences are `L x N`, scalars are `1 x 1`. Nodes are created in
//! topological order, so backward is a single reverse sweep.
//!
//! Backward edges accumulate directly into the parent's gradient buffer and
//! read parent values from the node list instead of capturing clones, which
//! keeps both allocation churn and tape memory low. With `Tape::inference()`
//! no edges are recorded at all.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Axis, Zip};

/// Accumulating backward transfer: `(nodes, own_value, grad_out, grad_parent)`.
type ApplyFn = Box<dyn Fn(&[Node], &Array2<f64>, &Array2<f64>, &mut Array2<f64>)>;

struct Edge {
    parent: usize,
    parent_shape: (usize, usize),
    apply: ApplyFn,
}

struct Node {
    value: Array2<f64>,
    edges: Vec<Edge>,
}

/// Handle to a tape node. Shape is carried in the handle so callers can do
/// shape arithmetic without touching the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    by_idx: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_idx.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records values only; `backward` on it yields nothing.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    fn push(&self, value: Array2<f64>, edges: Vec<Edge>) -> Var {
        let rows = value.nrows();
        let cols = value.ncols();
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            edges: if self.recording { edges } else { Vec::new() },
        });
        Var { idx, rows, cols }
    }

    fn edge(&self, parent: Var, apply: ApplyFn) -> Edge {
        Edge {
            parent: parent.idx,
            parent_shape: parent.shape(),
            apply,
        }
    }

    /// Leaf with no parents (parameters, inputs, constants).
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Vec::new())
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    /// Borrow two parent values, compute the output without cloning inputs.
    fn with1<R>(&self, a: Var, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.idx].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.idx].value, &nodes[b.idx].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!((v.rows, v.cols), (1, 1));
        self.nodes.borrow()[v.idx].value[[0, 0]]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Backpropagates from a 1x1 scalar root. Gradients are retained for
    /// leaf nodes only (everything else is interior).
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!((root.rows, root.cols), (1, 1), "backward root must be scalar");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(Array2::ones((1, 1)));
        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            for e in &node.edges {
                if grads[e.parent].is_none() {
                    grads[e.parent] = Some(Array2::zeros(e.parent_shape));
                }
                (e.apply)(&nodes, &node.value, &g, grads[e.parent].as_mut().unwrap());
            }
            if node.edges.is_empty() {
                grads[i] = Some(g); // keep leaf gradients retrievable
            }
        }
        Gradients { by_idx: grads }
    }

    // ---- elementwise arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = self.with2(a, b, |va, vb| va + vb);
        self.push(
            out,
            vec![
                self.edge(a, Box::new(|_, _, g, acc| *acc += g)),
                self.edge(b, Box::new(|_, _, g, acc| *acc += g)),
            ],
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = self.with2(a, b, |va, vb| va - vb);
        self.push(
            out,
            vec![
                self.edge(a, Box::new(|_, _, g, acc| *acc += g)),
                self.edge(b, Box::new(|_, _, g, acc| *acc -= g)),
            ],
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = self.with2(a, b, |va, vb| va * vb);
        self.push(
            out,
            vec![
                self.edge(
                    a,
                    Box::new(move |nodes, _, g, acc| {
                        Zip::from(acc)
                            .and(g)
                            .and(&nodes[b.idx].value)
                            .for_each(|a, &g, &b| *a += g * b);
                    }),
                ),
                self.edge(
                    b,
                    Box::new(move |nodes, _, g, acc| {
                        Zip::from(acc)
                            .and(g)
                            .and(&nodes[a.idx].value)
                            .for_each(|a2, &g, &av| *a2 += g * av);
                    }),
                ),
            ],
        )
    }

    /// Elementwise division (used on 1x1 scalars in the losses).
    pub fn div(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = self.with2(a, b, |va, vb| va / vb);
        self.push(
            out,
            vec![
                self.edge(
                    a,
                    Box::new(move |nodes, _, g, acc| {
                        Zip::from(acc)
                            .and(g)
                            .and(&nodes[b.idx].value)
                            .for_each(|a2, &g, &b| *a2 += g / b);
                    }),
                ),
                self.edge(
                    b,
                    // d(a/b)/db = -(a/b)/b
                    Box::new(move |nodes, own, g, acc| {
                        Zip::from(acc)
                            .and(g)
                            .and(own)
                            .and(&nodes[b.idx].value)
                            .for_each(|a2, &g, &r, &b| *a2 -= g * r / b);
                    }),
                ),
            ],
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.with1(a, |va| va * c);
        self.push(
            out,
            vec![self.edge(a, Box::new(move |_, _, g, acc| acc.scaled_add(c, g)))],
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.with1(a, |va| va + c);
        self.push(out, vec![self.edge(a, Box::new(|_, _, g, acc| *acc += g))])
    }

    /// Elementwise multiply by a constant matrix (dropout masks, references).
    pub fn mul_const(&self, a: Var, m: &Array2<f64>) -> Var {
        assert_eq!(a.shape(), m.dim(), "mul_const shape mismatch");
        let out = self.with1(a, |va| va * m);
        let m2 = m.clone();
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |_, _, g, acc| {
                    Zip::from(acc).and(g).and(&m2).for_each(|a2, &g, &m| *a2 += g * m);
                }),
            )],
        )
    }

    /// Adds a constant matrix (positional encodings).
    pub fn add_const(&self, a: Var, m: &Array2<f64>) -> Var {
        assert_eq!(a.shape(), m.dim(), "add_const shape mismatch");
        let out = self.with1(a, |va| va + m);
        self.push(out, vec![self.edge(a, Box::new(|_, _, g, acc| *acc += g))])
    }

    /// `s` is 1x1; result is `s * m` for a constant matrix `m`.
    pub fn broadcast_mul_scalar(&self, scalar: Var, m: &Array2<f64>) -> Var {
        assert_eq!((scalar.rows, scalar.cols), (1, 1));
        let sv = self.scalar(scalar);
        let m2 = m.clone();
        self.push(
            m * sv,
            vec![self.edge(
                scalar,
                Box::new(move |_, _, g, acc| {
                    let mut dot = 0.0;
                    Zip::from(g).and(&m2).for_each(|&g, &m| dot += g * m);
                    acc[[0, 0]] += dot;
                }),
            )],
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul shape mismatch");
        let out = self.with2(a, b, |va, vb| va.dot(vb));
        self.push(
            out,
            vec![
                self.edge(
                    a,
                    Box::new(move |nodes, _, g, acc| {
                        general_mat_mul(1.0, g, &nodes[b.idx].value.t(), 1.0, acc);
                    }),
                ),
                self.edge(
                    b,
                    Box::new(move |nodes, _, g, acc| {
                        general_mat_mul(1.0, &nodes[a.idx].value.t(), g, 1.0, acc);
                    }),
                ),
            ],
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.with1(a, |va| va.t().to_owned());
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(|_, _, g, acc| {
                    Zip::from(acc).and(g.t()).for_each(|a2, &g| *a2 += g);
                }),
            )],
        )
    }

    /// `a` is LxN, `bias` is 1xN; adds the bias to every row.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        assert_eq!(bias.rows, 1, "bias must be a row vector");
        assert_eq!(a.cols, bias.cols, "bias width mismatch");
        let out = self.with2(a, bias, |va, vb| va + vb);
        self.push(
            out,
            vec![
                self.edge(a, Box::new(|_, _, g, acc| *acc += g)),
                self.edge(
                    bias,
                    Box::new(|_, _, g, acc| {
                        let mut row = acc.row_mut(0);
                        for grow in g.rows() {
                            row += &grow;
                        }
                    }),
                ),
            ],
        )
    }

    // ---- nonlinearities ----

    pub fn relu(&self, a: Var) -> Var {
        let out = self.with1(a, |va| va.mapv(|x| x.max(0.0)));
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |nodes, _, g, acc| {
                    Zip::from(acc)
                        .and(g)
                        .and(&nodes[a.idx].value)
                        .for_each(|a2, &g, &x| {
                            if x > 0.0 {
                                *a2 += g;
                            }
                        });
                }),
            )],
        )
    }

    /// Parametric ReLU with a single learnable slope (1x1).
    pub fn prelu(&self, a: Var, slope: Var) -> Var {
        assert_eq!((slope.rows, slope.cols), (1, 1));
        let sv = self.scalar(slope);
        let out = self.with1(a, |va| va.mapv(|x| if x > 0.0 { x } else { sv * x }));
        self.push(
            out,
            vec![
                self.edge(
                    a,
                    Box::new(move |nodes, _, g, acc| {
                        let s = nodes[slope.idx].value[[0, 0]];
                        Zip::from(acc)
                            .and(g)
                            .and(&nodes[a.idx].value)
                            .for_each(|a2, &g, &x| *a2 += if x > 0.0 { g } else { s * g });
                    }),
                ),
                self.edge(
                    slope,
                    Box::new(move |nodes, _, g, acc| {
                        let mut dot = 0.0;
                        Zip::from(g)
                            .and(&nodes[a.idx].value)
                            .for_each(|&g, &x| {
                                if x <= 0.0 {
                                    dot += g * x;
                                }
                            });
                        acc[[0, 0]] += dot;
                    }),
                ),
            ],
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.with1(a, |va| va.mapv(|x| 1.0 / (1.0 + (-x).exp())));
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(|_, own, g, acc| {
                    Zip::from(acc)
                        .and(g)
                        .and(own)
                        .for_each(|a2, &g, &y| *a2 += g * y * (1.0 - y));
                }),
            )],
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.with1(a, |va| va.mapv(f64::tanh));
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(|_, own, g, acc| {
                    Zip::from(acc)
                        .and(g)
                        .and(own)
                        .for_each(|a2, &g, &y| *a2 += g * (1.0 - y * y));
                }),
            )],
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.with1(a, |va| va.mapv(f64::ln));
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |nodes, _, g, acc| {
                    Zip::from(acc)
                        .and(g)
                        .and(&nodes[a.idx].value)
                        .for_each(|a2, &g, &x| *a2 += g / x);
                }),
            )],
        )
    }

    /// Clamp; gradient passes only strictly inside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.with1(a, |va| va.mapv(|x| x.clamp(lo, hi)));
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |nodes, _, g, acc| {
                    Zip::from(acc)
                        .and(g)
                        .and(&nodes[a.idx].value)
                        .for_each(|a2, &g, &x| {
                            if x > lo && x < hi {
                                *a2 += g;
                            }
                        });
                }),
            )],
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let mut y = self.with1(a, |va| va.clone());
        for mut row in y.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(
            y,
            vec![self.edge(
                a,
                Box::new(|_, own, g, acc| {
                    for ((mut arow, yrow), grow) in
                        acc.rows_mut().into_iter().zip(own.rows()).zip(g.rows())
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                        Zip::from(&mut arow)
                            .and(&yrow)
                            .and(&grow)
                            .for_each(|a2, &y, &g| *a2 += y * (g - dot));
                    }
                }),
            )],
        )
    }

    // ---- reductions / broadcasts ----

    pub fn sum_all(&self, a: Var) -> Var {
        let mut out = Array2::zeros((1, 1));
        out[[0, 0]] = self.with1(a, |va| va.sum());
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(|_, _, g, acc| {
                    let gv = g[[0, 0]];
                    acc.mapv_inplace(|x| x + gv);
                }),
            )],
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// LxN -> 1xN column means (adaptive average pooling to one frame).
    pub fn mean_rows(&self, a: Var) -> Var {
        let rows = a.rows as f64;
        let out = self.with1(a, |va| {
            va.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0))
        });
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |_, _, g, acc| {
                    let grow = g.row(0);
                    for mut arow in acc.rows_mut() {
                        Zip::from(&mut arow).and(&grow).for_each(|a2, &g| *a2 += g / rows);
                    }
                }),
            )],
        )
    }

    /// LxN -> Lx1 row sums (per-frame inner products are mul + row_sum).
    pub fn row_sum(&self, a: Var) -> Var {
        let out = self.with1(a, |va| va.sum_axis(Axis(1)).insert_axis(Axis(1)));
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(|_, _, g, acc| {
                    for (mut arow, gv) in acc.rows_mut().into_iter().zip(g.column(0)) {
                        arow.mapv_inplace(|x| x + gv);
                    }
                }),
            )],
        )
    }

    // ---- structural ops ----

    /// Gathers rows by index; an index may repeat (backward scatter-adds).
    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let out = self.with1(a, |va| {
            let mut out = Array2::zeros((idx.len(), va.ncols()));
            for (o, &i) in idx.iter().enumerate() {
                debug_assert!(i < va.nrows(), "gather index out of range");
                out.row_mut(o).assign(&va.row(i));
            }
            out
        });
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |_, _, g, acc| {
                    for (o, &i) in idx.iter().enumerate() {
                        let mut row = acc.row_mut(i);
                        row += &g.row(o);
                    }
                }),
            )],
        )
    }

    /// Scatter-add rows into a fresh `out_rows x N` matrix (overlap-add).
    /// Row `r` of `a` is added into row `idx[r]` of the output.
    pub fn scatter_rows(&self, a: Var, idx: Rc<Vec<usize>>, out_rows: usize) -> Var {
        assert_eq!(a.rows, idx.len(), "scatter index length mismatch");
        let out = self.with1(a, |va| {
            let mut out = Array2::zeros((out_rows, va.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                debug_assert!(i < out_rows, "scatter index out of range");
                let mut row = out.row_mut(i);
                row += &va.row(r);
            }
            out
        });
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |_, _, g, acc| {
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = acc.row_mut(r);
                        row += &g.row(i);
                    }
                }),
            )],
        )
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.rows, b.rows, "concat_cols row mismatch");
        let ac = a.cols;
        let out = self.with2(a, b, |va, vb| concatenate![Axis(1), *va, *vb]);
        self.push(
            out,
            vec![
                self.edge(
                    a,
                    Box::new(move |_, _, g, acc| {
                        *acc += &g.slice(s![.., ..ac]);
                    }),
                ),
                self.edge(
                    b,
                    Box::new(move |_, _, g, acc| {
                        *acc += &g.slice(s![.., ac..]);
                    }),
                ),
            ],
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.idx].value.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows shape mismatch")
        };
        let mut edges = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for part in parts {
            let lo = offset;
            let hi = offset + part.rows;
            offset = hi;
            edges.push(self.edge(
                *part,
                Box::new(move |_, _, g, acc| {
                    *acc += &g.slice(s![lo..hi, ..]);
                }),
            ));
        }
        self.push(out, edges)
    }

    pub fn slice_cols(&self, a: Var, lo: usize, hi: usize) -> Var {
        assert!(lo < hi && hi <= a.cols, "slice_cols out of range");
        let out = self.with1(a, |va| va.slice(s![.., lo..hi]).to_owned());
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |_, _, g, acc| {
                    let mut sub = acc.slice_mut(s![.., lo..hi]);
                    sub += g;
                }),
            )],
        )
    }

    pub fn slice_rows(&self, a: Var, lo: usize, hi: usize) -> Var {
        assert!(lo < hi && hi <= a.rows, "slice_rows out of range");
        let out = self.with1(a, |va| va.slice(s![lo..hi, ..]).to_owned());
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |_, _, g, acc| {
                    let mut sub = acc.slice_mut(s![lo..hi, ..]);
                    sub += g;
                }),
            )],
        )
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(a.rows * a.cols, rows * cols, "reshape element count mismatch");
        let out = self.with1(a, |va| {
            va.as_standard_layout()
                .to_owned()
                .into_shape_with_order((rows, cols))
                .expect("reshape")
        });
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(|_, _, g, acc| {
                    // both standard layout: accumulate flat
                    let gs = g.as_slice().expect("reshape grad layout");
                    let asl = acc.as_slice_mut().expect("reshape acc layout");
                    for (a2, &gv) in asl.iter_mut().zip(gs) {
                        *a2 += gv;
                    }
                }),
            )],
        )
    }

    /// Pads rows with zeros at the bottom.
    pub fn pad_rows(&self, a: Var, extra: usize) -> Var {
        let r = a.rows;
        let out = self.with1(a, |va| {
            let mut out = Array2::zeros((r + extra, va.ncols()));
            out.slice_mut(s![..r, ..]).assign(va);
            out
        });
        self.push(
            out,
            vec![self.edge(
                a,
                Box::new(move |_, _, g, acc| {
                    *acc += &g.slice(s![..r, ..]);
                }),
            )],
        )
    }

    /// Fused layer normalization over each row, with affine parameters
    /// `gamma`, `beta` (both 1xN).
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let n = a.cols;
        assert_eq!(gamma.shape(), (1, n), "gamma shape");
        assert_eq!(beta.shape(), (1, n), "beta shape");

        let (xhat, inv_std) = self.with1(a, |va| {
            let mut xhat = Array2::zeros(va.dim());
            let mut inv_std = Vec::with_capacity(va.nrows());
            for (i, row) in va.rows().into_iter().enumerate() {
                let mean = row.mean().unwrap();
                let var =
                    row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std.push(istd);
                for (j, &x) in row.iter().enumerate() {
                    xhat[[i, j]] = (x - mean) * istd;
                }
            }
            (xhat, inv_std)
        });
        let out = self.with2(a, gamma, |_, vg| &xhat * vg)
            + &self.nodes.borrow()[beta.idx].value;

        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let xhat_a = xhat.clone();
        let xhat_g = xhat.clone();
        self.push(
            out,
            vec![
                self.edge(
                    a,
                    Box::new(move |nodes, _, g, acc| {
                        // dxhat = g * gamma;
                        // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let gamma_row = nodes[gamma.idx].value.row(0);
                        let nf = n as f64;
                        for i in 0..acc.nrows() {
                            let grow = g.row(i);
                            let xrow = xhat_a.row(i);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                let d = grow[j] * gamma_row[j];
                                m1 += d;
                                m2 += d * xrow[j];
                            }
                            m1 /= nf;
                            m2 /= nf;
                            let istd = inv_std[i];
                            let mut arow = acc.row_mut(i);
                            for j in 0..n {
                                let d = grow[j] * gamma_row[j];
                                arow[j] += istd * (d - m1 - xrow[j] * m2);
                            }
                        }
                    }),
                ),
                self.edge(
                    gamma,
                    Box::new(move |_, _, g, acc| {
                        let mut row = acc.row_mut(0);
                        for (grow, xrow) in g.rows().into_iter().zip(xhat_g.rows()) {
                            Zip::from(&mut row)
                                .and(&grow)
                                .and(&xrow)
                                .for_each(|a2, &g, &x| *a2 += g * x);
                        }
                    }),
                ),
                self.edge(
                    beta,
                    Box::new(|_, _, g, acc| {
                        let mut row = acc.row_mut(0);
                        for grow in g.rows() {
                            row += &grow;
                        }
                    }),
                ),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of an arbitrary scalar-valued tape program.
    fn fd_check(
        inputs: &[Array2<f64>],
        f: impl Fn(&Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &vars);
        assert_eq!((out.rows(), out.cols()), (1, 1), "fd_check needs scalar output");
        let grads = tape.backward(out);

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for i in 0..input.nrows() {
                for j in 0..input.ncols() {
                    let eval = |delta: f64| {
                        let t = Tape::inference();
                        let vs: Vec<Var> = inputs
                            .iter()
                            .enumerate()
                            .map(|(k2, m)| {
                                let mut m = m.clone();
                                if k2 == k {
                                    m[[i, j]] += delta;
                                }
                                t.leaf(m)
                            })
                            .collect();
                        t.scalar(f(&t, &vs))
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[[i, j]];
                    let denom = a.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (a - fd).abs() / denom < tol,
                        "input {k} [{i},{j}]: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn arithmetic_ops_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        fd_check(&[a.clone(), b.clone()], |t, v| {
            let x = t.add(v[0], v[1]);
            let y = t.mul(x, v[0]);
            let z = t.sub(y, v[1]);
            let w = t.scale(z, 0.7);
            t.sum_all(w)
        }, 1e-6);
        // div on positive scalars
        let s1 = Array2::from_elem((1, 1), 1.3);
        let s2 = Array2::from_elem((1, 1), 0.8);
        fd_check(&[s1, s2], |t, v| t.div(v[0], v[1]), 1e-6);
    }

    #[test]
    fn matmul_and_bias_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 5);
        let w = rand_mat(&mut rng, 5, 2);
        let b = rand_mat(&mut rng, 1, 2);
        fd_check(&[a, w, b], |t, v| {
            let y = t.add_row(t.matmul(v[0], v[1]), v[2]);
            t.mean_all(t.mul(y, y))
        }, 1e-6);
    }

    #[test]
    fn nonlinearity_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3) + 0.05; // keep clear of relu kink
        let slope = Array2::from_elem((1, 1), 0.25);
        fd_check(&[a.clone(), slope], |t, v| {
            let r = t.relu(v[0]);
            let p = t.prelu(v[0], v[1]);
            let s = t.sigmoid(v[0]);
            let th = t.tanh(v[0]);
            let sum = t.add(t.add(r, p), t.add(s, th));
            t.sum_all(sum)
        }, 1e-5);
        let pos = a.mapv(|x| x.abs() + 0.5);
        fd_check(&[pos], |t, v| t.sum_all(t.ln(v[0])), 1e-6);
    }

    #[test]
    fn softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 3, 5);
        let w = rand_mat(&mut rng, 3, 5);
        fd_check(&[a, w.clone()], |t, v| {
            let y = t.softmax_rows(v[0]);
            t.sum_all(t.mul(y, v[1]))
        }, 1e-6);
    }

    #[test]
    fn reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 3);
        fd_check(&[a.clone()], |t, v| {
            let m = t.mean_rows(v[0]);
            t.sum_all(t.mul(m, m))
        }, 1e-6);
        fd_check(&[a], |t, v| {
            let r = t.row_sum(v[0]);
            t.sum_all(t.mul(r, r))
        }, 1e-6);
    }

    #[test]
    fn structural_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 5, 3);
        let b = rand_mat(&mut rng, 5, 2);
        let idx = Rc::new(vec![0usize, 2, 2, 4, 1]);
        let idx2 = idx.clone();
        fd_check(&[a.clone(), b], |t, v| {
            let g = t.gather_rows(v[0], idx2.clone());
            let c = t.concat_cols(g, v[1]);
            let s = t.slice_cols(c, 1, 4);
            let s2 = t.slice_rows(s, 0, 4);
            t.sum_all(t.mul(s2, s2))
        }, 1e-6);

        let scatter_idx = Rc::new(vec![0usize, 1, 1, 2, 3]);
        let si = scatter_idx.clone();
        fd_check(&[a.clone()], |t, v| {
            let y = t.scatter_rows(v[0], si.clone(), 4);
            t.sum_all(t.mul(y, y))
        }, 1e-6);

        fd_check(&[a.clone()], |t, v| {
            let y = t.reshape(v[0], 3, 5);
            let p = t.pad_rows(y, 2);
            t.sum_all(t.mul(p, p))
        }, 1e-6);

        let c0 = rand_mat(&mut rng, 2, 3);
        let c1 = rand_mat(&mut rng, 3, 3);
        fd_check(&[c0, c1], |t, v| {
            let y = t.concat_rows(&[v[0], v[1], v[0]]);
            t.sum_all(t.mul(y, y))
        }, 1e-6);
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 4, 6);
        let gamma = rand_mat(&mut rng, 1, 6) + 1.0;
        let beta = rand_mat(&mut rng, 1, 6);
        let probe = rand_mat(&mut rng, 4, 6);
        fd_check(&[a, gamma, beta, probe.clone()], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
            t.sum_all(t.mul(y, v[3]))
        }, 1e-5);
    }

    #[test]
    fn scalar_broadcast_and_clamp_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Array2::from_elem((1, 1), 0.37);
        let m = rand_mat(&mut rng, 3, 3);
        let m2 = m.clone();
        fd_check(&[s], move |t, v| {
            let y = t.broadcast_mul_scalar(v[0], &m2);
            t.sum_all(y)
        }, 1e-6);
        let a = rand_mat(&mut rng, 3, 3) * 3.0;
        fd_check(&[a], |t, v| {
            let y = t.clamp(v[0], -1.0, 1.0);
            t.sum_all(t.mul(y, y))
        }, 1e-6);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(a*a) + sum(a): grad = 2a + 1
        let a = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let tape = Tape::new();
        let v = tape.leaf(a.clone());
        let f = tape.add(tape.sum_all(tape.mul(v, v)), tape.sum_all(v));
        let grads = tape.backward(f);
        let g = grads.get(v).unwrap();
        for (gv, av) in g.iter().zip(a.iter()) {
            assert!((gv - (2.0 * av + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_tape_records_no_edges() {
        let tape = Tape::inference();
        let v = tape.leaf(Array2::ones((2, 2)));
        let y = tape.mul(v, v);
        let s = tape.sum_all(y);
        assert_eq!(tape.scalar(s), 4.0);
        let grads = tape.backward(s);
        assert!(grads.get(v).is_none());
    }
}
