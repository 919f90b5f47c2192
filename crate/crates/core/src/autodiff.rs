//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A `Tape` records the forward computation as a flat list of nodes; the
//! backward pass walks it in reverse and accumulates exact gradients of a
//! scalar output with respect to any recorded node. Enough primitives for
//! MLP/LSTM policies, Gaussian log-densities and the clipped surrogate
//! objective; nothing more.

use nalgebra::DMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    // unary, parent index
    Tanh(usize),
    Sigmoid(usize),
    Relu6(usize),
    LeakyRelu(usize, u64),
    Exp(usize),
    Neg(usize),
    Scale(usize, u64),
    AddScalar(usize, u64),
    Clamp(usize, u64, u64),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    // binary
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    MatMul(usize, usize),
    Min(usize, usize),
}

// Scalar op payloads are stored as bit patterns so Op stays Copy without
// rounding surprises.
#[inline]
fn f(bits: u64) -> f64 {
    f64::from_bits(bits)
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Reverse-mode tape. Build values with the method per primitive, then call
/// `backward` on a 1×1 output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.nrows(), m.ncols()), (1, 1), "expected 1x1 node");
        m[(0, 0)]
    }

    /// Insert a leaf (input or parameter).
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn relu6(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.clamp(0.0, 6.0));
        self.push(v, Op::Relu6(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a.0, slope.to_bits()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -&self.nodes[a.0].value;
        self.push(v, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a.0, c.to_bits()))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a.0, c.to_bits()))
    }

    /// Clamp with pass-through gradient strictly inside (lo, hi).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo.to_bits(), hi.to_bits()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(DMatrix::from_element(1, 1, s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let s = m.sum() / (m.nrows() * m.ncols()) as f64;
        self.push(DMatrix::from_element(1, 1, s), Op::Mean(a.0))
    }

    /// Row-wise sum: m×n -> m×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let v = DMatrix::from_fn(m.nrows(), 1, |r, _| m.row(r).sum());
        self.push(v, Op::RowSum(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    /// Broadcast-add a 1×n row (bias) to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let r = &self.nodes[row.0].value;
        assert_eq!(r.nrows(), 1);
        assert_eq!(m.ncols(), r.ncols());
        let v = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] + r[(0, j)]);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.component_mul(&self.nodes[b.0].value);
        self.push(v, Op::MulElem(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::MatMul(a.0, b.0))
    }

    /// Elementwise minimum (ties differentiate into the first argument).
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let v = DMatrix::from_fn(va.nrows(), va.ncols(), |i, j| va[(i, j)].min(vb[(i, j)]));
        self.push(v, Op::Min(a.0, b.0))
    }

    /// Gradients of the scalar `out` with respect to every node; indexed by
    /// `Var`. Nodes that do not influence `out` get zero gradients.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<DMatrix<f64>>> = (0..n).map(|_| None).collect();
        let o = &self.nodes[out.0].value;
        assert_eq!((o.nrows(), o.ncols()), (1, 1), "backward needs a scalar output");
        grads[out.0] = Some(DMatrix::from_element(1, 1, 1.0));

        for idx in (0..=out.0).rev() {
            // Leaves keep their accumulated gradient for the caller;
            // interior gradients are consumed as we walk past them.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match self.nodes[idx].op {
                Op::Leaf => {}
                Op::Tanh(p) => {
                    let v = &self.nodes[idx].value;
                    let gp = g.zip_map(v, |gi, vi| gi * (1.0 - vi * vi));
                    accumulate(&mut grads, p, gp);
                }
                Op::Sigmoid(p) => {
                    let v = &self.nodes[idx].value;
                    let gp = g.zip_map(v, |gi, vi| gi * vi * (1.0 - vi));
                    accumulate(&mut grads, p, gp);
                }
                Op::Relu6(p) => {
                    let x = &self.nodes[p].value;
                    let gp = g.zip_map(x, |gi, xi| if xi > 0.0 && xi < 6.0 { gi } else { 0.0 });
                    accumulate(&mut grads, p, gp);
                }
                Op::LeakyRelu(p, s) => {
                    let x = &self.nodes[p].value;
                    let s = f(s);
                    let gp = g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { s * gi });
                    accumulate(&mut grads, p, gp);
                }
                Op::Exp(p) => {
                    let v = &self.nodes[idx].value;
                    accumulate(&mut grads, p, g.component_mul(v));
                }
                Op::Neg(p) => accumulate(&mut grads, p, -g),
                Op::Scale(p, c) => accumulate(&mut grads, p, g * f(c)),
                Op::AddScalar(p, _) => accumulate(&mut grads, p, g),
                Op::Clamp(p, lo, hi) => {
                    let x = &self.nodes[p].value;
                    let (lo, hi) = (f(lo), f(hi));
                    let gp = g.zip_map(x, |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 });
                    accumulate(&mut grads, p, gp);
                }
                Op::Sum(p) => {
                    let x = &self.nodes[p].value;
                    let gp = DMatrix::from_element(x.nrows(), x.ncols(), g[(0, 0)]);
                    accumulate(&mut grads, p, gp);
                }
                Op::Mean(p) => {
                    let x = &self.nodes[p].value;
                    let c = g[(0, 0)] / (x.nrows() * x.ncols()) as f64;
                    let gp = DMatrix::from_element(x.nrows(), x.ncols(), c);
                    accumulate(&mut grads, p, gp);
                }
                Op::RowSum(p) => {
                    let x = &self.nodes[p].value;
                    let gp = DMatrix::from_fn(x.nrows(), x.ncols(), |r, _| g[(r, 0)]);
                    accumulate(&mut grads, p, gp);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gr = DMatrix::zeros(1, g.ncols());
                    for j in 0..g.ncols() {
                        gr[(0, j)] = g.column(j).sum();
                    }
                    accumulate(&mut grads, a, g);
                    accumulate(&mut grads, b, gr);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, -g);
                }
                Op::MulElem(a, b) => {
                    let ga = g.component_mul(&self.nodes[b].value);
                    let gb = g.component_mul(&self.nodes[a].value);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = &g * self.nodes[b].value.transpose();
                    let gb = self.nodes[a].value.transpose() * &g;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Min(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    let ga = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| {
                        if va[(i, j)] <= vb[(i, j)] {
                            g[(i, j)]
                        } else {
                            0.0
                        }
                    });
                    let gb = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| {
                        if va[(i, j)] <= vb[(i, j)] {
                            0.0
                        } else {
                            g[(i, j)]
                        }
                    });
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], idx: usize, g: DMatrix<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += g,
        slot => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` never influenced the output.
    pub fn get(&self, v: Var, rows: usize, cols: usize) -> DMatrix<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(rows, cols))
    }

    pub fn try_get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads[v.0].as_ref()
    }
}
