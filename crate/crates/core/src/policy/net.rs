//! Forward passes for the MLP and stacked-LSTM networks, in two flavours:
//! a plain nalgebra path for rollouts and a taped path for training. Both
//! consume the same parameter layout, and a test pins them together.
//!
//! Layouts (row-major batches, weights stored input×output):
//!   MLP policy:  [W1 b1 .. Wk bk, Wmean bmean, Wlogstd blogstd]
//!   LSTM policy: [Wxi Whi bi, Wxf Whf bf, Wxg Whg bg, Wxo Who bo] per
//!                layer, then the two heads; critics drop the second head.

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};

use super::{Arch, LstmState, PolicyParams, ValueParams};

/// Parameter shapes for an MLP with `heads` output heads of width `n_out`.
pub fn mlp_shapes(n_in: usize, hidden: &[usize], n_out: usize, heads: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut prev = n_in;
    for &h in hidden {
        out.push((prev, h));
        out.push((1, h));
        prev = h;
    }
    for _ in 0..heads {
        out.push((prev, n_out));
        out.push((1, n_out));
    }
    out
}

/// Parameter shapes for a stacked LSTM with `heads` output heads.
pub fn lstm_shapes(
    n_in: usize,
    layers: usize,
    width: usize,
    n_out: usize,
    heads: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut prev = n_in;
    for _ in 0..layers {
        for _ in 0..4 {
            out.push((prev, width));
            out.push((width, width));
            out.push((1, width));
        }
        prev = width;
    }
    for _ in 0..heads {
        out.push((prev, n_out));
        out.push((1, n_out));
    }
    out
}

fn sigmoid_mat(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| 1.0 / (1.0 + (-x).exp()))
}

fn add_row(m: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] + r[(0, j)])
}

/// Shared trunk walk; returns the feature matrix feeding the heads and the
/// index of the first head matrix.
fn trunk_plain(
    arch: &Arch,
    mats: &[DMatrix<f64>],
    x: &DMatrix<f64>,
    state: &mut LstmState,
) -> (DMatrix<f64>, usize) {
    match arch {
        Arch::Mlp { hidden } => {
            let mut h = x.clone();
            let mut idx = 0;
            for _ in hidden {
                h = add_row(&(&h * &mats[idx]), &mats[idx + 1]).map(f64::tanh);
                idx += 2;
            }
            (h, idx)
        }
        Arch::Lstm { layers, .. } => {
            let mut xin = x.clone();
            let mut idx = 0;
            for l in 0..*layers {
                let i = sigmoid_mat(&add_row(
                    &(&xin * &mats[idx] + &state.h[l] * &mats[idx + 1]),
                    &mats[idx + 2],
                ));
                let f = sigmoid_mat(&add_row(
                    &(&xin * &mats[idx + 3] + &state.h[l] * &mats[idx + 4]),
                    &mats[idx + 5],
                ));
                let g = add_row(
                    &(&xin * &mats[idx + 6] + &state.h[l] * &mats[idx + 7]),
                    &mats[idx + 8],
                )
                .map(f64::tanh);
                let o = sigmoid_mat(&add_row(
                    &(&xin * &mats[idx + 9] + &state.h[l] * &mats[idx + 10]),
                    &mats[idx + 11],
                ));
                let c = state.c[l].component_mul(&f) + i.component_mul(&g);
                let h = o.component_mul(&c.map(f64::tanh));
                state.c[l] = c;
                state.h[l] = h.clone();
                xin = h;
                idx += 12;
            }
            (xin, idx)
        }
    }
}

pub(crate) fn policy_forward_plain(
    p: &PolicyParams,
    x: &DMatrix<f64>,
    state: &mut LstmState,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (feat, idx) = trunk_plain(&p.arch, &p.mats, x, state);
    let feat = match p.arch {
        Arch::Mlp { .. } => feat,
        // Table-style output activation on the recurrent features.
        Arch::Lstm { .. } => feat.map(|v| v.clamp(0.0, 6.0)),
    };
    let mean = add_row(&(&feat * &p.mats[idx]), &p.mats[idx + 1]);
    let (lo, hi) = p.log_std_bounds;
    let log_std = add_row(&(&feat * &p.mats[idx + 2]), &p.mats[idx + 3]).map(|v| v.clamp(lo, hi));
    (mean, log_std)
}

pub(crate) fn value_forward_plain(
    v: &ValueParams,
    x: &DMatrix<f64>,
    state: &mut LstmState,
) -> DMatrix<f64> {
    let (feat, idx) = trunk_plain(&v.arch, &v.mats, x, state);
    let feat = match v.arch {
        Arch::Mlp { .. } => feat,
        Arch::Lstm { .. } => feat.map(|x| if x > 0.0 { x } else { 0.01 * x }),
    };
    add_row(&(&feat * &v.mats[idx]), &v.mats[idx + 1])
}

/// Taped recurrent carry.
pub(crate) struct TapeState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl TapeState {
    pub fn fresh(tape: &mut Tape, arch: &Arch, batch: usize) -> Self {
        match arch {
            Arch::Mlp { .. } => TapeState { h: Vec::new(), c: Vec::new() },
            Arch::Lstm { layers, width } => TapeState {
                h: (0..*layers).map(|_| tape.leaf(DMatrix::zeros(batch, *width))).collect(),
                c: (0..*layers).map(|_| tape.leaf(DMatrix::zeros(batch, *width))).collect(),
            },
        }
    }
}

fn trunk_tape(
    tape: &mut Tape,
    arch: &Arch,
    vars: &[Var],
    x: Var,
    state: &mut TapeState,
) -> (Var, usize) {
    match arch {
        Arch::Mlp { hidden } => {
            let mut h = x;
            let mut idx = 0;
            for _ in hidden {
                let a = tape.matmul(h, vars[idx]);
                let a = tape.add_row(a, vars[idx + 1]);
                h = tape.tanh(a);
                idx += 2;
            }
            (h, idx)
        }
        Arch::Lstm { layers, .. } => {
            let mut xin = x;
            let mut idx = 0;
            for l in 0..*layers {
                let gate = |tape: &mut Tape, wx: Var, wh: Var, b: Var, xin: Var, h: Var| {
                    let a = tape.matmul(xin, wx);
                    let bmat = tape.matmul(h, wh);
                    let s = tape.add(a, bmat);
                    tape.add_row(s, b)
                };
                let i_pre = gate(tape, vars[idx], vars[idx + 1], vars[idx + 2], xin, state.h[l]);
                let i = tape.sigmoid(i_pre);
                let f_pre = gate(tape, vars[idx + 3], vars[idx + 4], vars[idx + 5], xin, state.h[l]);
                let f = tape.sigmoid(f_pre);
                let g_pre = gate(tape, vars[idx + 6], vars[idx + 7], vars[idx + 8], xin, state.h[l]);
                let g = tape.tanh(g_pre);
                let o_pre = gate(tape, vars[idx + 9], vars[idx + 10], vars[idx + 11], xin, state.h[l]);
                let o = tape.sigmoid(o_pre);
                let fc = tape.mul_elem(state.c[l], f);
                let ig = tape.mul_elem(i, g);
                let c = tape.add(fc, ig);
                let tc = tape.tanh(c);
                let h = tape.mul_elem(o, tc);
                state.c[l] = c;
                state.h[l] = h;
                xin = h;
                idx += 12;
            }
            (xin, idx)
        }
    }
}

pub(crate) fn policy_forward_tape(
    tape: &mut Tape,
    p: &PolicyParams,
    vars: &[Var],
    x: Var,
    state: &mut TapeState,
) -> (Var, Var) {
    let (feat, idx) = trunk_tape(tape, &p.arch, vars, x, state);
    let feat = match p.arch {
        Arch::Mlp { .. } => feat,
        Arch::Lstm { .. } => tape.relu6(feat),
    };
    let m = tape.matmul(feat, vars[idx]);
    let mean = tape.add_row(m, vars[idx + 1]);
    let s = tape.matmul(feat, vars[idx + 2]);
    let s = tape.add_row(s, vars[idx + 3]);
    let (lo, hi) = p.log_std_bounds;
    let log_std = tape.clamp(s, lo, hi);
    (mean, log_std)
}

pub(crate) fn value_forward_tape(
    tape: &mut Tape,
    v: &ValueParams,
    vars: &[Var],
    x: Var,
    state: &mut TapeState,
) -> Var {
    let (feat, idx) = trunk_tape(tape, &v.arch, vars, x, state);
    let feat = match v.arch {
        Arch::Mlp { .. } => feat,
        Arch::Lstm { .. } => tape.leaky_relu(feat, 0.01),
    };
    let m = tape.matmul(feat, vars[idx]);
    tape.add_row(m, vars[idx + 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ObsSpec;
    use nalgebra::DVector;
    use rand::Rng;

    fn obs_spec(n_x: usize, n_u: usize) -> ObsSpec {
        ObsSpec {
            state_mean: DVector::zeros(n_x),
            state_std: DVector::from_element(n_x, 1.0),
            control_low: DVector::from_element(n_u, 0.0),
            control_high: DVector::from_element(n_u, 1.0),
            horizon: 6,
        }
    }

    #[test]
    fn plain_and_tape_forwards_agree() {
        let mut rng = crate::rng::substream(5, 0);
        for arch in [
            Arch::Mlp { hidden: vec![9, 7] },
            Arch::Lstm { layers: 2, width: 6 },
        ] {
            let p = PolicyParams::init(arch.clone(), obs_spec(3, 2), -0.5, &mut rng);
            let v = ValueParams::init(arch.clone(), p.obs.dim(), &mut rng);
            let batch = 4;
            let steps = 3;
            let seq: Vec<DMatrix<f64>> = (0..steps)
                .map(|_| DMatrix::from_fn(batch, p.obs.dim(), |_, _| rng.gen_range(-1.0..1.0)))
                .collect();

            // plain, advanced step by step
            let mut st = LstmState::fresh(&arch, batch);
            let mut st_v = LstmState::fresh(&arch, batch);
            let plain: Vec<(DMatrix<f64>, DMatrix<f64>)> = seq
                .iter()
                .map(|x| policy_forward_plain(&p, x, &mut st))
                .collect();
            let plain_v: Vec<DMatrix<f64>> =
                seq.iter().map(|x| value_forward_plain(&v, x, &mut st_v)).collect();

            // taped
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.mats.iter().map(|m| tape.leaf(m.clone())).collect();
            let vvars: Vec<Var> = v.mats.iter().map(|m| tape.leaf(m.clone())).collect();
            let mut ts = TapeState::fresh(&mut tape, &arch, batch);
            let mut ts_v = TapeState::fresh(&mut tape, &arch, batch);
            for (t, x) in seq.iter().enumerate() {
                let xv = tape.leaf(x.clone());
                let (mean, log_std) = policy_forward_tape(&mut tape, &p, &vars, xv, &mut ts);
                let val = value_forward_tape(&mut tape, &v, &vvars, xv, &mut ts_v);
                assert!((tape.value(mean) - &plain[t].0).abs().max() < 1e-12);
                assert!((tape.value(log_std) - &plain[t].1).abs().max() < 1e-12);
                assert!((tape.value(val) - &plain_v[t]).abs().max() < 1e-12);
            }
        }
    }
}
