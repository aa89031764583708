//! Residual field layers: a linear layer whose weight is the sum of a static
//! matrix and a time-conditioned residual, with interchangeable residual
//! factorizations, alternative application modes, and time-axis chunking
//! for long sequences.

use crate::error::{Error, Result};
use crate::layers::{linear_backward, linear_forward, GradBuffer, LinearCtx};
use crate::linalg::{matmul, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Bracketing rows for piecewise-linear row interpolation over [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Maps t in [0,1] to the two bracketing row indices among `rows` rows.
/// Out-of-range t clamps. A single row always maps to itself.
pub fn bracket(rows: usize, t_norm: f64) -> Bracket {
    assert!(rows >= 1);
    let t = t_norm.clamp(0.0, 1.0);
    if rows == 1 {
        return Bracket {
            lo: 0,
            hi: 0,
            frac: 0.0,
        };
    }
    let u = t * (rows - 1) as f64;
    let lo = (u.floor() as usize).min(rows - 2);
    let frac = u - lo as f64;
    Bracket {
        lo,
        hi: lo + 1,
        frac,
    }
}

/// Row interpolation of the time-coefficient matrix v [T x R] at t.
pub fn interp_coeffs(v: &Tensor, t_norm: f64) -> Tensor {
    assert_eq!(v.rank(), 2);
    let br = bracket(v.shape()[0], t_norm);
    Tensor::from_vec(blend(v.row(br.lo), v.row(br.hi), br.frac))
}

fn blend(lo: &[f64], hi: &[f64], f: f64) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(&a, &b)| (1.0 - f) * a + f * b)
        .collect()
}

/// Adds `(1-f) * dv` to row lo and `f * dv` to row hi of the coefficient
/// gradient; at an exact row only that row receives a nonzero gradient.
fn scatter_rows(grad: &mut Tensor, br: Bracket, dv: &[f64]) {
    let cols = grad.shape().last().copied().unwrap() * grad.shape()[1..grad.rank() - 1]
        .iter()
        .product::<usize>();
    let data = grad.data_mut();
    for (k, &d) in dv.iter().enumerate() {
        data[br.lo * cols + k] += (1.0 - br.frac) * d;
    }
    if br.hi != br.lo && br.frac != 0.0 {
        for (k, &d) in dv.iter().enumerate() {
            data[br.hi * cols + k] += br.frac * d;
        }
    }
}

/// Build-time description of a residual factorization; the closed-form
/// parameter count lives here so it can be cross-checked against the
/// scalars actually allocated.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorizationSpec {
    /// Coefficients [T x R] against a shared spanning set [R x N x M].
    LowRank { rank: usize, factors: usize },
    /// One full matrix per time row, row-interpolated.
    Dictionary { factors: usize },
    /// V(t) [N x R] times a shared [R x M] matrix.
    MatrixMatrix { rank: usize, factors: usize },
    /// Sum of rank-1 outer products weighted by interpolated coefficients.
    Cp { rank: usize, factors: usize },
    /// Core [Rt x Rn x Rm] contracted with v(t), U [N x Rn], V [M x Rm].
    Tucker {
        rank_t: usize,
        rank_n: usize,
        rank_m: usize,
        factors: usize,
    },
    /// Per-level expert banks; adjacent experts blended by t.
    Loe { levels: Vec<usize> },
    /// Two-hidden-layer ReLU MLP regressing the flattened matrix from t.
    HyperNet { hidden: usize },
    /// Residual added to the layer output: r(t) = sum_r v(t)[r] m_r.
    OutputResidual { rank: usize, factors: usize },
}

impl FactorizationSpec {
    /// Closed-form trainable-parameter count for an N x M layer.
    pub fn param_count(&self, n: usize, m: usize) -> usize {
        match *self {
            FactorizationSpec::LowRank { rank, factors } => factors * rank + rank * n * m,
            FactorizationSpec::Dictionary { factors } => factors * n * m,
            FactorizationSpec::MatrixMatrix { rank, factors } => factors * n * rank + rank * m,
            FactorizationSpec::Cp { rank, factors } => factors * rank + rank * (n + m),
            FactorizationSpec::Tucker {
                rank_t,
                rank_n,
                rank_m,
                factors,
            } => factors * rank_t + rank_t * rank_n * rank_m + n * rank_n + m * rank_m,
            FactorizationSpec::Loe { ref levels } => levels.iter().map(|&l| l * n * m).sum(),
            FactorizationSpec::HyperNet { hidden } => {
                hidden + hidden + hidden * hidden + hidden + n * m * hidden + n * m
            }
            FactorizationSpec::OutputResidual { rank, factors } => factors * rank + rank * n,
        }
    }

    /// Instantiate parameters for an N x M layer. Residual parameters start
    /// near zero: N(0, init_std) everywhere except the hypernetwork, whose
    /// final layer is zeroed instead.
    pub fn build<R: Rng>(&self, n: usize, m: usize, init_std: f64, rng: &mut R) -> Factorization {
        let nrm = |shape: &[usize], rng: &mut R| Tensor::rand_normal(shape, init_std, rng);
        match *self {
            FactorizationSpec::LowRank { rank, factors } => Factorization::LowRank {
                coeffs: nrm(&[factors, rank], rng),
                basis: nrm(&[rank, n, m], rng),
            },
            FactorizationSpec::Dictionary { factors } => Factorization::Dictionary {
                frames: nrm(&[factors, n, m], rng),
            },
            FactorizationSpec::MatrixMatrix { rank, factors } => Factorization::MatrixMatrix {
                coeffs: nrm(&[factors, n, rank], rng),
                basis: nrm(&[rank, m], rng),
            },
            FactorizationSpec::Cp { rank, factors } => Factorization::Cp {
                coeffs: nrm(&[factors, rank], rng),
                rows: nrm(&[rank, n], rng),
                cols: nrm(&[rank, m], rng),
            },
            FactorizationSpec::Tucker {
                rank_t,
                rank_n,
                rank_m,
                factors,
            } => Factorization::Tucker {
                coeffs: nrm(&[factors, rank_t], rng),
                core: nrm(&[rank_t, rank_n, rank_m], rng),
                row_basis: nrm(&[n, rank_n], rng),
                col_basis: nrm(&[m, rank_m], rng),
            },
            FactorizationSpec::Loe { ref levels } => Factorization::Loe {
                banks: levels.iter().map(|&l| nrm(&[l, n, m], rng)).collect(),
            },
            FactorizationSpec::HyperNet { hidden } => {
                // Glorot-uniform hidden layers, zeroed output layer so the
                // residual starts at zero.
                let glorot = |fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut R| {
                    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::rand_uniform(shape, -lim, lim, rng)
                };
                Factorization::HyperNet {
                    w1: glorot(1, hidden, &[hidden, 1], rng),
                    b1: Tensor::zeros(&[hidden]),
                    w2: glorot(hidden, hidden, &[hidden, hidden], rng),
                    b2: Tensor::zeros(&[hidden]),
                    w3: Tensor::zeros(&[n * m, hidden]),
                    b3: Tensor::zeros(&[n * m]),
                    out_shape: (n, m),
                }
            }
            FactorizationSpec::OutputResidual { rank, factors } => Factorization::OutputResidual {
                coeffs: nrm(&[factors, rank], rng),
                basis: nrm(&[rank, n], rng),
            },
        }
    }
}

/// Concrete residual-weight parameterization with allocated tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum Factorization {
    LowRank {
        coeffs: Tensor, // [T x R]
        basis: Tensor,  // [R x N x M]
    },
    Dictionary {
        frames: Tensor, // [T x N x M]
    },
    MatrixMatrix {
        coeffs: Tensor, // [T x N x R]
        basis: Tensor,  // [R x M]
    },
    Cp {
        coeffs: Tensor, // [T x R]
        rows: Tensor,   // [R x N]
        cols: Tensor,   // [R x M]
    },
    Tucker {
        coeffs: Tensor,    // [T x Rt]
        core: Tensor,      // [Rt x Rn x Rm]
        row_basis: Tensor, // [N x Rn]
        col_basis: Tensor, // [M x Rm]
    },
    Loe {
        banks: Vec<Tensor>, // each [n_l x N x M]
    },
    HyperNet {
        w1: Tensor, // [H x 1]
        b1: Tensor, // [H]
        w2: Tensor, // [H x H]
        b2: Tensor, // [H]
        w3: Tensor, // [N*M x H]
        b3: Tensor, // [N*M]
        out_shape: (usize, usize),
    },
    OutputResidual {
        coeffs: Tensor, // [T x R]
        basis: Tensor,  // [R x N]
    },
}

impl Factorization {
    /// Output dimensions (N, M) of the residual this factorization produces.
    /// OutputResidual reports (N, 1) since it adds a vector to the output.
    pub fn out_dims(&self) -> (usize, usize) {
        match self {
            Factorization::LowRank { basis, .. } => (basis.shape()[1], basis.shape()[2]),
            Factorization::Dictionary { frames } => (frames.shape()[1], frames.shape()[2]),
            Factorization::MatrixMatrix { coeffs, basis } => {
                (coeffs.shape()[1], basis.shape()[1])
            }
            Factorization::Cp { rows, cols, .. } => (rows.shape()[1], cols.shape()[1]),
            Factorization::Tucker {
                row_basis,
                col_basis,
                ..
            } => (row_basis.shape()[0], col_basis.shape()[0]),
            Factorization::Loe { banks } => (banks[0].shape()[1], banks[0].shape()[2]),
            Factorization::HyperNet { out_shape, .. } => *out_shape,
            Factorization::OutputResidual { basis, .. } => (basis.shape()[1], 1),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Factorization::LowRank { coeffs, basis }
            | Factorization::OutputResidual { coeffs, basis }
            | Factorization::MatrixMatrix { coeffs, basis } => {
                f(&format!("{prefix}.v"), coeffs);
                f(&format!("{prefix}.m"), basis);
            }
            Factorization::Dictionary { frames } => f(&format!("{prefix}.d"), frames),
            Factorization::Cp { coeffs, rows, cols } => {
                f(&format!("{prefix}.v"), coeffs);
                f(&format!("{prefix}.a"), rows);
                f(&format!("{prefix}.b"), cols);
            }
            Factorization::Tucker {
                coeffs,
                core,
                row_basis,
                col_basis,
            } => {
                f(&format!("{prefix}.v"), coeffs);
                f(&format!("{prefix}.core"), core);
                f(&format!("{prefix}.u"), row_basis);
                f(&format!("{prefix}.p"), col_basis);
            }
            Factorization::Loe { banks } => {
                for (l, bank) in banks.iter().enumerate() {
                    f(&format!("{prefix}.bank{l}"), bank);
                }
            }
            Factorization::HyperNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
                ..
            } => {
                f(&format!("{prefix}.h.w1"), w1);
                f(&format!("{prefix}.h.b1"), b1);
                f(&format!("{prefix}.h.w2"), w2);
                f(&format!("{prefix}.h.b2"), b2);
                f(&format!("{prefix}.h.w3"), w3);
                f(&format!("{prefix}.h.b3"), b3);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Factorization::LowRank { coeffs, basis }
            | Factorization::OutputResidual { coeffs, basis }
            | Factorization::MatrixMatrix { coeffs, basis } => {
                f(&format!("{prefix}.v"), coeffs);
                f(&format!("{prefix}.m"), basis);
            }
            Factorization::Dictionary { frames } => f(&format!("{prefix}.d"), frames),
            Factorization::Cp { coeffs, rows, cols } => {
                f(&format!("{prefix}.v"), coeffs);
                f(&format!("{prefix}.a"), rows);
                f(&format!("{prefix}.b"), cols);
            }
            Factorization::Tucker {
                coeffs,
                core,
                row_basis,
                col_basis,
            } => {
                f(&format!("{prefix}.v"), coeffs);
                f(&format!("{prefix}.core"), core);
                f(&format!("{prefix}.u"), row_basis);
                f(&format!("{prefix}.p"), col_basis);
            }
            Factorization::Loe { banks } => {
                for (l, bank) in banks.iter_mut().enumerate() {
                    f(&format!("{prefix}.bank{l}"), bank);
                }
            }
            Factorization::HyperNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
                ..
            } => {
                f(&format!("{prefix}.h.w1"), w1);
                f(&format!("{prefix}.h.b1"), b1);
                f(&format!("{prefix}.h.w2"), w2);
                f(&format!("{prefix}.h.b2"), b2);
                f(&format!("{prefix}.h.w3"), w3);
                f(&format!("{prefix}.h.b3"), b3);
            }
        }
    }

    /// Total allocated trainable scalars (enumeration route; must agree
    /// exactly with FactorizationSpec::param_count).
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    pub fn zero_params(&mut self) {
        self.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    }

    /// Evaluates the time-dependent residual matrix W(t) [N x M].
    /// Not defined for OutputResidual (use eval_output_residual).
    pub fn eval(&self, t_norm: f64) -> Tensor {
        match self {
            Factorization::LowRank { coeffs, basis } => {
                let v = interp_coeffs(coeffs, t_norm);
                let (n, m) = (basis.shape()[1], basis.shape()[2]);
                let mut out = vec![0.0; n * m];
                for (r, &vr) in v.data().iter().enumerate() {
                    for (o, &b) in out.iter_mut().zip(basis.slab(r)) {
                        *o += vr * b;
                    }
                }
                Tensor::new(vec![n, m], out).unwrap()
            }
            Factorization::Dictionary { frames } => {
                let br = bracket(frames.shape()[0], t_norm);
                let data = blend(frames.slab(br.lo), frames.slab(br.hi), br.frac);
                Tensor::new(vec![frames.shape()[1], frames.shape()[2]], data).unwrap()
            }
            Factorization::MatrixMatrix { coeffs, basis } => {
                let br = bracket(coeffs.shape()[0], t_norm);
                let vt = Tensor::new(
                    vec![coeffs.shape()[1], coeffs.shape()[2]],
                    blend(coeffs.slab(br.lo), coeffs.slab(br.hi), br.frac),
                )
                .unwrap();
                matmul(&vt, basis).unwrap()
            }
            Factorization::Cp { coeffs, rows, cols } => {
                let v = interp_coeffs(coeffs, t_norm);
                let (n, m) = (rows.shape()[1], cols.shape()[1]);
                let mut out = vec![0.0; n * m];
                for (r, &vr) in v.data().iter().enumerate() {
                    let a = rows.row(r);
                    let b = cols.row(r);
                    for i in 0..n {
                        let s = vr * a[i];
                        for j in 0..m {
                            out[i * m + j] += s * b[j];
                        }
                    }
                }
                Tensor::new(vec![n, m], out).unwrap()
            }
            Factorization::Tucker {
                coeffs,
                row_basis,
                col_basis,
                ..
            } => {
                let g2 = self.tucker_g2(&interp_coeffs(coeffs, t_norm));
                let un = matmul(row_basis, &g2).unwrap();
                matmul(&un, &col_basis.transpose()).unwrap()
            }
            Factorization::Loe { banks } => {
                let (n, m) = self.out_dims();
                let mut out = vec![0.0; n * m];
                for bank in banks {
                    let br = bracket(bank.shape()[0], t_norm);
                    let slab = blend(bank.slab(br.lo), bank.slab(br.hi), br.frac);
                    for (o, s) in out.iter_mut().zip(slab) {
                        *o += s;
                    }
                }
                Tensor::new(vec![n, m], out).unwrap()
            }
            Factorization::HyperNet { out_shape, .. } => {
                let (_, _, flat) = self.hyper_forward(t_norm);
                Tensor::new(vec![out_shape.0, out_shape.1], flat).unwrap()
            }
            Factorization::OutputResidual { .. } => {
                panic!("OutputResidual produces a vector; use eval_output_residual")
            }
        }
    }

    /// r(t) for the output-residual variant.
    pub fn eval_output_residual(&self, t_norm: f64) -> Tensor {
        match self {
            Factorization::OutputResidual { coeffs, basis } => {
                let v = interp_coeffs(coeffs, t_norm);
                let n = basis.shape()[1];
                let mut out = vec![0.0; n];
                for (r, &vr) in v.data().iter().enumerate() {
                    for (o, &b) in out.iter_mut().zip(basis.row(r)) {
                        *o += vr * b;
                    }
                }
                Tensor::from_vec(out)
            }
            _ => panic!("eval_output_residual on a weight-residual factorization"),
        }
    }

    fn tucker_g2(&self, v: &Tensor) -> Tensor {
        match self {
            Factorization::Tucker { core, .. } => {
                let (rn, rm) = (core.shape()[1], core.shape()[2]);
                let mut g2 = vec![0.0; rn * rm];
                for (t, &vt) in v.data().iter().enumerate() {
                    for (g, &c) in g2.iter_mut().zip(core.slab(t)) {
                        *g += vt * c;
                    }
                }
                Tensor::new(vec![rn, rm], g2).unwrap()
            }
            _ => unreachable!(),
        }
    }

    fn hyper_forward(&self, t_norm: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match self {
            Factorization::HyperNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
                ..
            } => {
                let h = b1.len();
                let t = t_norm.clamp(0.0, 1.0);
                let a1: Vec<f64> = (0..h).map(|i| w1.at2(i, 0) * t + b1.data()[i]).collect();
                let h1: Vec<f64> = a1.iter().map(|&v| v.max(0.0)).collect();
                let a2: Vec<f64> = (0..h)
                    .map(|i| {
                        let mut acc = b2.data()[i];
                        for (j, &hv) in h1.iter().enumerate() {
                            acc += w2.at2(i, j) * hv;
                        }
                        acc
                    })
                    .collect();
                let h2: Vec<f64> = a2.iter().map(|&v| v.max(0.0)).collect();
                let flat: Vec<f64> = (0..b3.len())
                    .map(|i| {
                        let mut acc = b3.data()[i];
                        for (j, &hv) in h2.iter().enumerate() {
                            acc += w3.at2(i, j) * hv;
                        }
                        acc
                    })
                    .collect();
                (a1, a2, flat)
            }
            _ => unreachable!(),
        }
    }

    /// Chain rule from the gradient of the residual matrix (or vector for
    /// OutputResidual) into every factorization parameter.
    pub fn backward(&self, t_norm: f64, d_res: &Tensor, prefix: &str, grads: &mut GradBuffer) {
        match self {
            Factorization::LowRank { coeffs, basis } => {
                let br = bracket(coeffs.shape()[0], t_norm);
                let v = interp_coeffs(coeffs, t_norm);
                let rank = coeffs.shape()[1];
                let mut dv = vec![0.0; rank];
                let mut dbasis = Tensor::zeros(basis.shape());
                for r in 0..rank {
                    let slab = basis.slab(r);
                    let mut acc = 0.0;
                    for (d, &b) in d_res.data().iter().zip(slab) {
                        acc += d * b;
                    }
                    dv[r] = acc;
                    let vr = v.data()[r];
                    for (g, &d) in dbasis.slab_mut(r).iter_mut().zip(d_res.data()) {
                        *g += vr * d;
                    }
                }
                let mut dcoeffs = Tensor::zeros(coeffs.shape());
                scatter_rows(&mut dcoeffs, br, &dv);
                grads.accumulate(&format!("{prefix}.v"), dcoeffs);
                grads.accumulate(&format!("{prefix}.m"), dbasis);
            }
            Factorization::Dictionary { frames } => {
                let br = bracket(frames.shape()[0], t_norm);
                let mut dframes = Tensor::zeros(frames.shape());
                scatter_rows(&mut dframes, br, d_res.data());
                grads.accumulate(&format!("{prefix}.d"), dframes);
            }
            Factorization::MatrixMatrix { coeffs, basis } => {
                let br = bracket(coeffs.shape()[0], t_norm);
                let (n, rank) = (coeffs.shape()[1], coeffs.shape()[2]);
                let vt = Tensor::new(
                    vec![n, rank],
                    blend(coeffs.slab(br.lo), coeffs.slab(br.hi), br.frac),
                )
                .unwrap();
                let dvt = matmul(d_res, &basis.transpose()).unwrap();
                let dbasis = matmul(&vt.transpose(), d_res).unwrap();
                let mut dcoeffs = Tensor::zeros(coeffs.shape());
                scatter_rows(&mut dcoeffs, br, dvt.data());
                grads.accumulate(&format!("{prefix}.v"), dcoeffs);
                grads.accumulate(&format!("{prefix}.m"), dbasis);
            }
            Factorization::Cp { coeffs, rows, cols } => {
                let br = bracket(coeffs.shape()[0], t_norm);
                let v = interp_coeffs(coeffs, t_norm);
                let rank = coeffs.shape()[1];
                let (n, m) = (rows.shape()[1], cols.shape()[1]);
                let mut dv = vec![0.0; rank];
                let mut drows = Tensor::zeros(rows.shape());
                let mut dcols = Tensor::zeros(cols.shape());
                for r in 0..rank {
                    let a = rows.row(r);
                    let b = cols.row(r);
                    let vr = v.data()[r];
                    let mut acc = 0.0;
                    for i in 0..n {
                        let mut row_acc = 0.0;
                        for j in 0..m {
                            let d = d_res.at2(i, j);
                            row_acc += d * b[j];
                        }
                        acc += a[i] * row_acc;
                        drows.data_mut()[r * n + i] += vr * row_acc;
                    }
                    for j in 0..m {
                        let mut col_acc = 0.0;
                        for i in 0..n {
                            col_acc += d_res.at2(i, j) * a[i];
                        }
                        dcols.data_mut()[r * m + j] += vr * col_acc;
                    }
                    dv[r] = acc;
                }
                let mut dcoeffs = Tensor::zeros(coeffs.shape());
                scatter_rows(&mut dcoeffs, br, &dv);
                grads.accumulate(&format!("{prefix}.v"), dcoeffs);
                grads.accumulate(&format!("{prefix}.a"), drows);
                grads.accumulate(&format!("{prefix}.b"), dcols);
            }
            Factorization::Tucker {
                coeffs,
                core,
                row_basis,
                col_basis,
            } => {
                let br = bracket(coeffs.shape()[0], t_norm);
                let v = interp_coeffs(coeffs, t_norm);
                let g2 = self.tucker_g2(&v);
                // dG2 = U^T dRes V; dU = dRes V G2^T; dV = dRes^T U G2
                let dres_v = matmul(d_res, col_basis).unwrap();
                let dg2 = matmul(&row_basis.transpose(), &dres_v).unwrap();
                let du = matmul(&dres_v, &g2.transpose()).unwrap();
                let dv_basis =
                    matmul(&matmul(&d_res.transpose(), row_basis).unwrap(), &g2).unwrap();
                let rt = core.shape()[0];
                let mut dcore = Tensor::zeros(core.shape());
                let mut dv = vec![0.0; rt];
                for t in 0..rt {
                    let vt = v.data()[t];
                    let mut acc = 0.0;
                    for (g, (&c, &d)) in dcore
                        .slab_mut(t)
                        .iter_mut()
                        .zip(core.slab(t).iter().zip(dg2.data()))
                    {
                        *g += vt * d;
                        acc += c * d;
                    }
                    dv[t] = acc;
                }
                let mut dcoeffs = Tensor::zeros(coeffs.shape());
                scatter_rows(&mut dcoeffs, br, &dv);
                grads.accumulate(&format!("{prefix}.v"), dcoeffs);
                grads.accumulate(&format!("{prefix}.core"), dcore);
                grads.accumulate(&format!("{prefix}.u"), du);
                grads.accumulate(&format!("{prefix}.p"), dv_basis);
            }
            Factorization::Loe { banks } => {
                for (l, bank) in banks.iter().enumerate() {
                    let br = bracket(bank.shape()[0], t_norm);
                    let mut dbank = Tensor::zeros(bank.shape());
                    scatter_rows(&mut dbank, br, d_res.data());
                    grads.accumulate(&format!("{prefix}.bank{l}"), dbank);
                }
            }
            Factorization::HyperNet { w1, w2, w3, b3, .. } => {
                let t = t_norm.clamp(0.0, 1.0);
                let (a1, a2, _) = self.hyper_forward(t_norm);
                let h = a1.len();
                let h1: Vec<f64> = a1.iter().map(|&v| v.max(0.0)).collect();
                let h2: Vec<f64> = a2.iter().map(|&v| v.max(0.0)).collect();
                let dflat = d_res.data();
                let nm = b3.len();
                // layer 3
                let mut dw3 = Tensor::zeros(&[nm, h]);
                for i in 0..nm {
                    for j in 0..h {
                        dw3.data_mut()[i * h + j] = dflat[i] * h2[j];
                    }
                }
                let db3 = Tensor::from_vec(dflat.to_vec());
                let mut dh2 = vec![0.0; h];
                for j in 0..h {
                    let mut acc = 0.0;
                    for i in 0..nm {
                        acc += w3.at2(i, j) * dflat[i];
                    }
                    dh2[j] = acc;
                }
                let da2: Vec<f64> = dh2
                    .iter()
                    .zip(&a2)
                    .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
                    .collect();
                // layer 2
                let mut dw2 = Tensor::zeros(&[h, h]);
                for i in 0..h {
                    for j in 0..h {
                        dw2.data_mut()[i * h + j] = da2[i] * h1[j];
                    }
                }
                let db2 = Tensor::from_vec(da2.clone());
                let mut dh1 = vec![0.0; h];
                for j in 0..h {
                    let mut acc = 0.0;
                    for i in 0..h {
                        acc += w2.at2(i, j) * da2[i];
                    }
                    dh1[j] = acc;
                }
                let da1: Vec<f64> = dh1
                    .iter()
                    .zip(&a1)
                    .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
                    .collect();
                // layer 1
                let dw1 = Tensor::new(vec![h, 1], da1.iter().map(|&d| d * t).collect()).unwrap();
                let db1 = Tensor::from_vec(da1);
                let _ = w1;
                grads.accumulate(&format!("{prefix}.h.w1"), dw1);
                grads.accumulate(&format!("{prefix}.h.b1"), db1);
                grads.accumulate(&format!("{prefix}.h.w2"), dw2);
                grads.accumulate(&format!("{prefix}.h.b2"), db2);
                grads.accumulate(&format!("{prefix}.h.w3"), dw3);
                grads.accumulate(&format!("{prefix}.h.b3"), db3);
            }
            Factorization::OutputResidual { coeffs, basis } => {
                let br = bracket(coeffs.shape()[0], t_norm);
                let v = interp_coeffs(coeffs, t_norm);
                let rank = coeffs.shape()[1];
                let mut dv = vec![0.0; rank];
                let mut dbasis = Tensor::zeros(basis.shape());
                for r in 0..rank {
                    let b = basis.row(r);
                    let mut acc = 0.0;
                    for (d, &bv) in d_res.data().iter().zip(b) {
                        acc += d * bv;
                    }
                    dv[r] = acc;
                    let vr = v.data()[r];
                    let n = basis.shape()[1];
                    for (i, &d) in d_res.data().iter().enumerate() {
                        dbasis.data_mut()[r * n + i] += vr * d;
                    }
                }
                let mut dcoeffs = Tensor::zeros(coeffs.shape());
                scatter_rows(&mut dcoeffs, br, &dv);
                grads.accumulate(&format!("{prefix}.v"), dcoeffs);
                grads.accumulate(&format!("{prefix}.m"), dbasis);
            }
        }
    }
}

/// How the residual participates in the layer map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResFieldMode {
    /// (W + W(t)) x + b
    ResidualAdd,
    /// W(t) x + b
    Direct,
    /// (W .* (1 + W(t))) x + b, identity at zero residual
    Modulated,
    /// (W x + b) + r(t)
    OutputResidual,
}

/// Partition of the time axis into C contiguous chunks with a replication
/// policy for shared and/or residual parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkedSchedule {
    pub chunks: usize,
    pub policy: ChunkPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkPolicy {
    Shared,
    Residual,
    Both,
}

impl ChunkedSchedule {
    /// Chunk index plus t rescaled to [0,1] within the chunk. t = 1 maps
    /// into the last chunk.
    pub fn chunk_select(&self, t_norm: f64) -> (usize, f64) {
        let t = t_norm.clamp(0.0, 1.0);
        let c = self.chunks;
        let idx = ((t * c as f64).floor() as usize).min(c - 1);
        let local = t * c as f64 - idx as f64;
        (idx, local)
    }

    pub fn base_copies(&self) -> usize {
        match self.policy {
            ChunkPolicy::Shared | ChunkPolicy::Both => self.chunks,
            ChunkPolicy::Residual => 1,
        }
    }

    pub fn residual_copies(&self) -> usize {
        match self.policy {
            ChunkPolicy::Residual | ChunkPolicy::Both => self.chunks,
            ChunkPolicy::Shared => 1,
        }
    }
}

/// Linear layer with a time-conditioned weight residual. Base weights and
/// factorizations may be replicated per time chunk.
#[derive(Debug, Clone)]
pub struct ResFieldLayer {
    pub weights: Vec<Tensor>, // per base chunk, [N x M]
    pub biases: Vec<Tensor>,  // per base chunk, [N]
    pub facts: Vec<Factorization>, // per residual chunk
    pub mode: ResFieldMode,
}

/// Cached forward state of a ResField layer.
#[derive(Debug, Clone)]
pub struct ResFieldCtx {
    pub linear: LinearCtx,
    pub t_local: f64,
    pub chunk: usize,
    /// Effective weight the batch was multiplied by.
    pub w_eff: Tensor,
    /// Materialized residual, kept only for modulated mode.
    pub w_res: Option<Tensor>,
}

impl ResFieldLayer {
    pub fn out_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].shape()[1]
    }

    fn base_idx(&self, chunk: usize) -> usize {
        chunk.min(self.weights.len() - 1)
    }

    fn res_idx(&self, chunk: usize) -> usize {
        chunk.min(self.facts.len() - 1)
    }

    /// Forward at chunk-local time; `use_residual = false` forces the
    /// residual contribution to zero (base-weights-only evaluation).
    pub fn forward(
        &self,
        chunk: usize,
        t_local: f64,
        x: &Tensor,
        use_residual: bool,
    ) -> Result<(Tensor, ResFieldCtx)> {
        let w = &self.weights[self.base_idx(chunk)];
        let b = &self.biases[self.base_idx(chunk)];
        let fact = &self.facts[self.res_idx(chunk)];
        let (out, linear, w_eff, w_res) = match self.mode {
            ResFieldMode::ResidualAdd => {
                let w_eff = if use_residual {
                    crate::linalg::axpy(1.0, &fact.eval(t_local), w)?
                } else {
                    w.clone()
                };
                let (out, ctx) = linear_forward(&w_eff, b, x)?;
                (out, ctx, w_eff, None)
            }
            ResFieldMode::Direct => {
                let w_eff = if use_residual {
                    fact.eval(t_local)
                } else {
                    Tensor::zeros(w.shape())
                };
                let (out, ctx) = linear_forward(&w_eff, b, x)?;
                (out, ctx, w_eff, None)
            }
            ResFieldMode::Modulated => {
                let w_res = if use_residual {
                    fact.eval(t_local)
                } else {
                    Tensor::zeros(w.shape())
                };
                let data = w
                    .data()
                    .iter()
                    .zip(w_res.data())
                    .map(|(&wv, &rv)| wv * (1.0 + rv))
                    .collect();
                let w_eff = Tensor::new(w.shape().to_vec(), data)?;
                let (out, ctx) = linear_forward(&w_eff, b, x)?;
                (out, ctx, w_eff, Some(w_res))
            }
            ResFieldMode::OutputResidual => {
                let (mut out, ctx) = linear_forward(w, b, x)?;
                if use_residual {
                    let r = fact.eval_output_residual(t_local);
                    let n = r.len();
                    for row in 0..out.shape()[0] {
                        for j in 0..n {
                            out.data_mut()[row * n + j] += r.data()[j];
                        }
                    }
                }
                (out, ctx, w.clone(), None)
            }
        };
        Ok((
            out,
            ResFieldCtx {
                linear,
                t_local,
                chunk,
                w_eff,
                w_res,
            },
        ))
    }

    /// Backward through the layer. `prefix` names this layer's parameters;
    /// chunked parameters carry a `.c{k}` suffix.
    pub fn backward(
        &self,
        ctx: &ResFieldCtx,
        d_out: &Tensor,
        prefix: &str,
        grads: &mut GradBuffer,
    ) -> Result<Tensor> {
        let bi = self.base_idx(ctx.chunk);
        let ri = self.res_idx(ctx.chunk);
        let fact = &self.facts[ri];
        let w = &self.weights[bi];
        let w_name = format!("{prefix}.w.c{bi}");
        let b_name = format!("{prefix}.b.c{bi}");
        let f_prefix = format!("{prefix}.fact.c{ri}");
        let (dx, dw_eff, db) = linear_backward(&ctx.w_eff, &ctx.linear, d_out)?;
        match self.mode {
            ResFieldMode::ResidualAdd => {
                grads.accumulate(&w_name, dw_eff.clone());
                grads.accumulate(&b_name, db);
                fact.backward(ctx.t_local, &dw_eff, &f_prefix, grads);
            }
            ResFieldMode::Direct => {
                grads.accumulate(&b_name, db);
                fact.backward(ctx.t_local, &dw_eff, &f_prefix, grads);
            }
            ResFieldMode::Modulated => {
                let w_res = ctx
                    .w_res
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("stale modulated context".into()))?;
                let dw = Tensor::new(
                    w.shape().to_vec(),
                    dw_eff
                        .data()
                        .iter()
                        .zip(w_res.data())
                        .map(|(&d, &r)| d * (1.0 + r))
                        .collect(),
                )?;
                let d_res = Tensor::new(
                    w.shape().to_vec(),
                    dw_eff
                        .data()
                        .iter()
                        .zip(w.data())
                        .map(|(&d, &wv)| d * wv)
                        .collect(),
                )?;
                grads.accumulate(&w_name, dw);
                grads.accumulate(&b_name, db);
                fact.backward(ctx.t_local, &d_res, &f_prefix, grads);
            }
            ResFieldMode::OutputResidual => {
                grads.accumulate(&w_name, dw_eff);
                grads.accumulate(&b_name, db.clone());
                // r(t) is added per output row, so its gradient is the
                // column sum of dOut, which linear_backward computed as db.
                fact.backward(ctx.t_local, &db, &f_prefix, grads);
            }
        }
        Ok(dx)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            f(&format!("{prefix}.w.c{k}"), w);
            f(&format!("{prefix}.b.c{k}"), b);
        }
        for (k, fact) in self.facts.iter().enumerate() {
            fact.visit(&format!("{prefix}.fact.c{k}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, (w, b)) in self.weights.iter_mut().zip(&mut self.biases).enumerate() {
            f(&format!("{prefix}.w.c{k}"), w);
            f(&format!("{prefix}.b.c{k}"), b);
        }
        for (k, fact) in self.facts.iter_mut().enumerate() {
            fact.visit_mut(&format!("{prefix}.fact.c{k}"), f);
        }
    }
}
