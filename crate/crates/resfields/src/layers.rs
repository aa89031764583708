//! Forward/backward kernels for linear maps, activations and input
//! encodings. Reverse-mode gradients are explicit per layer; there is no
//! general tape since the architecture space is a fixed stack.

use crate::error::{Error, Result};
use crate::linalg::{matmul, Tensor};
use std::collections::BTreeMap;

/// Named parameter gradients. BTreeMap keeps iteration order deterministic.
#[derive(Debug, Default, Clone)]
pub struct GradBuffer {
    grads: BTreeMap<String, Tensor>,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate into the named slot, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: Tensor) {
        match self.grads.get_mut(name) {
            Some(g) => {
                assert_eq!(g.shape(), grad.shape(), "gradient shape drift for {name}");
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Cached forward state for a linear layer; backward needs the input batch.
#[derive(Debug, Clone)]
pub struct LinearCtx {
    pub x: Tensor,
}

/// out[s] = W x[s] + b for a batch of rows; x is [B x M], W is [N x M].
pub fn linear_forward(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<(Tensor, LinearCtx)> {
    if w.rank() != 2 || x.rank() != 2 || b.rank() != 1 {
        return Err(Error::shape(
            "linear_forward",
            "W [NxM], b [N], x [BxM]",
            format!("{:?}, {:?}, {:?}", w.shape(), b.shape(), x.shape()),
        ));
    }
    let (n, m) = (w.shape()[0], w.shape()[1]);
    if x.shape()[1] != m || b.shape()[0] != n {
        return Err(Error::shape(
            "linear_forward",
            format!("x [Bx{m}], b [{n}]"),
            format!("x {:?}, b {:?}", x.shape(), b.shape()),
        ));
    }
    let mut out = matmul(x, &w.transpose())?;
    let bs = b.data();
    for row in 0..out.shape()[0] {
        let base = row * n;
        for j in 0..n {
            out.data_mut()[base + j] += bs[j];
        }
    }
    Ok((out, LinearCtx { x: x.clone() }))
}

/// dW = dOut^T x, db = column sums of dOut, dX = dOut W.
pub fn linear_backward(
    w: &Tensor,
    ctx: &LinearCtx,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, _m) = (w.shape()[0], w.shape()[1]);
    if d_out.rank() != 2 || d_out.shape()[0] != ctx.x.shape()[0] || d_out.shape()[1] != n {
        return Err(Error::shape(
            "linear_backward",
            format!("dOut [{}x{}]", ctx.x.shape()[0], n),
            format!("{:?}", d_out.shape()),
        ));
    }
    let dw = matmul(&d_out.transpose(), &ctx.x)?;
    let mut db = vec![0.0; n];
    for row in 0..d_out.shape()[0] {
        for j in 0..n {
            db[j] += d_out.at2(row, j);
        }
    }
    let dx = matmul(d_out, w)?;
    Ok((dx, dw, Tensor::from_vec(db)))
}

pub fn sine_forward(x: &Tensor, omega0: f64) -> Tensor {
    x.map(|v| (omega0 * v).sin())
}

pub fn sine_backward(x: &Tensor, omega0: f64, d_out: &Tensor) -> Tensor {
    assert_eq!(x.shape(), d_out.shape());
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &d)| d * omega0 * (omega0 * v).cos())
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Tensor {
    assert_eq!(x.shape(), d_out.shape());
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// NeRF-convention positional encoding: sin(2^k pi p), cos(2^k pi p) for
/// k = 0..levels[d]-1 per input dimension, optionally prefixed by raw p.
/// `levels` has one entry per input dimension.
pub fn posenc_forward(p: &Tensor, levels: &[usize], include_input: bool) -> Result<Tensor> {
    if p.rank() != 2 || p.shape()[1] != levels.len() {
        return Err(Error::shape(
            "posenc_forward",
            format!("[B x {}]", levels.len()),
            format!("{:?}", p.shape()),
        ));
    }
    let b = p.shape()[0];
    let d = levels.len();
    let width = posenc_width(levels, include_input);
    let mut out = vec![0.0; b * width];
    for row in 0..b {
        let src = p.row(row);
        let dst = &mut out[row * width..(row + 1) * width];
        let mut k = 0;
        if include_input {
            dst[..d].copy_from_slice(src);
            k = d;
        }
        for (dim, &lv) in levels.iter().enumerate() {
            for l in 0..lv {
                let f = (1u64 << l) as f64 * std::f64::consts::PI;
                dst[k] = (f * src[dim]).sin();
                dst[k + 1] = (f * src[dim]).cos();
                k += 2;
            }
        }
    }
    Tensor::new(vec![b, width], out)
}

pub fn posenc_width(levels: &[usize], include_input: bool) -> usize {
    levels.iter().map(|&l| 2 * l).sum::<usize>() + if include_input { levels.len() } else { 0 }
}

pub fn posenc_backward(
    p: &Tensor,
    levels: &[usize],
    include_input: bool,
    d_out: &Tensor,
) -> Result<Tensor> {
    let b = p.shape()[0];
    let d = levels.len();
    let width = posenc_width(levels, include_input);
    if d_out.shape() != [b, width] {
        return Err(Error::shape(
            "posenc_backward",
            format!("[{} x {}]", b, width),
            format!("{:?}", d_out.shape()),
        ));
    }
    let mut dp = vec![0.0; b * d];
    for row in 0..b {
        let src = p.row(row);
        let dd = d_out.row(row);
        let dst = &mut dp[row * d..(row + 1) * d];
        let mut k = 0;
        if include_input {
            dst.copy_from_slice(&dd[..d]);
            k = d;
        }
        for (dim, &lv) in levels.iter().enumerate() {
            for l in 0..lv {
                let f = (1u64 << l) as f64 * std::f64::consts::PI;
                dst[dim] += dd[k] * f * (f * src[dim]).cos();
                dst[dim] -= dd[k + 1] * f * (f * src[dim]).sin();
                k += 2;
            }
        }
    }
    Tensor::new(vec![b, d], dp)
}

/// The spec-level encoding op: a uniform level count across dimensions.
pub fn positional_encoding(p: &Tensor, levels: usize, include_input: bool) -> Result<Tensor> {
    let per_dim = vec![levels; p.shape()[1]];
    posenc_forward(p, &per_dim, include_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (out, _) = linear_forward(&w, &b, &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn linear_hand() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![1.0]);
        let x = Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap();
        let (out, _) = linear_forward(&w, &b, &x).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn linear_matches_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng);
        let x = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let (out, _) = linear_forward(&w, &b, &x).unwrap();
        for s in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for m in 0..3 {
                    acc += w.at2(j, m) * x.at2(s, m);
                }
                acc += b.data()[j];
                assert!((out.at2(s, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_backward_zero_dout() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![0.5, -0.5]);
        let x = Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        let (_, ctx) = linear_forward(&w, &b, &x).unwrap();
        let d_out = Tensor::zeros(&[2, 2]);
        let (dx, dw, db) = linear_backward(&w, &ctx, &d_out).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
        assert!(db.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_backward_scalar_chain() {
        // B=1, 1x1 layer: dW = dOut * x
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0]);
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let (_, ctx) = linear_forward(&w, &b, &x).unwrap();
        let d_out = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        let (_, dw, _) = linear_backward(&w, &ctx, &d_out).unwrap();
        assert_eq!(dw.data(), &[15.0]);
    }

    #[test]
    fn sine_values() {
        let x = Tensor::from_vec(vec![0.0]).reshape(vec![1, 1]).unwrap();
        assert_eq!(sine_forward(&x, 30.0).data(), &[0.0]);
        let x = Tensor::new(vec![1, 1], vec![std::f64::consts::PI / 60.0]).unwrap();
        assert!((sine_forward(&x, 30.0).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let ones = Tensor::filled(&[1, 3], 1.0);
        assert_eq!(relu_backward(&x, &ones).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn posenc_identity_and_hand_values() {
        let p = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let out = positional_encoding(&p, 0, true).unwrap();
        assert_eq!(out, p);

        let p = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let out = positional_encoding(&p, 2, false).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn posenc_width_formula() {
        // D=3, levels=6, include input: 3*12 + 3 = 39
        assert_eq!(posenc_width(&[6, 6, 6], true), 39);
    }

    #[test]
    fn posenc_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let levels = [3, 3, 2];
        let d_out_w = posenc_width(&levels, true);
        let d_out = Tensor::rand_uniform(&[2, d_out_w], -1.0, 1.0, &mut rng);
        let dp = posenc_backward(&p, &levels, true, &d_out).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let fp = posenc_forward(&plus, &levels, true).unwrap();
            let fm = posenc_forward(&minus, &levels, true).unwrap();
            let mut fd = 0.0;
            for (k, d) in d_out.data().iter().enumerate() {
                fd += d * (fp.data()[k] - fm.data()[k]) / (2.0 * h);
            }
            let rel = (fd - dp.data()[i]).abs() / dp.data()[i].abs().max(1e-8);
            assert!(rel < 1e-4, "dim {} rel {}", i, rel);
        }
    }

    #[test]
    fn sine_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[2, 2], -1.0, 1.0, &mut rng);
        let d_out = Tensor::rand_uniform(&[2, 2], -1.0, 1.0, &mut rng);
        let dx = sine_backward(&x, 30.0, &d_out);
        let h = 1e-7;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd: f64 = sine_forward(&plus, 30.0)
                .data()
                .iter()
                .zip(sine_forward(&minus, 30.0).data())
                .zip(d_out.data())
                .map(|((a, b), d)| d * (a - b) / (2.0 * h))
                .sum();
            let rel = (fd - dx.data()[i]).abs() / dx.data()[i].abs().max(1e-8);
            assert!(rel < 1e-4);
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::rand_uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
        let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let (a, _) = linear_forward(&w, &b, &x).unwrap();
        let (c, _) = linear_forward(&w, &b, &x).unwrap();
        assert_eq!(a.data(), c.data());
    }
}
