//! Dense row-major tensor and the handful of kernels the layers are built on.
//!
//! Everything is 64-bit. Accumulation order is fixed so repeated calls are
//! bitwise identical; there is no internal threading.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    /// Extent-0 tensors are rejected; rank-0 (scalar) is allowed.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be >= 1, got {:?}",
                shape
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for shape {:?}", n, shape),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e >= 1), "extent-0 tensor");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        assert!(!v.is_empty());
        Tensor {
            shape: vec![v.len()],
            data: v,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e >= 1), "extent-0 tensor");
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Normal with the given standard deviation, via Box-Muller on the
    /// provided stream (keeps us independent of rand_distr internals).
    pub fn rand_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * th.cos());
            if data.len() < n {
                data.push(std * r * th.sin());
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extent-0 tensors cannot be constructed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                format!("{:?}", shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// 2D element access.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &mut self.data[i * c + j]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Slice `[i, :, :]` of a rank-3 tensor.
    pub fn slab(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 3);
        let c = self.shape[1] * self.shape[2];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 3);
        let c = self.shape[1] * self.shape[2];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| s * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        axpy(1.0, other, self)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        axpy(-1.0, other, self)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// c[i,j] = sum_p a[i,p] * b[p,j]; fixed i,p,j loop order for determinism.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("[m x k] * [k x n]"),
            format!("{:?} * {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: c,
    })
}

/// Elementwise alpha*x + y.
pub fn axpy(alpha: f64, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape != y.shape {
        return Err(Error::shape(
            "axpy",
            format!("{:?}", y.shape),
            format!("{:?}", x.shape),
        ));
    }
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&xv, &yv)| alpha * xv + yv)
        .collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Reduction over the whole tensor (axis = None, yields a scalar) or along
/// one axis (axis removed from the shape). Accumulates in row-major order.
pub fn reduce(x: &Tensor, kind: Reduction, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => {
            let v = match kind {
                Reduction::Sum => x.data.iter().sum(),
                Reduction::Mean => x.data.iter().sum::<f64>() / x.data.len() as f64,
                Reduction::Max => x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            };
            Ok(Tensor::scalar(v))
        }
        Some(ax) => {
            if ax >= x.rank() {
                return Err(Error::AxisOutOfRange {
                    axis: ax,
                    rank: x.rank(),
                });
            }
            let extent = x.shape[ax];
            let outer: usize = x.shape[..ax].iter().product();
            let inner: usize = x.shape[ax + 1..].iter().product();
            let mut out_shape: Vec<usize> = x.shape.clone();
            out_shape.remove(ax);
            let init = match kind {
                Reduction::Max => f64::NEG_INFINITY,
                _ => 0.0,
            };
            let mut out = vec![init; outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    for i in 0..inner {
                        let v = x.data[base + i];
                        let acc = &mut out[o * inner + i];
                        match kind {
                            Reduction::Sum | Reduction::Mean => *acc += v,
                            Reduction::Max => *acc = acc.max(v),
                        }
                    }
                }
            }
            if kind == Reduction::Mean {
                for v in &mut out {
                    *v /= extent as f64;
                }
            }
            if out_shape.is_empty() {
                Ok(Tensor::scalar(out[0]))
            } else {
                Tensor::new(out_shape, out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                *c.at2_mut(i, j) = acc;
            }
        }
        c
    }

    #[test]
    fn extent_zero_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::rand_uniform(&[5, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[7, 3], -1.0, 1.0, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            let rel = (x - y).abs() / y.abs().max(1e-300);
            assert!(rel <= 1e-12, "rel err {}", rel);
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"));
    }

    #[test]
    fn axpy_cases() {
        let x = Tensor::from_vec(vec![9.0, 9.0]);
        let y = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(axpy(0.0, &x, &y).unwrap().data(), &[1.0, 2.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let y = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(axpy(2.0, &x, &y).unwrap().data(), &[2.0, 3.0]);
        let x = Tensor::from_vec(vec![1.5, -2.0]);
        assert_eq!(axpy(-1.0, &x, &x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn reduce_cases() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(reduce(&x, Reduction::Mean, None).unwrap().data(), &[2.0]);
        let m = Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(
            reduce(&m, Reduction::Max, Some(0)).unwrap().data(),
            &[3.0, 5.0]
        );
        assert!(reduce(&x, Reduction::Sum, Some(3)).is_err());
    }

    #[test]
    fn reduce_repeatable_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[17, 13], -1.0, 1.0, &mut rng);
        let a = reduce(&x, Reduction::Sum, Some(1)).unwrap();
        let b = reduce(&x, Reduction::Sum, Some(1)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
            let c = Tensor::rand_uniform(&[5, 2], -1.0, 1.0, &mut rng);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                let rel = (x - y).abs() / x.abs().max(1e-12);
                prop_assert!(rel < 1e-10);
            }
        }
    }
}
