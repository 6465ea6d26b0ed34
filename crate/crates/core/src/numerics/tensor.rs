//! Row-major dense tensors and the matrix kernels behind the tape ops.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::scalar::Scalar;

use super::TensorError;

/// Dense row-major tensor. The product of `shape` always equals `data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian-initialized tensor with standard deviation `std`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64(z * std)
            })
            .collect();
        Self { shape, data }
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
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Interprets the tensor as a matrix, returning `(rows, cols)`.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, r: usize, cols: usize) -> &[S] {
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise in-place accumulation; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Serial work below this op-count threshold; larger matmuls go through rayon.
const PAR_THRESHOLD: usize = 1 << 15;

/// `C = A · B` for `A: [m,k]`, `B: [k,n]`.
pub(crate) fn matmul_nn<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    let body = |i: usize, row: &mut [S]| {
        for kk in 0..ka {
            let aik = ad[i * ka + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                row[j] += aik * brow[j];
            }
        }
    };
    if m * ka * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `C = A · Bᵀ` for `A: [m,k]`, `B: [n,k]`.
pub(crate) fn matmul_nt<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let (m, ka) = a.dims2("matmul_nt")?;
    let (n, kb) = b.dims2("matmul_nt")?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    let body = |i: usize, row: &mut [S]| {
        let arow = &ad[i * ka..(i + 1) * ka];
        for (j, item) in row.iter_mut().enumerate() {
            let brow = &bd[j * ka..(j + 1) * ka];
            let mut acc = S::zero();
            for kk in 0..ka {
                acc += arow[kk] * brow[kk];
            }
            *item = acc;
        }
    };
    if m * ka * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `C = Aᵀ · B` for `A: [m,k]`, `B: [m,n]`.
pub(crate) fn matmul_tn<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let (ma, k) = a.dims2("matmul_tn")?;
    let (mb, n) = b.dims2("matmul_tn")?;
    if ma != mb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![S::zero(); k * n];
    let ad = a.data();
    let bd = b.data();
    // Each output row kk reads column kk of A; summation order over m is fixed.
    let body = |kk: usize, row: &mut [S]| {
        for i in 0..ma {
            let aik = ad[i * k + kk];
            let brow = &bd[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += aik * brow[j];
            }
        }
    };
    if ma * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(kk, row)| body(kk, row));
    } else {
        for (kk, row) in out.chunks_mut(n).enumerate() {
            body(kk, row);
        }
    }
    Tensor::new(vec![k, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Naive triple-loop oracle, kept independent of the kernel implementations.
    fn naive_matmul(a: &Tensor<f64>, m: usize, k: usize, b: &Tensor<f64>, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let c = matmul_nn(&a, &b).unwrap();
        let expect = naive_matmul(&a, 3, 4, &b, 2);
        for (x, y) in c.data().iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_kernels_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![6, 3], 1.0, &mut rng);
        // A·Bᵀ via naive on materialized transpose.
        let mut bt = Tensor::<f64>::zeros(vec![3, 6]);
        for i in 0..6 {
            for j in 0..3 {
                bt.data_mut()[j * 6 + i] = b.data()[i * 3 + j];
            }
        }
        let got = matmul_nt(&a, &b).unwrap();
        let expect = naive_matmul(&a, 5, 3, &bt, 6);
        for (x, y) in got.data().iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-9);
        }

        let c = Tensor::<f64>::randn(vec![5, 4], 1.0, &mut rng);
        let mut at = Tensor::<f64>::zeros(vec![3, 5]);
        for i in 0..5 {
            for j in 0..3 {
                at.data_mut()[j * 5 + i] = a.data()[i * 3 + j];
            }
        }
        let got = matmul_tn(&a, &c).unwrap();
        let expect = naive_matmul(&at, 3, 5, &c, 4);
        for (x, y) in got.data().iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![4, 2]);
        let err = matmul_nn(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn new_rejects_wrong_buffer_length() {
        let err = Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }
}
