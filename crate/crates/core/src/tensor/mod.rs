//! Dense row-major N-dimensional arrays and the handful of primitive
//! operations the network is built from.
//!
//! Layout is always row-major; rank-4 tensors are `[batch, channel, height,
//! width]`. Tensors are immutable once returned from an operation, so they
//! can be shared freely across threads.

pub(crate) mod gemm;

use crate::error::{Error, Result};

/// Ordered list of positive extents, rank 1 to 4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Shape> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::Dimension(format!(
                "shape rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        if let Some(&bad) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {dims:?} has a zero extent ({bad})"
            )));
        }
        Ok(Shape { dims: dims.to_vec() })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total element count (product of extents).
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are all >= 1 by construction
    }

    /// Row-major flat index of `coords`.
    pub fn flat_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dims.len());
        let mut idx = 0;
        for (c, d) in coords.iter().zip(&self.dims) {
            debug_assert!(c < d);
            idx = idx * d + c;
        }
        idx
    }

    /// Inverse of [`Shape::flat_index`].
    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        debug_assert!(flat < self.len());
        let mut out = vec![0; self.dims.len()];
        for (slot, d) in out.iter_mut().zip(&self.dims).rev() {
            *slot = flat % d;
            flat /= d;
        }
        out
    }
}

/// Dense row-major array of `f64` values.
///
/// Invariants: `data.len() == shape.len()` and every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor of the given extents with every element equal to `fill`.
    pub fn new(dims: &[usize], fill: f64) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if !fill.is_finite() {
            return Err(Error::Parameter(format!("fill value {fill} is not finite")));
        }
        let len = shape.len();
        Ok(Tensor { shape, data: vec![fill; len] })
    }

    pub fn zeros(dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims, 0.0)
    }

    /// Wraps an existing buffer; the length must match the shape.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {dims:?} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite value {bad} in tensor data")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the tensor, returning its backing buffer.
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, coords: &[usize]) -> f64 {
        self.data[self.shape.flat_index(coords)]
    }

    /// Index of the maximum element of a rank-1 tensor; ties break to the
    /// lowest index.
    pub fn argmax(&self) -> Result<usize> {
        if self.rank() != 1 {
            return Err(Error::Dimension(format!(
                "argmax needs a rank-1 tensor, got rank {}",
                self.rank()
            )));
        }
        Ok(argmax_slice(&self.data))
    }

    /// Pointwise application of `f`; shape preserved.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: shape {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Every element multiplied by `factor`.
    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }
}

/// First index of the maximum value (ties to the lowest index).
pub(crate) fn argmax_slice(values: &[f64]) -> usize {
    debug_assert!(!values.is_empty());
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Matrix product of two rank-2 tensors, `[m,k] x [k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul needs rank-2 tensors, got ranks {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let (m, ka) = (a.dims()[0], a.dims()[1]);
    let (kb, n) = (b.dims()[0], b.dims()[1]);
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul: inner extents differ, [{m}x{ka}] x [{kb}x{n}]"
        )));
    }
    let mut c = vec![0.0; m * n];
    gemm::gemm_nn_par(m, ka, n, a.data(), ka, b.data(), n, &mut c, n, false);
    Tensor::from_vec(&[m, n], c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        // Independent triple-loop reference.
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn new_fills() {
        let t = Tensor::new(&[2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new(&[1], 1.0).unwrap();
        assert_eq!(t.data(), &[1.0]);
        let t = Tensor::new(&[3, 50, 50], 0.5).unwrap();
        assert_eq!(t.len(), 7500);
        assert!(t.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(&[2, 0], 1.0).is_err());
        assert!(Tensor::new(&[], 1.0).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], 1.0).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::from_vec(&[3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_dot_product() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (m, k, n) = (7, 5, 3);
        let a = rand_vec(m * k, 1);
        let b = rand_vec(k * n, 2);
        let c = matmul(
            &Tensor::from_vec(&[m, k], a.clone()).unwrap(),
            &Tensor::from_vec(&[k, n], b.clone()).unwrap(),
        )
        .unwrap();
        let want = naive_matmul(m, k, n, &a, &b);
        for (got, want) in c.data().iter().zip(&want) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[4, 2]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        for seed in 0..5 {
            let a = Tensor::from_vec(&[4, 6], rand_vec(24, seed * 3)).unwrap();
            let b = Tensor::from_vec(&[6, 5], rand_vec(30, seed * 3 + 1)).unwrap();
            let c = Tensor::from_vec(&[5, 3], rand_vec(15, seed * 3 + 2)).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                assert!((l - r).abs() <= 1e-9 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn argmax_rules() {
        let t = Tensor::from_vec(&[3], vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(t.argmax().unwrap(), 1);
        let tie = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(tie.argmax().unwrap(), 0);
        let m = Tensor::zeros(&[2, 2]).unwrap();
        assert!(m.argmax().is_err());
    }

    #[test]
    fn argmax_matches_linear_scan() {
        for seed in 0..100 {
            let v = rand_vec(17, 1000 + seed);
            let t = Tensor::from_vec(&[17], v.clone()).unwrap();
            // linear-scan reference
            let mut best = 0;
            for i in 0..v.len() {
                if v[i] > v[best] {
                    best = i;
                }
            }
            assert_eq!(t.argmax().unwrap(), best);
        }
    }

    #[test]
    fn elementwise_ops() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.scale(2.0).data(), &[2.0, 4.0, 6.0]);
        let z = Tensor::zeros(&[3]).unwrap();
        assert_eq!(t.add(&z).unwrap().data(), t.data());
        let other = Tensor::zeros(&[4]).unwrap();
        assert!(t.add(&other).is_err());

        let relu_like = |x: f64| x.max(0.0);
        let v = rand_vec(64, 7);
        let mapped = Tensor::from_vec(&[64], v.clone()).unwrap().map(relu_like);
        for (got, &x) in mapped.data().iter().zip(&v) {
            assert_eq!(*got, relu_like(x)); // scalar-loop oracle
        }
    }

    #[test]
    fn index_round_trip_rank4() {
        let s = Shape::new(&[2, 3, 4, 5]).unwrap();
        let (n, c, h, w) = (2, 3, 4, 5);
        let mut flat = 0;
        for bn in 0..n {
            for bc in 0..c {
                for bh in 0..h {
                    for bw in 0..w {
                        let idx = s.flat_index(&[bn, bc, bh, bw]);
                        assert_eq!(idx, ((bn * c + bc) * h + bh) * w + bw);
                        assert_eq!(idx, flat);
                        assert_eq!(s.coords(idx), vec![bn, bc, bh, bw]);
                        flat += 1;
                    }
                }
            }
        }
    }
}
