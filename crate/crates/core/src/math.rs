//! Dense numeric kernels shared by the cells, the backward pass and the
//! optimizer. Everything is `f64`; vectors are plain slices.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MathError {
    #[error("roll shift {shift} out of range for vector of length {len}")]
    RollOutOfRange { shift: i64, len: usize },
}

/// Row-major dense matrix with immutable dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows in RealMat::from_rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "RealMat::from_vec: {} values for a {}x{} matrix",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    /// Uniform entries on (-scale, scale).
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_range(-scale, scale))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out += self^T * v`
    pub fn add_transpose_mul(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.rows, "transpose-mul: vector length vs rows");
        assert_eq!(out.len(), self.cols, "transpose-mul: output length vs cols");
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            axpy(vr, self.row(r), out);
        }
    }

    /// `self += d ⊗ x` (outer product accumulation).
    pub fn add_outer(&mut self, d: &[f64], x: &[f64]) {
        assert_eq!(d.len(), self.rows, "outer: left length vs rows");
        assert_eq!(x.len(), self.cols, "outer: right length vs cols");
        let cols = self.cols;
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            axpy(dr, x, &mut self.data[r * cols..(r + 1) * cols]);
        }
    }
}

/// Dot product with four independent accumulators; the summation order is
/// fixed, so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `W·x + b`. Shape mismatches are programming errors and panic naming both shapes.
pub fn affine(w: &RealMat, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows];
    affine_into(w, b, x, &mut out);
    out
}

pub fn affine_into(w: &RealMat, b: &[f64], x: &[f64], out: &mut [f64]) {
    assert!(
        w.cols == x.len() && w.rows == b.len() && out.len() == w.rows,
        "affine shape mismatch: W is {}x{}, b has {}, x has {}",
        w.rows,
        w.cols,
        b.len(),
        x.len()
    );
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(r), x) + b[r];
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Tanh,
    /// `sign(x) * ln(|x| + 1)`: odd, unbounded, derivative `1 / (1 + |x|)`.
    LogAct,
    Sigmoid,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::LogAct => {
                if x < 0.0 {
                    -(-x).ln_1p()
                } else {
                    x.ln_1p()
                }
            }
            ActivationKind::Sigmoid => sigmoid_scalar(x),
        }
    }

    /// Derivative with respect to the pre-activation `x`.
    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::LogAct => 1.0 / (1.0 + x.abs()),
            ActivationKind::Sigmoid => {
                let s = sigmoid_scalar(x);
                s * (1.0 - s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::LogAct => "log",
            ActivationKind::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(ActivationKind::Tanh),
            "log" | "logact" => Some(ActivationKind::LogAct),
            "sigmoid" => Some(ActivationKind::Sigmoid),
            _ => None,
        }
    }
}

pub fn activate(kind: ActivationKind, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| kind.apply(v)).collect()
}

pub fn activate_deriv(kind: ActivationKind, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| kind.deriv(v)).collect()
}

/// Circular shift: `roll(v, k)[j] = v[(j - k) mod n]`, so
/// `roll([1,2,3], 1) = [3,1,2]` and `roll([1,2,3], -1) = [2,3,1]`.
pub fn roll(v: &[f64], k: i64) -> Result<Vec<f64>, MathError> {
    let mut out = vec![0.0; v.len()];
    roll_into(v, k, &mut out)?;
    Ok(out)
}

pub fn roll_into(v: &[f64], k: i64, out: &mut [f64]) -> Result<(), MathError> {
    let n = v.len();
    if k.unsigned_abs() as usize >= n.max(1) && !(n == 0 && k == 0) {
        return Err(MathError::RollOutOfRange { shift: k, len: n });
    }
    debug_assert_eq!(out.len(), n);
    if n == 0 {
        return Ok(());
    }
    let shift = k.rem_euclid(n as i64) as usize;
    // out[j] = v[j - shift]
    out[shift..].copy_from_slice(&v[..n - shift]);
    out[..shift].copy_from_slice(&v[n - shift..]);
    Ok(())
}

/// Deterministic generator: ChaCha with 8 rounds, seeded from a 64-bit seed.
/// The stream is identical on every platform. Gaussian draws use the
/// Box-Muller transform on two uniform draws in (0, 1].
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

/// Serializable position of a [`SeededRng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream for a named purpose (data, init, test set...).
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "SeededRng::below(0)");
        self.inner.random_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&[0.0]), vec![0.5]);
        assert!((sigmoid(&[3f64.ln()])[0] - 0.75).abs() < 1e-15);
        let s = sigmoid(&[-10.0, 10.0]);
        assert!(s[0] < 1e-4 && s[1] > 0.9999);
    }

    #[test]
    fn logact_examples() {
        let e1 = std::f64::consts::E - 1.0;
        assert_eq!(activate(ActivationKind::LogAct, &[0.0]), vec![0.0]);
        assert!((activate(ActivationKind::LogAct, &[e1])[0] - 1.0).abs() < 1e-15);
        assert!((activate(ActivationKind::LogAct, &[-e1])[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(activate_deriv(ActivationKind::LogAct, &[0.0]), vec![1.0]);
        assert!((activate_deriv(ActivationKind::LogAct, &[9.0])[0] - 0.1).abs() < 1e-15);
        assert_eq!(activate_deriv(ActivationKind::Tanh, &[0.0]), vec![1.0]);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for kind in [ActivationKind::Tanh, ActivationKind::LogAct, ActivationKind::Sigmoid] {
            for &x in &[-5.0, -1.0, 0.0, 1.0, 5.0] {
                let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                let an = kind.deriv(x);
                assert!(
                    (fd - an).abs() / an.abs().max(1e-300) < 1e-6,
                    "{kind:?} at {x}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn roll_examples() {
        assert_eq!(roll(&[1.0, 2.0, 3.0], 1).unwrap(), vec![3.0, 1.0, 2.0]);
        assert_eq!(roll(&[1.0, 2.0, 3.0], -1).unwrap(), vec![2.0, 3.0, 1.0]);
        assert_eq!(roll(&[5.0], 0).unwrap(), vec![5.0]);
        assert_eq!(
            roll(&[1.0, 2.0], 2),
            Err(MathError::RollOutOfRange { shift: 2, len: 2 })
        );
        assert!(roll(&[1.0], 1).is_err());
    }

    #[test]
    fn affine_examples() {
        assert_eq!(affine(&RealMat::identity(2), &[0.0, 0.0], &[3.0, 4.0]), vec![3.0, 4.0]);
        assert_eq!(affine(&RealMat::zeros(2, 3), &[1.0, 2.0], &[7.0, -1.0, 2.0]), vec![1.0, 2.0]);
        let w = RealMat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(affine(&w, &[1.0, 1.0], &[1.0, 1.0]), vec![4.0, 8.0]);
    }

    #[test]
    #[should_panic(expected = "W is 2x2, b has 2, x has 3")]
    fn affine_mismatch_names_shapes() {
        affine(&RealMat::identity(2), &[0.0, 0.0], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn rng_is_reproducible_and_resumable() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);

        let snap = a.state();
        let cont: Vec<f64> = (0..10).map(|_| a.gaussian()).collect();
        let mut c = SeededRng::from_state(snap);
        let again: Vec<f64> = (0..10).map(|_| c.gaussian()).collect();
        assert_eq!(cont, again);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(3);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    proptest! {
        #[test]
        fn roll_is_a_bijection(v in prop::collection::vec(-1e6f64..1e6, 1..40), k in -39i64..40) {
            prop_assume!((k.unsigned_abs() as usize) < v.len());
            let back = roll(&roll(&v, k).unwrap(), -k).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn logact_is_odd(x in -1e12f64..1e12) {
            prop_assert_eq!(ActivationKind::LogAct.apply(-x), -ActivationKind::LogAct.apply(x));
        }

        #[test]
        fn sigmoid_complement(x in -700f64..700.0) {
            prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn derivatives_positive(x in -15f64..15.0) {
            for kind in [ActivationKind::Tanh, ActivationKind::LogAct, ActivationKind::Sigmoid] {
                prop_assert!(kind.deriv(x) > 0.0);
            }
        }

        #[test]
        fn logact_strictly_increasing(a in -1e6f64..1e6, d in 1e-3f64..1e3) {
            prop_assert!(ActivationKind::LogAct.apply(a + d) > ActivationKind::LogAct.apply(a));
        }
    }
}
