//! Dense linear algebra, stable activations, and a deterministic RNG.
//!
//! Everything here is deliberately plain f64 code with fixed evaluation
//! order, so results are bit-identical across runs and platforms. That
//! property is what lets dataset artifacts, trained models, and reports be
//! compared byte-for-byte in tests and across machines.

use thiserror::Error;

/// Largest f64 strictly below 1.0 (1 - 2^-53).
///
/// Activation outputs are clamped into the open interval (0, 1) (or (-1, 1)
/// for tanh). Without the clamp, f64 rounding makes sigmoid/softmax return
/// exactly 0.0 or 1.0 for inputs beyond ~|37|, which would let a probability
/// threshold of 1.0 fire and would feed log(0) into loss terms.
const ONE_BELOW: f64 = f64::from_bits(0x3FEF_FFFF_FFFF_FFFF);

/// Probabilities below this are clamped before taking logs in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: dimensions must be nonzero, got {rows}x{cols}")]
    ZeroDim {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: data length {len} does not match shape {rows}x{cols}")]
    DataLength {
        op: &'static str,
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: input must be nonempty")]
    EmptyInput { op: &'static str },
    #[error("class index {index} is out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// xoshiro256++ generator, seeded through SplitMix64.
///
/// Hand-rolled on purpose: the whole pipeline promises that a (data, seed)
/// pair reproduces artifacts byte-for-byte, which rules out generators whose
/// stream may change between library versions. xoshiro256++ is pure integer
/// arithmetic, so the stream is identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        // SplitMix64 expansion, the seeding scheme recommended by the
        // xoshiro authors. It maps any u64 seed (including 0) to a
        // well-mixed nonzero state.
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        let mut state = [next(), next(), next(), next()];
        if state == [0, 0, 0, 0] {
            // xoshiro must not start from the all-zero state; unreachable in
            // practice with SplitMix64 but cheap to rule out.
            state[0] = 0x9E37_79B9_7F4A_7C15;
        }
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw from [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw from [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer draw from [0, n). Panics if n is zero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below requires n > 0");
        let n = n as u64;
        // Reject the low zone so that the modulo is exactly uniform.
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return (r % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Vector {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Vector {
        Vector { data }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn check_len(&self, rhs: &Vector, op: &'static str) -> Result<(), NumericsError> {
        if self.len() != rhs.len() {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: (self.len(), 1),
                right: (rhs.len(), 1),
            });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Vector) -> Result<Vector, NumericsError> {
        self.check_len(rhs, "vector add")?;
        Ok(Vector::from_vec(
            self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, rhs: &Vector) -> Result<Vector, NumericsError> {
        self.check_len(rhs, "vector sub")?;
        Ok(Vector::from_vec(
            self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Elementwise product.
    pub fn hadamard(&self, rhs: &Vector) -> Result<Vector, NumericsError> {
        self.check_len(rhs, "vector hadamard")?;
        Ok(Vector::from_vec(
            self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).collect(),
        ))
    }

    pub fn scale(&self, k: f64) -> Vector {
        Vector::from_vec(self.data.iter().map(|a| a * k).collect())
    }

    pub fn add_assign(&mut self, rhs: &Vector) -> Result<(), NumericsError> {
        self.check_len(rhs, "vector add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                op: "matrix from_vec",
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, NumericsError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(NumericsError::EmptyInput {
                op: "matrix from_rows",
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::DataLength {
                    op: "matrix from_rows",
                    len: row.len(),
                    rows: rows.len(),
                    cols,
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "matrix index out of bounds");
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols, "matrix index out of bounds");
        self.data[r * self.cols + c] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != rhs.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: (self.rows, self.cols),
                right: (rhs.rows, rhs.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        // k is the middle loop so both operands stream row-major; for a fixed
        // output cell the contributions still arrive in ascending k, matching
        // a plain dot product exactly.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self * v
    pub fn matvec(&self, v: &Vector) -> Result<Vector, NumericsError> {
        if self.cols != v.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec",
                left: (self.rows, self.cols),
                right: (v.len(), 1),
            });
        }
        let mut out = Vector::zeros(self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for (a, b) in self.row(r).iter().zip(v.data()) {
                acc += a * b;
            }
            out[r] = acc;
        }
        Ok(out)
    }

    /// self^T * v, without materializing the transpose.
    pub fn matvec_transpose(&self, v: &Vector) -> Result<Vector, NumericsError> {
        if self.rows != v.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec_transpose",
                left: (self.cols, self.rows),
                right: (v.len(), 1),
            });
        }
        let mut out = Vector::zeros(self.cols);
        for r in 0..self.rows {
            let vr = v[r];
            for (o, a) in out.data_mut().iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        Ok(out)
    }

    /// self += a * b^T. The workhorse of gradient accumulation.
    pub fn add_outer_product(&mut self, a: &Vector, b: &Vector) -> Result<(), NumericsError> {
        if a.len() != self.rows || b.len() != self.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_outer_product",
                left: (self.rows, self.cols),
                right: (a.len(), b.len()),
            });
        }
        for r in 0..self.rows {
            let ar = a[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += ar * bv;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Activations and loss
// ---------------------------------------------------------------------------

/// Numerically stable logistic function, clamped into the open interval
/// (0, 1). The two-branch form never exponentiates a positive argument, so
/// no input overflows; far-negative inputs underflow toward zero and land on
/// the clamp floor instead of exactly 0.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let raw = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    raw.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

/// tanh clamped into the open interval (-1, 1); f64 tanh saturates to
/// exactly +/-1 beyond ~|19| which would zero out gradients of the form
/// (1 - tanh^2) prematurely and break strict-interval guarantees downstream.
pub fn tanh_scalar(x: f64) -> f64 {
    x.tanh().clamp(-ONE_BELOW, ONE_BELOW)
}

pub fn sigmoid(x: &Vector) -> Vector {
    Vector::from_vec(x.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn tanh(x: &Vector) -> Vector {
    Vector::from_vec(x.data().iter().map(|&v| tanh_scalar(v)).collect())
}

/// Max-subtracted softmax. Entries are clamped into (0, 1), so a threshold
/// of exactly 1.0 can never be reached and every entry has a finite log.
/// The sum stays within 1e-12 of 1.
pub fn softmax(x: &Vector) -> Result<Vector, NumericsError> {
    if x.is_empty() {
        return Err(NumericsError::EmptyInput { op: "softmax" });
    }
    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Vector::from_vec(
        exps.into_iter()
            .map(|e| (e / sum).clamp(f64::MIN_POSITIVE, ONE_BELOW))
            .collect(),
    ))
}

/// Cross-entropy of a probability vector against an integer class target,
/// with the probability clamped to at least [`PROB_FLOOR`] so the log stays
/// finite even for a (numerically) zero probability. A NaN probability
/// yields a NaN loss rather than being swallowed by the clamp; the training
/// loop treats a non-finite loss as divergence and needs to see it.
pub fn cross_entropy(probs: &Vector, target: usize) -> Result<f64, NumericsError> {
    if target >= probs.len() {
        return Err(NumericsError::ClassIndex {
            index: target,
            classes: probs.len(),
        });
    }
    let p = probs[target];
    // Not `f64::max`: max(NaN, floor) would return the floor.
    let clamped = if p < PROB_FLOOR { PROB_FLOOR } else { p };
    // `0.0 - x` normalizes -0.0 to 0.0 for the p == 1 case.
    Ok(0.0 - clamped.ln())
}

/// Glorot/Xavier uniform init: entries drawn from
/// U(-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))), filled in row-major order
/// so a given seed always produces the same matrix.
pub fn glorot_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix, NumericsError> {
    if rows == 0 || cols == 0 {
        return Err(NumericsError::ZeroDim {
            op: "glorot_uniform",
            rows,
            cols,
        });
    }
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-limit, limit)).collect();
    Matrix::from_vec(rows, cols, data)
}
