//! Exact construction of Winograd minimal-filtering kernels `F(m, r)`.
//!
//! A kernel computes `m` outputs of a cross-correlation with an `r`-tap filter
//! from `l = m + r - 1` inputs using only `l` general multiplications:
//!
//! ```text
//! y = AT * ((BT * x) .* (G * w))
//! ```
//!
//! The three matrices come from the classic polynomial-interpolation
//! construction: the product of the filter polynomial and the input polynomial
//! is recovered from its values at `l` distinct points (the last one at
//! infinity, which picks out the leading coefficient). All arithmetic here is
//! over arbitrary-precision rationals, so generated kernels are exact — float
//! error enters only when a kernel is lowered with [`WinogradKernel::to_float`]
//! and executed by the engines.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{MatOf, Scalar};

/// Exact rational scalar used throughout kernel generation.
pub type Rational = BigRational;

/// `n / d` as a [`Rational`]. Panics if `d == 0`.
pub fn ratio(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

/// `n` as a [`Rational`].
pub fn rat(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

/// An interpolation point: a finite rational, or the point at infinity whose
/// "evaluation" of a polynomial is its leading coefficient.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum InterpolationPoint {
    Finite(Rational),
    Infinity,
}

impl fmt::Display for InterpolationPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterpolationPoint::Finite(q) => write!(f, "{q}"),
            InterpolationPoint::Infinity => write!(f, "inf"),
        }
    }
}

impl FromStr for InterpolationPoint {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, KernelError> {
        if s == "inf" || s == "∞" {
            return Ok(InterpolationPoint::Infinity);
        }
        Rational::from_str(s)
            .map(InterpolationPoint::Finite)
            .map_err(|_| KernelError::BadRational(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("kernel sizes must be at least 1, got F({m}, {r})")]
    InvalidSize { m: usize, r: usize },
    #[error("interpolation points collide at index {0} — point generator is broken")]
    DuplicatePoint(usize),
    #[error("interpolation matrix is singular — point set is not unisolvent")]
    Singular,
    #[error("matrix dimensions are inconsistent: {0}")]
    BadShape(String),
    #[error("cannot parse {0:?} as a rational")]
    BadRational(String),
}

/// Dense matrix of exact rationals, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatMat {
    rows: usize,
    cols: usize,
    data: Vec<Rational>,
}

impl RatMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RatMat { rows, cols, data: vec![Rational::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = RatMat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, Rational::one());
        }
        m
    }

    /// Build from rows of `i64` entries (test and display convenience).
    pub fn from_rows(rows: &[&[i64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = RatMat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, rat(v));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Rational {
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Rational) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> RatMat {
        let mut t = RatMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j).clone());
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[Rational]) -> Vec<Rational> {
        assert_eq!(v.len(), self.cols, "vector length mismatch");
        (0..self.rows)
            .map(|i| {
                let mut acc = Rational::zero();
                for (j, vj) in v.iter().enumerate() {
                    if !self.get(i, j).is_zero() && !vj.is_zero() {
                        acc += self.get(i, j) * vj;
                    }
                }
                acc
            })
            .collect()
    }

    pub fn matmul(&self, other: &RatMat) -> RatMat {
        assert_eq!(self.cols, other.rows, "inner dimension mismatch");
        let mut out = RatMat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let b = other.get(k, j);
                    if !b.is_zero() {
                        let cur = out.get(i, j) + a * b;
                        out.set(i, j, cur);
                    }
                }
            }
        }
        out
    }

    /// Exact inverse by Gauss–Jordan elimination, `None` if singular.
    pub fn inverse(&self) -> Option<RatMat> {
        if self.rows != self.cols {
            return None;
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = RatMat::identity(n);
        for col in 0..n {
            let pivot = (col..n).find(|&i| !a.get(i, col).is_zero())?;
            if pivot != col {
                for j in 0..n {
                    let tmp = a.get(pivot, j).clone();
                    a.set(pivot, j, a.get(col, j).clone());
                    a.set(col, j, tmp);
                    let tmp = inv.get(pivot, j).clone();
                    inv.set(pivot, j, inv.get(col, j).clone());
                    inv.set(col, j, tmp);
                }
            }
            let p = a.get(col, col).clone();
            for j in 0..n {
                a.set(col, j, a.get(col, j) / &p);
                inv.set(col, j, inv.get(col, j) / &p);
            }
            for i in 0..n {
                if i == col || a.get(i, col).is_zero() {
                    continue;
                }
                let f = a.get(i, col).clone();
                for j in 0..n {
                    let va = a.get(i, j) - &f * a.get(col, j);
                    a.set(i, j, va);
                    let vi = inv.get(i, j) - &f * inv.get(col, j);
                    inv.set(i, j, vi);
                }
            }
        }
        Some(inv)
    }

    /// Lower the matrix to floating point.
    pub fn to_float<S: Scalar>(&self) -> MatOf<S> {
        let data = self
            .data
            .iter()
            .map(|q| S::from_f64(q.to_f64().expect("rational out of f64 range")))
            .collect();
        MatOf::new(self.rows, self.cols, data)
    }
}

/// A minimal-filtering kernel `F(m, r)` with exact transform matrices.
///
/// Shapes: `at` is `m x l`, `g` is `l x r`, `bt` is `l x l`, with
/// `l = m + r - 1`. `points` records the interpolation points the construction
/// used (the degenerate `m == 1` kernels keep them for reference only).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WinogradKernel {
    pub m: usize,
    pub r: usize,
    pub l: usize,
    pub at: RatMat,
    pub g: RatMat,
    pub bt: RatMat,
    pub points: Vec<InterpolationPoint>,
}

/// Floating-point lowering of a kernel, ready for the engines.
#[derive(Clone, Debug)]
pub struct FloatKernelOf<S> {
    pub m: usize,
    pub r: usize,
    pub l: usize,
    pub at: MatOf<S>,
    pub g: MatOf<S>,
    pub bt: MatOf<S>,
}

pub type FloatKernel = FloatKernelOf<f64>;

impl WinogradKernel {
    pub fn to_float(&self) -> FloatKernel {
        self.to_float_as::<f64>()
    }

    pub fn to_float_as<S: Scalar>(&self) -> FloatKernelOf<S> {
        FloatKernelOf {
            m: self.m,
            r: self.r,
            l: self.l,
            at: self.at.to_float(),
            g: self.g.to_float(),
            bt: self.bt.to_float(),
        }
    }
}

/// Free-function spelling of [`WinogradKernel::to_float`].
pub fn to_float_kernel(k: &WinogradKernel) -> FloatKernel {
    k.to_float()
}

/// The `l` interpolation points used for a size-`l` kernel: `0, 1, -1`, then
/// powers-of-two pairs `2^k, -2^k, 2^-k, -2^-k`, with the point at infinity
/// last whenever `l >= 2`. Small magnitudes keep the transform matrices
/// well-conditioned in floating point.
///
/// ```
/// use winolab_core::{make_points, InterpolationPoint};
/// let pts = make_points(6);
/// assert_eq!(pts.len(), 6);
/// assert_eq!(pts[5], InterpolationPoint::Infinity);
/// assert_eq!(pts[0].to_string(), "0");
/// assert_eq!(pts[4].to_string(), "-2");
/// ```
pub fn make_points(l: usize) -> Vec<InterpolationPoint> {
    assert!(l >= 1, "kernel size must be positive");
    if l == 1 {
        return vec![InterpolationPoint::Finite(Rational::zero())];
    }
    let mut pts = Vec::with_capacity(l);
    let finite = l - 1;
    let push = |q: Rational, pts: &mut Vec<InterpolationPoint>| {
        if pts.len() < finite {
            pts.push(InterpolationPoint::Finite(q));
        }
    };
    push(rat(0), &mut pts);
    push(rat(1), &mut pts);
    push(rat(-1), &mut pts);
    let mut k = 1u32;
    while pts.len() < finite {
        let p = BigInt::from(2).pow(k);
        push(Rational::from_integer(p.clone()), &mut pts);
        push(Rational::from_integer(-p.clone()), &mut pts);
        push(Rational::new(BigInt::one(), p.clone()), &mut pts);
        push(Rational::new(-BigInt::one(), p), &mut pts);
        k += 1;
    }
    pts.push(InterpolationPoint::Infinity);
    pts
}

/// Row of powers `[1, a, a^2, ..., a^(cols-1)]` for a finite point, or the
/// leading-coefficient selector for infinity.
fn eval_row(point: &InterpolationPoint, cols: usize) -> Vec<Rational> {
    match point {
        InterpolationPoint::Finite(a) => {
            let mut row = Vec::with_capacity(cols);
            let mut p = Rational::one();
            for _ in 0..cols {
                row.push(p.clone());
                p *= a;
            }
            row
        }
        InterpolationPoint::Infinity => {
            let mut row = vec![Rational::zero(); cols];
            row[cols - 1] = Rational::one();
            row
        }
    }
}

fn vandermonde(points: &[InterpolationPoint], cols: usize) -> RatMat {
    let mut v = RatMat::zeros(points.len(), cols);
    for (i, p) in points.iter().enumerate() {
        for (j, q) in eval_row(p, cols).into_iter().enumerate() {
            v.set(i, j, q);
        }
    }
    v
}

/// Generate the exact `F(m, r)` kernel.
///
/// `m == 1` is constructed degenerate on purpose: `AT` is a row of ones and
/// `G`, `BT` are identities, so the kernel *is* the native dot product — same
/// multiplication count (`l = r`), and bit-identical float execution.
///
/// ```
/// use winolab_core::{generate_kernel, verify_kernel};
/// let k = generate_kernel(2, 3).unwrap();
/// assert_eq!(k.l, 4);
/// assert!(verify_kernel(&k));
/// ```
pub fn generate_kernel(m: usize, r: usize) -> Result<WinogradKernel, KernelError> {
    if m == 0 || r == 0 {
        return Err(KernelError::InvalidSize { m, r });
    }
    let l = m + r - 1;
    let points = make_points(l);
    for i in 0..points.len() {
        for j in 0..i {
            if points[i] == points[j] {
                return Err(KernelError::DuplicatePoint(i));
            }
        }
    }

    if m == 1 {
        let mut at = RatMat::zeros(1, l);
        for j in 0..l {
            at.set(0, j, Rational::one());
        }
        return Ok(WinogradKernel {
            m,
            r,
            l,
            at,
            g: RatMat::identity(l),
            bt: RatMat::identity(l),
            points,
        });
    }

    let v_full = vandermonde(&points, l);
    let mut bt = v_full.inverse().ok_or(KernelError::Singular)?.transpose();
    let mut g = vandermonde(&points, r);
    let at = vandermonde(&points, m).transpose();

    // Scale each BT row integral; the compensating factor moves into the same
    // row of G, leaving the per-point product (BT x)_k (G w)_k unchanged.
    for i in 0..l {
        let mut scale = BigInt::one();
        for j in 0..l {
            scale = scale.lcm(bt.get(i, j).denom());
        }
        if !scale.is_one() {
            let s = Rational::from_integer(scale);
            for j in 0..l {
                bt.set(i, j, bt.get(i, j) * &s);
            }
            for j in 0..r {
                g.set(i, j, g.get(i, j) / &s);
            }
        }
    }

    Ok(WinogradKernel { m, r, l, at, g, bt, points })
}

/// Exact cross-correlation of `x` (length `l`) with `w` (length `r`),
/// producing `l - r + 1` outputs. No filter flip.
pub fn exact_correlate(x: &[Rational], w: &[Rational]) -> Vec<Rational> {
    assert!(x.len() >= w.len(), "input shorter than filter");
    let outs = x.len() - w.len() + 1;
    (0..outs)
        .map(|i| {
            let mut acc = Rational::zero();
            for (j, wj) in w.iter().enumerate() {
                acc += &x[i + j] * wj;
            }
            acc
        })
        .collect()
}

/// Check a kernel's structure and its algebraic identity.
///
/// Structural checks: shape consistency, pairwise-distinct points, invertible
/// `BT`. The identity `AT ((BT x) .* (G w)) == corr(x, w)` is then exercised on
/// 100 deterministic pseudo-random rational inputs and compared exactly —
/// no tolerance anywhere.
pub fn verify_kernel(k: &WinogradKernel) -> bool {
    if k.m == 0 || k.r == 0 || k.l != k.m + k.r - 1 {
        return false;
    }
    if k.at.rows() != k.m || k.at.cols() != k.l {
        return false;
    }
    if k.g.rows() != k.l || k.g.cols() != k.r {
        return false;
    }
    if k.bt.rows() != k.l || k.bt.cols() != k.l {
        return false;
    }
    if k.points.len() != k.l {
        return false;
    }
    for i in 0..k.points.len() {
        for j in 0..i {
            if k.points[i] == k.points[j] {
                return false;
            }
        }
    }
    if k.bt.inverse().is_none() {
        return false;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x57494E4F);
    let draw = |rng: &mut ChaCha8Rng| ratio(rng.random_range(-100..=100), rng.random_range(1..=10));
    for _ in 0..100 {
        let x: Vec<Rational> = (0..k.l).map(|_| draw(&mut rng)).collect();
        let w: Vec<Rational> = (0..k.r).map(|_| draw(&mut rng)).collect();
        let tx = k.bt.mul_vec(&x);
        let tw = k.g.mul_vec(&w);
        let prod: Vec<Rational> = tx.iter().zip(&tw).map(|(a, b)| a * b).collect();
        let y = k.at.mul_vec(&prod);
        if y != exact_correlate(&x, &w) {
            return false;
        }
    }
    true
}

/// Serialization mirror of [`WinogradKernel`]: rationals as `"n/d"` strings,
/// infinity as `"inf"`, matrices as row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelJson {
    pub m: usize,
    pub r: usize,
    pub l: usize,
    pub points: Vec<String>,
    pub at: Vec<Vec<String>>,
    pub g: Vec<Vec<String>>,
    pub bt: Vec<Vec<String>>,
}

fn mat_to_strings(m: &RatMat) -> Vec<Vec<String>> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j).to_string()).collect())
        .collect()
}

fn mat_from_strings(rows: &[Vec<String>]) -> Result<RatMat, KernelError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 {
        return Err(KernelError::BadShape("empty matrix".into()));
    }
    let mut m = RatMat::zeros(r, c);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(KernelError::BadShape(format!("ragged row {i}")));
        }
        for (j, s) in row.iter().enumerate() {
            let q = Rational::from_str(s).map_err(|_| KernelError::BadRational(s.clone()))?;
            m.set(i, j, q);
        }
    }
    Ok(m)
}

impl From<&WinogradKernel> for KernelJson {
    fn from(k: &WinogradKernel) -> Self {
        KernelJson {
            m: k.m,
            r: k.r,
            l: k.l,
            points: k.points.iter().map(|p| p.to_string()).collect(),
            at: mat_to_strings(&k.at),
            g: mat_to_strings(&k.g),
            bt: mat_to_strings(&k.bt),
        }
    }
}

impl TryFrom<&KernelJson> for WinogradKernel {
    type Error = KernelError;

    fn try_from(j: &KernelJson) -> Result<Self, KernelError> {
        let points = j
            .points
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<InterpolationPoint>, _>>()?;
        Ok(WinogradKernel {
            m: j.m,
            r: j.r,
            l: j.l,
            at: mat_from_strings(&j.at)?,
            g: mat_from_strings(&j.g)?,
            bt: mat_from_strings(&j.bt)?,
            points,
        })
    }
}
