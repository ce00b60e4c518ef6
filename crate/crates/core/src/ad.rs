//! Forward-mode automatic differentiation with truncated Taylor numbers.
//!
//! A [`Taylor<T, M>`] carries `M = 2^K` coefficients, one per subset of `K`
//! independent perturbation directions `ε₁ … ε_K` with `εᵢ² = 0`. Coefficient
//! `c[S]` (bitmask `S`) is the mixed derivative along the directions in `S`, so
//!
//! * `Taylor<f64, 2>` is an ordinary dual number (first derivatives),
//! * `Taylor<f64, 4>` gives bilinear second directional derivatives,
//! * `Taylor<f64, 8>` gives trilinear third directional derivatives.
//!
//! The coefficient type is itself a [`Scalar`], so numbers nest: a function that
//! internally differentiates (the KKT map differentiates the Lagrangian) can
//! be differentiated again from the outside.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("input length {got} does not match map arity {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("direction length {got} does not match map arity {expected}")]
    DirectionLength { expected: usize, got: usize },
    #[error("map returned {got} outputs, declared {expected}")]
    OutputLength { expected: usize, got: usize },
}

/// Real-like numbers that smooth maps are written against.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + fmt::Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal value, i.e. the innermost zeroth-order coefficient.
    fn value(&self) -> f64;

    fn recip(self) -> Self;

    fn powi(self, n: i32) -> Self;

    fn powf(self, e: f64) -> Self;

    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Truncated multivariate Taylor number over `log2(M)` nilpotent directions.
#[derive(Clone, Copy, PartialEq)]
pub struct Taylor<T, const M: usize> {
    pub c: [T; M],
}

/// First-order dual number.
pub type Dual = Taylor<f64, 2>;
/// Two seeded directions; `c[3]` is the bilinear second derivative.
pub type HyperDual = Taylor<f64, 4>;
/// Three seeded directions; `c[7]` is the trilinear third derivative.
pub type TaylorScalar = Taylor<f64, 8>;

impl<T: Scalar, const M: usize> fmt::Debug for Taylor<T, M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.c.iter()).finish()
    }
}

impl<T: Scalar, const M: usize> Taylor<T, M> {
    const VALID: () = assert!(M == 1 || M == 2 || M == 4 || M == 8, "Taylor supports up to three directions");

    #[inline]
    pub fn constant(v: T) -> Self {
        #[allow(clippy::let_unit_value)]
        let _ = Self::VALID;
        let mut c = [T::zero(); M];
        c[0] = v;
        Self { c }
    }

    /// A variable with value `v` and first-order seeds `seeds[k]` along direction `k`.
    #[inline]
    pub fn seeded(v: T, seeds: &[T]) -> Self {
        let mut out = Self::constant(v);
        for (k, &s) in seeds.iter().enumerate() {
            out.c[1 << k] = s;
        }
        out
    }

    #[inline]
    pub fn real(&self) -> T {
        self.c[0]
    }

    /// Applies a smooth univariate function given its derivatives `d = [f, f', f'', f''']`
    /// at the primal value (Faà di Bruno over subsets of directions).
    #[inline]
    fn chain(self, d: [T; 4]) -> Self {
        let x = &self.c;
        let mut out = [T::zero(); M];
        out[0] = d[0];
        for s in 1..M {
            out[s] = match s.count_ones() {
                1 => d[1] * x[s],
                2 => {
                    let lo = s & s.wrapping_neg();
                    let hi = s ^ lo;
                    d[1] * x[s] + d[2] * x[lo] * x[hi]
                }
                _ => {
                    // s = {a, b, c}
                    let a = s & s.wrapping_neg();
                    let rest = s ^ a;
                    let b = rest & rest.wrapping_neg();
                    let cc = rest ^ b;
                    d[1] * x[s]
                        + d[2] * (x[a] * x[b | cc] + x[b] * x[a | cc] + x[cc] * x[a | b])
                        + d[3] * x[a] * x[b] * x[cc]
                }
            };
        }
        Self { c: out }
    }
}

impl<T: Scalar, const M: usize> Add for Taylor<T, M> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        for i in 0..M {
            self.c[i] += rhs.c[i];
        }
        self
    }
}

impl<T: Scalar, const M: usize> Sub for Taylor<T, M> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        for i in 0..M {
            self.c[i] -= rhs.c[i];
        }
        self
    }
}

impl<T: Scalar, const M: usize> Neg for Taylor<T, M> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        for i in 0..M {
            self.c[i] = -self.c[i];
        }
        self
    }
}

impl<T: Scalar, const M: usize> Mul for Taylor<T, M> {
    type Output = Self;
    /// Leibniz rule: `c[S] = Σ_{A ⊆ S} a[A]·b[S∖A]`.
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let a = &self.c;
        let b = &rhs.c;
        let mut out = [T::zero(); M];
        for s in 0..M {
            let mut acc = a[s] * b[0];
            let mut sub = s;
            while sub != 0 {
                sub = (sub - 1) & s;
                acc += a[sub] * b[s ^ sub];
            }
            out[s] = acc;
        }
        Self { c: out }
    }
}

impl<T: Scalar, const M: usize> Div for Taylor<T, M> {
    type Output = Self;
    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<T: Scalar, const M: usize> Add<f64> for Taylor<T, M> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.c[0] = self.c[0] + rhs;
        self
    }
}

impl<T: Scalar, const M: usize> Sub<f64> for Taylor<T, M> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.c[0] = self.c[0] - rhs;
        self
    }
}

impl<T: Scalar, const M: usize> Mul<f64> for Taylor<T, M> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        for i in 0..M {
            self.c[i] = self.c[i] * rhs;
        }
        self
    }
}

impl<T: Scalar, const M: usize> Div<f64> for Taylor<T, M> {
    type Output = Self;
    #[inline]
    fn div(mut self, rhs: f64) -> Self {
        for i in 0..M {
            self.c[i] = self.c[i] / rhs;
        }
        self
    }
}

impl<T: Scalar, const M: usize> AddAssign for Taylor<T, M> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<T: Scalar, const M: usize> SubAssign for Taylor<T, M> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<T: Scalar, const M: usize> MulAssign for Taylor<T, M> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<T: Scalar, const M: usize> Scalar for Taylor<T, M> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(T::from_f64(v))
    }

    #[inline]
    fn value(&self) -> f64 {
        self.c[0].value()
    }

    /// Panics when the primal value is exactly zero: a NaN here would silently
    /// poison every sensitivity system assembled downstream.
    fn recip(self) -> Self {
        let v = self.c[0];
        assert!(v.value() != 0.0, "division by a Taylor number with zero value");
        let r = v.recip();
        let r2 = r * r;
        let r3 = r2 * r;
        self.chain([r, -r2, r3 * 2.0, -(r3 * r) * 6.0])
    }

    fn powi(self, n: i32) -> Self {
        if n < 0 {
            return self.powi(-n).recip();
        }
        let mut base = self;
        let mut acc = Self::from_f64(1.0);
        let mut k = n as u32;
        while k > 0 {
            if k & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            k >>= 1;
        }
        acc
    }

    fn powf(self, e: f64) -> Self {
        let v = self.c[0];
        let term = |k: i32, coef: f64| {
            if coef == 0.0 {
                T::zero()
            } else {
                v.powf(e - k as f64) * coef
            }
        };
        self.chain([
            v.powf(e),
            term(1, e),
            term(2, e * (e - 1.0)),
            term(3, e * (e - 1.0) * (e - 2.0)),
        ])
    }

    fn tanh(self) -> Self {
        let t = self.c[0].tanh();
        let d1 = T::one() - t * t;
        let d2 = -(t * d1) * 2.0;
        let d3 = d1 * (t * t * 6.0 - 2.0);
        self.chain([t, d1, d2, d3])
    }
}

/// A smooth vector-valued map, written once and evaluated over any [`Scalar`].
pub trait SmoothMap {
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn eval<T: Scalar>(&self, x: &[T]) -> Vec<T>;
}

fn check_len(expected: usize, got: usize) -> Result<(), AdError> {
    if expected != got {
        return Err(AdError::InputLength { expected, got });
    }
    Ok(())
}

fn check_out<T>(f_out: usize, y: &[T]) -> Result<(), AdError> {
    if y.len() != f_out {
        return Err(AdError::OutputLength {
            expected: f_out,
            got: y.len(),
        });
    }
    Ok(())
}

/// Evaluates `f` at `x` in plain floating point.
pub fn value<F: SmoothMap>(f: &F, x: &[f64]) -> Result<DVector<f64>, AdError> {
    check_len(f.n_in(), x.len())?;
    let y = f.eval(x);
    check_out(f.n_out(), &y)?;
    Ok(DVector::from_vec(y))
}

/// Dense Jacobian `∂f_i/∂x_j`, one forward sweep per input coordinate.
pub fn jacobian<F: SmoothMap>(f: &F, x: &[f64]) -> Result<DMatrix<f64>, AdError> {
    check_len(f.n_in(), x.len())?;
    let n_out = f.n_out();
    let mut jac = DMatrix::zeros(n_out, x.len());
    let mut xs: Vec<Dual> = x.iter().map(|&v| Dual::constant(v)).collect();
    for j in 0..x.len() {
        xs[j].c[1] = 1.0;
        let y = f.eval(&xs);
        check_out(n_out, &y)?;
        for (i, yi) in y.iter().enumerate() {
            jac[(i, j)] = yi.c[1];
        }
        xs[j].c[1] = 0.0;
    }
    Ok(jac)
}

/// First directional derivative `d/ds f(x + s·v)` at `s = 0`.
pub fn dir1<F: SmoothMap>(f: &F, x: &[f64], v: &[f64]) -> Result<DVector<f64>, AdError> {
    check_len(f.n_in(), x.len())?;
    if v.len() != x.len() {
        return Err(AdError::DirectionLength {
            expected: x.len(),
            got: v.len(),
        });
    }
    let xs: Vec<Dual> = x.iter().zip(v).map(|(&a, &b)| Dual { c: [a, b] }).collect();
    let y = f.eval(&xs);
    check_out(f.n_out(), &y)?;
    Ok(DVector::from_iterator(y.len(), y.iter().map(|t| t.c[1])))
}

/// Bilinear second directional derivative `∂²/∂s∂t f(x + s·v + t·w)` at `s = t = 0`.
pub fn dir2<F: SmoothMap>(f: &F, x: &[f64], v: &[f64], w: &[f64]) -> Result<DVector<f64>, AdError> {
    check_len(f.n_in(), x.len())?;
    for d in [v, w] {
        if d.len() != x.len() {
            return Err(AdError::DirectionLength {
                expected: x.len(),
                got: d.len(),
            });
        }
    }
    let xs: Vec<HyperDual> = (0..x.len())
        .map(|i| HyperDual {
            c: [x[i], v[i], w[i], 0.0],
        })
        .collect();
    let y = f.eval(&xs);
    check_out(f.n_out(), &y)?;
    Ok(DVector::from_iterator(y.len(), y.iter().map(|t| t.c[3])))
}

/// Trilinear third directional derivative along `u`, `v`, `w`.
pub fn dir3<F: SmoothMap>(
    f: &F,
    x: &[f64],
    u: &[f64],
    v: &[f64],
    w: &[f64],
) -> Result<DVector<f64>, AdError> {
    check_len(f.n_in(), x.len())?;
    for d in [u, v, w] {
        if d.len() != x.len() {
            return Err(AdError::DirectionLength {
                expected: x.len(),
                got: d.len(),
            });
        }
    }
    let xs: Vec<TaylorScalar> = (0..x.len())
        .map(|i| TaylorScalar::seeded(x[i], &[u[i], v[i], w[i]]))
        .collect();
    let y = f.eval(&xs);
    check_out(f.n_out(), &y)?;
    Ok(DVector::from_iterator(y.len(), y.iter().map(|t| t.c[7])))
}
