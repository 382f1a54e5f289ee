//! Scalar kernels shared by the geometry routines and the autodiff tape.
//!
//! Every per-row operation on a constant-curvature space that the training losses
//! need (exp/log at the origin, Möbius addition, squared geodesic distance) can be
//! written in terms of squared norms, one inner product and the curvature. The
//! kernels below are generic over [`Real`] so the tape can evaluate them on dual
//! numbers and obtain exact local derivatives.
//!
//! Ratios such as `tan_K(√u)/√u` switch to a Taylor expansion near `u = 0`, which
//! removes the 0/0 at the origin and keeps the Euclidean (`K = 0`) case on the same
//! code path.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::geometry::{CurvatureSign, EPS_BALL};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn tan(self) -> Self;
    fn tanh(self) -> Self;
    fn atan(self) -> Self;
    fn atanh(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tan(self) -> Self {
        f64::tan(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn atan(self) -> Self {
        f64::atan(self)
    }
    #[inline]
    fn atanh(self) -> Self {
        f64::atanh(self)
    }
}

const SERIES_CUTOFF: f64 = 1e-8;

/// `tan_K(√u) / √u` with `u = |K|·r²`.
#[inline]
pub fn tan_k_ratio<T: Real>(u: T, sign: CurvatureSign) -> T {
    let one = T::cst(1.0);
    match sign {
        CurvatureSign::Flat => one,
        CurvatureSign::Positive if u.value() < SERIES_CUTOFF => {
            one + u / T::cst(3.0) + T::cst(2.0 / 15.0) * u * u
        }
        CurvatureSign::Negative if u.value() < SERIES_CUTOFF => {
            one - u / T::cst(3.0) + T::cst(2.0 / 15.0) * u * u
        }
        CurvatureSign::Positive => {
            let r = u.sqrt();
            r.tan() / r
        }
        CurvatureSign::Negative => {
            let r = u.sqrt();
            r.tanh() / r
        }
    }
}

/// `tan_K⁻¹(√u) / √u` with `u = |K|·r²`.
#[inline]
pub fn artan_k_ratio<T: Real>(u: T, sign: CurvatureSign) -> T {
    let one = T::cst(1.0);
    match sign {
        CurvatureSign::Flat => one,
        CurvatureSign::Positive if u.value() < SERIES_CUTOFF => {
            one - u / T::cst(3.0) + T::cst(0.2) * u * u
        }
        CurvatureSign::Negative if u.value() < SERIES_CUTOFF => {
            one + u / T::cst(3.0) + T::cst(0.2) * u * u
        }
        CurvatureSign::Positive => {
            let r = u.sqrt();
            r.atan() / r
        }
        CurvatureSign::Negative => {
            let r = u.sqrt();
            r.atanh() / r
        }
    }
}

/// Scale `φ` with `exp₀(v) = φ·v`, given `‖v‖²` and `|K|`.
///
/// On the Poincaré ball the result is clipped to radius `(1-ε_b)/√|K|`.
#[inline]
pub fn exp0_scale<T: Real>(norm_sq: T, mag: T, sign: CurvatureSign) -> T {
    if sign == CurvatureSign::Flat {
        return T::cst(1.0);
    }
    let u = mag * norm_sq;
    if sign == CurvatureSign::Negative && u.value() > ball_clip_sq() {
        return T::cst(1.0 - EPS_BALL) / u.sqrt();
    }
    tan_k_ratio(u, sign)
}

/// Scale `φ` with `log₀(x) = φ·x`, given `‖x‖²` and `|K|`.
#[inline]
pub fn log0_scale<T: Real>(norm_sq: T, mag: T, sign: CurvatureSign) -> T {
    if sign == CurvatureSign::Flat {
        return T::cst(1.0);
    }
    artan_k_ratio(mag * norm_sq, sign)
}

/// `(artanh(1-ε_b))²`: beyond this `√|K|·‖v‖` the exp map leaves the clipped ball.
#[inline]
fn ball_clip_sq() -> f64 {
    let r = (1.0 - EPS_BALL).atanh();
    r * r
}

/// Coefficients `(α/D, β/D)` of `x ⊕_K y = (α x + β y) / D` in terms of
/// `a = ‖x‖²`, `b = ‖y‖²`, `c = ⟨x, y⟩`.
#[inline]
pub fn mobius_coefs<T: Real>(a: T, b: T, c: T, mag: T, sign: CurvatureSign) -> (T, T) {
    let k = signed(mag, sign);
    let one = T::cst(1.0);
    let two = T::cst(2.0);
    let alpha = one - two * k * c - k * b;
    let beta = one + k * a;
    let den = one - two * k * c + k * k * a * b;
    (alpha / den, beta / den)
}

/// Squared geodesic distance `ψ_K²(x, y)` in terms of `a = ‖x‖²`, `b = ‖y‖²`,
/// `c = ⟨x, y⟩`.
///
/// Uses `‖(-x) ⊕_K y‖² = (α²a − 2αβc + β²b) / D²` for the Möbius difference and
/// `ψ² = 4 r² · (tan_K⁻¹(√|K| r) / (√|K| r))²`. With `K = 0` this is `4‖x − y‖²`.
#[inline]
pub fn sq_dist<T: Real>(a: T, b: T, c: T, mag: T, sign: CurvatureSign) -> T {
    let k = signed(mag, sign);
    let one = T::cst(1.0);
    let two = T::cst(2.0);
    let alpha = one + two * k * c - k * b;
    let beta = one + k * a;
    let den = one + two * k * c + k * k * a * b;
    let mut num = alpha * alpha * a - two * alpha * beta * c + beta * beta * b;
    if num.value() < 0.0 {
        // rounding below zero for coincident points
        num = T::cst(0.0);
    }
    let r2 = num / (den * den);
    let ratio = artan_k_ratio(mag * r2, sign);
    T::cst(4.0) * r2 * ratio * ratio
}

#[inline]
fn signed<T: Real>(mag: T, sign: CurvatureSign) -> T {
    match sign {
        CurvatureSign::Negative => -mag,
        CurvatureSign::Flat => T::cst(0.0),
        CurvatureSign::Positive => mag,
    }
}
