//! Closed-form operations on a single constant-curvature space.
//!
//! Negative curvature uses the Poincaré ball of radius `1/√|K|`, positive curvature
//! the stereographically projected sphere, and `K = 0` plain Euclidean space. All
//! three share one Möbius-addition formula; `tan_K` dispatches to `tanh` for
//! `K < 0` and to `tan` otherwise.
//!
//! Distances follow `ψ_K(x, y) = 2/√|K| · tan_K⁻¹(√|K| ‖(−x) ⊕_K y‖)`, which tends to
//! `2‖x − y‖` as `K → 0` (the conformal factor at the origin is 2). The `K = 0`
//! case is computed directly as `2‖x − y‖`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin keeping Poincaré-ball points strictly inside the boundary.
pub const EPS_BALL: f64 = 1e-5;
/// Smallest admissible magnitude for a trainable curvature.
pub const EPS_CURVATURE: f64 = 1e-4;
/// Möbius denominators and Möbius-difference norms below this are treated as degenerate.
pub const EPS_DEGENERATE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureSign {
    Negative,
    Flat,
    Positive,
}

impl CurvatureSign {
    pub fn factor(self) -> f64 {
        match self {
            CurvatureSign::Negative => -1.0,
            CurvatureSign::Flat => 0.0,
            CurvatureSign::Positive => 1.0,
        }
    }

    pub fn of(value: f64) -> Self {
        if value < 0.0 {
            CurvatureSign::Negative
        } else if value > 0.0 {
            CurvatureSign::Positive
        } else {
            CurvatureSign::Flat
        }
    }
}

/// Signed curvature `K` (units of 1/length²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::config(format!("curvature must be finite, got {value}")));
        }
        Ok(Self(value))
    }

    /// A curvature that may be optimized: `|K| ≥ ε_K`.
    pub fn trainable(value: f64) -> Result<Self> {
        let k = Self::new(value)?;
        if value.abs() < EPS_CURVATURE {
            return Err(Error::config(format!(
                "trainable curvature magnitude {} is below {EPS_CURVATURE}",
                value.abs()
            )));
        }
        Ok(k)
    }

    pub const fn flat() -> Self {
        Self(0.0)
    }

    pub fn from_parts(sign: CurvatureSign, magnitude: f64) -> Result<Self> {
        Self::new(sign.factor() * magnitude)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sign(self) -> CurvatureSign {
        CurvatureSign::of(self.0)
    }

    pub fn magnitude(self) -> f64 {
        self.0.abs()
    }

    /// Ball radius for `K < 0`, `None` otherwise.
    pub fn ball_radius(self) -> Option<f64> {
        (self.0 < 0.0).then(|| (1.0 - EPS_BALL) / self.0.abs().sqrt())
    }
}

/// A point of `C^d_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct CcsPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl CcsPoint {
    /// Validates finiteness and, on the ball, the domain radius.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        check_finite("ccs_point", &coords)?;
        if let Some(r) = curvature.ball_radius() {
            let n = norm(&coords);
            if n > r {
                return Err(Error::numerical(
                    "ccs_point",
                    format!("norm {n} outside Poincaré ball radius {r}"),
                ));
            }
        }
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    fn is_origin(&self) -> bool {
        self.coords.iter().all(|&c| c == 0.0)
    }
}

/// A tangent vector together with its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVec {
    coords: Vec<f64>,
    base: CcsPoint,
}

impl TangentVec {
    pub fn new(base: CcsPoint, coords: Vec<f64>) -> Result<Self> {
        check_finite("tangent_vec", &coords)?;
        if coords.len() != base.dim() {
            return Err(Error::config(format!(
                "tangent dimension {} does not match base dimension {}",
                coords.len(),
                base.dim()
            )));
        }
        Ok(Self { coords, base })
    }

    /// Tangent vector at the origin of `C^d_K`.
    pub fn at_origin(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        let base = CcsPoint::origin(coords.len(), curvature);
        Self::new(base, coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn base(&self) -> &CcsPoint {
        &self.base
    }
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn check_finite(op: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(op, "non-finite coordinate"))
    }
}

fn check_pair(x: &CcsPoint, y: &CcsPoint) -> Result<()> {
    if x.curvature != y.curvature {
        return Err(Error::config(format!(
            "curvature mismatch: {} vs {}",
            x.curvature.0, y.curvature.0
        )));
    }
    if x.dim() != y.dim() {
        return Err(Error::config(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// `tan_K`: `tan` for `K ≥ 0`, `tanh` for `K < 0`.
pub fn tan_k(x: f64, k: Curvature) -> f64 {
    if k.0 < 0.0 {
        x.tanh()
    } else {
        x.tan()
    }
}

/// `tan_K⁻¹`: `atan` for `K ≥ 0`, `artanh` for `K < 0`. Ball arguments are clamped below 1.
pub fn artan_k(x: f64, k: Curvature) -> f64 {
    if k.0 < 0.0 {
        x.min(1.0 - 1e-15).atanh()
    } else {
        x.atan()
    }
}

/// Möbius addition on raw coordinates, without domain projection.
fn mobius_raw(x: &[f64], y: &[f64], k: f64) -> Result<Vec<f64>> {
    if k == 0.0 {
        return Ok(x.iter().zip(y).map(|(a, b)| a + b).collect());
    }
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let cx = 1.0 - 2.0 * k * xy - k * y2;
    let cy = 1.0 + k * x2;
    let den = 1.0 - 2.0 * k * xy + k * k * x2 * y2;
    if den.abs() < EPS_DEGENERATE {
        return Err(Error::numerical(
            "mobius_add",
            format!("denominator {den:e} vanishes"),
        ));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| (cx * a + cy * b) / den)
        .collect())
}

fn project_coords(mut coords: Vec<f64>, k: Curvature) -> Vec<f64> {
    if let Some(r) = k.ball_radius() {
        let n = norm(&coords);
        if n >= r {
            let s = r / n;
            coords.iter_mut().for_each(|c| *c *= s);
        }
    }
    coords
}

/// `x ⊕_K y`.
pub fn mobius_add(x: &CcsPoint, y: &CcsPoint) -> Result<CcsPoint> {
    check_pair(x, y)?;
    let k = x.curvature;
    let out = mobius_raw(&x.coords, &y.coords, k.0)?;
    check_finite("mobius_add", &out)?;
    Ok(CcsPoint {
        coords: project_coords(out, k),
        curvature: k,
    })
}

fn conformal_factor(u: &CcsPoint) -> f64 {
    2.0 / (1.0 + u.curvature.0 * dot(&u.coords, &u.coords))
}

/// `exp_u^K(q)` where `u` is the base point carried by `q`.
pub fn exp_map(q: &TangentVec) -> Result<CcsPoint> {
    let u = &q.base;
    let k = u.curvature;
    let nq = norm(&q.coords);
    if nq == 0.0 {
        return Ok(u.clone());
    }
    if k.0 == 0.0 {
        let coords = u.coords.iter().zip(&q.coords).map(|(a, b)| a + b).collect();
        return Ok(CcsPoint { coords, curvature: k });
    }
    let s = k.magnitude().sqrt();
    let lambda = conformal_factor(u);
    let t = tan_k(s * lambda * nq / 2.0, k);
    let step: Vec<f64> = q.coords.iter().map(|c| t * c / (s * nq)).collect();
    check_finite("exp_map", &step)?;
    let step = project_coords(step, k);
    let out = mobius_raw(&u.coords, &step, k.0)
        .map_err(|e| relabel(e, "exp_map"))?;
    check_finite("exp_map", &out)?;
    Ok(CcsPoint {
        coords: project_coords(out, k),
        curvature: k,
    })
}

/// `log_u^K(x)`. Coincident points give the zero tangent.
pub fn log_map(u: &CcsPoint, x: &CcsPoint) -> Result<TangentVec> {
    check_pair(u, x)?;
    let k = u.curvature;
    let neg_u: Vec<f64> = u.coords.iter().map(|c| -c).collect();
    let z = mobius_raw(&neg_u, &x.coords, k.0).map_err(|e| relabel(e, "log_map"))?;
    check_finite("log_map", &z)?;
    let nz = norm(&z);
    if nz < EPS_DEGENERATE {
        return Ok(TangentVec {
            coords: vec![0.0; u.dim()],
            base: u.clone(),
        });
    }
    if k.0 == 0.0 {
        return Ok(TangentVec { coords: z, base: u.clone() });
    }
    let s = k.magnitude().sqrt();
    let lambda = conformal_factor(u);
    let scale = 2.0 / (s * lambda) * artan_k(s * nz, k) / nz;
    let coords: Vec<f64> = z.iter().map(|c| scale * c).collect();
    check_finite("log_map", &coords)?;
    Ok(TangentVec { coords, base: u.clone() })
}

/// Geodesic distance `ψ_K(x, y)`.
pub fn ccs_distance(x: &CcsPoint, y: &CcsPoint) -> Result<f64> {
    check_pair(x, y)?;
    if x.coords == y.coords {
        return Ok(0.0);
    }
    let k = x.curvature;
    if k.0 == 0.0 {
        let d2: f64 = x.coords.iter().zip(&y.coords).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(2.0 * d2.sqrt());
    }
    let neg_x: Vec<f64> = x.coords.iter().map(|c| -c).collect();
    let z = mobius_raw(&neg_x, &y.coords, k.0).map_err(|e| relabel(e, "ccs_distance"))?;
    let nz = norm(&z);
    if !nz.is_finite() {
        return Err(Error::numerical("ccs_distance", "non-finite Möbius difference"));
    }
    let s = k.magnitude().sqrt();
    Ok(2.0 / s * artan_k(s * nz, k))
}

/// Cosine of the angle between two tangent vectors at the origin.
///
/// The metric at the origin is conformal to the Euclidean one, so the curvature is
/// never read.
pub fn angle_at_origin(q: &TangentVec, s: &TangentVec) -> Result<f64> {
    if !q.base.is_origin() || !s.base.is_origin() {
        return Err(Error::contract("angle_at_origin needs tangents based at the origin"));
    }
    if q.coords.len() != s.coords.len() {
        return Err(Error::config("tangent dimension mismatch"));
    }
    cosine(&q.coords, &s.coords)
}

pub(crate) fn cosine(q: &[f64], s: &[f64]) -> Result<f64> {
    let nq = norm(q);
    let ns = norm(s);
    if nq < EPS_DEGENERATE || ns < EPS_DEGENERATE {
        return Err(Error::DegenerateAngle);
    }
    Ok((dot(q, s) / (nq * ns)).clamp(-1.0, 1.0))
}

/// Rescales ball points onto radius `(1-ε_b)/√|K|` when they reach it; identity elsewhere.
pub fn project_to_domain(x: &CcsPoint) -> Result<CcsPoint> {
    check_finite("project_to_domain", &x.coords)?;
    Ok(CcsPoint {
        coords: project_coords(x.coords.clone(), x.curvature),
        curvature: x.curvature,
    })
}

/// Projection for raw coordinates that may lie outside the ball.
pub fn project_raw(coords: Vec<f64>, curvature: Curvature) -> Result<CcsPoint> {
    check_finite("project_to_domain", &coords)?;
    Ok(CcsPoint {
        coords: project_coords(coords, curvature),
        curvature,
    })
}

fn relabel(e: Error, op: &str) -> Error {
    match e {
        Error::NumericalDomain { detail, .. } => Error::numerical(op, detail),
        other => other,
    }
}
