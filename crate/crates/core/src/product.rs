//! The mixed-curvature space: a Cartesian product of constant-curvature factors,
//! each reading a contiguous slice of the backbone feature.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CcsPoint, Curvature, TangentVec};

/// One factor of a mixed space. Slice bounds are 1-based and inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub pool_index: usize,
    pub slice_start: usize,
    pub slice_end: usize,
    pub curvature: Curvature,
    pub weight: f64,
}

impl FactorSpec {
    pub fn dim(&self) -> usize {
        self.slice_end + 1 - self.slice_start
    }

    /// Zero-based coordinate range.
    pub fn range(&self) -> Range<usize> {
        self.slice_start - 1..self.slice_end
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.slice_start < 1 || self.slice_start > self.slice_end || self.slice_end > feature_dim {
            return Err(Error::config(format!(
                "factor {} slice {}..{} outside 1..{feature_dim}",
                self.pool_index, self.slice_start, self.slice_end
            )));
        }
        if self.weight.is_nan() || self.weight < 0.0 {
            return Err(Error::config(format!(
                "factor {} has negative weight {}",
                self.pool_index, self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MixedSpace {
    factors: Vec<FactorSpec>,
}

impl MixedSpace {
    /// Orders factors by pool index; duplicate indices are rejected.
    pub fn new(mut factors: Vec<FactorSpec>) -> Result<Self> {
        factors.sort_by_key(|f| f.pool_index);
        if factors.windows(2).any(|w| w[0].pool_index == w[1].pool_index) {
            return Err(Error::config("duplicate pool index in mixed space"));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Total dimension of the concatenated representation.
    pub fn dim(&self) -> usize {
        self.factors.iter().map(FactorSpec::dim).sum()
    }

    pub fn pool_indices(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.pool_index).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    pub parts: Vec<CcsPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductTangent {
    pub parts: Vec<TangentVec>,
}

impl ProductTangent {
    pub fn concat(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.coords().iter().copied()).collect()
    }
}

/// Maps a feature into the space: part `j` is `exp₀^{K_j}` of slice `j`.
pub fn lift(feature: &[f64], space: &MixedSpace) -> Result<ProductPoint> {
    let parts = space
        .factors
        .iter()
        .map(|f| {
            f.validate(feature.len())?;
            let q = TangentVec::at_origin(feature[f.range()].to_vec(), f.curvature)?;
            geometry::exp_map(&q)
        })
        .collect::<Result<_>>()?;
    Ok(ProductPoint { parts })
}

pub fn product_log0(x: &ProductPoint) -> Result<ProductTangent> {
    let parts = x
        .parts
        .iter()
        .map(|p| geometry::log_map(&CcsPoint::origin(p.dim(), p.curvature()), p))
        .collect::<Result<_>>()?;
    Ok(ProductTangent { parts })
}

pub fn product_exp0(q: &ProductTangent) -> Result<ProductPoint> {
    let parts = q.parts.iter().map(geometry::exp_map).collect::<Result<_>>()?;
    Ok(ProductPoint { parts })
}

/// `Ψ²(x, y) = Σ_j ψ_{K_j}²(x_j, y_j)`.
pub fn product_sq_distance(x: &ProductPoint, y: &ProductPoint) -> Result<f64> {
    if x.parts.len() != y.parts.len() {
        return Err(Error::config(format!(
            "factor count mismatch: {} vs {}",
            x.parts.len(),
            y.parts.len()
        )));
    }
    x.parts
        .iter()
        .zip(&y.parts)
        .map(|(a, b)| geometry::ccs_distance(a, b).map(|d| d * d))
        .sum()
}

/// Cosine at the product origin; equals the Euclidean cosine of the concatenations.
pub fn product_angle(q: &ProductTangent, s: &ProductTangent) -> Result<f64> {
    if q.parts.len() != s.parts.len() {
        return Err(Error::config("factor count mismatch"));
    }
    geometry::cosine(&q.concat(), &s.concat())
}
