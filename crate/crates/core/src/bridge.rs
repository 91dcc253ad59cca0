//! Codebook storage, nearest-vector assignment and blended alignment.
//!
//! `align` computes `T_α(z) = (1 - α) z + α Π(z)` where `Π` returns the
//! nearest codeword. Within one Voronoi cell `T_α(z1) - T_α(z2) = (1 - α)(z1 - z2)`,
//! so squared genuine distances shrink by `(1 - α)²`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};
use crate::{Error, Result};

pub const CODEBOOK_FORMAT_VERSION: u32 = 1;

/// `K × D` set of representative vectors. Rows are free (not normalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub vectors: Matrix,
    pub version: u32,
}

impl Codebook {
    pub fn new(vectors: Matrix) -> Result<Self> {
        let cb = Self { vectors, version: CODEBOOK_FORMAT_VERSION };
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() || self.dim() == 0 {
            return Err(Error::Config("codebook must have K >= 1 rows of dimension >= 1".into()));
        }
        if !self.vectors.is_finite() {
            return Err(Error::Input("codebook entries must be finite".into()));
        }
        Ok(())
    }

    /// Number of codewords `K`.
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }
}

/// `(w_ori, w_map)`; `α = w_map`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendingCoefficients {
    pub w_ori: f64,
    pub w_map: f64,
}

impl BlendingCoefficients {
    /// No alignment: `ẑ = z`.
    pub const IDENTITY: Self = Self { w_ori: 1.0, w_map: 0.0 };

    /// Convex blend with `w_map = alpha`, `w_ori = 1 - alpha`.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("blend alpha must be in [0,1], got {alpha}")));
        }
        Ok(Self { w_ori: 1.0 - alpha, w_map: alpha })
    }

    /// Independent weights, for experiments outside the convex family.
    pub fn unconstrained(w_ori: f64, w_map: f64) -> Result<Self> {
        let c = Self { w_ori, w_map };
        c.validate(true)?;
        Ok(c)
    }

    pub fn alpha(&self) -> f64 {
        self.w_map
    }

    pub fn validate(&self, allow_unconstrained: bool) -> Result<()> {
        for (name, w) in [("w_ori", self.w_ori), ("w_map", self.w_map)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {w}")));
            }
        }
        if !allow_unconstrained && (self.w_ori + self.w_map - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "w_ori + w_map must equal 1 (got {} + {})",
                self.w_ori, self.w_map
            )));
        }
        Ok(())
    }
}

impl Default for BlendingCoefficients {
    fn default() -> Self {
        Self { w_ori: 0.7, w_map: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub index: usize,
    pub squared_distance: f64,
}

/// Exhaustive nearest-codeword search; ties go to the lowest index.
pub fn nearest_assignment(z: &[f64], codebook: &Codebook) -> Result<AssignmentResult> {
    if codebook.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    if z.len() != codebook.dim() {
        return Err(Error::Dimension { context: "nearest assignment", expected: codebook.dim(), got: z.len() });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("feature vector contains non-finite values".into()));
    }
    let mut best = AssignmentResult { index: 0, squared_distance: f64::INFINITY };
    for (k, p) in codebook.vectors.iter_rows().enumerate() {
        let d = linalg::squared_distance(z, p);
        if d < best.squared_distance {
            best = AssignmentResult { index: k, squared_distance: d };
        }
    }
    Ok(best)
}

/// Replaces every row with its assigned codeword (copied, not recomputed).
pub fn map_batch(batch: &Matrix, codebook: &Codebook) -> Result<(Matrix, Vec<AssignmentResult>)> {
    if batch.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut mapped = Matrix::zeros(batch.rows(), codebook.dim());
    let mut assignments = Vec::with_capacity(batch.rows());
    for (i, z) in batch.iter_rows().enumerate() {
        let a = nearest_assignment(z, codebook)?;
        mapped.row_mut(i).copy_from_slice(codebook.codeword(a.index));
        assignments.push(a);
    }
    Ok((mapped, assignments))
}

/// `ẑ = w_ori · z + w_map · z̃`
pub fn blend(z: &[f64], z_mapped: &[f64], coeffs: BlendingCoefficients) -> Result<Vec<f64>> {
    if z.len() != z_mapped.len() {
        return Err(Error::Dimension { context: "blend", expected: z.len(), got: z_mapped.len() });
    }
    if coeffs.w_map == 0.0 && coeffs.w_ori == 1.0 {
        return Ok(z.to_vec());
    }
    Ok(z.iter().zip(z_mapped).map(|(a, b)| coeffs.w_ori * a + coeffs.w_map * b).collect())
}

/// `map_batch` followed by `blend` on every row. Enrollment and query both
/// go through here.
pub fn align(batch: &Matrix, codebook: &Codebook, coeffs: BlendingCoefficients) -> Result<Matrix> {
    Ok(align_with_assignments(batch, codebook, coeffs)?.0)
}

pub fn align_with_assignments(
    batch: &Matrix,
    codebook: &Codebook,
    coeffs: BlendingCoefficients,
) -> Result<(Matrix, Vec<AssignmentResult>)> {
    let (mapped, assignments) = map_batch(batch, codebook)?;
    let mut out = Matrix::zeros(batch.rows(), batch.cols());
    for i in 0..batch.rows() {
        let row = blend(batch.row(i), mapped.row(i), coeffs)?;
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok((out, assignments))
}
