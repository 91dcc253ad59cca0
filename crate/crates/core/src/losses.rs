//! Training objectives and their analytic gradients.
//!
//! ```text
//! L     = L_task + alpha_con · L_con + beta_orth · L_orth
//! L_con = 1/B Σ_i ||p_i - sg(z_i)||² + λ ||sg(p_i) - z_i||²
//! L_orth = 1/K² Σ_ij (S_ij - δ_ij)²,   S = W Wᵀ,  W = row-normalized codebook
//! ```
//!
//! `p_i` is the codeword assigned to sample `i`. The first consistency term
//! only moves codewords and the second only moves features.
//!
//! Stop-gradients make the true derivative of `L` differ from the update
//! direction, so gradients are verified against [`surrogate_total_loss`]: the
//! same objective with the stopped quantities and the assignments frozen as
//! constants. At the anchor point its value equals `L` and its exact gradient
//! equals the stop-gradient update.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::bridge::{self, AssignmentResult, BlendingCoefficients, Codebook};
use crate::linalg::{self, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// `λ` inside the consistency loss.
    pub lambda_con_inner: f64,
    pub alpha_con: f64,
    pub beta_orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_con_inner: 0.25, alpha_con: 1.0, beta_orth: 1.0 }
    }
}

impl LossWeights {
    pub const TASK_ONLY: Self = Self { lambda_con_inner: 0.25, alpha_con: 0.0, beta_orth: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_con_inner", self.lambda_con_inner),
            ("alpha_con", self.alpha_con),
            ("beta_orth", self.beta_orth),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Multipliers on the two consistency branches. `codebook_pull` scales
/// `||p - sg(z)||²`, `feature_pull` scales `||sg(p) - z||²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyBranches {
    pub codebook_pull: f64,
    pub feature_pull: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    /// `B × D`, only the feature branch contributes.
    pub grad_z: Matrix,
    /// `B × D`, only the codebook branch contributes. Scatter-add into
    /// codebook rows by assignment index.
    pub grad_p_rows: Matrix,
}

pub fn consistency_loss(z: &Matrix, assigned: &Matrix, lambda: f64) -> Result<ConsistencyLoss> {
    consistency_loss_with(z, assigned, ConsistencyBranches { codebook_pull: 1.0, feature_pull: lambda })
}

pub fn consistency_loss_with(z: &Matrix, assigned: &Matrix, branches: ConsistencyBranches) -> Result<ConsistencyLoss> {
    if z.rows() != assigned.rows() || z.cols() != assigned.cols() {
        return Err(Error::Dimension {
            context: "consistency loss",
            expected: z.rows() * z.cols(),
            got: assigned.rows() * assigned.cols(),
        });
    }
    let b = z.rows();
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad_z = Matrix::zeros(b, z.cols());
    let mut grad_p = Matrix::zeros(b, z.cols());
    let gp = 2.0 * branches.codebook_pull * inv_b;
    let gz = 2.0 * branches.feature_pull * inv_b;
    for i in 0..b {
        let (zi, pi) = (z.row(i), assigned.row(i));
        value += (branches.codebook_pull + branches.feature_pull) * linalg::squared_distance(pi, zi);
        for ((d, &zv), &pv) in zi.iter().enumerate().zip(pi) {
            grad_p[(i, d)] = gp * (pv - zv);
            grad_z[(i, d)] = gz * (zv - pv);
        }
    }
    Ok(ConsistencyLoss { value: value * inv_b, grad_z, grad_p_rows: grad_p })
}

/// Sums per-sample codeword gradients into a `K × D` codebook gradient.
pub fn scatter_rows(rows: &Matrix, assignments: &[AssignmentResult], k: usize) -> Result<Matrix> {
    if rows.rows() != assignments.len() {
        return Err(Error::Dimension { context: "scatter rows", expected: assignments.len(), got: rows.rows() });
    }
    let mut out = Matrix::zeros(k, rows.cols());
    for (r, a) in rows.iter_rows().zip(assignments) {
        if a.index >= k {
            return Err(Error::Index { what: "codeword", index: a.index, len: k });
        }
        linalg::axpy(1.0, r, out.row_mut(a.index));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityLoss {
    pub value: f64,
    /// `K × D`, with respect to the unnormalized rows.
    pub grad: Matrix,
}

fn normalized_rows(codebook: &Codebook) -> Result<(Matrix, Vec<f64>)> {
    let mut w = codebook.vectors.clone();
    let mut norms = Vec::with_capacity(codebook.len());
    for i in 0..codebook.len() {
        let n = linalg::norm(w.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateCodebook { row: i });
        }
        w.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((w, norms))
}

/// Value only, by direct evaluation of the double sum.
pub fn orthogonality_value(codebook: &Codebook) -> Result<f64> {
    let (w, _) = normalized_rows(codebook)?;
    let k = codebook.len();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let s = linalg::dot(w.row(i), w.row(j));
            let t = if i == j { s - 1.0 } else { s };
            acc += t * t;
        }
    }
    Ok(acc / (k * k) as f64)
}

/// Value and exact gradient. With `G = 4/K² (S - I) W` the gradient on raw
/// row `i` is `(I - w_i w_iᵀ) G_i / ||p_i||`.
pub fn orthogonality_loss(codebook: &Codebook) -> Result<OrthogonalityLoss> {
    let (w, norms) = normalized_rows(codebook)?;
    let k = codebook.len();
    let d = codebook.dim();
    let scale = 1.0 / (k * k) as f64;
    let gscale = 4.0 * scale;

    let mut value = 0.0;
    let mut g = Matrix::zeros(k, d);
    for i in 0..k {
        let wi = w.row(i);
        let sii = linalg::dot(wi, wi) - 1.0;
        value += sii * sii;
        linalg::axpy(gscale * sii, wi, g.row_mut(i));
        for j in i + 1..k {
            let wj = w.row(j);
            let s = linalg::dot(wi, wj);
            value += 2.0 * s * s;
            linalg::axpy(gscale * s, wj, g.row_mut(i));
            linalg::axpy(gscale * s, wi, g.row_mut(j));
        }
    }

    for i in 0..k {
        let wi = w.row(i);
        let radial = linalg::dot(g.row(i), wi);
        let inv = 1.0 / norms[i];
        for (gv, &wv) in g.row_mut(i).iter_mut().zip(wi) {
            *gv = (*gv - radial * wv) * inv;
        }
    }

    Ok(OrthogonalityLoss { value: value * scale, grad: g })
}

/// Everything [`total_loss`] needs for one step.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub params: &'a BackboneParams,
    /// `B × raw_dim`
    pub raw: &'a Matrix,
    pub labels: &'a [usize],
    /// `None` trains the plain backbone.
    pub codebook: Option<&'a Codebook>,
    pub coeffs: BlendingCoefficients,
    pub weights: LossWeights,
    /// Copy the task gradient through the quantized branch: features receive
    /// `(w_ori + w_map) g` and the assigned codeword receives `w_map g`. When
    /// off, features receive `w_ori g` and codewords nothing from the task.
    pub straight_through: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub task: f64,
    pub consistency: f64,
    pub orthogonality: f64,
    /// `K × D`; `None` without a codebook.
    pub grad_codebook: Option<Matrix>,
    /// `B × D`, gradient with respect to the backbone output `z`.
    pub grad_features: Matrix,
    pub grad_backbone: BackboneParams,
    pub assignments: Vec<AssignmentResult>,
    pub predictions: Vec<usize>,
}

pub fn total_loss(inputs: &LossInputs<'_>) -> Result<LossReport> {
    let LossInputs { params, raw, labels, codebook, coeffs, weights, straight_through } = *inputs;
    weights.validate()?;
    let z = params.embed_batch(raw)?;

    let Some(codebook) = codebook else {
        let task = params.task_loss_and_grad(&z, labels)?;
        let (gw, gb) = params.extractor_grad(raw, &task.grad_features)?;
        return Ok(LossReport {
            total: task.loss,
            task: task.loss,
            consistency: 0.0,
            orthogonality: 0.0,
            grad_codebook: None,
            grad_backbone: BackboneParams {
                weight: gw,
                bias: gb,
                classifier_weight: task.grad_classifier_weight,
                classifier_bias: task.grad_classifier_bias,
            },
            grad_features: task.grad_features,
            assignments: Vec::new(),
            predictions: task.predictions,
        });
    };

    if codebook.dim() != params.dim() {
        return Err(Error::Compatibility { codebook_dim: codebook.dim(), backbone_dim: params.dim() });
    }
    let (mapped, assignments) = bridge::map_batch(&z, codebook)?;
    let mut blended = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        blended.row_mut(i).copy_from_slice(&bridge::blend(z.row(i), mapped.row(i), coeffs)?);
    }

    let task = params.task_loss_and_grad(&blended, labels)?;
    let feature_factor = if straight_through { coeffs.w_ori + coeffs.w_map } else { coeffs.w_ori };
    let mut grad_z = task.grad_features.clone();
    grad_z.as_mut_slice().iter_mut().for_each(|g| *g *= feature_factor);
    let mut grad_cb = Matrix::zeros(codebook.len(), codebook.dim());
    if straight_through {
        for (g, a) in task.grad_features.iter_rows().zip(&assignments) {
            linalg::axpy(coeffs.w_map, g, grad_cb.row_mut(a.index));
        }
    }

    let con = consistency_loss(&z, &mapped, weights.lambda_con_inner)?;
    linalg::axpy(weights.alpha_con, con.grad_z.as_slice(), grad_z.as_mut_slice());
    let scattered = scatter_rows(&con.grad_p_rows, &assignments, codebook.len())?;
    linalg::axpy(weights.alpha_con, scattered.as_slice(), grad_cb.as_mut_slice());

    let orth = orthogonality_loss(codebook)?;
    linalg::axpy(weights.beta_orth, orth.grad.as_slice(), grad_cb.as_mut_slice());

    let (gw, gb) = params.extractor_grad(raw, &grad_z)?;
    Ok(LossReport {
        total: task.loss + weights.alpha_con * con.value + weights.beta_orth * orth.value,
        task: task.loss,
        consistency: con.value,
        orthogonality: orth.value,
        grad_codebook: Some(grad_cb),
        grad_features: grad_z,
        grad_backbone: BackboneParams {
            weight: gw,
            bias: gb,
            classifier_weight: task.grad_classifier_weight,
            classifier_bias: task.grad_classifier_bias,
        },
        assignments,
        predictions: task.predictions,
    })
}

/// Quantities held constant by the stop-gradients, captured at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct StopGradientAnchors {
    pub z: Matrix,
    pub mapped: Matrix,
    pub assignments: Vec<usize>,
}

impl StopGradientAnchors {
    pub fn capture(inputs: &LossInputs<'_>) -> Result<Self> {
        let z = inputs.params.embed_batch(inputs.raw)?;
        let (mapped, assignments) = match inputs.codebook {
            Some(cb) => {
                let (m, a) = bridge::map_batch(&z, cb)?;
                (m, a.into_iter().map(|a| a.index).collect())
            }
            None => (z.clone(), Vec::new()),
        };
        Ok(Self { z, mapped, assignments })
    }
}

/// Value of the objective with stopped quantities taken from `anchors`
/// instead of the live parameters. Its plain gradient is the update that
/// [`total_loss`] reports.
pub fn surrogate_total_loss(inputs: &LossInputs<'_>, anchors: &StopGradientAnchors) -> Result<f64> {
    let LossInputs { params, raw, labels, codebook, coeffs, weights, straight_through } = *inputs;
    let z = params.embed_batch(raw)?;
    let Some(codebook) = codebook else {
        return Ok(params.task_loss_and_grad(&z, labels)?.loss);
    };
    let b = z.rows();
    let mut blended = Matrix::zeros(b, z.cols());
    let mut con = 0.0;
    for i in 0..b {
        let live_p = codebook.codeword(anchors.assignments[i]);
        let (zi, z_sg, p_sg) = (z.row(i), anchors.z.row(i), anchors.mapped.row(i));
        for d in 0..z.cols() {
            let quantized = if straight_through { live_p[d] + (zi[d] - z_sg[d]) } else { p_sg[d] };
            blended[(i, d)] = coeffs.w_ori * zi[d] + coeffs.w_map * quantized;
        }
        con += linalg::squared_distance(live_p, z_sg) + weights.lambda_con_inner * linalg::squared_distance(p_sg, zi);
    }
    con /= b as f64;
    let task = params.task_loss_and_grad(&blended, labels)?.loss;
    let orth = orthogonality_value(codebook)?;
    Ok(task + weights.alpha_con * con + weights.beta_orth * orth)
}

pub const FD_ABSOLUTE_FLOOR: f64 = 1e-12;

/// Compares `analytic` with central differences of `evaluator` around
/// `point` and returns the worst per-coordinate relative error
/// `|a - n| / max(|n|, 1e-12)`.
pub fn finite_difference_check<F>(mut evaluator: F, point: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Oracle(format!("epsilon must be positive, got {epsilon}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Dimension { context: "finite difference", expected: point.len(), got: analytic.len() });
    }
    let f0 = evaluator(point)?;
    let f1 = evaluator(point)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Oracle(format!("evaluator is not deterministic ({f0} vs {f1})")));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = evaluator(&x)?;
        x[i] = orig - epsilon;
        let minus = evaluator(&x)?;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / numeric.abs().max(FD_ABSOLUTE_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference check of every backbone and codebook gradient reported
/// by [`total_loss`], against [`surrogate_total_loss`].
pub fn check_total_loss_gradients(inputs: &LossInputs<'_>, epsilon: f64) -> Result<f64> {
    let report = total_loss(inputs)?;
    let anchors = StopGradientAnchors::capture(inputs)?;
    let mut point = inputs.params.to_flat();
    let mut analytic = report.grad_backbone.to_flat();
    let n_backbone = point.len();
    if let (Some(cb), Some(g)) = (inputs.codebook, &report.grad_codebook) {
        point.extend_from_slice(cb.vectors.as_slice());
        analytic.extend_from_slice(g.as_slice());
    }
    let mut params = inputs.params.clone();
    let mut codebook = inputs.codebook.cloned();
    finite_difference_check(
        |x| {
            params.copy_from_flat(&x[..n_backbone])?;
            if let Some(cb) = codebook.as_mut() {
                cb.vectors.as_mut_slice().copy_from_slice(&x[n_backbone..]);
            }
            let probe = LossInputs { params: &params, codebook: codebook.as_ref(), ..*inputs };
            surrogate_total_loss(&probe, &anchors)
        },
        &point,
        &analytic,
        epsilon,
    )
}
