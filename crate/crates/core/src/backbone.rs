//! Affine feature extractor `z = W x + b` with a softmax classification head.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::gaussian;
use crate::linalg::{self, Matrix};
use crate::{Error, Result};

/// Extractor and classifier parameters. The same shape doubles as the
/// gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    /// `dim × raw_dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// `classes × dim`
    pub classifier_weight: Matrix,
    pub classifier_bias: Vec<f64>,
}

/// Output of [`BackboneParams::task_loss_and_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    pub loss: f64,
    pub grad_classifier_weight: Matrix,
    pub grad_classifier_bias: Vec<f64>,
    /// `B × dim`, gradient with respect to the classifier input.
    pub grad_features: Matrix,
    /// Per-row argmax of the logits.
    pub predictions: Vec<usize>,
}

impl BackboneParams {
    pub fn zeros(dim: usize, raw_dim: usize, classes: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, raw_dim),
            bias: vec![0.0; dim],
            classifier_weight: Matrix::zeros(classes, dim),
            classifier_bias: vec![0.0; classes],
        }
    }

    /// Gaussian init scaled by fan-in; biases start at zero.
    pub fn random<R: Rng + ?Sized>(dim: usize, raw_dim: usize, classes: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(dim, raw_dim, classes);
        let s = 1.0 / libm::sqrt(raw_dim as f64);
        p.weight.as_mut_slice().iter_mut().for_each(|w| *w = s * gaussian(rng));
        let s = 1.0 / libm::sqrt(dim as f64);
        p.classifier_weight.as_mut_slice().iter_mut().for_each(|w| *w = s * gaussian(rng));
        p
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, c) = (self.dim(), self.num_classes());
        if self.bias.len() != d {
            return Err(Error::Dimension { context: "backbone bias", expected: d, got: self.bias.len() });
        }
        if self.classifier_weight.cols() != d {
            return Err(Error::Dimension { context: "classifier weight", expected: d, got: self.classifier_weight.cols() });
        }
        if self.classifier_bias.len() != c {
            return Err(Error::Dimension { context: "classifier bias", expected: c, got: self.classifier_bias.len() });
        }
        if !self.is_finite() {
            return Err(Error::Input("backbone parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite()
            && self.classifier_weight.is_finite()
            && self.bias.iter().chain(&self.classifier_bias).all(|v| v.is_finite())
    }

    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.raw_dim() {
            return Err(Error::Dimension { context: "backbone input", expected: self.raw_dim(), got: raw.len() });
        }
        let mut z = self.weight.mul_vec(raw)?;
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        Ok(z)
    }

    /// Embeds every row of a `B × raw_dim` batch.
    pub fn embed_batch(&self, raw: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(raw.rows(), self.dim());
        for (i, x) in raw.iter_rows().enumerate() {
            let z = self.embed(x)?;
            out.row_mut(i).copy_from_slice(&z);
        }
        Ok(out)
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.classifier_weight.mul_vec(features)?;
        for (li, bi) in l.iter_mut().zip(&self.classifier_bias) {
            *li += bi;
        }
        Ok(l)
    }

    /// Mean softmax cross-entropy of the head applied to `features`.
    pub fn task_loss_and_grad(&self, features: &Matrix, labels: &[usize]) -> Result<TaskLoss> {
        let b = features.rows();
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if labels.len() != b {
            return Err(Error::Dimension { context: "labels", expected: b, got: labels.len() });
        }
        let c = self.num_classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }

        let inv_b = 1.0 / b as f64;
        let mut loss = 0.0;
        let mut grad_w = Matrix::zeros(c, self.dim());
        let mut grad_b = vec![0.0; c];
        let mut grad_f = Matrix::zeros(b, self.dim());
        let mut predictions = Vec::with_capacity(b);

        for (i, (z, &y)) in features.iter_rows().zip(labels).enumerate() {
            let logits = self.logits(z)?;
            let (argmax, max) = logits
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            predictions.push(argmax);
            let mut probs: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
            let sum: f64 = probs.iter().sum();
            loss += libm::log(sum) + max - logits[y];
            probs.iter_mut().for_each(|p| *p /= sum);
            probs[y] -= 1.0;
            // probs now holds dL_i/dlogits (before the 1/B factor).
            for (j, &g) in probs.iter().enumerate() {
                let g = g * inv_b;
                grad_b[j] += g;
                linalg::axpy(g, z, grad_w.row_mut(j));
                linalg::axpy(g, self.classifier_weight.row(j), grad_f.row_mut(i));
            }
        }

        Ok(TaskLoss {
            loss: loss * inv_b,
            grad_classifier_weight: grad_w,
            grad_classifier_bias: grad_b,
            grad_features: grad_f,
            predictions,
        })
    }

    /// Pulls a feature gradient back onto the extractor: returns
    /// `(dL/dW, dL/db)` for `z = W x + b`.
    pub fn extractor_grad(&self, raw: &Matrix, grad_features: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if raw.rows() != grad_features.rows() {
            return Err(Error::Dimension { context: "extractor grad batch", expected: raw.rows(), got: grad_features.rows() });
        }
        let mut gw = Matrix::zeros(self.dim(), self.raw_dim());
        let mut gb = vec![0.0; self.dim()];
        for (x, g) in raw.iter_rows().zip(grad_features.iter_rows()) {
            for (d, &gd) in g.iter().enumerate() {
                gb[d] += gd;
                linalg::axpy(gd, x, gw.row_mut(d));
            }
        }
        Ok((gw, gb))
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len() + self.classifier_weight.as_slice().len() + self.classifier_bias.len()
    }

    /// Parameters concatenated as `weight, bias, classifier_weight, classifier_bias`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.weight.as_slice());
        v.extend_from_slice(&self.bias);
        v.extend_from_slice(self.classifier_weight.as_slice());
        v.extend_from_slice(&self.classifier_bias);
        v
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension { context: "flat backbone parameters", expected: self.num_params(), got: flat.len() });
        }
        let mut rest = flat;
        for dst in [
            self.weight.as_mut_slice(),
            self.bias.as_mut_slice(),
            self.classifier_weight.as_mut_slice(),
            self.classifier_bias.as_mut_slice(),
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }
}
