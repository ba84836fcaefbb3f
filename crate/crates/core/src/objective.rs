//! Training objectives and their gradients.
//!
//! Two losses compare the model output `y` with the pretrained vector of the
//! correct head `v_c`:
//!
//! * cosine: `1 - cos(y, v_c)`
//! * rank: `max(0, m - cos(y, v_c) + cos(y, v_r))` with a random incorrect
//!   head `v_r` and margin `m`, zero once the correct head beats the
//!   confounder by at least `m`.
//!
//! [`backward`] differentiates the mean batch loss with respect to every
//! trainable parameter; [`finite_diff_check`] verifies it numerically.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PaddedBatch;
use crate::embeddings::PretrainedTable;
use crate::encoder::{Encoder, Projection};
use crate::error::{Error, Result};
use crate::math::{self, norm};
use crate::model::DefinitionModel;

pub use crate::math::cosine;

pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    Cosine,
    Rank { margin: f64 },
}

impl LossKind {
    pub fn rank() -> Self {
        LossKind::Rank {
            margin: DEFAULT_MARGIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Rank { margin } if !(margin > 0.0 && margin.is_finite()) => {
                Err(Error::Config(format!("margin must be positive, got {margin}")))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_negatives(&self) -> bool {
        matches!(self, LossKind::Rank { .. })
    }
}

pub fn cosine_loss(y: &[f64], target: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(y, target)?)
}

pub fn rank_loss(y: &[f64], correct: &[f64], confounder: &[f64], margin: f64) -> Result<f64> {
    Ok((margin - cosine(y, correct)? + cosine(y, confounder)?).max(0.0))
}

/// Uniform draw from `0..n` excluding `correct`.
pub fn sample_negative(n: usize, correct: usize, rng: &mut impl Rng) -> Result<usize> {
    if n < 2 {
        return Err(Error::Config("negative sampling needs at least two words".into()));
    }
    let k = rng.gen_range(0..n - 1);
    Ok(if k >= correct { k + 1 } else { k })
}

/// Gradients mirroring the trainable parameters. Embedding gradients are kept
/// only for rows that occurred in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub embeddings: BTreeMap<u32, Array1<f64>>,
    pub encoder: Encoder,
    pub projection: Projection,
}

impl GradientSet {
    pub fn zeros_for(model: &DefinitionModel) -> Self {
        let (encoder, projection) = model.zeros_like();
        GradientSet {
            embeddings: BTreeMap::new(),
            encoder,
            projection,
        }
    }

    pub(crate) fn dense_tensors(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.tensors();
        out.extend(self.projection.tensors());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.dense_tensors().iter().all(|t| t.iter().all(|&g| g == 0.0))
            && self.embeddings.values().all(|r| r.iter().all(|&g| g == 0.0))
    }
}

/// d cos(y, t) / dy
fn cosine_grad(y: &[f64], target: &[f64]) -> Result<(f64, Array1<f64>)> {
    let ny = norm(y);
    let nt = norm(target);
    let cos = math::cosine_with_norms(y, ny, target, nt)?;
    let d = Array1::from_shape_fn(y.len(), |k| target[k] / (ny * nt) - cos * y[k] / (ny * ny));
    Ok((cos, d))
}

/// Loss of one output and, when it is not flat, its gradient.
fn row_loss(
    y: &[f64],
    target: &[f64],
    confounder: Option<&[f64]>,
    loss: LossKind,
) -> Result<(f64, Option<Array1<f64>>)> {
    match loss {
        LossKind::Cosine => {
            let (cos, d) = cosine_grad(y, target)?;
            Ok((1.0 - cos, Some(-d)))
        }
        LossKind::Rank { margin } => {
            let confounder = confounder.ok_or_else(|| Error::Config("rank loss needs negatives".into()))?;
            let (cc, dc) = cosine_grad(y, target)?;
            let (cr, dr) = cosine_grad(y, confounder)?;
            let raw = margin - cc + cr;
            if raw > 0.0 {
                Ok((raw, Some(dr - dc)))
            } else {
                Ok((0.0, None))
            }
        }
    }
}

fn check_batch(batch: &PaddedBatch, negatives: &[usize], table: &PretrainedTable, loss: LossKind) -> Result<()> {
    loss.validate()?;
    if batch.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    if loss.needs_negatives() && negatives.len() != batch.rows() {
        return Err(Error::Shape(format!(
            "{} negatives for {} rows",
            negatives.len(),
            batch.rows()
        )));
    }
    let n = table.len();
    if let Some(bad) = batch.head_ids.iter().chain(negatives).find(|&&h| h >= n) {
        return Err(Error::Shape(format!("head row {bad} outside table of {n}")));
    }
    Ok(())
}

/// Mean loss over the batch without gradients.
pub fn batch_loss(
    model: &DefinitionModel,
    batch: &PaddedBatch,
    negatives: &[usize],
    table: &PretrainedTable,
    loss: LossKind,
) -> Result<f64> {
    check_batch(batch, negatives, table, loss)?;
    let ys = model.forward_batch(batch)?;
    let mut total = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let y = y.as_slice().expect("contiguous");
        let confounder = negatives.get(i).map(|&r| table.vector(r));
        total += row_loss(y, table.vector(batch.head_ids[i]), confounder, loss)?.0;
    }
    let mean = total / batch.rows() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }
    Ok(mean)
}

/// Mean batch loss and its gradient with respect to every trainable
/// parameter. Padding never reaches the encoder, so pad positions contribute
/// nothing and the PAD embedding row never receives a gradient.
pub fn backward(
    model: &DefinitionModel,
    batch: &PaddedBatch,
    negatives: &[usize],
    table: &PretrainedTable,
    loss: LossKind,
) -> Result<(f64, GradientSet)> {
    check_batch(batch, negatives, table, loss)?;
    let mut grads = GradientSet::zeros_for(model);
    let scale = 1.0 / batch.rows() as f64;
    let pad = model.pad_id();
    let mut total = 0.0;
    for i in 0..batch.rows() {
        let tokens = batch.tokens(i);
        let fwd = model.forward_cached(tokens)?;
        let y = fwd.output.as_slice().expect("contiguous");
        let confounder = negatives.get(i).map(|&r| table.vector(r));
        let (l, dy) = row_loss(y, table.vector(batch.head_ids[i]), confounder, loss)?;
        total += l;
        let Some(dy) = dy else { continue };
        let dy = dy * scale;
        let dv = model.projection.backward(
            fwd.encoded.view(),
            fwd.output.view(),
            dy.view(),
            &mut grads.projection,
        );
        let xs: Vec<ArrayView1<f64>> = fwd.embedded.outer_iter().collect();
        let dxs = model.encoder.backward(&xs, &fwd.encode, dv.view(), &mut grads.encoder);
        for (&id, dx) in tokens.iter().zip(dxs) {
            if id == pad {
                continue;
            }
            match grads.embeddings.get_mut(&id) {
                Some(row) => *row += &dx,
                None => {
                    grads.embeddings.insert(id, dx);
                }
            }
        }
    }
    let mean = total * scale;
    if !mean.is_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }
    Ok((mean, grads))
}

/// Relative error `|a - g| / max(|a|, |g|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares [`backward`] against central differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε` for every encoder and projection weight and every
/// embedding row touched by the batch. Returns the largest relative error.
/// Parameters are restored bit-for-bit afterwards.
pub fn finite_diff_check(
    model: &mut DefinitionModel,
    batch: &PaddedBatch,
    negatives: &[usize],
    table: &PretrainedTable,
    loss: LossKind,
    eps: f64,
) -> Result<f64> {
    let (_, analytic) = backward(model, batch, negatives, table, loss)?;
    let mut worst: f64 = 0.0;

    let sizes: Vec<usize> = model.dense_tensors().iter().map(|t| t.len()).collect();
    let grads = analytic.dense_tensors();
    for (k, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let original = model.dense_tensors()[k][j];
            model.dense_tensors_mut()[k][j] = original + eps;
            let plus = batch_loss(model, batch, negatives, table, loss)?;
            model.dense_tensors_mut()[k][j] = original - eps;
            let minus = batch_loss(model, batch, negatives, table, loss)?;
            model.dense_tensors_mut()[k][j] = original;
            worst = worst.max(relative_error(grads[k][j], (plus - minus) / (2.0 * eps)));
        }
    }

    let mut rows: Vec<u32> = batch
        .head_ids
        .iter()
        .enumerate()
        .flat_map(|(i, _)| batch.tokens(i).iter().copied())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    for id in rows {
        for j in 0..model.embeddings.dim() {
            let original = model.embeddings.weights[[id as usize, j]];
            model.embeddings.weights[[id as usize, j]] = original + eps;
            let plus = batch_loss(model, batch, negatives, table, loss)?;
            model.embeddings.weights[[id as usize, j]] = original - eps;
            let minus = batch_loss(model, batch, negatives, table, loss)?;
            model.embeddings.weights[[id as usize, j]] = original;
            let a = analytic.embeddings.get(&id).map_or(0.0, |r| r[j]);
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Smallest distance of any row's hinge argument from the kink at zero.
pub fn hinge_clearance(
    model: &DefinitionModel,
    batch: &PaddedBatch,
    negatives: &[usize],
    table: &PretrainedTable,
    margin: f64,
) -> Result<f64> {
    let ys = model.forward_batch(batch)?;
    let mut clearance = f64::INFINITY;
    for (i, y) in ys.iter().enumerate() {
        let y = y.as_slice().expect("contiguous");
        let raw = margin - cosine(y, table.vector(batch.head_ids[i]))?
            + cosine(y, table.vector(negatives[i]))?;
        clearance = clearance.min(raw.abs());
    }
    Ok(clearance)
}
