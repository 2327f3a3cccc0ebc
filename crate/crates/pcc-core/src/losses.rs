//! Training objectives: contrastive cross-modal alignment and the
//! weighted total of Chamfer and contrastive terms.

use crate::autodiff::DiffArray;
use crate::error::{Error, Result};
use crate::geometry::chamfer_l2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Mean,
}

/// Pool `[N×D]` tokens to a `[1×D]` global vector. Max routes gradient to
/// argmax rows only; mean spreads it uniformly.
pub fn pool_global(features: &DiffArray, pooling: Pooling) -> Result<DiffArray> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        other => {
            return Err(Error::Contract(format!(
                "pool_global expects [N×D], got {other:?}"
            )))
        }
    };
    match pooling {
        Pooling::Max => features.reshape(&[1, n, d])?.max_over_neighbors(),
        Pooling::Mean => {
            let sum = features
                .transpose2()? // [D×N]
                .row_sum()? // [D×1]
                .transpose2()?; // [1×D]
            Ok(sum.scale(1.0 / n as f32))
        }
    }
}

/// Matched batch of pooled point-cloud and image global vectors.
pub struct ContrastiveBatch {
    /// `[B×D]` point-cloud side.
    pub point_vectors: DiffArray,
    /// `[B×D]` image side.
    pub image_vectors: DiffArray,
    /// Temperature, > 0.
    pub tau: f32,
}

impl ContrastiveBatch {
    pub fn new(point_vectors: DiffArray, image_vectors: DiffArray, tau: f32) -> Result<Self> {
        if point_vectors.shape() != image_vectors.shape() {
            return Err(Error::dimension(
                "contrastive batch sides",
                point_vectors.shape(),
                image_vectors.shape(),
            ));
        }
        if point_vectors.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "contrastive batch must be [B×D], got {:?}",
                point_vectors.shape()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(ContrastiveBatch { point_vectors, image_vectors, tau })
    }

    pub fn batch_size(&self) -> usize {
        self.point_vectors.shape()[0]
    }
}

fn normalize_rows(x: &DiffArray, side: &str) -> Result<DiffArray> {
    let norms = x.mul(x)?.row_sum()?.sqrt();
    if norms.data().iter().any(|&v| v < 1e-12) {
        return Err(Error::Contract(format!(
            "cosine similarity undefined: zero-norm vector on the {side} side"
        )));
    }
    x.scale_rows(&norms.recip())
}

/// Symmetric InfoNCE over cosine similarities: both directions summed over
/// the batch (no 1/B averaging) and combined with a −1/2 factor.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<DiffArray> {
    let g = normalize_rows(&batch.point_vectors, "point-cloud")?;
    let v = normalize_rows(&batch.image_vectors, "image")?;
    let sim = g.matmul(&v.transpose2()?)?.scale(1.0 / batch.tau);
    let forward = sim.log_softmax_rows()?.diag_part()?.sum();
    let backward = sim.transpose2()?.log_softmax_rows()?.diag_part()?.sum();
    Ok(forward.add(&backward)?.scale(-0.5))
}

/// Weighted completion objective:
/// `λ_cd · chamfer + λ_con · contrastive` with the paper-default weights
/// 0.8 / 0.2. `batch` may be absent when the image branch is ablated.
pub fn total_loss(
    predicted: &DiffArray,
    ground_truth: &DiffArray,
    batch: Option<&ContrastiveBatch>,
    lambda_cd: f32,
    lambda_con: f32,
) -> Result<DiffArray> {
    if lambda_cd < 0.0 || lambda_con < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let cd = chamfer_l2(predicted, ground_truth)?.scale(lambda_cd);
    match batch {
        Some(b) if lambda_con > 0.0 => {
            let con = contrastive_loss(b)?.scale(lambda_con);
            cd.add(&con)
        }
        _ => Ok(cd),
    }
}
