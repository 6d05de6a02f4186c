//! Near-duplicate image filtering.
//!
//! A candidate survives only if its image embedding has cosine similarity
//! `<= delta` against every holdout vector and against every candidate already
//! retained (greedy scan in input order).

use serde::Serialize;

use super::{EmkbError, ImageAsset};
use crate::vector::{l2_norm, EmbeddingVector};

/// Default redundancy threshold.
pub const DEFAULT_DELTA: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Removal {
    /// Too similar to holdout vector `holdout_index`.
    Holdout {
        asset_id: String,
        holdout_index: usize,
        similarity: f64,
    },
    /// Too similar to the already retained candidate `kept_asset_id`.
    Duplicate {
        asset_id: String,
        kept_asset_id: String,
        similarity: f64,
    },
}

impl Removal {
    pub fn asset_id(&self) -> &str {
        match self {
            Removal::Holdout { asset_id, .. } | Removal::Duplicate { asset_id, .. } => asset_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupOutcome {
    pub retained: Vec<ImageAsset>,
    pub removed: Vec<Removal>,
    /// Candidates whose embedding has zero norm (similarity undefined).
    pub rejected: Vec<String>,
}

fn unit(values: &[f32]) -> Option<Vec<f64>> {
    let n = l2_norm(values);
    (n > 0.0).then(|| values.iter().map(|&v| f64::from(v) / n).collect())
}

fn unit_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// Applies the delta filter to `candidates`. Order of the retained assets
/// matches the input order; applying the filter to its own output is a no-op.
pub fn dedup_images(
    candidates: Vec<ImageAsset>,
    holdout: &[EmbeddingVector],
    delta: f64,
) -> Result<DedupOutcome, EmkbError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(EmkbError::InvalidDelta(delta));
    }
    let dim = candidates
        .first()
        .map(|c| c.image_embedding.dim())
        .or_else(|| holdout.first().map(EmbeddingVector::dim));
    let Some(dim) = dim else {
        return Ok(DedupOutcome::default());
    };
    let mut holdout_units = Vec::with_capacity(holdout.len());
    for h in holdout {
        h.expect_dim(dim).map_err(|e| EmkbError::Vector {
            asset_id: "<holdout>".into(),
            source: e,
        })?;
        // Zero-norm holdout vectors cannot be similar to anything.
        if let Some(u) = unit(h.as_slice()) {
            holdout_units.push(u);
        }
    }
    for c in &candidates {
        c.image_embedding
            .expect_dim(dim)
            .map_err(|e| EmkbError::Vector {
                asset_id: c.asset_id.clone(),
                source: e,
            })?;
    }

    let mut out = DedupOutcome::default();
    let mut kept_units: Vec<Vec<f64>> = Vec::new();
    'candidates: for c in candidates {
        let Some(u) = unit(c.image_embedding.as_slice()) else {
            log::warn!("asset {} has a zero-norm image embedding; rejected", c.asset_id);
            out.rejected.push(c.asset_id);
            continue;
        };
        for (holdout_index, h) in holdout_units.iter().enumerate() {
            let similarity = unit_dot(&u, h);
            if similarity > delta {
                out.removed.push(Removal::Holdout {
                    asset_id: c.asset_id,
                    holdout_index,
                    similarity,
                });
                continue 'candidates;
            }
        }
        for (kept, k) in out.retained.iter().zip(&kept_units) {
            let similarity = unit_dot(&u, k);
            if similarity > delta {
                out.removed.push(Removal::Duplicate {
                    asset_id: c.asset_id,
                    kept_asset_id: kept.asset_id.clone(),
                    similarity,
                });
                continue 'candidates;
            }
        }
        kept_units.push(u);
        out.retained.push(c);
    }
    Ok(out)
}
