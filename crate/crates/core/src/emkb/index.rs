use std::cmp::Ordering;

use crate::vector::{dot, l2_norm};

/// Exhaustive cosine index over one modality. Rows are stored raw; norms are
/// cached in `f64`.
#[derive(Debug, Clone, Default)]
pub(crate) struct FlatIndex {
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
    keys: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Hit {
    pub row: usize,
    pub similarity: f64,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn key(&self, row: usize) -> &(String, String) {
        &self.keys[row]
    }

    pub fn push(&mut self, entity_id: &str, asset_id: &str, values: &[f32]) {
        debug_assert_eq!(values.len(), self.dim);
        self.data.extend_from_slice(values);
        self.norms.push(l2_norm(values));
        self.keys.push((entity_id.to_string(), asset_id.to_string()));
    }

    pub fn remove_entity(&mut self, entity_id: &str) {
        if !self.keys.iter().any(|(e, _)| e == entity_id) {
            return;
        }
        let dim = self.dim;
        let mut data = Vec::with_capacity(self.data.len());
        let mut norms = Vec::with_capacity(self.norms.len());
        let mut keys = Vec::with_capacity(self.keys.len());
        for (row, key) in self.keys.drain(..).enumerate() {
            if key.0 != entity_id {
                data.extend_from_slice(&self.data[row * dim..(row + 1) * dim]);
                norms.push(self.norms[row]);
                keys.push(key);
            }
        }
        self.data = data;
        self.norms = norms;
        self.keys = keys;
    }

    /// Ranking order: similarity descending, then (entity_id, asset_id)
    /// ascending, then row.
    fn rank(&self, a: &Hit, b: &Hit) -> Ordering {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.keys[a.row].cmp(&self.keys[b.row]))
            .then_with(|| a.row.cmp(&b.row))
    }

    /// Top-`k` rows by cosine similarity to `query` (`query_norm` > 0).
    pub fn search(&self, query: &[f32], query_norm: f64, k: usize) -> Vec<Hit> {
        if k == 0 || self.keys.is_empty() {
            return Vec::new();
        }
        let mut hits: Vec<Hit> = self
            .data
            .chunks_exact(self.dim)
            .zip(&self.norms)
            .enumerate()
            .map(|(row, (values, &norm))| Hit {
                row,
                similarity: (dot(values, query) / (norm * query_norm)).clamp(-1.0, 1.0),
            })
            .collect();
        if k == 1 {
            let best = hits
                .iter()
                .min_by(|a, b| self.rank(a, b))
                .cloned()
                .expect("non-empty");
            return vec![best];
        }
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, |a, b| self.rank(a, b));
            hits.truncate(k);
        }
        hits.sort_by(|a, b| self.rank(a, b));
        hits
    }
}
