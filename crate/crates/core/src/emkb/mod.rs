//! Entity-centric multimodal knowledge base.
//!
//! Each [`EntityRecord`] bundles an entity name with a capped set of images
//! (image embedding plus zero or more face embeddings), background text and a
//! knowledge subgraph. The store answers exact top-k cosine queries per
//! modality and subgraph lookups, and persists to a versioned directory
//! layout (see [`persist`]).

mod dedup;
mod index;
pub mod persist;
mod shared;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::KnowledgeGraph;
use crate::text::normalize_label;
use crate::vector::{EmbeddingVector, VectorError};

pub use dedup::{dedup_images, DedupOutcome, Removal, DEFAULT_DELTA};
pub use persist::PersistError;
pub use shared::SharedKb;

use index::FlatIndex;

/// Default per-entity image cap.
pub const DEFAULT_IMAGE_CAP: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmkbError {
    #[error("entity canonical name is empty")]
    EmptyName,
    #[error("entity id is empty")]
    EmptyId,
    #[error("asset {asset_id}: {source}")]
    Vector {
        asset_id: String,
        #[source]
        source: VectorError,
    },
    #[error("asset id {asset_id:?} already belongs to entity {owner:?}")]
    DuplicateAsset { asset_id: String, owner: String },
    #[error("subgraph of {entity_id:?} has no node for its canonical name")]
    SubgraphMissingCenter { entity_id: String },
    #[error("query: {0}")]
    Query(VectorError),
    #[error("delta must be in (0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("invalid store configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityType {
    Person,
    Gpe,
    Org,
    Other,
}

impl EntityType {
    pub const SCORED: [EntityType; 3] = [EntityType::Person, EntityType::Gpe, EntityType::Org];

    pub fn as_str(&self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::Gpe => "GPE",
            EntityType::Org => "ORG",
            EntityType::Other => "OTHER",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Wikipedia,
    WebSearch,
    Dataset,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub asset_id: String,
    pub source: ImageSource,
    pub image_embedding: EmbeddingVector,
    #[serde(default)]
    pub face_embeddings: Vec<EmbeddingVector>,
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub canonical_name: String,
    pub entity_type: EntityType,
    #[serde(default)]
    pub images: Vec<ImageAsset>,
    #[serde(default)]
    pub background_text: String,
    #[serde(default)]
    pub subgraph: KnowledgeGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Face,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub face_dim: usize,
    pub image_dim: usize,
    pub image_cap: usize,
    pub delta: f64,
}

impl StoreConfig {
    pub fn new(face_dim: usize, image_dim: usize) -> Self {
        Self {
            face_dim,
            image_dim,
            image_cap: DEFAULT_IMAGE_CAP,
            delta: DEFAULT_DELTA,
        }
    }

    fn validate(&self) -> Result<(), EmkbError> {
        if self.face_dim == 0 || self.image_dim == 0 {
            return Err(EmkbError::InvalidConfig("dimensions must be positive".into()));
        }
        if self.image_cap == 0 {
            return Err(EmkbError::InvalidConfig("image_cap must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(EmkbError::InvalidDelta(self.delta));
        }
        Ok(())
    }
}

/// One ranked retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub entity_id: String,
    pub asset_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub entities: usize,
    pub images: usize,
    pub faces: usize,
    pub subgraph_nodes: usize,
    pub triples: usize,
}

/// Summary of a store-wide dedup pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DedupReport {
    pub examined: usize,
    pub removed: Vec<(String, Removal)>,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    config: StoreConfig,
    records: BTreeMap<String, EntityRecord>,
    names: BTreeMap<String, BTreeSet<String>>,
    asset_owner: BTreeMap<String, String>,
    faces: FlatIndex,
    images: FlatIndex,
}

impl KnowledgeBase {
    pub fn new(config: StoreConfig) -> Result<Self, EmkbError> {
        config.validate()?;
        Ok(Self {
            faces: FlatIndex::new(config.face_dim),
            images: FlatIndex::new(config.image_dim),
            config,
            records: BTreeMap::new(),
            names: BTreeMap::new(),
            asset_owner: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn validate(&self, record: &EntityRecord) -> Result<(), EmkbError> {
        if record.entity_id.trim().is_empty() {
            return Err(EmkbError::EmptyId);
        }
        if record.canonical_name.trim().is_empty() {
            return Err(EmkbError::EmptyName);
        }
        let mut seen = HashSet::new();
        for asset in &record.images {
            let err = |source| EmkbError::Vector {
                asset_id: asset.asset_id.clone(),
                source,
            };
            asset.image_embedding.expect_dim(self.config.image_dim).map_err(err)?;
            if asset.image_embedding.norm() == 0.0 {
                return Err(err(VectorError::ZeroNorm));
            }
            for face in &asset.face_embeddings {
                face.expect_dim(self.config.face_dim).map_err(err)?;
                if face.norm() == 0.0 {
                    return Err(err(VectorError::ZeroNorm));
                }
            }
            let owner = self.asset_owner.get(&asset.asset_id);
            let foreign = owner.is_some_and(|o| o != &record.entity_id);
            if foreign || !seen.insert(asset.asset_id.as_str()) {
                return Err(EmkbError::DuplicateAsset {
                    asset_id: asset.asset_id.clone(),
                    owner: owner.cloned().unwrap_or_else(|| record.entity_id.clone()),
                });
            }
        }
        if !record.subgraph.is_empty() && !record.subgraph.contains_node(&record.canonical_name) {
            return Err(EmkbError::SubgraphMissingCenter {
                entity_id: record.entity_id.clone(),
            });
        }
        Ok(())
    }

    /// Inserts or atomically replaces a record. Images beyond the configured
    /// cap are dropped, keeping insertion order. Nothing changes on error.
    pub fn upsert(&mut self, mut record: EntityRecord) -> Result<String, EmkbError> {
        record.images.truncate(self.config.image_cap);
        self.validate(&record)?;
        let id = record.entity_id.clone();
        self.remove(&id);
        for asset in &record.images {
            self.images
                .push(&id, &asset.asset_id, asset.image_embedding.as_slice());
            for face in &asset.face_embeddings {
                self.faces.push(&id, &asset.asset_id, face.as_slice());
            }
            self.asset_owner.insert(asset.asset_id.clone(), id.clone());
        }
        self.names
            .entry(normalize_label(&record.canonical_name))
            .or_default()
            .insert(id.clone());
        self.records.insert(id.clone(), record);
        Ok(id)
    }

    pub fn remove(&mut self, entity_id: &str) -> Option<EntityRecord> {
        let old = self.records.remove(entity_id)?;
        let key = normalize_label(&old.canonical_name);
        if let Some(ids) = self.names.get_mut(&key) {
            ids.remove(entity_id);
            if ids.is_empty() {
                self.names.remove(&key);
            }
        }
        for asset in &old.images {
            self.asset_owner.remove(&asset.asset_id);
        }
        self.images.remove_entity(entity_id);
        self.faces.remove_entity(entity_id);
        Some(old)
    }

    pub fn get(&self, entity_id: &str) -> Option<&EntityRecord> {
        self.records.get(entity_id)
    }

    /// Entity ids whose canonical name normalizes to the same key as `name`,
    /// in ascending id order.
    pub fn ids_by_name(&self, name: &str) -> Vec<&str> {
        self.names
            .get(&normalize_label(name))
            .map(|ids| ids.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn find_by_name(&self, name: &str) -> Option<&EntityRecord> {
        self.ids_by_name(name).first().and_then(|id| self.get(id))
    }

    pub fn records(&self) -> impl Iterator<Item = &EntityRecord> {
        self.records.values()
    }

    /// Stored subgraph, or the empty graph for unknown entities.
    pub fn get_subgraph(&self, entity_id: &str) -> KnowledgeGraph {
        self.records
            .get(entity_id)
            .map(|r| r.subgraph.clone())
            .unwrap_or_default()
    }

    /// Exact top-`k` retrieval by cosine similarity, ranked by similarity
    /// descending with ties broken by ascending `(entity_id, asset_id)`.
    /// An empty modality yields an empty list.
    pub fn nearest_entities(
        &self,
        query: &EmbeddingVector,
        modality: Modality,
        k: usize,
    ) -> Result<Vec<Neighbor>, EmkbError> {
        let (index, dim) = match modality {
            Modality::Face => (&self.faces, self.config.face_dim),
            Modality::Image => (&self.images, self.config.image_dim),
        };
        query.expect_dim(dim).map_err(EmkbError::Query)?;
        if index.len() == 0 {
            return Ok(Vec::new());
        }
        let norm = query.norm();
        if norm == 0.0 {
            return Err(EmkbError::Query(VectorError::ZeroNorm));
        }
        Ok(index
            .search(query.as_slice(), norm, k)
            .into_iter()
            .map(|hit| {
                let (entity_id, asset_id) = index.key(hit.row).clone();
                Neighbor {
                    entity_id,
                    asset_id,
                    similarity: hit.similarity,
                }
            })
            .collect())
    }

    pub fn vector_count(&self, modality: Modality) -> usize {
        match modality {
            Modality::Face => self.faces.len(),
            Modality::Image => self.images.len(),
        }
    }

    pub fn stats(&self) -> StoreStats {
        let mut s = StoreStats {
            entities: self.records.len(),
            ..StoreStats::default()
        };
        for r in self.records.values() {
            s.images += r.images.len();
            s.faces += r.images.iter().map(|a| a.face_embeddings.len()).sum::<usize>();
            s.subgraph_nodes += r.subgraph.node_count();
            s.triples += r.subgraph.edge_count();
        }
        s
    }

    /// Store-wide delta filter over every image, scanning entities in id
    /// order and images in insertion order. Removed images are dropped from
    /// their records.
    pub fn dedup(&mut self, holdout: &[EmbeddingVector], delta: f64) -> Result<DedupReport, EmkbError> {
        let candidates: Vec<ImageAsset> = self
            .records
            .values()
            .flat_map(|r| r.images.iter().cloned())
            .collect();
        let examined = candidates.len();
        let outcome = dedup_images(candidates, holdout, delta)?;
        let mut report = DedupReport {
            examined,
            removed: Vec::new(),
        };
        if outcome.removed.is_empty() {
            return Ok(report);
        }
        let dropped: HashSet<&str> = outcome.removed.iter().map(Removal::asset_id).collect();
        let affected: BTreeSet<String> = outcome
            .removed
            .iter()
            .filter_map(|r| self.asset_owner.get(r.asset_id()).cloned())
            .collect();
        for r in &outcome.removed {
            let owner = self.asset_owner.get(r.asset_id()).cloned().unwrap_or_default();
            report.removed.push((owner, r.clone()));
        }
        for id in affected {
            let mut record = self.records[&id].clone();
            record.images.retain(|a| !dropped.contains(a.asset_id.as_str()));
            self.upsert(record)?;
        }
        Ok(report)
    }
}
