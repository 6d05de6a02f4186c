//! Entity-aware retrieval-augmented news image captioning.
//!
//! The crate is organised around the stages of the captioning pipeline:
//!
//! - [`emkb`]: the entity-centric multimodal knowledge base (entity records,
//!   image embeddings, knowledge subgraphs) with exact cosine retrieval,
//!   near-duplicate filtering and a versioned on-disk format.
//! - [`gateways`]: provider abstraction over every learned model (chat
//!   completion, image embedding, face detection), with a deterministic mock
//!   and an HTTP client.
//! - [`hcma`]: the three-stage alignment pass producing a hypothesis caption,
//!   relevant article sentences and a global summary.
//! - [`rmki`]: entity matching against the knowledge base and background
//!   knowledge-graph construction.
//! - [`pipeline`]: input assembly, context budgeting and final caption
//!   generation.
//! - [`metrics`]: BLEU-4, ROUGE-L, CIDEr-D and named-entity P/R/F1.
//! - [`ingest`]: canonical corpus loading and synthetic fixtures.

pub mod emkb;
pub mod gateways;
pub mod graph;
pub mod hcma;
pub mod ingest;
pub mod metrics;
pub mod ner;
pub mod pipeline;
pub mod prompts;
pub mod rmki;
pub mod text;
pub mod vector;

pub use emkb::{EntityRecord, EntityType, ImageAsset, ImageSource, KnowledgeBase, StoreConfig};
pub use gateways::{ChatGateway, FaceAnalyzer, Gateways, ImageEncoder, ImageRef};
pub use graph::KnowledgeGraph;
pub use pipeline::{CaptionResult, Pipeline, PipelineConfig};
pub use vector::{cosine, EmbeddingVector};
