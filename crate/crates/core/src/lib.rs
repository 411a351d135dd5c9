//! Medical term embeddings from contrastive learning coupled with knowledge
//! graph embeddings.
//!
//! The crate covers the whole desk-scale pipeline: corpus ingestion and
//! self-supervised mention contexts ([`corpus`]), knowledge graph embedding
//! models ([`kge`]), a small transformer encoder with entity injection
//! ([`encoder`]), multi-similarity losses ([`contrastive`]), dynamic batch
//! sampling and the contrastive trainer ([`sampling`]), and the similarity
//! evaluation suite ([`eval`]).

pub mod autodiff;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kge;
pub mod linalg;
pub mod optim;
pub mod sampling;
pub mod synthetic;

pub use error::{Error, Result};
