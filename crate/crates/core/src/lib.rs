//! Scene graph relation prediction with semantic refinement, recall-guided
//! resampling and information-weighted training.

// `!(x > 0.0)` is used deliberately so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cgs;
pub mod config;
pub mod error;
pub mod fkr;
pub mod ingest;
pub mod ir;
pub mod jfl;
pub mod metrics;
pub mod pipeline;
pub mod predict;
pub mod rng;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_annotation, BoundingBox, Dataset, LabelKind, LabelSpace, LabelSpaces, ObjectInstance,
    SceneGraphAnnotation, Signature, Split, Triple, Violation,
};
