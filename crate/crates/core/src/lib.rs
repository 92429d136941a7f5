//! Assembly sequencing for brick models.
//!
//! The crate covers the full pipeline: integer-grid brick geometry, the
//! legality rules for an assembly order, a rule-based search that produces
//! valid orders, the interleaved brick/relative-position token stream, a
//! masked-language-model transformer trained from scratch, conditional
//! next-brick generation, evaluation metrics and synthetic datasets.

pub mod brick;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod generate;
pub mod metrics;
pub mod neural;
pub mod oracle;
pub mod seed;
pub mod tokenize;
pub mod validity;

pub use brick::{AssemblySequence, BrickModel, Cell, PartShape, Placement, RelativeOffset, Rotation};
pub use error::{Error, Result};
