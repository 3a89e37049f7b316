//! Table retrieval through clustered row selection, synthetic query
//! generation and weighted embedding fusion.
//!
//! The pipeline per table: embed the header and every row, mix them into
//! header-aware row vectors, cluster with k-means, keep the row nearest each
//! centroid as a partial table, generate one synthetic query per cluster,
//! then fuse the partial-table and query embeddings into one vector that is
//! stored in an exact cosine index.

pub mod clustering;
pub mod dryrun;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod index;
pub mod querygen;
pub mod synthetic;
pub mod table;
pub mod transport;

pub use embedding::Embedding;
pub use encoder::{EncoderConfig, Gateway};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionStrategy, Pipeline, PipelineConfig, TableRepresentation};
pub use index::{Index, SearchResult};
pub use querygen::{GenConfig, QueryGenerator};
pub use table::{Corpus, EvalQuery, Table};
