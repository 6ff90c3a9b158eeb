//! Verification metrics, cluster statistics, angular projections and the
//! embedding/pair file formats.

pub mod io;
pub mod metrics;
pub mod projection;

pub use io::{pairs_to_csv, parse_pairs, Embeddings, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use metrics::{
    all_pairs, cluster_stats, roc, score_pairs, tar_at_far, VerificationPair, VerificationReport, REPORT_FARS,
};
pub use projection::{angular_projection, AngularProjection, RefPolicy};
