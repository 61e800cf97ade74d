//! Fixtures shared by the benchmarks.

use nfs_core::data::{self, QuerySet, SyntheticConfig};

/// Synthetic set with `d = 4 * informative` features.
pub fn fixture(n_queries: usize, docs: usize, informative: usize) -> QuerySet {
    data::generate_synthetic(&SyntheticConfig {
        seed: 1,
        n_queries,
        docs_per_query: docs,
        informative,
        duplicates_per_informative: 2,
        noise: informative,
    })
    .expect("valid fixture")
    .0
}
