//! Independent oracles and fixtures shared by the integration and
//! acceptance tests. Oracles use plain scalar loops in f64 and never call
//! the implementation paths they check.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod aggregator_oracle;
pub mod checks;
pub mod fixtures;
pub mod knn_oracle;
pub mod meteor_oracle;
pub mod stub_server;
pub mod workspace;
