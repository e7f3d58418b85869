//! Report generation for whole-slide images with retrieved in-context clues.
//!
//! A slide arrives as a bag of patch features. [`aggregator`] condenses it
//! into a fixed set of tokens and a unit embedding; [`retrieval`] finds the
//! most similar training slides; [`context`] turns what was found into a
//! prompt (nearest-neighbour report, category guideline, stored feedback);
//! [`genclient`] sends the prompt to a backend; [`metrics`] scores the
//! output against the reference report. [`pipelines`] builds the guideline
//! and feedback stores offline, and [`workflow`] strings the stages together
//! behind the `histo-icl` binary.
//!
//! Runnable examples, one per capability:
//!
//! | example               | shows                                              |
//! |-----------------------|----------------------------------------------------|
//! | `synthetic_corpus`    | writing a corpus the CLI can ingest                |
//! | `ingest_and_split`    | token store, seeded split, retrieval index         |
//! | `aggregate_tokens`    | patch bag to query tokens, attention maps          |
//! | `knn_retrieval`       | exact cosine search, leave-one-out, category vote  |
//! | `prompt_assembly`     | the five context combinations                      |
//! | `generation_backends` | mock backends and the HTTP client                  |
//! | `knowledge_stores`    | guideline cache and feedback store builds          |
//! | `evaluate_metrics`    | per-sample and corpus scores, length sweep         |
//! | `ablation`            | K and component ablation tables                    |
//! | `category_breakdown`  | per-category BLEU                                  |

pub mod aggregator;
mod binfmt;
pub mod context;
pub mod corpus;
pub mod error;
pub mod genclient;
mod linalg;
pub mod metrics;
pub mod pipelines;
pub mod retrieval;
pub mod synth;
pub mod workflow;

pub use error::{Error, Result};
