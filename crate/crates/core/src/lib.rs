//! Treatment-response prediction on population graphs.
//!
//! Patients are graph nodes. Node features come from an autoencoder over
//! liver and tumor volumes; edges join patients that share binary clinical
//! or treatment attributes and are weighted by feature correlation. A
//! two-layer GCN is trained transductively on labelled nodes, and Monte
//! Carlo dropout turns repeated stochastic predictions into a majority vote
//! with an agreement-ratio confidence that flags hard cases.

pub mod codec;
pub mod dataset;
pub mod encoder;
pub mod evaluation;
pub mod forest;
pub mod gcn;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod mlp;
pub mod pca;
pub mod qeasl;
pub mod seed;
pub mod uncertainty;

pub use dataset::{Cohort, PatientRecord, SynthConfig, Volume};
pub use qeasl::Label;
