//! Embedding engine for clinical diagnosis ranking.
//!
//! Clinical stays are loaded from tabular event files, turned into a typed
//! graph (patients plus nine event node types), and embedded by a
//! skip-gram objective whose positive pairs are drawn from typed path
//! schemas. A supervised ranking objective trained jointly against the
//! same vectors scores diagnosis nodes for a patient composed from her
//! diagnostic-category events only; prescriptions, procedures and
//! diagnoses never enter the prediction input.

pub mod ehr;
pub mod embedding;
pub mod hin;
pub mod ingest;
pub mod metrics;
pub mod predict;
pub mod sampling;
pub mod synth;
pub mod trainer;

mod kv;
