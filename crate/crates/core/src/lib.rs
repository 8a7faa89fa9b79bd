//! Interactive diagnostic agent over simulated patients.
//!
//! Patients are encoded as structured history-of-present-illness (HPI)
//! vectors over a two-level element tree. A supervised feedforward model
//! ranks diseases from the current observation, and a PPO-trained inquiry
//! policy picks which question to ask next.
//!
//! Module map:
//! - [`ontology`]: HPI element tree and question catalog.
//! - [`patientgen`]: synthetic generative model, datasets, exact posterior.
//! - [`nncore`]: dense networks, gradients, Adam.
//! - [`diagnosis`]: disease-ranking model and its trainer.
//! - [`consult_env`]: the consultation environment.
//! - [`inquiry`]: policy/value nets, reward, rollouts, GAE and PPO.
//! - [`evalharness`]: consultations, Recall@K and rediscovery metrics.

pub mod consult_env;
pub mod diagnosis;
pub mod error;
pub mod evalharness;
pub mod inquiry;
pub mod nncore;
pub mod ontology;
pub mod patientgen;
pub mod seed;

pub use error::{Error, Result};
pub use ontology::{HpiOntology, Level, QuestionKind, Status};

/// Hex-encoded SHA-256 of `bytes`.
pub fn digest_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
