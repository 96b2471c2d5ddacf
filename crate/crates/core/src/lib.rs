//! Big Five trait directions in transformer hidden states.
//!
//! The pipeline: annotate characters with the IPIP-50 inventory
//! ([`persona`]), capture hidden states under each self-description
//! ([`activations`]), fit per-layer trait directions ([`directions`]), check
//! them on trait adjectives ([`probes`]) and add them back during generation
//! ([`steering`]). [`oracle`] provides planted synthetic data and a toy
//! backend so every stage runs without a real model.

pub mod activations;
pub mod chat;
pub mod directions;
pub mod error;
pub mod oracle;
pub mod persona;
pub mod probes;
pub mod psychometrics;
pub mod steering;

pub use activations::{ActivationBackend, ActivationRecord, Intervention, Position, TokenPolicy};
pub use chat::{ChatMessage, Decoding, Role};
pub use directions::{DirectionSet, Method, Solver, TraitDirection};
pub use error::{Error, Result};
pub use persona::{CharacterProfile, CharacterRef, CompletionProvider};
pub use psychometrics::{LikertValue, Trait};
pub use steering::{SteeringSpec, SweepResult};
