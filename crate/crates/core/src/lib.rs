//! Federated soft actor-critic.
//!
//! Agents learn continuous control on private, heterogeneous task instances and
//! federate through one of four strategies: attention over peers' frozen
//! Q-encoders ([`federation::Strategy::FedFormer`]), plain or reward-weighted
//! parameter averaging, or an MLP over concatenated encodings.

pub mod coordinator;
pub mod envs;
pub mod error;
pub mod expcli;
pub mod federation;
pub mod nets;
pub mod sac;
pub mod seeding;

pub use error::{FedError, Result};
