//! Reinforced self-training for conditional sequence models.
//!
//! The policy alternates between *growing* a reward-annotated dataset by
//! sampling from itself and *improving* on reward-filtered subsets of that
//! dataset under increasing thresholds.

pub mod config;
pub mod driver;
pub mod gradcheck;
pub mod grow;
pub mod improve;
pub mod losses;
pub mod mdp;
pub mod net;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod seeding;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;
