//! Baseline, NDFT and accelerated NDFT (feature replay + slow-learner
//! nuisance heads) trainers for nuisance-invariant feature learning, on a
//! synthetic single-object detection task.

pub mod checkpoint;
pub mod data_synth;
pub mod eval;
pub mod nn_core;
pub mod replay;
pub mod seeds;
pub mod trainers;
