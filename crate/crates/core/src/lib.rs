//! Hierarchical active-inference navigation in multi-room grid worlds.

pub mod agents;
pub mod gridworld;
pub mod harness;
pub mod nn;
pub mod planner;
pub mod pose;
pub mod topomap;
pub mod worldmodel;
