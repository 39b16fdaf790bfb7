//! Profile-guided evolutionary code optimization.

pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod db;
pub mod evo;
pub mod graph;
pub mod mcts;
pub mod mutate;
pub mod refine;
pub mod stage;
pub mod synthetic;
