//! Roundabout driving simulator and a spline-network deep Q-learning stack.

pub mod agent;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod geom;
pub mod harness;
pub mod inspector;
pub mod kan;
pub mod mlp;
pub mod mpc;
pub mod parallel;
pub mod planner;
pub mod qnet;
pub mod report;
pub mod world;

pub use error::{Error, Result};
