//! Confidence-weighted driving decision pipeline: a committee of language-model
//! voters distilled into a small dual-head student, plus the retrieval memory,
//! trajectory planner, and closed-loop simulator built around it.

pub mod desk;
pub mod gateway;
pub mod geom;
pub mod memory;
#[cfg(feature = "oracles")]
pub mod oracles;
pub mod planner;
pub mod prompting;
pub mod scene;
pub mod simulator;
pub mod student;
pub mod workflow;
