//! Group-aware social navigation: simulated crowd and perception, social
//! group estimation, social-space geometry, global / mid-level / local
//! planning, metrics, and an episode runner.

pub mod crowd;
pub mod estimation;
pub mod geometry;
pub mod global;
pub mod local;
pub mod metrics;
pub mod midlevel;
pub mod perception;
pub mod runner;
pub mod world;
