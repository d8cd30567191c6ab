//! Population protocols for exact majority and leader election.

pub mod engine;
pub mod harness;
pub mod junta;
pub mod leader;
pub mod majority;
pub mod phaseclock;
pub mod primitives;
