//! Motion-matching reward engineering for robotic manipulation.
//!
//! Tasks are decomposed into ordered abstract motions written in a small DSL
//! ([`grammar`]). A transition between two scene states is classified into one
//! of those motions, either geometrically ([`reward`]) or with a learned
//! dual encoder over rendered frames ([`matcher`]), and earns the stage's
//! incremental reward. [`rl`] trains DDPG agents on the built-in [`sim`]
//! tasks with any of these reward backends.

pub mod checkpoint;
pub mod geometry;
pub mod grammar;
pub mod matcher;
pub mod nn;
pub mod reward;
pub mod rl;
pub mod sim;
