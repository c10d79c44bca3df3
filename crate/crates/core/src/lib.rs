//! Per-antenna discrete power control for downlink multi-user MIMO, learned
//! with tabular Q-learning over a finite-state Markov channel.

pub mod actions;
pub mod channel;
pub mod linalg;
pub mod phy;
pub mod rl;
pub mod runner;
