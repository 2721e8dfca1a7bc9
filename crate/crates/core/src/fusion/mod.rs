//! Two-agent exchange protocol, frame matching and the virtual-clock
//! hardware-in-the-loop simulator.

pub mod codec;
pub mod matching;
pub mod timing;
pub mod session;
