//! Allocation-only core of the decentralized Bayesian mapping stack.
//!
//! Everything here is pure computation: the reverse-mode tensor substrate,
//! the Bayesian implicit occupancy network, loss mathematics, the split
//! μ/ρ consensus optimizer, the round-synchronized peer exchange state
//! machine with its wire codec, and the 2D LiDAR world simulator. IO,
//! sockets, configuration files and the CLI live in the `dinno` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bnn;
pub mod consensus;
pub mod losses;
pub mod math;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use bnn::{Architecture, BayesianLinear, GaussianParam, MapperNet, SirenLayer};

pub use consensus::{Agent, ConsensusConfig, DualState, RegStrategy, StateVector};
pub use losses::{KlReduction, LossConfig};
pub use protocol::{PeerId, PeerMessage};

pub use rng::SeedStream;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
pub use world::{AgentPath, Floorplan, LidarScan, TrainPoint};
