//! Pilot-free unsourced random access over a massive-MIMO uplink.
//!
//! Transmit chain: LDPC encoding, Gray QPSK, and sparse spreading onto a
//! codeword drawn from a shared codebook. Receive chain: dictionary learning
//! (OMP + MOD) of the received block, sparsity-pattern codeword detection,
//! ECC-driven dictionary refinement, collision resolution and blind
//! active-count estimation. A seeded Monte Carlo harness reproduces the
//! per-user error and symbol error experiments.

pub mod codebook;
pub mod dictlearn;
pub mod error;
pub mod fec;
pub mod gf2;
pub mod harness;
pub mod metrics;
pub mod phy;
pub mod receiver;
pub mod seed;

pub use error::{Result, UraError};
