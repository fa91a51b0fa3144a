//! Rate-adaptive unequal error protection for multi-modal semantic transmission.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: small feed-forward fusion networks as DAGs of elementary ops.
//! * [`bounds`]: linear bound propagation, dual norms, robustness bound and
//!   per-modality semantic importance.
//! * [`fbl`]: finite-blocklength link math (capacity, dispersion, Q-function).
//! * [`quant`]: B-bit fixed-point features and the bit-error distortion calculus.
//! * [`ratesolver`]: the convex rate-allocation problem and its bisection solver.
//! * [`channel`]: flat-fading link simulation and bit-error injection.
//! * [`pipeline`]: the end-to-end mechanism, baselines and SNR sweeps.
//! * [`cli`]: the command-line front end used by the `semrate` binary.

pub mod bounds;
pub mod channel;
pub mod cli;
pub mod fbl;
pub mod graph;
pub mod pipeline;
pub mod quant;
pub mod ratesolver;

mod error;

pub use error::Error;

/// Result alias over the crate-wide [`Error`].
pub type Result<T, E = Error> = std::result::Result<T, E>;
