//! Secure communication abstractions over a simulated QKD overlay.
//!
//! The crate models a quantum-enabled network in which every site has a
//! classical network interface and a quantum one. BB84 sessions on each
//! quantum link fill symmetric key pools; the overlay data plane spends
//! those pools to offer four kinds of circuits (secure lossy datagrams,
//! secure reliable datagrams, a secure reliable byte stream, and a
//! synchronized random number generator). A single controller composes
//! links into trusted-relay paths and reacts to management events through
//! declarative policies. The `apps` module builds parallel Monte Carlo and
//! Las Vegas search on top of the synchronized random numbers.

pub mod apps;
pub mod classical;
pub mod cli;
pub mod config;
pub mod control;
pub mod error;
pub mod exchange;
pub mod mgmt;
pub mod overlay;
pub mod qkd;
pub mod quantum;
pub mod rng;

pub use error::{Error, Result};
