//! Link-level Monte Carlo simulator for the downlink of cell-free and
//! user-centric mmWave massive MIMO networks.
//!
//! The simulator models the full protocol chain of a TDD cell-free network:
//! clustered mmWave channel synthesis, uplink pilot training with
//! least-squares effective-channel estimation, AP-MS association (cell-free
//! or user-centric), zero-forcing precoding with optional hybrid
//! analog/digital factorization, log-det achievable-rate evaluation, and
//! transmit power control that maximizes either the network global energy
//! efficiency (GEE, Mbit/Joule) or the sum spectral efficiency.
//!
//! Modules follow the processing pipeline:
//!
//! * [`scenario`] — configuration, network geometry drops, and the
//!   deterministic randomness contract.
//! * [`channel`] — clustered mmWave channel synthesis (path loss, LOS
//!   probability, array responses, ray geometry).
//! * [`protocol`] — pilot books, uplink training, association, zero-forcing
//!   precoders, and hybrid factorization.
//! * [`rate`] — effective gains, interference covariance, per-user rates,
//!   power consumption models, and GEE.
//! * [`optimizer`] — power allocation: uniform, GEE-maximizing, and
//!   sum-rate-maximizing (alternating per-AP sequential convex approximation
//!   with a Dinkelbach inner loop and projected gradient ascent).
//! * [`harness`] — Monte Carlo campaigns over drops, operating modes, and
//!   transmit power budgets, with CSV artifact output.
//!
//! Everything is deterministic given a master seed: random streams are keyed
//! by `(master_seed, drop_index, stream, entity)` so results do not depend on
//! evaluation order or thread count.

pub mod channel;
pub mod error;
pub mod harness;
pub(crate) mod linalg;
pub mod optimizer;
pub mod protocol;
pub mod rate;
pub mod scenario;
pub mod selftest;

pub use error::{Result, SimError};
