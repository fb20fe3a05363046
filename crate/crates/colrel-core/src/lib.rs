//! Federated learning over intermittently connected clients with
//! collaborative relaying.
//!
//! Clients reach the parameter server over links that fail at random, and
//! compensate by relaying each other's updates: each client transmits a
//! weighted combination of its own update and those it received. The relay
//! weights are optimized so the aggregated update stays unbiased while its
//! variance — the functional `S` that governs the convergence rate — is
//! minimized.
//!
//! Module map:
//!
//! * [`connectivity`] — link-probability models (Erdos-Renyi, mmWave,
//!   distance threshold) and per-round realizations with reciprocity
//!   correlation.
//! * [`weights`] — the two-phase Gauss-Seidel weight optimizer with
//!   closed-form KKT column updates.
//! * [`objective`] — quadratic and logistic ERM objectives with gradient
//!   oracles, plus IID and sort-and-partition splits.
//! * [`protocol`] — the round loop (local SGD, relay exchange, PS
//!   aggregation) with blind/non-blind/perfect baselines.
//! * [`theory`] — effective-weight covariance closed forms, an enumeration
//!   oracle, and the convergence-bound constants.
//! * [`rng`] — deterministic per-(round, entity) stream derivation.

pub mod connectivity;
pub mod linalg;
pub mod objective;
pub mod protocol;
pub mod rng;
pub mod theory;
pub mod weights;

pub use connectivity::{ConnectivityModel, LinkRealization};
pub use objective::{ObjectiveSpec, Partition, SplitKind};
pub use protocol::{Mode, RoundRecord, RoundTrace, Schedule, StepSizeRule};
pub use theory::TheoryConstants;
pub use weights::{SolverReport, WeightMatrix};
