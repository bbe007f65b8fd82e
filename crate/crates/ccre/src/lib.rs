//! Multi-step port-of-call prediction from AIS trajectories.
//!
//! The pipeline runs from raw AIS point streams and port geofences to
//! connectivity-constrained multi-step port sequence forecasts:
//!
//! 1. [`segmentation`] classifies points against geofences and cuts each
//!    vessel stream into berth-validated port episodes and sailing
//!    intervals.
//! 2. [`dataset`] assembles per-voyage feature tensors and label
//!    sequences, normalizes them, and performs the chronological split.
//! 3. [`graph`] holds the observed port-to-port network and answers
//!    exact-step reachability queries that mask the decoder.
//! 4. [`retrieval`] scores historical scenarios against the evolving
//!    decoding context and selects the top candidates.
//! 5. [`model`] encodes trajectory and retrieved history, fuses them with
//!    cross-attention, and decodes feasible port sequences.
//! 6. [`training`] / [`metrics`] train the network with scheduled
//!    sampling and report step, average, and sequence accuracies.
//! 7. [`synth`] generates deterministic synthetic fleets so the whole
//!    chain can be exercised with known ground truth.

pub mod checkpoint;
pub mod dataset;
pub mod geo;
pub mod graph;
pub mod history;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod segmentation;
pub mod synth;
pub mod tensor;
pub mod training;

pub use graph::{AdjacencyGraph, Port, PortVocabulary, ReachabilityMask};
