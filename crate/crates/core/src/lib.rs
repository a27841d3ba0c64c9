//! Unsupervised, training-free load disaggregation.
//!
//! A whole-house power signal is cleaned by an edge-preserving filter
//! pipeline ([`filters`]), turned into ON/OFF step events ([`events`]), and
//! attributed to appliances that are discovered and refined online
//! ([`tracker`]) using Gaussian appliance models ([`models`]) and a
//! multiple-choice knapsack ([`mckp`]). Discovered appliances are named with
//! region-specific partition maps ([`labelling`]) and scored by energy
//! ([`metrics`]). [`synth`] generates households with exact ground truth.

pub mod events;
pub mod filters;
pub mod labelling;
pub mod mckp;
pub mod metrics;
pub mod models;
pub mod runner;
pub mod signal;
pub mod synth;
pub mod tracker;

pub use events::{detect_events, Event, EventKind};
pub use filters::{run_pipeline, FilterConfig, Stage};
pub use labelling::{LabelAssignment, PartitionMap};
pub use mckp::{MckpInstance, MckpSolution};
pub use metrics::{accuracy, energy_kwh, EnergyReport};
pub use models::{ApplianceDb, ApplianceId, ApplianceModel, GaussianStat};
pub use signal::PowerTrace;
pub use tracker::{track, DisaggregationResult, TrackerConfig};
