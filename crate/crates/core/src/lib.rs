//! Incident-aware origin–destination passenger-flow prediction.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithm of the
//! two-stage method: synthetic-control effect estimation, placebo testing,
//! from-scratch regression learners, incident effect features, the
//! threshold-gated prediction pipeline, Monte Carlo checks of the threshold
//! theory, and a synthetic network/panel generator. File formats, the CLI and
//! thread-pool drivers live in the `odflow` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod features;
pub mod learners;
pub mod network;
pub mod numeric;
pub mod panel;
pub mod pipeline;
pub mod placebo;
pub mod rng;
pub mod simgen;
pub mod syncontrol;
pub mod theory;

pub use error::{Error, Result};
pub use network::StationGraph;
pub use panel::{CovariateVector, DayMeta, IncidentRecord, OdPanel};
pub use placebo::{CausalEffectEstimate, PlaceboConfig, PlaceboResult};
pub use features::{EffectFeatureVector, FEATURE_NAMES};
pub use learners::{Dataset, LearnerConfig, ModelKind, RegressionModel};
pub use pipeline::{Metrics, PipelineConfig, PredictionReport, TheoremInputs};
pub use syncontrol::{DonorSet, SynthConfig, SyntheticFit};
