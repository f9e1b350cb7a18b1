//! Online aggregation of multimodal trajectory predictors.
//!
//! A set of experts each emit a Gaussian mixture (or a sample set) over an
//! agent's future poses. The learners in [`learners`] maintain a weight
//! vector over the experts and update it from per-expert loss gradients,
//! either with the SQUINT potential or with exponentiated gradient.
//!
//! ```
//! use moe_oco::learners::{Learner, LearnerConfig};
//!
//! let mut learner = Learner::<f64>::new(&LearnerConfig::default(), 3).unwrap();
//! for _ in 0..50 {
//!     learner.step(&[-1.0, 1.0, 1.0]).unwrap();
//! }
//! assert!(learner.alpha().get(0) > 0.9);
//! ```
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Simulation,
//! traces and the experiment harness work in `f64`.

pub mod error;
pub mod gmm;
pub mod learners;
pub mod losses;
pub mod scalar;
mod special;
pub mod trace;
pub mod metrics;
pub mod sampling;
pub mod simulation;
pub mod experiment;
pub mod presets;

pub use error::{Error, Result};
pub use experiment::{compare_learners, run_experiment, ExperimentConfig, ExperimentResult, LossKind};
pub use gmm::{AgentState, ExpertPrediction, GaussianMode, WeightVector};
pub use learners::{Learner, LearnerConfig, LearnerKind, LearnerState, UpdateOrder};
pub use presets::Preset;
pub use scalar::Scalar;
pub use simulation::{generate_scenario, ScenarioSpec, StepRecord};
