//! Inference-time search over diffusion reverse processes.
//!
//! The crate implements diffusion latent beam search (DLBS) and its lookahead
//! variant on top of stochastic DDIM and first-order SDE-DPMSolver++, together
//! with the Best-of-N and greedy baselines. Everything is exercised against an
//! analytic Gaussian-mixture diffusion whose posterior mean, score and noise
//! prediction are known in closed form, so every sampler and estimator can be
//! checked against an exact answer.
//!
//! Theory background: the search methods approximate a KL-regularised optimal
//! control of the reverse SDE. The optimal drift is replaced first by a
//! one-step (Tweedie) posterior-mean estimate and then by a zeroth-order
//! argmax over sampled noise. Those quantities have no runtime representation
//! here; only the resulting discrete algorithms do.
//!
//! Modules:
//! - [`schedule`]: noise schedules and solver coefficients.
//! - [`oracle`]: the denoiser abstraction and the analytic mixture oracle.
//! - [`sampler`]: transition kernels and clean-sample estimators.
//! - [`search`]: Best-of-N, greedy, DLBS and DLBS-LA with NFE accounting.
//! - [`metrics`]: frame-sequence quality metrics and testbed rewards.
//! - [`calibration`]: Pearson correlation, weight-grid calibration, permutation tests.
//! - [`harness`]: configuration, persistence, sweeps and reporting behind the CLI.

pub mod calibration;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod search;

pub use error::{Error, Result};
pub use oracle::{Denoiser, GaussianMixture, Latent, NoiseLevel};
pub use schedule::NoiseSchedule;
pub use search::{run_search, Method, SearchConfig, SearchResult, Solver};
