//! Blind deconvolution of multivariate hemodynamic time series.
//!
//! Observations are modeled as convolutive mixtures of a task-related source
//! filtered by region-specific gamma response kernels and an additive
//! artifact source with region-specific gains. The library estimates the
//! kernels and the sources from data alone by fitting a structured
//! block-term decomposition to the tensor of lagged autocorrelation matrices
//! of the stacked observations, selecting a stable solution across random
//! restarts, and inverting the fitted filter bank with a truncated-SVD
//! pseudo-inverse.
//!
//! Modules:
//! - [`hrf`]: gamma kernels and Toeplitz-block mixing matrices
//! - [`sim`]: synthetic experiment generator
//! - [`lagcorr`]: Hankel embedding and autocorrelation tensors
//! - [`btd`]: the structured decomposition solver
//! - [`stability`]: multi-start solution selection
//! - [`recovery`]: source estimation from final kernels
//! - [`metrics`]: evaluation operators
//! - [`pipeline`]: end-to-end orchestration and Monte-Carlo study

pub mod btd;
pub mod error;
pub mod hrf;
pub mod io;
pub mod lagcorr;
pub mod lbfgs;
pub mod metrics;
pub mod pipeline;
pub mod recovery;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
pub use hrf::{HrfParams, MixingModel, SampledFilter};
pub use lagcorr::{HankelStack, LagCorrTensor, SourceCorrSequence};
pub use sim::{EpSchedule, Experiment, RoiTimeSeries};
