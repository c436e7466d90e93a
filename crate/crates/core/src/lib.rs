//! Online conformal prediction over an ensemble of classifiers.
//!
//! The crate implements graph-structured multi-model online conformal
//! prediction (GMOCP), its set-size-aware variant (EGMOCP) and the baselines
//! they are usually compared against (MOCP, COMA and a single-model adaptive
//! loop), together with synthetic distribution-shift streams, evaluation
//! metrics and a deterministic experiment runner.
//!
//! Module map:
//!
//! - [`scoring`]: nonconformity scores, calibration stores, thresholds and sets.
//! - [`adapt`]: pinball loss and scale-free online gradient descent on α.
//! - [`graph`]: bipartite feedback graphs and inclusion probabilities.
//! - [`policies`]: the online decision loops.
//! - [`streams`]: synthetic model-output streams and the stream file format.
//! - [`metrics`]: coverage/width metrics and hindsight regret.
//! - [`runner`]: experiment configuration, sweeps and result files.
//! - [`oracle`]: brute-force reference implementations used for cross-checks.

pub mod adapt;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod oracle;
pub mod policies;
pub mod rng;
pub mod runner;
pub mod scoring;
pub mod streams;

pub use error::{Error, Result};
