//! Desk-scale differentiable search harness.
//!
//! Every update rule in the benchmark runs here against a synthetic task
//! small enough for exact, fast, bit-reproducible trials: a tape-based
//! autodiff engine ([`tape`]), a planted-structure dataset ([`task`]), a
//! supernet whose candidate ops are structured linear maps ([`net`]),
//! published hyperparameter recipes ([`config`]), the twelve update rules
//! with their optimizers and schedules ([`methods`]), and the end-to-end
//! trial driver ([`trial`]).

pub mod config;
pub mod methods;
pub mod net;
pub mod tape;
pub mod task;
pub mod trial;

pub use config::SearchConfig;
pub use methods::Method;
pub use net::{ToyDims, ToyNet};
pub use task::ToyTask;
pub use trial::{
    benchmark_finalnet, draw_seeds, run_trial, toy_space, ToySearch, TrajectorySummary,
    TrialResult, TOY_CLASSES, TOY_DIM, TOY_SPLIT,
};
