//! Search-space engine and benchmark analytics for cell-based architecture
//! search over compound-edge supernets.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`space`] declares the supernet graph: cells with two inputs, a row of
//!    intermediate nodes joined by compound edges (every operation on every
//!    edge in parallel), and two searchable output blocks (a summed block and
//!    a concatenated block).
//! 2. [`relax`] turns raw architecture parameters into the continuous path
//!    weights used during search (input-wide softmax, per-edge softmax, or
//!    partial-channel path renormalization, plus sigmoid output gates).
//! 3. [`discretize`] projects continuous weights onto a discrete genotype
//!    under a named policy, then prunes intermediate nodes made unreachable
//!    or useless by the chosen outputs.
//! 4. [`complexity`] counts the resulting spaces exactly with big integers.
//! 5. [`capacity`] prices a discrete genotype in parameters, multiply
//!    accumulates, and depth, and scales plans to a parameter budget.
//! 6. [`toysearch`] runs the whole search loop at toy scale with a
//!    reverse-mode tape, one update rule per published search method.
//! 7. [`metrics`] and [`asha`] score the outcome tables: adjacent-gap
//!    discernibility, rank correlation, empirical distribution functions,
//!    and a deterministic successive-halving driver.

pub mod asha;
pub mod capacity;
pub mod complexity;
pub mod discretize;
pub mod error;
pub mod metrics;
pub mod relax;
pub mod space;
pub mod toysearch;

pub use error::LhdError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LhdError>;
