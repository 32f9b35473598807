//! Numerical laboratory for the Teichmüller harmonic map flow.
//!
//! The crate is organised by subsystem:
//!
//! * [`hypgeom`]: hyperbolic collar geometry, thick/thin thresholds and
//!   degeneration bookkeeping.
//! * [`torusflow`]: the coupled map/metric gradient flow on flat unit-area tori.
//! * [`collarflow`]: the map flow on a model hyperbolic collar whose geodesic
//!   length is driven to zero by a prescribed schedule.
//! * [`singular`]: cut-off energies, ε-regularity, bubble detection and
//!   extraction, bubble-branch segmentation and the thick/thin energy ledger.
//! * [`ricci`]: conformal Ricci flow on the sphere started from a capped
//!   cusped hyperbolic metric.
//! * [`io`], [`config`] and [`pipeline`]: persistence, run configuration and
//!   the end-to-end decomposition pipeline driven by the `tmflow` binary.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collarflow;
pub mod config;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod hypgeom;
pub mod io;
pub mod pipeline;
pub mod ricci;
pub mod singular;
pub mod sphere;
pub mod torusflow;

pub use error::{FlowError, Result};
pub use field::SphereMapField;
