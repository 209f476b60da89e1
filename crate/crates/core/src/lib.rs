//! Deterministic toolkit for multi-label atomic-activity recognition pipelines.
//!
//! The crate covers everything downstream of backbone training:
//!
//! * [`taxonomy`] — the class space and its partition into agent groups.
//! * [`dataset`] — label / score matrix CSV I/O, alignment and report files.
//! * [`sampling`] — deterministic temporal frame-index and resolution plans.
//! * [`metrics`] — per-class average precision, overall and agent-grouped mAP.
//! * [`fusion`] — weighted score fusion and derivative-free weight search.
//! * [`slotattn`] — forward-pass slot-attention scorer with external weights.
//! * [`archive`] — the `ATSL1` tensor archive container used by [`slotattn`].
//!
//! Every operation is a pure function of its inputs: identical inputs produce
//! bit-identical outputs across runs.

pub mod archive;
pub mod dataset;
pub mod fusion;
pub mod metrics;
pub mod sampling;
pub mod slotattn;
pub mod taxonomy;

mod util;
