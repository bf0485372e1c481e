//! Desk-scale simulation of a UWB anchor/tag positioning system.
//!
//! The pipeline, bottom to top:
//!
//! - [`geometry`]: room-frame points, anchor ids, constants, seeded streams.
//! - [`channel`]: per-link noise, NLOS bias, multipath outliers, loss.
//! - [`twr`]: single-sided two-way ranging over drifting device clocks.
//! - [`schedule`]: slotted round-robin ranging on a virtual clock.
//! - [`ekf`]: constant-velocity range-only EKF plus a least-squares fix.
//! - [`anchors`]: anchor table persistence and the provisioning protocol.
//! - [`eval`]: static grid evaluation, error statistics, confidence ellipses.

pub mod anchors;
pub mod channel;
pub mod ekf;
pub mod eval;
pub mod geometry;
pub mod schedule;
pub mod twr;

pub use anchors::{apply_command, load, reference_installation, store, AnchorConfigError, AnchorTable, Reply};
pub use channel::{perturb_path, ChannelProfile, PathOutcome};
pub use ekf::{
    affine_rank, measurement_jacobian, predict, predicted_ranges, solve_multilateration, update, ColdStart, EkfError,
    EkfParams, EkfState, Fix, InnovationReport, MultilatError, Tracker, UpdateMode,
};
pub use eval::{
    cell_ellipses, confidence_ellipse, emit_reports, error_stats, run_grid, CellOutcome, CellStats, ConfidenceEllipse, EvalError,
    EvalOptions, GridSpec,
};
pub use geometry::{euclidean_distance, AnchorId, Point3, RngSeed, SPEED_OF_LIGHT};
pub use schedule::{run_round, run_session, RoundResult, Scenario, Schedule, ScheduleError, TagPose};
pub use twr::{compute_tof, run_exchange, tof_to_distance, DeviceClock, RangeMeasurement, RangeStatus, Timebase, TwrExchange};
