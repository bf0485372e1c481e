//! Range-only extended Kalman filter.
//!
//! State is `[x, y, z, vx, vy, vz]` with a constant-velocity motion model.
//! Each range to anchor `i` is predicted as `dist_i = |a_i - p|`; its
//! Jacobian row is
//!
//! ```text
//! [-(x_i - x)/dist_i, -(y_i - y)/dist_i, -(z_i - z)/dist_i, 0, 0, 0]
//! ```
//!
//! the unit vector pointing from the anchor to the tag. Ranges are fused
//! either one at a time in arrival order ([`UpdateMode::Sequential`]) or as
//! one stacked update per round ([`UpdateMode::Batch`]). Both use the
//! Joseph-form covariance update and an innovation gate.

mod multilat;
mod tracker;

pub use multilat::{affine_rank, solve_multilateration, solve_multilateration_from, MultilatError, MultilatFix};
pub use tracker::{ColdStart, Fix, Tracker, COLD_START_PATIENCE};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, RowSVector, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorTable;
use crate::geometry::{AnchorId, Point3};
use crate::twr::RangeMeasurement;

/// Anchors closer than this to the state position are treated as singular.
pub const SINGULAR_DISTANCE: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error("filter diverged: {0}")]
    Divergence(String),
    #[error("prediction interval must be positive and finite, got {0} s")]
    InvalidDt(f64),
    #[error("anchor #{index} coincides with the state position")]
    SingularGeometry { index: usize },
    #[error("measurement refers to unknown anchor {0}")]
    UnknownAnchor(AnchorId),
    #[error("invalid filter parameter `{0}`: must be positive and finite")]
    InvalidParam(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// One scalar update per range, in slot order.
    #[default]
    Sequential,
    /// One stacked update per round.
    Batch,
}

/// Filter tuning. None of these come from hardware; they are defaults that
/// give few-centimeter static scatter with 5 cm ranging noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfParams {
    /// White-acceleration level, m/s². The continuous noise density is its square.
    pub q_accel: f64,
    /// Range measurement std, m.
    pub r_range: f64,
    /// Initial position std, m.
    pub p0_pos: f64,
    /// Initial velocity std, m/s.
    pub p0_vel: f64,
    /// Nominal prediction interval, s. The tracker steps by virtual-time
    /// deltas and falls back to this when a delta is unavailable.
    pub dt: f64,
    /// Ranges whose innovation exceeds this many predicted stds are rejected.
    pub gate_sigma: f64,
    pub mode: UpdateMode,
}

impl Default for EkfParams {
    fn default() -> Self {
        Self { q_accel: 0.5, r_range: 0.05, p0_pos: 1.0, p0_vel: 0.5, dt: 0.25, gate_sigma: 5.0, mode: UpdateMode::Sequential }
    }
}

impl EkfParams {
    pub fn validate(&self) -> Result<(), EkfError> {
        for (name, v) in [
            ("q_accel", self.q_accel),
            ("r_range", self.r_range),
            ("p0_pos", self.p0_pos),
            ("p0_vel", self.p0_vel),
            ("dt", self.dt),
            ("gate_sigma", self.gate_sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(EkfError::InvalidParam(name));
            }
        }
        Ok(())
    }
}

/// Mean and covariance of the 6-D state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
}

impl EkfState {
    /// At rest at `position` with the initial uncertainty from `params`.
    pub fn at_rest(position: Point3, params: &EkfParams) -> Self {
        let (pp, pv) = (params.p0_pos.powi(2), params.p0_vel.powi(2));
        Self {
            x: Vector6::new(position.x, position.y, position.z, 0.0, 0.0, 0.0),
            p: Matrix6::from_diagonal(&Vector6::new(pp, pp, pp, pv, pv, pv)),
        }
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x[0], self.x[1], self.x[2])
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.x[3], self.x[4], self.x[5]]
    }

    pub fn position_covariance(&self) -> Matrix3<f64> {
        self.p.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Symmetric to 1e-12 relative and no eigenvalue below -1e-9.
    pub fn check_health(&self) -> Result<(), EkfError> {
        if !self.x.iter().chain(self.p.iter()).all(|v| v.is_finite()) {
            return Err(EkfError::Divergence("non-finite state or covariance".into()));
        }
        let scale = self.p.amax().max(f64::MIN_POSITIVE);
        let asym = (self.p - self.p.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(EkfError::Divergence(format!("covariance asymmetric by {asym:e}")));
        }
        let min_eig = SymmetricEigen::new(self.p).eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(EkfError::Divergence(format!("covariance eigenvalue {min_eig:e}")));
        }
        Ok(())
    }
}

fn transition(dt: f64) -> Matrix6<f64> {
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    f
}

/// Continuous white-noise-acceleration process noise over `dt`.
pub fn process_noise(dt: f64, q_accel: f64) -> Matrix6<f64> {
    let q = q_accel * q_accel;
    let (pp, pv, vv) = (q * dt.powi(3) / 3.0, q * dt.powi(2) / 2.0, q * dt);
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = pp;
        m[(i, i + 3)] = pv;
        m[(i + 3, i)] = pv;
        m[(i + 3, i + 3)] = vv;
    }
    m
}

fn symmetrize(p: &Matrix6<f64>) -> Matrix6<f64> {
    (p + p.transpose()) * 0.5
}

/// Constant-velocity time update.
pub fn predict(state: &EkfState, dt: f64, params: &EkfParams) -> Result<EkfState, EkfError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(EkfError::InvalidDt(dt));
    }
    state.check_health()?;
    let f = transition(dt);
    Ok(EkfState { x: f * state.x, p: symmetrize(&(f * state.p * f.transpose() + process_noise(dt, params.q_accel))) })
}

/// Predicted range to every anchor.
pub fn predicted_ranges(position: &Point3, anchors: &[Point3]) -> Vec<f64> {
    anchors.iter().map(|a| a.distance_to(position)).collect()
}

fn jacobian_row(position: &Point3, anchor: &Point3) -> Option<(f64, RowSVector<f64, 6>)> {
    let [dx, dy, dz] = anchor.sub(position);
    let dist = (dx * dx + dy * dy + dz * dz).sqrt();
    (dist > SINGULAR_DISTANCE).then(|| (dist, RowSVector::<f64, 6>::from_row_slice(&[-dx / dist, -dy / dist, -dz / dist, 0.0, 0.0, 0.0])))
}

/// `n_anchors x 6` Jacobian of the predicted ranges with respect to the state.
pub fn measurement_jacobian(position: &Point3, anchors: &[Point3]) -> Result<DMatrix<f64>, EkfError> {
    let mut h = DMatrix::zeros(anchors.len(), 6);
    for (i, a) in anchors.iter().enumerate() {
        let (_, row) = jacobian_row(position, a).ok_or(EkfError::SingularGeometry { index: i })?;
        h.row_mut(i).copy_from(&row);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    /// Lost or flagged by the ranging layer.
    Invalid,
    /// Innovation outside the gate.
    Gated,
    /// Anchor coincides with the estimate.
    Singular,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accepted => "accepted",
            Verdict::Invalid => "invalid",
            Verdict::Gated => "gated",
            Verdict::Singular => "singular",
        }
    }
}

/// What the filter did with one range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnovationEntry {
    pub anchor: AnchorId,
    pub predicted: f64,
    pub measured: f64,
    pub innovation: f64,
    /// Predicted std of the innovation.
    pub innovation_std: f64,
    pub verdict: Verdict,
}

impl InnovationEntry {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InnovationReport {
    pub entries: Vec<InnovationEntry>,
}

impl InnovationReport {
    pub fn accepted(&self) -> usize {
        self.entries.iter().filter(|e| e.accepted()).count()
    }

    pub fn rejected(&self) -> usize {
        self.entries.len() - self.accepted()
    }

    pub fn max_abs_accepted_innovation(&self) -> f64 {
        self.entries.iter().filter(|e| e.accepted()).map(|e| e.innovation.abs()).fold(0.0, f64::max)
    }

    pub fn extend(&mut self, other: InnovationReport) {
        self.entries.extend(other.entries);
    }
}

/// Measurement update. Invalid ranges are reported and skipped; if nothing
/// is usable the state comes back unchanged.
pub fn update(
    state: &EkfState,
    measurements: &[RangeMeasurement],
    anchors: &AnchorTable,
    params: &EkfParams,
) -> Result<(EkfState, InnovationReport), EkfError> {
    state.check_health()?;
    let positions = measurements
        .iter()
        .map(|m| anchors.get(m.anchor).ok_or(EkfError::UnknownAnchor(m.anchor)))
        .collect::<Result<Vec<_>, _>>()?;
    match params.mode {
        UpdateMode::Sequential => Ok(update_sequential(state, measurements, &positions, params)),
        UpdateMode::Batch => update_batch(state, measurements, &positions, params),
    }
}

fn rejected(m: &RangeMeasurement, verdict: Verdict) -> InnovationEntry {
    InnovationEntry { anchor: m.anchor, predicted: f64::NAN, measured: m.distance, innovation: f64::NAN, innovation_std: f64::NAN, verdict }
}

fn update_sequential(state: &EkfState, measurements: &[RangeMeasurement], positions: &[Point3], params: &EkfParams) -> (EkfState, InnovationReport) {
    let r2 = params.r_range.powi(2);
    let mut s = *state;
    let mut report = InnovationReport::default();
    for (m, a) in measurements.iter().zip(positions) {
        if !m.is_valid() {
            report.entries.push(rejected(m, Verdict::Invalid));
            continue;
        }
        let Some((predicted, h)) = jacobian_row(&s.position(), a) else {
            report.entries.push(rejected(m, Verdict::Singular));
            continue;
        };
        let ph = s.p * h.transpose();
        let var = (h * ph)[(0, 0)] + r2;
        let innovation = m.distance - predicted;
        let std = var.sqrt();
        let verdict = if innovation.abs() > params.gate_sigma * std { Verdict::Gated } else { Verdict::Accepted };
        if verdict == Verdict::Accepted {
            let k = ph / var;
            let ikh = Matrix6::identity() - k * h;
            s.x += k * innovation;
            s.p = symmetrize(&(ikh * s.p * ikh.transpose() + k * k.transpose() * r2));
        }
        report.entries.push(InnovationEntry { anchor: m.anchor, predicted, measured: m.distance, innovation, innovation_std: std, verdict });
    }
    (s, report)
}

fn update_batch(
    state: &EkfState,
    measurements: &[RangeMeasurement],
    positions: &[Point3],
    params: &EkfParams,
) -> Result<(EkfState, InnovationReport), EkfError> {
    let r2 = params.r_range.powi(2);
    let pos = state.position();
    let mut report = InnovationReport::default();
    let mut rows: Vec<RowSVector<f64, 6>> = Vec::new();
    let mut innovations = Vec::new();
    for (m, a) in measurements.iter().zip(positions) {
        if !m.is_valid() {
            report.entries.push(rejected(m, Verdict::Invalid));
            continue;
        }
        let Some((predicted, h)) = jacobian_row(&pos, a) else {
            report.entries.push(rejected(m, Verdict::Singular));
            continue;
        };
        let std = ((h * state.p * h.transpose())[(0, 0)] + r2).sqrt();
        let innovation = m.distance - predicted;
        let verdict = if innovation.abs() > params.gate_sigma * std { Verdict::Gated } else { Verdict::Accepted };
        if verdict == Verdict::Accepted {
            rows.push(h);
            innovations.push(innovation);
        }
        report.entries.push(InnovationEntry { anchor: m.anchor, predicted, measured: m.distance, innovation, innovation_std: std, verdict });
    }
    if rows.is_empty() {
        return Ok((*state, report));
    }
    let h = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j]);
    let y = DVector::from_vec(innovations);
    let p = DMatrix::from_column_slice(6, 6, state.p.as_slice());
    let s = &h * &p * h.transpose() + DMatrix::identity(rows.len(), rows.len()) * r2;
    let chol = s.cholesky().ok_or_else(|| EkfError::Divergence("innovation covariance not positive definite".into()))?;
    // K = P H^T S^-1, via S K^T = H P
    let k = chol.solve(&(&h * &p)).transpose();
    let ikh = DMatrix::<f64>::identity(6, 6) - &k * &h;
    let p_new = &ikh * &p * ikh.transpose() + &k * k.transpose() * r2;
    let dx = &k * y;
    let mut next = *state;
    for i in 0..6 {
        next.x[i] += dx[i];
    }
    next.p = symmetrize(&Matrix6::from_column_slice(p_new.as_slice()));
    Ok((next, report))
}
