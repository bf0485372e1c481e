//! Static grid evaluation.
//!
//! The tag is placed at every intersection of a planar grid at a fixed
//! height. Each cell runs a fresh tracker over a fixed number of ranging
//! rounds and summarizes the fixes: mean and sample std of the error norm,
//! the sample mean and covariance of the planar position, and a k-sigma
//! confidence ellipse.
//!
//! Cells draw their random streams from the cell's lattice indices, so
//! results do not depend on visit order or on running cells in parallel.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::{ColdStart, EkfError, EkfParams, Tracker};
use crate::geometry::{Point3, RngSeed};
use crate::schedule::{run_session, Scenario, Schedule, ScheduleError, TagPose};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("insufficient data: {n} fixes, need at least 2")]
    InsufficientData { n: usize },
    #[error("degenerate ellipse: covariance eigenvalues ({major:e}, {minor:e})")]
    DegenerateEllipse { major: f64, minor: f64 },
    #[error("covariance is not symmetric positive semi-definite")]
    InvalidCovariance,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error("writing {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

/// Inclusive `min..=max` lattice along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl AxisRange {
    pub fn new(min: f64, max: f64, step: f64) -> Self {
        Self { min, max, step }
    }

    fn validate(&self, axis: &str) -> Result<(), EvalError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.step.is_finite()) {
            return Err(EvalError::InvalidGrid(format!("{axis} range must be finite")));
        }
        if self.step <= 0.0 {
            return Err(EvalError::InvalidGrid(format!("{axis} step must be positive")));
        }
        if self.max < self.min {
            return Err(EvalError::InvalidGrid(format!("{axis} range is empty")));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        // tolerate accumulated rounding in (max - min) / step
        ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn value(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: AxisRange,
    pub y: AxisRange,
    /// Tag height, m.
    pub z_tag: f64,
    pub rounds_per_cell: u64,
}

impl Default for GridSpec {
    /// 5 x 7 intersections at 1 m spacing, x in [2, 6], y in [2, 8], tag at
    /// hand height, 500 rounds per cell.
    fn default() -> Self {
        Self { x: AxisRange::new(2.0, 6.0, 1.0), y: AxisRange::new(2.0, 8.0, 1.0), z_tag: 1.0, rounds_per_cell: 500 }
    }
}

/// One grid intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub ix: usize,
    pub iy: usize,
    pub position: Point3,
}

impl GridCell {
    /// Stream key; depends only on the lattice indices.
    pub fn key(&self) -> u64 {
        ((self.ix as u64) << 32) | self.iy as u64
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        self.x.validate("x")?;
        self.y.validate("y")?;
        if !self.z_tag.is_finite() {
            return Err(EvalError::InvalidGrid("z_tag must be finite".into()));
        }
        if self.rounds_per_cell < 2 {
            return Err(EvalError::InvalidGrid("rounds_per_cell must be at least 2".into()));
        }
        Ok(())
    }

    /// Cells in x-major order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.x.count() * self.y.count());
        for ix in 0..self.x.count() {
            for iy in 0..self.y.count() {
                out.push(GridCell { ix, iy, position: Point3::new(self.x.value(ix), self.y.value(iy), self.z_tag) });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMetric {
    /// Mean of per-fix error norms.
    #[default]
    MeanOfNorms,
    /// Norm of the mean error vector.
    NormOfMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorDims {
    /// x and y only.
    #[default]
    Planar,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub metric: ErrorMetric,
    pub dims: ErrorDims,
    /// Evaluate cells on the rayon pool.
    pub parallel: bool,
}

/// Per-cell accuracy and precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub true_pos: Point3,
    /// Accuracy, cm.
    pub mean_error: f64,
    /// Precision, cm.
    pub error_std: f64,
    pub sample_mean: Point3,
    /// Sample covariance of the planar fixes, m².
    pub cov2d: Matrix2<f64>,
    /// Number of accepted fixes.
    pub n: usize,
    /// Set when fewer than two fixes were accepted; the statistics are NaN.
    pub empty: bool,
}

/// A fix as recorded in the per-round output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixRecord {
    pub round: u64,
    pub sim_time: u64,
    pub position: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: GridCell,
    pub stats: CellStats,
    pub fixes: Vec<FixRecord>,
    /// Virtual time consumed by the cell's session, ps.
    pub virtual_time_ps: u64,
}

/// Accuracy `mu` and precision `sigma` of planar fixes, both in cm.
///
/// `mu` is the mean error norm, `sigma` the sample (n - 1) std of the error
/// norms.
pub fn error_stats(fixes: &[(f64, f64)], truth: (f64, f64)) -> Result<(f64, f64), EvalError> {
    let norms: Vec<f64> = fixes.iter().map(|&(x, y)| (x - truth.0).hypot(y - truth.1)).collect();
    norm_stats(&norms).map(|(mu, sigma)| (mu * 100.0, sigma * 100.0))
}

/// Mean and sample std by Welford's recurrence, in the input unit.
fn norm_stats(norms: &[f64]) -> Result<(f64, f64), EvalError> {
    if norms.len() < 2 {
        return Err(EvalError::InsufficientData { n: norms.len() });
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &e) in norms.iter().enumerate() {
        let delta = e - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (e - mean);
    }
    Ok((mean, (m2 / (norms.len() - 1) as f64).max(0.0).sqrt()))
}

fn cell_stats(truth: Point3, fixes: &[FixRecord], opts: &EvalOptions) -> CellStats {
    let err = |p: &Point3| match opts.dims {
        ErrorDims::Planar => [p.x - truth.x, p.y - truth.y, 0.0],
        ErrorDims::Spatial => p.sub(&truth),
    };
    let norms: Vec<f64> = fixes.iter().map(|f| {
        let [a, b, c] = err(&f.position);
        (a * a + b * b + c * c).sqrt()
    }).collect();
    let Ok((mean_norm, std_norm)) = norm_stats(&norms) else {
        return CellStats {
            true_pos: truth,
            mean_error: f64::NAN,
            error_std: f64::NAN,
            sample_mean: Point3::new(f64::NAN, f64::NAN, f64::NAN),
            cov2d: Matrix2::from_element(f64::NAN),
            n: fixes.len(),
            empty: true,
        };
    };
    let sample_mean = Point3::centroid(fixes.iter().map(|f| &f.position)).expect("at least two fixes");
    let mu = match opts.metric {
        ErrorMetric::MeanOfNorms => mean_norm,
        ErrorMetric::NormOfMean => {
            let [a, b, c] = err(&sample_mean);
            (a * a + b * b + c * c).sqrt()
        }
    };
    let mut cov = Matrix2::zeros();
    for f in fixes {
        let d = nalgebra::Vector2::new(f.position.x - sample_mean.x, f.position.y - sample_mean.y);
        cov += d * d.transpose();
    }
    cov /= (fixes.len() - 1) as f64;
    CellStats { true_pos: truth, mean_error: mu * 100.0, error_std: std_norm * 100.0, sample_mean, cov2d: cov, n: fixes.len(), empty: false }
}

/// Runs a fresh tracker at one cell.
pub fn run_cell(
    cell: &GridCell,
    rounds: u64,
    schedule: &Schedule,
    template: &Scenario,
    ekf: &EkfParams,
    seed: RngSeed,
    opts: &EvalOptions,
) -> Result<CellOutcome, EvalError> {
    let mut scenario = template.clone();
    scenario.tag = TagPose::Static(cell.position);
    let session = run_session(schedule, &scenario, seed, cell.key(), rounds)?;
    let mut tracker = Tracker::new(scenario.anchors.clone(), *ekf)?;
    let mut fixes = Vec::with_capacity(rounds as usize);
    let mut virtual_time_ps = 0;
    for round in session {
        virtual_time_ps = round.t_round_end;
        let Some(fix) = tracker.process_round(&round)? else {
            continue;
        };
        let informed = fix.report.accepted() > 0 || fix.cold_start == Some(ColdStart::Multilateration);
        if informed {
            fixes.push(FixRecord { round: fix.round_index, sim_time: fix.sim_time, position: fix.position });
        }
    }
    Ok(CellOutcome { cell: *cell, stats: cell_stats(cell.position, &fixes, opts), fixes, virtual_time_ps })
}

/// Runs the given cells. Output order follows `cells`.
pub fn run_cells(
    cells: &[GridCell],
    rounds: u64,
    schedule: &Schedule,
    template: &Scenario,
    ekf: &EkfParams,
    seed: RngSeed,
    opts: &EvalOptions,
) -> Result<Vec<CellOutcome>, EvalError> {
    if template.anchors.is_empty() {
        return Err(ScheduleError::Empty.into());
    }
    template.validate(schedule)?;
    ekf.validate()?;
    let one = |c: &GridCell| run_cell(c, rounds, schedule, template, ekf, seed, opts);
    if opts.parallel {
        cells.par_iter().map(one).collect()
    } else {
        cells.iter().map(one).collect()
    }
}

/// Runs every cell of `grid`.
pub fn run_grid(
    grid: &GridSpec,
    schedule: &Schedule,
    template: &Scenario,
    ekf: &EkfParams,
    seed: RngSeed,
    opts: &EvalOptions,
) -> Result<Vec<CellOutcome>, EvalError> {
    grid.validate()?;
    run_cells(&grid.cells(), grid.rounds_per_cell, schedule, template, ekf, seed, opts)
}

/// A k-sigma confidence ellipse in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceEllipse {
    pub center: (f64, f64),
    /// Semi-major and semi-minor axis, `a >= b > 0`.
    pub semi_axes: (f64, f64),
    /// Angle of the major axis from +x, in (-pi/2, pi/2].
    pub orientation: f64,
    pub k: f64,
}

impl ConfidenceEllipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.orientation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2) <= 1.0
    }
}

/// Probability mass of a bivariate normal inside its k-sigma ellipse.
///
/// The squared Mahalanobis radius is chi-square with 2 degrees of freedom,
/// so this is `1 - exp(-k^2 / 2)`: about 0.989 for k = 3, not the 0.997 of
/// the one-dimensional three-sigma rule.
pub fn gaussian_containment(k: f64) -> f64 {
    1.0 - (-k * k / 2.0).exp()
}

/// Ellipse with semi-axes `k * sqrt(eigenvalues)` along the covariance's
/// eigenvectors.
pub fn confidence_ellipse(cov2d: &Matrix2<f64>, center: (f64, f64), k: f64) -> Result<ConfidenceEllipse, EvalError> {
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    if !(k.is_finite() && k > 0.0) || ![a, b, c, cov2d[(1, 0)]].iter().all(|v| v.is_finite()) {
        return Err(EvalError::InvalidCovariance);
    }
    if (b - cov2d[(1, 0)]).abs() > 1e-12 * a.abs().max(c.abs()).max(f64::MIN_POSITIVE) {
        return Err(EvalError::InvalidCovariance);
    }
    let mid = 0.5 * (a + c);
    let radius = (0.25 * (a - c).powi(2) + b * b).sqrt();
    let (major, minor) = (mid + radius, mid - radius);
    if major <= 0.0 || minor <= 1e-12 * major {
        if minor < -1e-12 * major.abs() {
            return Err(EvalError::InvalidCovariance);
        }
        return Err(EvalError::DegenerateEllipse { major, minor });
    }
    let mut orientation = 0.5 * (2.0 * b).atan2(a - c);
    if orientation <= -std::f64::consts::FRAC_PI_2 {
        orientation += std::f64::consts::PI;
    }
    Ok(ConfidenceEllipse { center, semi_axes: (k * major.sqrt(), k * minor.sqrt()), orientation, k })
}

/// Ellipse per cell, `None` for empty or degenerate cells.
pub fn cell_ellipses(outcomes: &[CellOutcome], k: f64) -> Vec<Option<ConfidenceEllipse>> {
    outcomes
        .iter()
        .map(|o| {
            if o.stats.empty {
                return None;
            }
            confidence_ellipse(&o.stats.cov2d, (o.stats.sample_mean.x, o.stats.sample_mean.y), k).ok()
        })
        .collect()
}

pub const CELLS_HEADER: [&str; 10] = ["x", "y", "mu_cm", "sigma_cm", "mean_x", "mean_y", "cov_xx", "cov_xy", "cov_yy", "n"];
pub const FIXES_HEADER: [&str; 7] = ["x_true", "y_true", "round", "sim_time_ps", "x", "y", "z"];
pub const ELLIPSES_HEADER: [&str; 8] = ["x", "y", "center_x", "center_y", "semi_major", "semi_minor", "orientation_rad", "k"];

/// Writes `cells.csv`, `fixes.csv` and `ellipses.csv` into `out_dir`.
/// `ellipses` is aligned with `outcomes`; `None` entries are skipped.
pub fn emit_reports(outcomes: &[CellOutcome], ellipses: &[Option<ConfidenceEllipse>], out_dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(out_dir).map_err(|e| EvalError::Io { path: out_dir.to_path_buf(), message: e.to_string() })?;

    write_csv(&out_dir.join("cells.csv"), &CELLS_HEADER, outcomes.iter().map(|o| {
        let s = &o.stats;
        vec![
            s.true_pos.x.to_string(),
            s.true_pos.y.to_string(),
            s.mean_error.to_string(),
            s.error_std.to_string(),
            s.sample_mean.x.to_string(),
            s.sample_mean.y.to_string(),
            s.cov2d[(0, 0)].to_string(),
            s.cov2d[(0, 1)].to_string(),
            s.cov2d[(1, 1)].to_string(),
            s.n.to_string(),
        ]
    }))?;

    write_csv(&out_dir.join("fixes.csv"), &FIXES_HEADER, outcomes.iter().flat_map(|o| {
        o.fixes.iter().map(move |f| {
            vec![
                o.cell.position.x.to_string(),
                o.cell.position.y.to_string(),
                f.round.to_string(),
                f.sim_time.to_string(),
                f.position.x.to_string(),
                f.position.y.to_string(),
                f.position.z.to_string(),
            ]
        })
    }))?;

    write_csv(&out_dir.join("ellipses.csv"), &ELLIPSES_HEADER, outcomes.iter().zip(ellipses).filter_map(|(o, e)| {
        e.map(|e| {
            vec![
                o.cell.position.x.to_string(),
                o.cell.position.y.to_string(),
                e.center.0.to_string(),
                e.center.1.to_string(),
                e.semi_axes.0.to_string(),
                e.semi_axes.1.to_string(),
                e.orientation.to_string(),
                e.k.to_string(),
            ]
        })
    }))
}

fn write_csv<I: IntoIterator<Item = Vec<String>>>(path: &Path, header: &[&str], rows: I) -> Result<(), EvalError> {
    let io = |message: String| EvalError::Io { path: path.to_path_buf(), message };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| io(e.to_string()))?;
    w.write_record(header).map_err(|e| io(e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io(e.to_string()))?;
    }
    w.flush().map_err(|e| io(e.to_string()))
}
