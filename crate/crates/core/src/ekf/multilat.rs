//! Batch position fix by Gauss-Newton least squares on range residuals.
//!
//! Independent of the filter: it carries its own residual and gradient code
//! and is used to cold-start the tracker and as a reference solution in
//! tests.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Point3;

const MAX_ITERATIONS: usize = 100;
const STEP_TOL: f64 = 1e-12;
/// Relative singular-value floor below which the anchor spread is treated
/// as having lost a dimension.
const RANK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MultilatError {
    #[error("anchor geometry has affine rank {rank}; a 3-D fix needs 4 non-coplanar anchors")]
    RankDeficient { rank: usize },
    #[error("no fix: Gauss-Newton did not converge in {MAX_ITERATIONS} iterations")]
    NoFix,
    #[error("non-finite anchor position or range")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultilatFix {
    pub position: Point3,
    /// Root-mean-square range residual at the solution, m.
    pub rms_residual: f64,
    pub iterations: usize,
}

/// Least-squares position from `(anchor, range)` pairs.
///
/// Installations often mount most anchors near the ceiling, which leaves a
/// spurious local minimum on the far side of that plane. The solve is
/// therefore started from the anchor centroid and from the bottom and top of
/// the anchors' height span; the lowest-cost fix wins.
pub fn solve_multilateration(ranges: &[(Point3, f64)]) -> Result<Point3, MultilatError> {
    let centroid = Point3::centroid(ranges.iter().map(|(a, _)| a)).unwrap_or_default();
    let (lo, hi) = ranges.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, _)| (lo.min(a.z), hi.max(a.z)));
    let mut best: Option<MultilatFix> = None;
    for z in [centroid.z, lo, hi] {
        let start = Point3::new(centroid.x, centroid.y, if z.is_finite() { z } else { centroid.z });
        let fix = solve_multilateration_from(ranges, start)?;
        if best.map_or(true, |b| fix.rms_residual < b.rms_residual) {
            best = Some(fix);
        }
    }
    best.map(|f| f.position).ok_or(MultilatError::NoFix)
}

/// Least-squares position from an explicit starting point.
pub fn solve_multilateration_from(ranges: &[(Point3, f64)], start: Point3) -> Result<MultilatFix, MultilatError> {
    if ranges.iter().any(|(a, r)| !a.is_finite() || !r.is_finite()) || !start.is_finite() {
        return Err(MultilatError::NonFinite);
    }
    let anchors: Vec<Point3> = ranges.iter().map(|(a, _)| *a).collect();
    let rank = affine_rank(&anchors);
    if rank < 3 {
        return Err(MultilatError::RankDeficient { rank });
    }

    let mut p = Vector3::new(start.x, start.y, start.z);
    let mut cost = cost_at(ranges, &p);
    for iteration in 1..=MAX_ITERATIONS {
        let (jtj, jtr) = normal_equations(ranges, &p);
        let Some(step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else {
            return Err(MultilatError::NoFix);
        };
        // backtrack until the cost does not increase
        let mut scale = 1.0;
        let mut candidate = p + step;
        let mut candidate_cost = cost_at(ranges, &candidate);
        while candidate_cost > cost && scale > 1e-6 {
            scale *= 0.5;
            candidate = p + step * scale;
            candidate_cost = cost_at(ranges, &candidate);
        }
        let moved = (candidate - p).norm();
        let descended = candidate_cost <= cost;
        if descended {
            p = candidate;
            cost = candidate_cost;
        }
        if !descended || moved <= STEP_TOL * (1.0 + p.norm()) {
            return Ok(MultilatFix {
                position: Point3::new(p.x, p.y, p.z),
                rms_residual: (cost / ranges.len() as f64).sqrt(),
                iterations: iteration,
            });
        }
    }
    Err(MultilatError::NoFix)
}

fn cost_at(ranges: &[(Point3, f64)], p: &Vector3<f64>) -> f64 {
    ranges
        .iter()
        .map(|(a, r)| {
            let d = (Vector3::new(a.x, a.y, a.z) - p).norm();
            (d - r).powi(2)
        })
        .sum()
}

/// `J^T J` and `J^T r` for residuals `|p - a_i| - r_i`.
fn normal_equations(ranges: &[(Point3, f64)], p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (a, r) in ranges {
        let diff = p - Vector3::new(a.x, a.y, a.z);
        let d = diff.norm();
        // at an anchor the gradient is undefined; that residual contributes nothing this step
        if d < 1e-12 {
            continue;
        }
        let g = diff / d;
        jtj += g * g.transpose();
        jtr += g * (d - r);
    }
    (jtj, jtr)
}

/// Dimension of the affine hull of `points` (0 to 3). A unique 3-D fix
/// needs 3.
pub fn affine_rank(points: &[Point3]) -> usize {
    let Some(c) = Point3::centroid(points) else {
        return 0;
    };
    let mut scatter = Matrix3::zeros();
    for a in points {
        let v = Vector3::new(a.x - c.x, a.y - c.y, a.z - c.z);
        scatter += v * v.transpose();
    }
    let sv = scatter.symmetric_eigenvalues().map(|e| e.max(0.0).sqrt());
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}
