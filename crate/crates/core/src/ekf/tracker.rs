use nalgebra::Matrix3;

use super::{predict, solve_multilateration, update, EkfError, EkfParams, EkfState, InnovationReport, UpdateMode};
use crate::anchors::AnchorTable;
use crate::geometry::{Point3, PS_PER_S};
use crate::schedule::RoundResult;

/// Incomplete rounds to wait for a complete one before cold-starting
/// from whatever ranges arrived.
pub const COLD_START_PATIENCE: u32 = 8;

/// How the filter was initialized, when a round did that.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColdStart {
    /// Least-squares fix over the round's ranges.
    Multilateration,
    /// The solve failed; started at the centroid of the anchors.
    Centroid,
}

/// Filter output after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Fix {
    pub round_index: u64,
    /// Virtual time of the estimate, ps.
    pub sim_time: u64,
    pub position: Point3,
    pub position_cov: Matrix3<f64>,
    pub report: InnovationReport,
    pub cold_start: Option<ColdStart>,
}

impl Fix {
    pub fn variances(&self) -> [f64; 3] {
        [self.position_cov[(0, 0)], self.position_cov[(1, 1)], self.position_cov[(2, 2)]]
    }
}

/// Drives one filter instance from ranging rounds: cold start on the first
/// complete round, then time updates by virtual-time deltas and measurement
/// updates per range (sequential) or per round (batch).
///
/// A round missing some anchor is a poor basis for initialization: with the
/// low anchor lost, the ceiling anchors alone admit a mirrored solution that
/// the innovation gate would then defend. Such rounds are skipped until
/// [`COLD_START_PATIENCE`] of them have gone by.
#[derive(Debug, Clone)]
pub struct Tracker {
    anchors: AnchorTable,
    params: EkfParams,
    state: Option<EkfState>,
    t_last: u64,
    waited: u32,
}

impl Tracker {
    pub fn new(anchors: AnchorTable, params: EkfParams) -> Result<Self, EkfError> {
        params.validate()?;
        Ok(Self { anchors, params, state: None, t_last: 0, waited: 0 })
    }

    pub fn params(&self) -> &EkfParams {
        &self.params
    }

    pub fn state(&self) -> Option<&EkfState> {
        self.state.as_ref()
    }

    /// Starts the filter at `state` as of virtual time `t`.
    pub fn seed_state(&mut self, state: EkfState, t: u64) {
        self.state = Some(state);
        self.t_last = t;
    }

    /// Forgets everything; the next round cold-starts.
    pub fn reset(&mut self) {
        self.state = None;
        self.t_last = 0;
        self.waited = 0;
    }

    /// Folds one round into the estimate. `None` while still waiting for a
    /// round fit to initialize from.
    pub fn process_round(&mut self, round: &RoundResult) -> Result<Option<Fix>, EkfError> {
        let (state, report, cold_start) = match self.state {
            None => {
                let complete = round.measurements.iter().all(|m| m.is_valid());
                if !complete && self.waited < COLD_START_PATIENCE {
                    self.waited += 1;
                    return Ok(None);
                }
                self.cold_start(round)?
            }
            Some(state) => {
                let (state, report) = self.advance(state, round)?;
                (state, report, None)
            }
        };
        self.state = Some(state);
        Ok(Some(Fix {
            round_index: round.round_index,
            sim_time: self.t_last,
            position: state.position(),
            position_cov: state.position_covariance(),
            report,
            cold_start,
        }))
    }

    fn cold_start(&mut self, round: &RoundResult) -> Result<(EkfState, InnovationReport, Option<ColdStart>), EkfError> {
        let mut ranges = Vec::new();
        let mut scheduled = Vec::new();
        for m in &round.measurements {
            let a = self.anchors.get(m.anchor).ok_or(EkfError::UnknownAnchor(m.anchor))?;
            scheduled.push(a);
            if m.is_valid() {
                ranges.push((a, m.distance));
            }
        }
        self.t_last = round.t_round_end;
        match solve_multilateration(&ranges) {
            Ok(p) => Ok((EkfState::at_rest(p, &self.params), InnovationReport::default(), Some(ColdStart::Multilateration))),
            Err(_) => {
                let centroid = Point3::centroid(&scheduled).unwrap_or_default();
                let prior = EkfState::at_rest(centroid, &self.params);
                let params = EkfParams { mode: UpdateMode::Batch, ..self.params };
                let (state, report) = update(&prior, &round.measurements, &self.anchors, &params)?;
                Ok((state, report, Some(ColdStart::Centroid)))
            }
        }
    }

    fn step_to(&mut self, state: EkfState, t: u64) -> Result<EkfState, EkfError> {
        if t <= self.t_last {
            return Ok(state);
        }
        let dt = (t - self.t_last) as f64 / PS_PER_S as f64;
        self.t_last = t;
        predict(&state, dt, &self.params)
    }

    fn advance(&mut self, mut state: EkfState, round: &RoundResult) -> Result<(EkfState, InnovationReport), EkfError> {
        match self.params.mode {
            UpdateMode::Sequential => {
                let mut report = InnovationReport::default();
                for m in &round.measurements {
                    if m.is_valid() {
                        state = self.step_to(state, m.sim_time)?;
                    }
                    let (next, r) = update(&state, std::slice::from_ref(m), &self.anchors, &self.params)?;
                    state = next;
                    report.extend(r);
                }
                Ok((state, report))
            }
            UpdateMode::Batch => {
                state = self.step_to(state, round.t_round_end)?;
                update(&state, &round.measurements, &self.anchors, &self.params)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::reference_installation;
    use crate::geometry::AnchorId;
    use crate::twr::{RangeMeasurement, RangeStatus};

    const ROUND_PS: u64 = 250_000_000_000;

    fn round(index: u64, tag: Point3, lose: Option<AnchorId>) -> RoundResult {
        let table = reference_installation();
        let t0 = index * ROUND_PS;
        let measurements = table
            .iter()
            .enumerate()
            .map(|(slot, (id, a))| {
                let t = t0 + slot as u64 * 50_000_000_000 + 1_000_000_000;
                if Some(id) == lose {
                    RangeMeasurement::lost(id, t)
                } else {
                    RangeMeasurement { anchor: id, distance: a.distance_to(&tag), sim_time: t, status: RangeStatus::Ok }
                }
            })
            .collect();
        RoundResult { round_index: index, measurements, t_round_start: t0, t_round_end: t0 + ROUND_PS }
    }

    #[test]
    fn waits_for_a_complete_round() {
        let tag = Point3::new(4.0, 5.0, 1.0);
        let mut tracker = Tracker::new(reference_installation(), EkfParams::default()).unwrap();
        assert!(tracker.process_round(&round(0, tag, Some(AnchorId(0x06)))).unwrap().is_none());
        assert!(tracker.state().is_none());
        let fix = tracker.process_round(&round(1, tag, None)).unwrap().unwrap();
        assert_eq!(fix.cold_start, Some(ColdStart::Multilateration));
        assert!(fix.position.distance_to(&tag) < 1e-6);
    }

    #[test]
    fn patience_runs_out() {
        let tag = Point3::new(4.0, 5.0, 1.0);
        let mut tracker = Tracker::new(reference_installation(), EkfParams::default()).unwrap();
        let mut first = None;
        for i in 0..=u64::from(COLD_START_PATIENCE) {
            if tracker.process_round(&round(i, tag, Some(AnchorId(0x02)))).unwrap().is_some() {
                first.get_or_insert(i);
            }
        }
        assert_eq!(first, Some(u64::from(COLD_START_PATIENCE)));
    }

    #[test]
    fn reset_forgets_state() {
        let tag = Point3::new(3.0, 3.0, 1.0);
        let mut tracker = Tracker::new(reference_installation(), EkfParams::default()).unwrap();
        tracker.process_round(&round(0, tag, None)).unwrap();
        assert!(tracker.state().is_some());
        tracker.reset();
        assert!(tracker.state().is_none());
        let fix = tracker.process_round(&round(7, tag, None)).unwrap().unwrap();
        assert_eq!(fix.cold_start, Some(ColdStart::Multilateration));
    }

    #[test]
    fn follows_a_static_tag_without_drifting() {
        let tag = Point3::new(2.0, 7.0, 1.0);
        for mode in [UpdateMode::Sequential, UpdateMode::Batch] {
            let mut tracker = Tracker::new(reference_installation(), EkfParams { mode, ..Default::default() }).unwrap();
            let mut last = None;
            for i in 0..30 {
                last = tracker.process_round(&round(i, tag, None)).unwrap();
            }
            let fix = last.unwrap();
            assert!(fix.position.distance_to(&tag) < 1e-6, "{mode:?}");
            assert_eq!(fix.sim_time, if mode == UpdateMode::Batch { 30 * ROUND_PS } else { 29 * ROUND_PS + 201_000_000_000 });
        }
    }
}
