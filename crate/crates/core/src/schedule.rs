//! Round-robin ranging on a virtual clock.
//!
//! The tag polls the anchors in schedule order, one fixed-length slot per
//! anchor. A round therefore always lasts `slot_duration * anchors.len()`,
//! whatever happens on the air: a lost or late exchange simply consumes its
//! slot. Time is integer picoseconds, so timing properties hold exactly.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::anchors::AnchorTable;
use crate::channel::{ChannelError, ChannelProfile};
use crate::geometry::{AnchorId, Point3, RngSeed, SimRng, PS_PER_MS, PS_PER_S};
use crate::twr::{run_exchange, DeviceClock, ExchangeOutcome, Link, RangeMeasurement, Timebase, TwrError, DEFAULT_REPLY_TIME_PS};

pub const DEFAULT_SLOT_MS: u64 = 50;

/// Minimum slot time left after the reply delay for propagation, 1 µs
/// (about 300 m of path).
const PROPAGATION_MARGIN_PS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("schedule has no anchors")]
    Empty,
    #[error("anchor {0} appears more than once in the schedule")]
    Duplicate(AnchorId),
    #[error("slot duration must be positive")]
    ZeroSlot,
    #[error("anchor {0} is scheduled but not provisioned")]
    UnknownAnchor(AnchorId),
    #[error("reply time {reply_ps} ps does not fit in a {slot_ps} ps slot")]
    ReplyTooLong { reply_ps: u64, slot_ps: u64 },
    #[error("a session needs at least one round")]
    NoRounds,
    #[error("channel for anchor {anchor}: {source}")]
    Channel { anchor: AnchorId, source: ChannelError },
    #[error(transparent)]
    Twr(#[from] TwrError),
}

/// Ordered anchor list plus the fixed per-ranging slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    slot_duration_ps: u64,
    anchors: Vec<AnchorId>,
}

impl Schedule {
    pub fn new(slot_ms: u64, anchors: Vec<AnchorId>) -> Result<Self, ScheduleError> {
        Self::with_slot_ps(slot_ms * PS_PER_MS, anchors)
    }

    pub fn with_slot_ps(slot_duration_ps: u64, anchors: Vec<AnchorId>) -> Result<Self, ScheduleError> {
        if slot_duration_ps == 0 {
            return Err(ScheduleError::ZeroSlot);
        }
        if anchors.is_empty() {
            return Err(ScheduleError::Empty);
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = anchors.iter().find(|id| !seen.insert(**id)) {
            return Err(ScheduleError::Duplicate(*dup));
        }
        Ok(Self { slot_duration_ps, anchors })
    }

    /// Default 50 ms slots over every anchor in the table, in id order.
    pub fn for_table(table: &AnchorTable) -> Result<Self, ScheduleError> {
        Self::new(DEFAULT_SLOT_MS, table.ids())
    }

    pub fn slot_duration_ps(&self) -> u64 {
        self.slot_duration_ps
    }

    pub fn anchors(&self) -> &[AnchorId] {
        &self.anchors
    }

    pub fn round_trip_ps(&self) -> u64 {
        self.slot_duration_ps * self.anchors.len() as u64
    }

    /// Poll instants of one round starting at `t_start`.
    pub fn poll_instants(&self, t_start: u64) -> impl Iterator<Item = u64> + '_ {
        (0..self.anchors.len() as u64).map(move |k| t_start + k * self.slot_duration_ps)
    }
}

/// Where the tag really is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TagPose {
    Static(Point3),
    /// Straight-line motion from `start` at time zero, velocity in m/s.
    ConstantVelocity { start: Point3, velocity: [f64; 3] },
}

impl TagPose {
    pub fn position_at(&self, t_ps: u64) -> Point3 {
        match *self {
            TagPose::Static(p) => p,
            TagPose::ConstantVelocity { start, velocity } => {
                let t = t_ps as f64 / PS_PER_S as f64;
                Point3::new(start.x + velocity[0] * t, start.y + velocity[1] * t, start.z + velocity[2] * t)
            }
        }
    }
}

/// The simulated world: anchors, the tag, device clocks and links.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub anchors: AnchorTable,
    pub tag: TagPose,
    pub tag_clock: DeviceClock,
    /// Anchors without an entry use an ideal clock.
    pub anchor_clocks: BTreeMap<AnchorId, DeviceClock>,
    /// Link profile for anchors without an override.
    pub channel: ChannelProfile,
    pub link_channels: BTreeMap<AnchorId, ChannelProfile>,
    pub reply_time_ps: u64,
    pub timebase: Timebase,
}

impl Scenario {
    /// Static tag, ideal clocks, default line-of-sight links, 1 ms reply.
    pub fn new(anchors: AnchorTable, tag: Point3) -> Self {
        Self {
            anchors,
            tag: TagPose::Static(tag),
            tag_clock: DeviceClock::IDEAL,
            anchor_clocks: BTreeMap::new(),
            channel: ChannelProfile::LOS,
            link_channels: BTreeMap::new(),
            reply_time_ps: DEFAULT_REPLY_TIME_PS,
            timebase: Timebase::Fine,
        }
    }

    pub fn with_channel(mut self, channel: ChannelProfile) -> Self {
        self.channel = channel;
        self
    }

    pub fn channel_for(&self, id: AnchorId) -> &ChannelProfile {
        self.link_channels.get(&id).unwrap_or(&self.channel)
    }

    pub fn clock_for(&self, id: AnchorId) -> DeviceClock {
        self.anchor_clocks.get(&id).copied().unwrap_or_default()
    }

    /// Checks everything `run_round` relies on, before any exchange runs.
    pub fn validate(&self, schedule: &Schedule) -> Result<(), ScheduleError> {
        for &id in schedule.anchors() {
            if !self.anchors.contains(id) {
                return Err(ScheduleError::UnknownAnchor(id));
            }
            self.channel_for(id).validate().map_err(|source| ScheduleError::Channel { anchor: id, source })?;
        }
        if self.reply_time_ps == 0 {
            return Err(TwrError::ZeroReplyTime.into());
        }
        // worst-case global duration of the reply under the drift bound
        let reply_global = self.reply_time_ps + self.reply_time_ps / 5_000;
        if reply_global + PROPAGATION_MARGIN_PS >= schedule.slot_duration_ps() {
            return Err(ScheduleError::ReplyTooLong { reply_ps: self.reply_time_ps, slot_ps: schedule.slot_duration_ps() });
        }
        Ok(())
    }
}

/// One polling cycle over every scheduled anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub round_index: u64,
    /// One per scheduled anchor, in schedule order.
    pub measurements: Vec<RangeMeasurement>,
    pub t_round_start: u64,
    pub t_round_end: u64,
}

impl RoundResult {
    pub fn valid_count(&self) -> usize {
        self.measurements.iter().filter(|m| m.is_valid()).count()
    }
}

/// Independent random streams, one per link, keyed by `(session, anchor id)`.
#[derive(Debug, Clone)]
pub struct LinkStreams {
    streams: BTreeMap<AnchorId, SimRng>,
}

impl LinkStreams {
    pub fn new(seed: RngSeed, session_key: u64, anchors: &[AnchorId]) -> Self {
        let streams = anchors.iter().map(|&id| (id, seed.stream(&[session_key, u64::from(id.0)]))).collect();
        Self { streams }
    }

    fn get(&mut self, id: AnchorId) -> &mut SimRng {
        self.streams.entry(id).or_insert_with(|| RngSeed(0).stream(&[u64::MAX, u64::from(id.0)]))
    }
}

/// Runs one round: an exchange per anchor at `t_start + k * slot`.
pub fn run_round(
    schedule: &Schedule,
    scenario: &Scenario,
    streams: &mut LinkStreams,
    round_index: u64,
    t_start: u64,
) -> Result<RoundResult, ScheduleError> {
    scenario.validate(schedule)?;
    round_unchecked(schedule, scenario, streams, round_index, t_start)
}

fn round_unchecked(
    schedule: &Schedule,
    scenario: &Scenario,
    streams: &mut LinkStreams,
    round_index: u64,
    t_start: u64,
) -> Result<RoundResult, ScheduleError> {
    let mut measurements = Vec::with_capacity(schedule.anchors().len());
    for (&id, t_poll) in schedule.anchors().iter().zip(schedule.poll_instants(t_start)) {
        let slot_end = t_poll + schedule.slot_duration_ps();
        let anchor_pos = scenario.anchors.get(id).ok_or(ScheduleError::UnknownAnchor(id))?;
        let link = Link {
            anchor: id,
            tag_pos: scenario.tag.position_at(t_poll),
            anchor_pos,
            tag_clock: scenario.tag_clock,
            anchor_clock: scenario.clock_for(id),
            reply_time_ps: scenario.reply_time_ps,
            channel: scenario.channel_for(id),
            timebase: scenario.timebase,
        };
        let m = match run_exchange(&link, t_poll, streams.get(id))? {
            ExchangeOutcome::Completed { exchange, completed_at } if completed_at < slot_end => {
                RangeMeasurement::from_exchange(&exchange, completed_at)
            }
            // a response that misses its slot is as good as lost
            ExchangeOutcome::Completed { .. } | ExchangeOutcome::Lost => RangeMeasurement::lost(id, slot_end),
        };
        measurements.push(m);
    }
    Ok(RoundResult {
        round_index,
        measurements,
        t_round_start: t_start,
        t_round_end: t_start + schedule.round_trip_ps(),
    })
}

/// A validated batch of consecutive rounds with contiguous virtual time.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    schedule: &'a Schedule,
    scenario: &'a Scenario,
    streams: LinkStreams,
    next_round: u64,
    n_rounds: u64,
    t_next: u64,
}

impl Session<'_> {
    /// Virtual time the next round will start at.
    pub fn now_ps(&self) -> u64 {
        self.t_next
    }
}

impl Iterator for Session<'_> {
    type Item = RoundResult;

    fn next(&mut self) -> Option<RoundResult> {
        if self.next_round >= self.n_rounds {
            return None;
        }
        let round = round_unchecked(self.schedule, self.scenario, &mut self.streams, self.next_round, self.t_next)
            .expect("scenario validated when the session was created");
        self.next_round += 1;
        self.t_next = round.t_round_end;
        Some(round)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.n_rounds - self.next_round) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Session<'_> {}

/// Validates the scenario and returns an iterator over `n_rounds` rounds
/// starting at virtual time zero. Rounds are deterministic in
/// `(seed, session_key)`.
pub fn run_session<'a>(
    schedule: &'a Schedule,
    scenario: &'a Scenario,
    seed: RngSeed,
    session_key: u64,
    n_rounds: u64,
) -> Result<Session<'a>, ScheduleError> {
    if n_rounds == 0 {
        return Err(ScheduleError::NoRounds);
    }
    scenario.validate(schedule)?;
    for &id in schedule.anchors() {
        scenario.anchors.get(id).expect("validated").check_finite().map_err(TwrError::from)?;
    }
    Ok(Session {
        schedule,
        scenario,
        streams: LinkStreams::new(seed, session_key, schedule.anchors()),
        next_round: 0,
        n_rounds,
        t_next: 0,
    })
}
