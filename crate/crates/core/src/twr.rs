//! Single-sided two-way ranging.
//!
//! The tag sends a poll, the anchor answers after a fixed reply delay, and
//! the tag recovers the time of flight from four timestamps:
//!
//! ```text
//!   tag                      anchor
//!    | t_send_poll  ---->      |
//!    |                         | t_receive_poll
//!    |                         | t_send_response
//!    | t_receive_response <--- |
//!
//!   tof = ((t_receive_response - t_send_poll) - (t_send_response - t_receive_poll)) / 2
//! ```
//!
//! Each device stamps events with its own [`DeviceClock`]; the forward
//! simulator in [`run_exchange`] places the events on global simulation time
//! and reads them through those clocks. Clock offsets cancel exactly. Drift
//! does not: a relative frequency error `e` between tag and anchor biases the
//! measured TOF by about `e * reply_time / 2`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{perturb_path, ChannelProfile, PathOutcome};
use crate::geometry::{AnchorId, GeometryError, Point3, SPEED_OF_LIGHT_M_PER_PS};

/// Default anchor reply delay: 1 ms.
pub const DEFAULT_REPLY_TIME_PS: u64 = 1_000_000_000;

/// Default bound on crystal frequency error.
pub const MAX_DRIFT_PPM: f64 = 100.0;

/// Exchanges with a TOF below this are rejected outright, in picoseconds.
pub const IMPLAUSIBLE_TOF_PS: f64 = -1000.0;

/// Timestamp resolution of the DW1000/DW3000 device time counter,
/// 1 / (128 * 499.2 MHz), in picoseconds.
pub const DW_TICK_PS: f64 = 1e12 / (128.0 * 499.2e6);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TwrError {
    #[error("malformed exchange with anchor {anchor}: {reason}")]
    Malformed { anchor: AnchorId, reason: &'static str },
    #[error("implausible exchange with anchor {anchor}: tof {tof_ps} ps")]
    Implausible { anchor: AnchorId, tof_ps: f64 },
    #[error("clock drift {drift_ppm} ppm exceeds the +/-{limit_ppm} ppm bound")]
    DriftOutOfRange { drift_ppm: f64, limit_ppm: f64 },
    #[error("reply time must be positive")]
    ZeroReplyTime,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Timestamp quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timebase {
    /// 1 ps quantum.
    #[default]
    Fine,
    /// The radio's native ~15.65 ps tick.
    Coarse,
}

impl Timebase {
    pub fn quantum_ps(self) -> f64 {
        match self {
            Timebase::Fine => 1.0,
            Timebase::Coarse => DW_TICK_PS,
        }
    }
}

/// A free-running device clock with a fixed phase offset and frequency error.
///
/// Local time is `offset + t * (1 + drift_ppm * 1e-6)` for global time `t`,
/// so a positive `drift_ppm` is a clock that runs fast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceClock {
    offset_ps: u64,
    drift_ppm: f64,
}

/// A quantized clock reading plus how far the quantized value sits above
/// the exact local time.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Reading {
    stamp: u64,
    residual: f64,
}

impl DeviceClock {
    pub const IDEAL: DeviceClock = DeviceClock { offset_ps: 0, drift_ppm: 0.0 };

    pub fn new(offset_ps: u64, drift_ppm: f64) -> Result<Self, TwrError> {
        Self::with_limit(offset_ps, drift_ppm, MAX_DRIFT_PPM)
    }

    pub fn with_limit(offset_ps: u64, drift_ppm: f64, limit_ppm: f64) -> Result<Self, TwrError> {
        if !drift_ppm.is_finite() || drift_ppm.abs() > limit_ppm || limit_ppm >= 1e6 {
            return Err(TwrError::DriftOutOfRange { drift_ppm, limit_ppm });
        }
        Ok(Self { offset_ps, drift_ppm })
    }

    pub fn offset_ps(&self) -> u64 {
        self.offset_ps
    }

    pub fn drift_ppm(&self) -> f64 {
        self.drift_ppm
    }

    /// Local ticks per global tick.
    pub fn rate(&self) -> f64 {
        1.0 + self.drift_ppm * 1e-6
    }

    /// Reads the clock at an integer global instant, 1 ps quantum.
    pub fn read(&self, t_global_ps: u64) -> u64 {
        self.reading(t_global_ps, 0.0, Timebase::Fine).stamp
    }

    /// Reads the clock at `base + delta` global picoseconds. `base` is kept
    /// as an integer so long simulations lose no precision; `delta` is the
    /// sub-slot offset.
    fn reading(&self, base: u64, delta: f64, timebase: Timebase) -> Reading {
        let frac = delta + self.drift_ppm * 1e-6 * (base as f64 + delta);
        let whole = self.offset_ps as i128 + base as i128;
        match timebase {
            Timebase::Fine => {
                let r = frac.round();
                Reading { stamp: (whole + r as i128) as u64, residual: r - frac }
            }
            Timebase::Coarse => {
                let exact = whole as f64 + frac;
                let stamp = quantize_coarse(exact);
                Reading { stamp, residual: (stamp as i128 - whole) as f64 - frac }
            }
        }
    }
}

impl Default for DeviceClock {
    fn default() -> Self {
        Self::IDEAL
    }
}

fn quantize_coarse(ps: f64) -> u64 {
    ((ps / DW_TICK_PS).round() * DW_TICK_PS).round() as u64
}

/// The four timestamps of one poll/response handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwrExchange {
    pub anchor: AnchorId,
    /// Tag clock.
    pub t_send_poll: u64,
    /// Anchor clock.
    pub t_receive_poll: u64,
    /// Anchor clock.
    pub t_send_response: u64,
    /// Tag clock.
    pub t_receive_response: u64,
}

impl TwrExchange {
    pub fn round_trip_ps(&self) -> i128 {
        self.t_receive_response as i128 - self.t_send_poll as i128
    }

    pub fn reply_ps(&self) -> i128 {
        self.t_send_response as i128 - self.t_receive_poll as i128
    }

    /// `(round trip - reply) / 2` with no ordering or plausibility checks.
    /// Large clock drift can push this far below zero.
    pub fn raw_tof_ps(&self) -> f64 {
        (self.round_trip_ps() - self.reply_ps()) as f64 / 2.0
    }
}

/// Time of flight in picoseconds recovered from an exchange.
///
/// Small negative values (down to -1 ns) are returned as-is; the caller
/// decides whether to use them.
pub fn compute_tof(ex: &TwrExchange) -> Result<f64, TwrError> {
    if ex.t_receive_response <= ex.t_send_poll {
        return Err(TwrError::Malformed { anchor: ex.anchor, reason: "response received before poll was sent" });
    }
    if ex.t_send_response <= ex.t_receive_poll {
        return Err(TwrError::Malformed { anchor: ex.anchor, reason: "response sent before poll was received" });
    }
    let tof_ps = ex.raw_tof_ps();
    if tof_ps < IMPLAUSIBLE_TOF_PS {
        return Err(TwrError::Implausible { anchor: ex.anchor, tof_ps });
    }
    Ok(tof_ps)
}

pub fn tof_to_distance(tof_ps: f64) -> f64 {
    tof_ps * SPEED_OF_LIGHT_M_PER_PS
}

/// Why a measurement is (in)valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeStatus {
    Ok,
    /// Poll or response dropped by the channel.
    Lost,
    /// TOF in [-1 ns, 0).
    NegativeTof,
    /// TOF below -1 ns.
    Implausible,
    Malformed,
}

impl RangeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RangeStatus::Ok => "ok",
            RangeStatus::Lost => "lost",
            RangeStatus::NegativeTof => "negative-tof",
            RangeStatus::Implausible => "implausible",
            RangeStatus::Malformed => "malformed",
        }
    }
}

/// One anchor-to-tag distance estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeMeasurement {
    pub anchor: AnchorId,
    /// Meters. Meaningful only when [`is_valid`](Self::is_valid).
    pub distance: f64,
    /// Global simulation time at completion, picoseconds.
    pub sim_time: u64,
    pub status: RangeStatus,
}

impl RangeMeasurement {
    pub fn lost(anchor: AnchorId, sim_time: u64) -> Self {
        Self { anchor, distance: f64::NAN, sim_time, status: RangeStatus::Lost }
    }

    /// Converts a completed exchange into a range, flagging negative and
    /// malformed exchanges rather than clamping them.
    pub fn from_exchange(ex: &TwrExchange, sim_time: u64) -> Self {
        let (distance, status) = match compute_tof(ex) {
            Ok(tof) if tof >= 0.0 => (tof_to_distance(tof), RangeStatus::Ok),
            Ok(tof) => (tof_to_distance(tof), RangeStatus::NegativeTof),
            Err(TwrError::Implausible { tof_ps, .. }) => (tof_to_distance(tof_ps), RangeStatus::Implausible),
            Err(_) => (f64::NAN, RangeStatus::Malformed),
        };
        Self { anchor: ex.anchor, distance, sim_time, status }
    }

    pub fn is_valid(&self) -> bool {
        self.status == RangeStatus::Ok && self.distance.is_finite() && self.distance >= 0.0
    }
}

/// Everything needed to simulate one tag/anchor handshake.
#[derive(Debug, Clone, Copy)]
pub struct Link<'a> {
    pub anchor: AnchorId,
    pub tag_pos: Point3,
    pub anchor_pos: Point3,
    pub tag_clock: DeviceClock,
    pub anchor_clock: DeviceClock,
    /// Anchor-side reply delay in anchor clock picoseconds.
    pub reply_time_ps: u64,
    pub channel: &'a ChannelProfile,
    pub timebase: Timebase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExchangeOutcome {
    Completed {
        exchange: TwrExchange,
        /// Global time the response arrived, picoseconds (rounded up).
        completed_at: u64,
    },
    Lost,
}

/// Forward-simulates one handshake starting at global time `t_start`.
///
/// The poll leaves the tag at `t_start`. The anchor schedules its response
/// `reply_time_ps` after its own receive timestamp, on its own clock.
pub fn run_exchange<R: Rng + ?Sized>(link: &Link<'_>, t_start: u64, rng: &mut R) -> Result<ExchangeOutcome, TwrError> {
    if link.reply_time_ps == 0 {
        return Err(TwrError::ZeroReplyTime);
    }
    let true_distance = crate::geometry::euclidean_distance(&link.tag_pos, &link.anchor_pos)?;

    let (poll_path, response_path) = if link.channel.asymmetric {
        let poll = perturb_path(true_distance, link.channel, rng);
        let response = perturb_path(true_distance, link.channel, rng);
        (poll, response)
    } else {
        let both = perturb_path(true_distance, link.channel, rng);
        (both, both)
    };
    let (poll_path, response_path) = match (poll_path, response_path) {
        (PathOutcome::Delivered(p), PathOutcome::Delivered(r)) => (p, r),
        _ => return Ok(ExchangeOutcome::Lost),
    };
    let poll_delay = poll_path / SPEED_OF_LIGHT_M_PER_PS;
    let response_delay = response_path / SPEED_OF_LIGHT_M_PER_PS;

    let tb = link.timebase;
    let send_poll = link.tag_clock.reading(t_start, 0.0, tb);
    // The poll leaves when the tag's clock shows `send_poll`, not at the
    // exact global instant; shift by the quantization residual.
    let tx0 = send_poll.residual / link.tag_clock.rate();
    let rx_at = tx0 + poll_delay;
    let receive_poll = link.anchor_clock.reading(t_start, rx_at, tb);

    let target = receive_poll.stamp + link.reply_time_ps;
    let send_response = match tb {
        Timebase::Fine => target,
        Timebase::Coarse => quantize_coarse(target as f64),
    };
    let tx_at = rx_at + (send_response as f64 - receive_poll.stamp as f64 + receive_poll.residual) / link.anchor_clock.rate();
    let arrive_at = tx_at + response_delay;
    let receive_response = link.tag_clock.reading(t_start, arrive_at, tb);

    Ok(ExchangeOutcome::Completed {
        exchange: TwrExchange {
            anchor: link.anchor,
            t_send_poll: send_poll.stamp,
            t_receive_poll: receive_poll.stamp,
            t_send_response: send_response,
            t_receive_response: receive_response.stamp,
        },
        completed_at: t_start + arrive_at.ceil() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RngSeed, SimRng};
    use proptest::prelude::*;

    fn rng() -> SimRng {
        RngSeed(11).stream(&[3])
    }

    fn link(tag: Point3, anchor: Point3, channel: &ChannelProfile) -> Link<'_> {
        Link {
            anchor: AnchorId(2),
            tag_pos: tag,
            anchor_pos: anchor,
            tag_clock: DeviceClock::IDEAL,
            anchor_clock: DeviceClock::IDEAL,
            reply_time_ps: DEFAULT_REPLY_TIME_PS,
            channel,
            timebase: Timebase::Fine,
        }
    }

    fn measured(link: &Link<'_>, t_start: u64) -> (TwrExchange, f64) {
        match run_exchange(link, t_start, &mut rng()).unwrap() {
            ExchangeOutcome::Completed { exchange, .. } => (exchange, compute_tof(&exchange).unwrap()),
            ExchangeOutcome::Lost => panic!("lost on a lossless channel"),
        }
    }

    #[test]
    fn equal_round_trip_and_reply_is_zero_tof() {
        let ex = TwrExchange {
            anchor: AnchorId(2),
            t_send_poll: 5_000,
            t_receive_poll: 90_000,
            t_send_response: 91_000,
            t_receive_response: 6_000,
        };
        assert_eq!(compute_tof(&ex).unwrap(), 0.0);
    }

    #[test]
    fn malformed_orderings() {
        let ok = TwrExchange { anchor: AnchorId(3), t_send_poll: 10, t_receive_poll: 10, t_send_response: 20, t_receive_response: 30 };
        assert!(compute_tof(&ok).is_ok());
        let late_poll = TwrExchange { t_receive_response: 10, ..ok };
        assert!(matches!(compute_tof(&late_poll), Err(TwrError::Malformed { .. })));
        let early_reply = TwrExchange { t_send_response: 10, ..ok };
        assert!(matches!(compute_tof(&early_reply), Err(TwrError::Malformed { .. })));
    }

    #[test]
    fn implausible_and_negative_tof() {
        // round trip 1000, reply 4000 -> tof -1500 ps
        let ex = TwrExchange { anchor: AnchorId(3), t_send_poll: 0, t_receive_poll: 0, t_send_response: 4000, t_receive_response: 1000 };
        assert!(matches!(compute_tof(&ex), Err(TwrError::Implausible { .. })));
        assert_eq!(RangeMeasurement::from_exchange(&ex, 0).status, RangeStatus::Implausible);
        // round trip 1000, reply 1400 -> tof -200 ps
        let ex = TwrExchange { t_send_response: 1400, ..ex };
        assert_eq!(compute_tof(&ex).unwrap(), -200.0);
        let m = RangeMeasurement::from_exchange(&ex, 0);
        assert_eq!(m.status, RangeStatus::NegativeTof);
        assert!(!m.is_valid());
        assert!(m.distance < 0.0);
    }

    #[test]
    fn tof_to_distance_examples() {
        assert_eq!(tof_to_distance(0.0), 0.0);
        assert!((tof_to_distance(9173.0) - 2.75).abs() < 2e-4);
        assert!((tof_to_distance(33_356.0) - 10.0).abs() < 1e-3);
    }

    #[test]
    fn table_anchor_spacing_recovered() {
        let a = Point3::new(0.81, 3.63, 3.01);
        let b = Point3::new(0.81, 6.38, 3.01);
        let (_, tof) = measured(&link(a, b, &ChannelProfile::IDEAL), 0);
        // 2.75 m / c = 9173.03 ps
        assert!((tof - 9173.03).abs() <= 1.0, "{tof}");
    }

    #[test]
    fn colocated_devices_have_zero_tof() {
        let p = Point3::new(1.0, 1.0, 1.0);
        let (_, tof) = measured(&link(p, p, &ChannelProfile::IDEAL), 123_456);
        assert!(tof.abs() <= 1.0, "{tof}");
    }

    #[test]
    fn five_meter_round_trip() {
        let (_, tof) = measured(&link(Point3::ORIGIN, Point3::new(3.0, 4.0, 0.0), &ChannelProfile::IDEAL), 7 * DEFAULT_REPLY_TIME_PS);
        assert!((tof_to_distance(tof) - 5.0).abs() < 1e-3);
    }

    #[test]
    fn certain_loss_is_always_lost() {
        let channel = ChannelProfile { loss_prob: 1.0, ..ChannelProfile::IDEAL };
        let l = link(Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0), &channel);
        let mut r = rng();
        for k in 0..100 {
            assert_eq!(run_exchange(&l, k * 1000, &mut r).unwrap(), ExchangeOutcome::Lost);
        }
        let asym = ChannelProfile { asymmetric: true, ..channel };
        let l = link(Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0), &asym);
        assert_eq!(run_exchange(&l, 0, &mut r).unwrap(), ExchangeOutcome::Lost);
    }

    #[test]
    fn zero_reply_time_rejected() {
        let mut l = link(Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0), &ChannelProfile::IDEAL);
        l.reply_time_ps = 0;
        assert_eq!(run_exchange(&l, 0, &mut rng()), Err(TwrError::ZeroReplyTime));
    }

    #[test]
    fn clock_offsets_cancel() {
        let mut l = link(Point3::ORIGIN, Point3::new(2.0, 0.0, 0.0), &ChannelProfile::IDEAL);
        l.tag_clock = DeviceClock::new(987_654_321_000, 0.0).unwrap();
        l.anchor_clock = DeviceClock::new(17, 0.0).unwrap();
        let (ex, tof) = measured(&l, 42);
        assert!(ex.t_send_poll > ex.t_receive_poll);
        assert!((tof_to_distance(tof) - 2.0).abs() < 5e-4);
    }

    /// Closed-form single-sided bias against the forward simulation, tag and
    /// anchor separately. A fast tag clock stretches the measured round
    /// trip (positive bias); a fast anchor clock shortens the true reply
    /// interval (negative bias).
    #[test]
    fn drift_bias_closed_form() {
        let anchor = Point3::new(0.81, 6.38, 3.01);
        let tag = Point3::new(0.81, 3.63, 3.01);
        let tau = tag.distance_to(&anchor) / SPEED_OF_LIGHT_M_PER_PS;
        let reply = DEFAULT_REPLY_TIME_PS as f64;

        let mut l = link(tag, anchor, &ChannelProfile::IDEAL);
        l.tag_clock = DeviceClock::new(0, 10.0).unwrap();
        let (_, tof) = measured(&l, 0);
        assert!((tof - (tau + 10e-6 * reply / 2.0)).abs() < 1.0, "tag drift: {} vs {}", tof, tau + 5000.0);

        let mut l = link(tag, anchor, &ChannelProfile::IDEAL);
        l.anchor_clock = DeviceClock::new(0, 10.0).unwrap();
        let (_, tof) = measured(&l, 0);
        assert!((tof - (tau - 10e-6 * reply / 2.0)).abs() < 1.0, "anchor drift: {} vs {}", tof, tau - 5000.0);
    }

    #[test]
    fn coarse_timebase_quantizes_and_stays_close() {
        let mut l = link(Point3::ORIGIN, Point3::new(5.0, 1.0, 2.0), &ChannelProfile::IDEAL);
        l.timebase = Timebase::Coarse;
        let (ex, tof) = measured(&l, 1_000_000);
        for ts in [ex.t_send_poll, ex.t_receive_poll, ex.t_send_response, ex.t_receive_response] {
            let ticks = ts as f64 / DW_TICK_PS;
            assert!((ticks - ticks.round()).abs() * DW_TICK_PS <= 0.5 + 1e-6);
        }
        let truth = l.tag_pos.distance_to(&l.anchor_pos);
        assert!((tof_to_distance(tof) - truth).abs() < 2.0 * DW_TICK_PS * SPEED_OF_LIGHT_M_PER_PS);
    }

    #[test]
    fn drift_bound() {
        assert!(DeviceClock::new(0, 100.0).is_ok());
        assert!(DeviceClock::new(0, -100.5).is_err());
        assert!(DeviceClock::with_limit(0, 250.0, 500.0).is_ok());
        assert!(DeviceClock::new(0, f64::NAN).is_err());
    }

    fn room_point() -> impl Strategy<Value = Point3> {
        (0.0..10.0f64, 0.0..8.0f64, 0.0..3.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn round_trip_identity(tag in room_point(), anchor in room_point(),
                               reply in 1_000u64..10_000_000_000, t0 in 0u64..1_000_000_000_000_000) {
            let mut l = link(tag, anchor, &ChannelProfile::IDEAL);
            l.reply_time_ps = reply;
            let (_, tof) = measured(&l, t0);
            let err = (tof_to_distance(tof) - tag.distance_to(&anchor)).abs();
            prop_assert!(err < 5e-4, "err {} m", err);
        }

        #[test]
        fn reply_time_independence(tag in room_point(), anchor in room_point(),
                                   r1 in 1_000u64..10_000_000_000, r2 in 1_000u64..10_000_000_000) {
            let mut a = link(tag, anchor, &ChannelProfile::IDEAL);
            a.reply_time_ps = r1;
            let mut b = a;
            b.reply_time_ps = r2;
            let (_, t1) = measured(&a, 0);
            let (_, t2) = measured(&b, 0);
            prop_assert!((t1 - t2).abs() <= 1.0);
        }

        /// Readings never go backwards; two quanta apart they strictly increase.
        #[test]
        fn clock_is_monotone(offset in 0u64..1_000_000_000, drift in -100.0..100.0f64, t in 0u64..1_000_000_000_000_000) {
            let c = DeviceClock::new(offset, drift).unwrap();
            prop_assert!(c.read(t + 1) >= c.read(t));
            prop_assert!(c.read(t + 2) > c.read(t));
        }
    }
}
