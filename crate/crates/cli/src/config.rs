//! Scenario file format and its resolution into simulator inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use uwbsim_core::eval::{AxisRange, ErrorDims, ErrorMetric, EvalOptions, GridSpec};
use uwbsim_core::schedule::DEFAULT_SLOT_MS;
use uwbsim_core::twr::DEFAULT_REPLY_TIME_PS;
use uwbsim_core::{
    load, AnchorId, AnchorTable, ChannelProfile, DeviceClock, EkfParams, Point3, RngSeed, Scenario, Schedule, TagPose, Timebase,
};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Relative paths resolve against the scenario file's directory.
    pub anchor_file: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    /// Channel profile keys plus an optional `links` table of per-anchor
    /// overrides layered on top.
    #[serde(default)]
    pub channel: toml::Table,
    #[serde(default)]
    pub ekf: EkfParams,
    #[serde(default)]
    pub clocks: ClockSection,
    #[serde(default)]
    pub tag: TagSection,
    #[serde(default)]
    pub grid: GridSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub slot_ms: Option<u64>,
    /// Polling order; defaults to every provisioned anchor in id order.
    pub order: Option<Vec<AnchorId>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSection {
    pub reply_time_ms: Option<f64>,
    pub timebase: Option<Timebase>,
    #[serde(default)]
    pub tag: ClockSpec,
    #[serde(default)]
    pub anchors: BTreeMap<AnchorId, ClockSpec>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockSpec {
    pub offset_ps: u64,
    pub drift_ppm: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagSection {
    pub position: Option<[f64; 3]>,
    /// m/s; a non-zero velocity moves the tag during `range` and `localize`.
    pub velocity: Option<[f64; 3]>,
    pub rounds: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub x: Option<AxisRange>,
    pub y: Option<AxisRange>,
    pub z_tag: Option<f64>,
    pub rounds_per_cell: Option<u64>,
    pub metric: Option<ErrorMetric>,
    pub dims: Option<ErrorDims>,
    pub parallel: Option<bool>,
    /// Sigma multiplier of the reported confidence ellipses.
    pub ellipse_k: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub anchors: Option<PathBuf>,
    pub seed: Option<u64>,
    pub slot_ms: Option<u64>,
    pub rounds: Option<u64>,
    pub tag: Option<Point3>,
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(file), Some(dir)) = (&config.anchor_file, path.parent()) {
            if file.is_relative() {
                config.anchor_file = Some(dir.join(file));
            }
        }
        Ok(config)
    }

    pub fn anchor_path(&self, overrides: &Overrides) -> Result<PathBuf, CliError> {
        overrides
            .anchors
            .clone()
            .or_else(|| self.anchor_file.clone())
            .ok_or_else(|| CliError::Config("no anchor file: pass --anchors or set anchor_file".into()))
    }

    /// Channel for links without an override, and the per-link profiles.
    fn channels(&self) -> Result<(ChannelProfile, BTreeMap<AnchorId, ChannelProfile>), CliError> {
        let mut base = self.channel.clone();
        let links = base.remove("links");
        let merged = layer(defaults_table(), &base);
        let profile = to_profile(&merged, "[channel]")?;
        let mut per_link = BTreeMap::new();
        if let Some(links) = links {
            let toml::Value::Table(links) = links else {
                return Err(CliError::Config("[channel.links] must be a table keyed by anchor id".into()));
            };
            for (key, value) in links {
                let id: AnchorId = key.parse().map_err(|e| CliError::Config(format!("[channel.links]: {e}")))?;
                let toml::Value::Table(link) = value else {
                    return Err(CliError::Config(format!("[channel.links.\"{key}\"] must be a table")));
                };
                per_link.insert(id, to_profile(&layer(merged.clone(), &link), &format!("[channel.links.\"{key}\"]"))?);
            }
        }
        Ok((profile, per_link))
    }

    /// Validates everything and builds the simulator inputs.
    pub fn resolve(&self, overrides: &Overrides) -> Result<Resolved, CliError> {
        let anchor_path = self.anchor_path(overrides)?;
        let table = load(&anchor_path)?;
        let slot_ms = overrides.slot_ms.or(self.schedule.slot_ms).unwrap_or(DEFAULT_SLOT_MS);
        let order = self.schedule.order.clone().unwrap_or_else(|| table.ids());
        let schedule = Schedule::new(slot_ms, order).map_err(|e| CliError::Config(e.to_string()))?;

        let (channel, link_channels) = self.channels()?;
        let tag = overrides.tag.or(self.tag.position.map(Point3::from));
        let mut scenario = Scenario::new(table.clone(), tag.unwrap_or_default()).with_channel(channel);
        scenario.link_channels = link_channels;
        if let (Some(start), Some(velocity)) = (tag, self.tag.velocity) {
            scenario.tag = TagPose::ConstantVelocity { start, velocity };
        }
        scenario.tag_clock = clock(self.clocks.tag, "tag")?;
        for (id, spec) in &self.clocks.anchors {
            if !table.contains(*id) {
                return Err(CliError::Config(format!("[clocks.anchors]: anchor {id} is not provisioned")));
            }
            scenario.anchor_clocks.insert(*id, clock(*spec, &id.to_string())?);
        }
        if let Some(ms) = self.clocks.reply_time_ms {
            if !(ms.is_finite() && ms > 0.0) {
                return Err(CliError::Config(format!("reply_time_ms must be positive, got {ms}")));
            }
            scenario.reply_time_ps = (ms * 1e9).round() as u64;
        } else {
            scenario.reply_time_ps = DEFAULT_REPLY_TIME_PS;
        }
        scenario.timebase = self.clocks.timebase.unwrap_or_default();
        scenario.validate(&schedule).map_err(|e| CliError::Config(e.to_string()))?;
        self.ekf.validate().map_err(|e| CliError::Config(format!("[ekf]: {e}")))?;

        let default_grid = GridSpec::default();
        let mut grid = GridSpec {
            x: self.grid.x.unwrap_or(default_grid.x),
            y: self.grid.y.unwrap_or(default_grid.y),
            z_tag: self.grid.z_tag.unwrap_or(default_grid.z_tag),
            rounds_per_cell: self.grid.rounds_per_cell.unwrap_or(default_grid.rounds_per_cell),
        };
        grid.validate().map_err(|e| CliError::Config(format!("[grid]: {e}")))?;
        // --rounds is checked by grid-eval itself, so `range --rounds 1` stays valid
        if let Some(rounds) = overrides.rounds {
            grid.rounds_per_cell = rounds;
        }
        let ellipse_k = self.grid.ellipse_k.unwrap_or(3.0);
        if !(ellipse_k.is_finite() && ellipse_k > 0.0) {
            return Err(CliError::Config(format!("[grid]: ellipse_k must be positive, got {ellipse_k}")));
        }
        let eval = EvalOptions {
            metric: self.grid.metric.unwrap_or_default(),
            dims: self.grid.dims.unwrap_or_default(),
            parallel: self.grid.parallel.unwrap_or(true),
        };
        let rounds = overrides.rounds.or(self.tag.rounds).unwrap_or(DEFAULT_ROUNDS);
        if rounds == 0 {
            return Err(CliError::Config("rounds must be at least 1".into()));
        }

        Ok(Resolved {
            table,
            schedule,
            scenario,
            tag,
            ekf: self.ekf,
            seed: RngSeed(overrides.seed.or(self.seed).unwrap_or(0)),
            rounds,
            grid,
            eval,
            ellipse_k,
        })
    }
}

pub const DEFAULT_ROUNDS: u64 = 20;

/// Validated inputs for one invocation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub table: AnchorTable,
    pub schedule: Schedule,
    pub scenario: Scenario,
    /// Tag start position, when one was given.
    pub tag: Option<Point3>,
    pub ekf: EkfParams,
    pub seed: RngSeed,
    pub rounds: u64,
    pub grid: GridSpec,
    pub eval: EvalOptions,
    pub ellipse_k: f64,
}

fn clock(spec: ClockSpec, who: &str) -> Result<DeviceClock, CliError> {
    DeviceClock::new(spec.offset_ps, spec.drift_ppm).map_err(|e| CliError::Config(format!("[clocks] {who}: {e}")))
}

fn defaults_table() -> toml::Table {
    toml::Table::try_from(ChannelProfile::default()).expect("channel profile serializes to a table")
}

fn layer(mut base: toml::Table, over: &toml::Table) -> toml::Table {
    for (k, v) in over {
        base.insert(k.clone(), v.clone());
    }
    base
}

fn to_profile(table: &toml::Table, section: &str) -> Result<ChannelProfile, CliError> {
    let profile: ChannelProfile =
        toml::Value::Table(table.clone()).try_into().map_err(|e| CliError::Config(format!("{section}: {e}")))?;
    profile.validate().map_err(|e| CliError::Config(format!("{section}: {e}")))?;
    Ok(profile)
}
