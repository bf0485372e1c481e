//! Room-frame coordinates, anchor identifiers, physical constants and the
//! seeded random streams shared by the rest of the crate.
//!
//! Everything here is a plain value type. Positions are always meters in a
//! right-handed room frame with the origin at a room corner, so every
//! coordinate of a real installation is non-negative.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum, meters per second (exact by definition of the meter).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Speed of light in meters per picosecond.
pub const SPEED_OF_LIGHT_M_PER_PS: f64 = SPEED_OF_LIGHT * 1e-12;

/// Picoseconds per millisecond.
pub const PS_PER_MS: u64 = 1_000_000_000;

/// Picoseconds per second.
pub const PS_PER_S: u64 = 1_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate in ({x}, {y}, {z})")]
    NonFinite { x: f64, y: f64, z: f64 },
}

/// A position in the room frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Builds a point, rejecting NaN and infinite components.
    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let p = Self { x, y, z };
        p.check_finite()?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn check_finite(&self) -> Result<(), GeometryError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::NonFinite { x: self.x, y: self.y, z: self.z })
        }
    }

    /// Component-wise difference `self - other`.
    pub fn sub(&self, other: &Point3) -> [f64; 3] {
        [self.x - other.x, self.y - other.y, self.z - other.z]
    }

    /// Distance to `other` without the finiteness check.
    pub fn distance_to(&self, other: &Point3) -> f64 {
        let [dx, dy, dz] = self.sub(other);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Arithmetic mean of a set of points, `None` when empty.
    pub fn centroid<'a, I: IntoIterator<Item = &'a Point3>>(points: I) -> Option<Point3> {
        let (mut sx, mut sy, mut sz, mut n) = (0.0, 0.0, 0.0, 0usize);
        for p in points {
            sx += p.x;
            sy += p.y;
            sz += p.z;
            n += 1;
        }
        (n > 0).then(|| {
            let n = n as f64;
            Point3::new(sx / n, sy / n, sz / n)
        })
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl fmt::Display for Point3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl FromStr for Point3 {
    type Err = String;

    /// Parses `x,y,z`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected x,y,z but got '{s}'"));
        }
        let mut v = [0.0; 3];
        for (slot, part) in v.iter_mut().zip(&parts) {
            *slot = part.parse::<f64>().map_err(|e| format!("bad coordinate '{part}': {e}"))?;
        }
        Point3::try_new(v[0], v[1], v[2]).map_err(|e| e.to_string())
    }
}

/// Euclidean distance between two finite points, in meters.
pub fn euclidean_distance(a: &Point3, b: &Point3) -> Result<f64, GeometryError> {
    a.check_finite()?;
    b.check_finite()?;
    Ok(a.distance_to(b))
}

/// Anchor identifier. Rendered in hex (`0x02`) to match installation labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AnchorId(pub u16);

impl fmt::Display for AnchorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:02x}", self.0)
    }
}

impl FromStr for AnchorId {
    type Err = String;

    /// Accepts `0x`-prefixed hex or plain decimal.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(hex) => u16::from_str_radix(hex, 16),
            None => s.parse::<u16>(),
        };
        parsed.map(AnchorId).map_err(|_| format!("bad anchor id '{s}'"))
    }
}

impl TryFrom<String> for AnchorId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AnchorId> for String {
    fn from(id: AnchorId) -> Self {
        id.to_string()
    }
}

/// Run seed. Every random draw in a simulation descends from one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

/// Per-link random stream.
pub type SimRng = ChaCha12Rng;

impl RngSeed {
    /// Derives an independent stream for `key`.
    ///
    /// The seed fixes the ChaCha key; the mixed `key` selects the ChaCha
    /// stream, so streams for distinct keys never overlap and do not depend
    /// on the order in which they are requested.
    pub fn stream(&self, key: &[u64]) -> SimRng {
        let mut rng = SimRng::seed_from_u64(self.0);
        let mut h = 0x243f_6a88_85a3_08d3u64;
        for &k in key {
            h = splitmix64(h ^ k);
        }
        rng.set_stream(h);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
