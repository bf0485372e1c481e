//! Anchor provisioning and persistence.
//!
//! The on-disk format is one anchor per line, `id x y z`, with the id in hex
//! and coordinates in decimal meters:
//!
//! ```text
//! # version 3
//! 0x02 0.81 3.63 3.01
//! 0x03 0.81 6.38 3.01
//! ```
//!
//! `#` starts a comment. A leading `# version N` comment carries the table
//! version; files without one load as version 0. Coordinates are written
//! with the shortest representation that parses back to the same `f64`, so
//! `load(store(t)) == t` bit for bit.
//!
//! Tables are changed through a line protocol (`SET`, `GET`, `LIST`, `DEL`),
//! one request per line, see [`apply_command`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::geometry::{AnchorId, Point3};

#[derive(Debug, Error)]
pub enum AnchorConfigError {
    #[error("not-provisioned: anchor file {} does not exist", .0.display())]
    NotProvisioned(PathBuf),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("conflict: anchor {0} defined more than once")]
    Conflict(AnchorId),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

/// Known anchor positions plus a mutation counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorTable {
    entries: BTreeMap<AnchorId, Point3>,
    version: u64,
}

impl AnchorTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a version-0 table, rejecting duplicate ids and non-finite positions.
    pub fn from_entries<I: IntoIterator<Item = (AnchorId, Point3)>>(entries: I) -> Result<Self, AnchorConfigError> {
        let mut table = Self::new();
        for (i, (id, pos)) in entries.into_iter().enumerate() {
            if !pos.is_finite() {
                return Err(AnchorConfigError::Parse { line: i + 1, message: format!("non-finite position for {id}") });
            }
            if table.entries.insert(id, pos).is_some() {
                return Err(AnchorConfigError::Conflict(id));
            }
        }
        Ok(table)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: AnchorId) -> Option<Point3> {
        self.entries.get(&id).copied()
    }

    pub fn contains(&self, id: AnchorId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Anchors in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (AnchorId, Point3)> + '_ {
        self.entries.iter().map(|(&id, &p)| (id, p))
    }

    pub fn ids(&self) -> Vec<AnchorId> {
        self.entries.keys().copied().collect()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.entries.values().copied().collect()
    }

    /// Inserts or replaces an anchor and bumps the version.
    pub fn set(&mut self, id: AnchorId, pos: Point3) {
        self.entries.insert(id, pos);
        self.version += 1;
    }

    /// Removes an anchor; bumps the version only if something was removed.
    pub fn remove(&mut self, id: AnchorId) -> Option<Point3> {
        let old = self.entries.remove(&id);
        if old.is_some() {
            self.version += 1;
        }
        old
    }

    /// Same anchors at the same positions, regardless of version.
    pub fn same_content(&self, other: &AnchorTable) -> bool {
        self.entries == other.entries
    }

    /// Serializes to the text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("# version {}\n", self.version);
        for (id, p) in self.iter() {
            let _ = writeln!(out, "{id} {} {} {}", p.x, p.y, p.z);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, AnchorConfigError> {
        let mut table = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version") {
                    table.version = v.trim().parse().map_err(|_| AnchorConfigError::Parse {
                        line: line_no,
                        message: format!("bad version '{}'", v.trim()),
                    })?;
                }
                continue;
            }
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (id, pos) = parse_anchor_fields(&line.split_whitespace().collect::<Vec<_>>())
                .map_err(|message| AnchorConfigError::Parse { line: line_no, message })?;
            if table.entries.insert(id, pos).is_some() {
                return Err(AnchorConfigError::Conflict(id));
            }
        }
        Ok(table)
    }
}

fn parse_anchor_fields(fields: &[&str]) -> Result<(AnchorId, Point3), String> {
    let [id, x, y, z] = fields else {
        return Err(format!("expected 'id x y z', got {} fields", fields.len()));
    };
    let id: AnchorId = id.parse()?;
    let coord = |s: &str| s.parse::<f64>().map_err(|_| format!("bad coordinate '{s}'"));
    let pos = Point3::try_new(coord(x)?, coord(y)?, coord(z)?).map_err(|e| e.to_string())?;
    Ok((id, pos))
}

pub fn load(path: &Path) -> Result<AnchorTable, AnchorConfigError> {
    let text = fs::read_to_string(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            AnchorConfigError::NotProvisioned(path.to_path_buf())
        } else {
            AnchorConfigError::Io { path: path.to_path_buf(), source }
        }
    })?;
    AnchorTable::parse(&text)
}

/// Writes the table atomically: a sibling temp file is written first and
/// renamed over `path`, so a failed store leaves the old file intact.
pub fn store(table: &AnchorTable, path: &Path) -> Result<(), AnchorConfigError> {
    let io_err = |source| AnchorConfigError::Io { path: path.to_path_buf(), source };
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, table.to_text()).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(e)
    })
}

/// Reply to a protocol command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Ok(String),
    Err(CommandError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandError {
    UnknownCommand,
    Parse,
    NotFound,
}

impl CommandError {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandError::UnknownCommand => "unknown-command",
            CommandError::Parse => "parse",
            CommandError::NotFound => "not-found",
        }
    }
}

impl Reply {
    pub fn is_ok(&self) -> bool {
        matches!(self, Reply::Ok(_))
    }

    /// Wire form. Every reply is one line except `LIST`, whose `OK N anchors`
    /// header is followed by exactly N entry lines.
    pub fn to_wire(&self) -> String {
        match self {
            Reply::Ok(body) if body.is_empty() => "OK".to_string(),
            Reply::Ok(body) => format!("OK {body}"),
            Reply::Err(e) => format!("ERR {}", e.as_str()),
        }
    }
}

/// Applies one protocol line to `table`, returning the new table and the reply.
///
/// ```text
/// SET <id> <x> <y> <z>   upsert, bumps version        -> OK
/// GET <id>                                            -> OK <id> <x> <y> <z>
/// LIST                                                -> OK <n> anchors (+ n lines)
/// DEL <id>               remove, bumps version        -> OK
/// ```
pub fn apply_command(table: &AnchorTable, command_line: &str) -> (AnchorTable, Reply) {
    let mut next = table.clone();
    let reply = execute(&mut next, command_line);
    (next, reply)
}

fn execute(table: &mut AnchorTable, line: &str) -> Reply {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let Some((verb, args)) = fields.split_first() else {
        return Reply::Err(CommandError::UnknownCommand);
    };
    let parse_id = |s: &str| s.parse::<AnchorId>().map_err(|_| CommandError::Parse);
    let result = match verb.to_ascii_uppercase().as_str() {
        "SET" => parse_anchor_fields(args)
            .map_err(|_| CommandError::Parse)
            .map(|(id, pos)| {
                table.set(id, pos);
                String::new()
            }),
        "GET" => match args {
            [id] => parse_id(id).and_then(|id| {
                table.get(id).map(|p| format!("{id} {} {} {}", p.x, p.y, p.z)).ok_or(CommandError::NotFound)
            }),
            _ => Err(CommandError::Parse),
        },
        "DEL" => match args {
            [id] => parse_id(id).and_then(|id| table.remove(id).map(|_| String::new()).ok_or(CommandError::NotFound)),
            _ => Err(CommandError::Parse),
        },
        "LIST" if args.is_empty() => {
            let mut body = format!("{} anchors", table.len());
            for (id, p) in table.iter() {
                let _ = write!(body, "\n{id} {} {} {}", p.x, p.y, p.z);
            }
            Ok(body)
        }
        "LIST" => Err(CommandError::Parse),
        _ => Err(CommandError::UnknownCommand),
    };
    match result {
        Ok(body) => Reply::Ok(body),
        Err(e) => Reply::Err(e),
    }
}

/// Single-writer anchor table; readers take cheap immutable snapshots.
#[derive(Debug, Default)]
pub struct SharedAnchorTable {
    current: RwLock<Arc<AnchorTable>>,
}

impl SharedAnchorTable {
    pub fn new(table: AnchorTable) -> Self {
        Self { current: RwLock::new(Arc::new(table)) }
    }

    pub fn snapshot(&self) -> Arc<AnchorTable> {
        Arc::clone(&self.current.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn apply(&self, command_line: &str) -> Reply {
        let mut guard = self.current.write().unwrap_or_else(|e| e.into_inner());
        let (next, reply) = apply_command(&guard, command_line);
        if next != **guard {
            *guard = Arc::new(next);
        }
        reply
    }
}

/// The five-anchor installation used throughout the examples and tests.
pub fn reference_installation() -> AnchorTable {
    AnchorTable::from_entries([
        (AnchorId(0x02), Point3::new(0.81, 3.63, 3.01)),
        (AnchorId(0x03), Point3::new(0.81, 6.38, 3.01)),
        (AnchorId(0x04), Point3::new(6.31, 7.66, 2.83)),
        (AnchorId(0x05), Point3::new(6.72, 3.65, 2.64)),
        (AnchorId(0x06), Point3::new(2.77, 0.07, 0.91)),
    ])
    .expect("reference installation is valid")
}
