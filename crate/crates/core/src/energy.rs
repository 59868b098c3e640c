//! Per-domain energy from the powercap (RAPL) sysfs tree.
//!
//! Package zones are labelled `CPU0`, `CPU1`, ... and their DRAM sub-zones
//! `DRAM0`, `DRAM1`, ... in enumeration order. Counters are cumulative
//! microjoules that wrap at `max_energy_range_uj`; at most one wrap between
//! two samples is assumed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Overrides the powercap root (test fixtures).
pub const POWERCAP_ROOT_ENV: &str = "XSNUMA_POWERCAP_ROOT";
pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("energy counters unavailable: {0}")]
    Unavailable(String),
    #[error("cannot parse energy counter '{0}'")]
    Parse(String),
    #[error("sample timestamps out of order")]
    OutOfOrder,
    #[error("samples cover different zones")]
    ZoneMismatch,
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneReading {
    pub label: String,
    pub energy_uj: u64,
    pub max_range_uj: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergySample {
    pub zones: Vec<ZoneReading>,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    /// `(label, joules)` per zone, in zone order.
    pub zones: Vec<(String, f64)>,
    pub total_j: f64,
    pub interval_ns: u64,
    pub lookups: Option<u64>,
}

impl EnergyBreakdown {
    pub fn zone_j(&self, label: &str) -> Option<f64> {
        self.zones.iter().find(|(l, _)| l == label).map(|&(_, j)| j)
    }

    pub fn joules_per_lookup(&self) -> Option<f64> {
        self.lookups.filter(|&n| n > 0).map(|n| self.total_j / n as f64)
    }

    pub fn uj_per_lookup(&self) -> Option<f64> {
        self.joules_per_lookup().map(|j| j * 1e6)
    }
}

/// Parses the decimal microjoule format of `energy_uj` files.
pub fn parse_energy_uj(s: &str) -> Result<u64, EnergyError> {
    let t = s.trim();
    if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
        return Err(EnergyError::Parse(t.to_string()));
    }
    t.parse().map_err(|_| EnergyError::Parse(t.to_string()))
}

/// Energy consumed between two readings of a counter wrapping at `range`.
pub fn wrapping_delta(a: u64, b: u64, range: u64) -> u64 {
    if b >= a {
        b - a
    } else {
        // one wrap: a -> range, then 0 -> b
        (range - a) + b
    }
}

/// Per-zone energy between samples `a` and `b`, optionally normalized by a
/// lookup count.
pub fn delta(a: &EnergySample, b: &EnergySample, lookups: Option<u64>) -> Result<EnergyBreakdown, EnergyError> {
    if b.timestamp_ns <= a.timestamp_ns {
        return Err(EnergyError::OutOfOrder);
    }
    if a.zones.len() != b.zones.len() || a.zones.iter().zip(&b.zones).any(|(x, y)| x.label != y.label) {
        return Err(EnergyError::ZoneMismatch);
    }
    let zones: Vec<(String, f64)> = a
        .zones
        .iter()
        .zip(&b.zones)
        .map(|(x, y)| {
            let uj = wrapping_delta(x.energy_uj, y.energy_uj, x.max_range_uj.max(y.max_range_uj));
            (x.label.clone(), uj as f64 * 1e-6)
        })
        .collect();
    let total_j = zones.iter().map(|(_, j)| j).sum();
    Ok(EnergyBreakdown {
        zones,
        total_j,
        interval_ns: b.timestamp_ns - a.timestamp_ns,
        lookups,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Zone {
    label: String,
    dir: PathBuf,
    max_range_uj: u64,
}

/// Reader over the energy zones found at startup.
#[derive(Debug, Clone)]
pub struct EnergyMeter {
    zones: Vec<Zone>,
}

impl EnergyMeter {
    /// Scans `$XSNUMA_POWERCAP_ROOT` or the standard powercap directory.
    pub fn discover() -> Result<Self, EnergyError> {
        let root = std::env::var_os(POWERCAP_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_POWERCAP_ROOT));
        Self::discover_at(&root)
    }

    pub fn discover_at(root: &Path) -> Result<Self, EnergyError> {
        let entries = fs::read_dir(root).map_err(|e| EnergyError::Unavailable(format!("{}: {e}", root.display())))?;
        // zone id ("0" or "0:1") -> directory; nested and flat layouts both occur
        let mut found: BTreeMap<Vec<u32>, PathBuf> = BTreeMap::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if let Some(id) = zone_id(&entry.file_name().to_string_lossy()) {
                if id.len() == 1 {
                    if let Ok(children) = fs::read_dir(&path) {
                        for child in children.flatten() {
                            if let Some(cid) = zone_id(&child.file_name().to_string_lossy()) {
                                found.entry(cid).or_insert_with(|| child.path());
                            }
                        }
                    }
                }
                found.entry(id).or_insert(path);
            }
        }

        let mut zones = Vec::new();
        for (id, dir) in found {
            let Ok(name) = fs::read_to_string(dir.join("name")) else {
                continue;
            };
            // a DRAM sub-zone belongs to the package it is nested under
            let name = name.trim();
            let label = if name.starts_with("package") {
                format!("CPU{}", id[0])
            } else if name == "dram" {
                format!("DRAM{}", id[0])
            } else {
                continue;
            };
            let max_range_uj = parse_energy_uj(&read(&dir.join("max_energy_range_uj"))?)?;
            zones.push(Zone { label, dir, max_range_uj });
        }
        if zones.is_empty() {
            return Err(EnergyError::Unavailable(format!("no RAPL zones under {}", root.display())));
        }
        Ok(Self { zones })
    }

    pub fn labels(&self) -> Vec<&str> {
        self.zones.iter().map(|z| z.label.as_str()).collect()
    }

    /// One reading of every zone.
    pub fn read_sample(&self) -> Result<EnergySample, EnergyError> {
        let zones = self
            .zones
            .iter()
            .map(|z| {
                Ok(ZoneReading {
                    label: z.label.clone(),
                    energy_uj: parse_energy_uj(&read(&z.dir.join("energy_uj"))?)?,
                    max_range_uj: z.max_range_uj,
                })
            })
            .collect::<Result<_, EnergyError>>()?;
        Ok(EnergySample {
            zones,
            timestamp_ns: monotonic_ns(),
        })
    }
}

fn zone_id(name: &str) -> Option<Vec<u32>> {
    let rest = name.strip_prefix("intel-rapl:")?;
    rest.split(':').map(|p| p.parse().ok()).collect()
}

fn read(path: &Path) -> Result<String, EnergyError> {
    fs::read_to_string(path).map_err(|e| EnergyError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Strictly increasing nanoseconds since first use.
fn monotonic_ns() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    static LAST: AtomicU64 = AtomicU64::new(0);
    let now = EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64;
    let mut prev = LAST.load(Ordering::Relaxed);
    loop {
        let next = now.max(prev + 1);
        match LAST.compare_exchange_weak(prev, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return next,
            Err(p) => prev = p,
        }
    }
}
