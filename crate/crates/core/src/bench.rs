//! Experiment harness: places a dataset per preset, runs or simulates a
//! thread sweep, and reports throughput, efficiency and energy.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{self, EnergyBreakdown, EnergyMeter};
use crate::grid::{build_unionized, generate_dataset, generate_materials, Dataset, DatasetConfig, UnionizedGrid};
use crate::io::{read_dataset, write_dataset, DatasetIoError};
use crate::lookup::{run_lookups, Algorithm, LookupData, LookupError, RunOptions, ViewSource};
use crate::placement::{
    alloc_placed, as_bytes, discover_topology, LinuxBackend, MemoryBackend, PlacedRegion, PlacementError,
    PlacementPolicy, Preset, Topology,
};
use crate::sim::{anchor_targets, calibrate, simulate, AccessProfile, SimError, SimParams, SimResult};

pub use crate::metrics::{efficiency, relative_efficiency, MetricsError};

/// Lookups per run at full scale.
pub const FULL_SCALE_LOOKUPS: u64 = 15_000_000;
pub const MIN_DEFAULT_LOOKUPS: u64 = 10_000;

/// Report columns, in order.
pub const CSV_COLUMNS: [&str; 11] = [
    "policy",
    "threads",
    "lookups_per_s",
    "efficiency_pct",
    "rel_efficiency_pct",
    "checksum_hex",
    "cpu0_j",
    "cpu1_j",
    "dram0_j",
    "dram1_j",
    "uj_per_lookup",
];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetIoError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("writing report: {0}")]
    Output(String),
}

impl BenchError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Dataset(_) => 3,
            BenchError::Placement(_) => 4,
            BenchError::Lookup(_) => 5,
            BenchError::Sim(_) => 6,
            BenchError::Output(_) => 7,
        }
    }
}

/// Exit code when rows of one report disagree on the checksum.
pub const EXIT_CHECKSUM_MISMATCH: i32 = 8;

macro_rules! simple_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("unknown {} '{s}'", stringify!($name))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

simple_enum!(InitMode { File => "file", Generate => "generate" });
simple_enum!(Mode { Measure => "measure", Simulate => "simulate" });
simple_enum!(ReportFormat { Csv => "csv", Json => "json" });
simple_enum!(CpuOrder { Spread => "spread", Compact => "compact" });

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub algorithm: Algorithm,
    pub policies: Vec<Preset>,
    pub threads: Vec<usize>,
    pub n_lookups: u64,
    pub init_mode: InitMode,
    pub dataset_file: Option<PathBuf>,
    /// Seed of the lookup input stream.
    pub seed: u64,
    pub mode: Mode,
    pub sim_params: Option<SimParams>,
    /// Topology for simulate mode; measure mode uses the host.
    pub sim_topology: Topology,
    pub cpu_order: CpuOrder,
    /// Run every requested thread count even on fewer CPUs.
    pub oversubscribe: bool,
}

impl RunConfig {
    pub fn new(dataset: DatasetConfig) -> Self {
        Self {
            n_lookups: default_lookups(&dataset),
            dataset,
            algorithm: Algorithm::Unionized,
            policies: vec![Preset::Default],
            threads: vec![1],
            init_mode: InitMode::Generate,
            dataset_file: None,
            seed: 42,
            mode: Mode::Measure,
            sim_params: None,
            sim_topology: Topology::uniform(2, 8).expect("valid topology"),
            cpu_order: CpuOrder::Spread,
            oversubscribe: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.dataset.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        if self.policies.is_empty() {
            return Err(BenchError::Config("no policies".into()));
        }
        if self.threads.is_empty() || self.threads.contains(&0) {
            return Err(BenchError::Config("thread counts must be at least 1".into()));
        }
        if self.n_lookups == 0 {
            return Err(BenchError::Config("n_lookups must be at least 1".into()));
        }
        if self.mode == Mode::Measure && self.init_mode == InitMode::File && self.dataset_file.is_none() {
            return Err(BenchError::Config("file init needs a dataset file".into()));
        }
        if let Some(p) = &self.sim_params {
            p.validate()?;
        }
        Ok(())
    }
}

/// `FULL_SCALE_LOOKUPS` scaled by dataset size, at least `MIN_DEFAULT_LOOKUPS`.
pub fn default_lookups(cfg: &DatasetConfig) -> u64 {
    let full = DatasetConfig::default().total_gridpoints() as f64;
    let scaled = (FULL_SCALE_LOOKUPS as f64 * cfg.total_gridpoints() as f64 / full).round() as u64;
    scaled.max(MIN_DEFAULT_LOOKUPS)
}

/// Host state that affects results but is never changed by this tool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HostState {
    pub numa_balancing: Option<String>,
    pub cpufreq_governor: Option<String>,
    pub turbo_disabled: Option<String>,
}

impl HostState {
    pub fn read() -> Self {
        let read = |p: &str| std::fs::read_to_string(p).ok().map(|s| s.trim().to_string());
        Self {
            numa_balancing: read("/proc/sys/kernel/numa_balancing"),
            cpufreq_governor: read("/sys/devices/system/cpu/cpu0/cpufreq/scaling_governor"),
            turbo_disabled: read("/sys/devices/system/cpu/intel_pstate/no_turbo"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub init_mode: InitMode,
    pub dataset: DatasetConfig,
    pub n_lookups: u64,
    pub warmup_lookups: u64,
    pub seed: u64,
    pub cpu_order: CpuOrder,
    pub topology: Vec<Vec<usize>>,
    pub host: HostState,
    pub energy_available: bool,
    pub sim_params: Option<SimParams>,
    pub calibration_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: Preset,
    pub threads: usize,
    /// Threads actually run after clamping to the available CPUs.
    pub threads_used: usize,
    pub lookups_per_s: Option<f64>,
    pub efficiency_pct: Option<f64>,
    pub rel_efficiency_pct: Option<f64>,
    pub checksum_hex: Option<String>,
    pub wall_time_s: Option<f64>,
    pub energy: Option<EnergyBreakdown>,
    pub sim: Option<SimResult>,
    /// Set when the point could not be run.
    pub error: Option<String>,
}

impl ReportRow {
    fn failed(policy: Preset, threads: usize, error: String) -> Self {
        Self {
            policy,
            threads,
            threads_used: 0,
            lookups_per_s: None,
            efficiency_pct: None,
            rel_efficiency_pct: None,
            checksum_hex: None,
            wall_time_s: None,
            energy: None,
            sim: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

impl BenchReport {
    /// True when every row that carries a checksum carries the same one.
    pub fn checksums_consistent(&self) -> bool {
        let mut it = self.rows.iter().filter_map(|r| r.checksum_hex.as_deref());
        match it.next() {
            Some(first) => it.all(|c| c == first),
            None => true,
        }
    }
}

/// A dataset copied into placed regions according to one preset.
pub struct PlacedDataset {
    topo: Topology,
    materials: crate::grid::MaterialTable,
    gridpoints: usize,
    fingerprint: u64,
    pub grids: PlacedRegion,
    /// Unionized energies and index table, when built.
    pub union: Option<(PlacedRegion, PlacedRegion)>,
}

fn fill_region(
    region: &mut PlacedRegion,
    src: &[u8],
    topo: &Topology,
    backend: &Arc<dyn MemoryBackend>,
    init: InitMode,
) -> Result<(), PlacementError> {
    if region.policy().is_replicated() {
        return region.fill_replicas_by_masters(src, topo);
    }
    match (region.policy().base(), init) {
        // runtime initialization: the workers first-touch their own chunks
        (PlacementPolicy::FirstTouch, InitMode::Generate) => region.fill_parallel(src, &topo.spread_cpus())?,
        _ => {
            // the master thread writes everything
            let master = topo.master_cpu(0);
            std::thread::scope(|s| {
                s.spawn(|| {
                    if let Err(e) = backend.set_affinity(master) {
                        warn!("master on cpu {master}: {e}");
                    }
                    region.fill(src)
                })
                .join()
                .expect("fill thread panicked")
            })?;
        }
    }
    region.freeze()
}

/// Copies `ds` (and `union`, if given) into regions placed by `preset`.
pub fn place_dataset(
    ds: &Dataset,
    union: Option<&UnionizedGrid>,
    preset: Preset,
    topo: &Topology,
    backend: Arc<dyn MemoryBackend>,
    init: InitMode,
) -> Result<PlacedDataset, PlacementError> {
    let plan = preset.plan(topo).normalized(topo)?;
    let place = |bytes: &[u8], policy: &PlacementPolicy| -> Result<PlacedRegion, PlacementError> {
        let mut r = alloc_placed(bytes.len(), policy, topo, backend.clone())?;
        fill_region(&mut r, bytes, topo, &backend, init)?;
        Ok(r)
    };
    let grids = place(as_bytes(ds.grids.points()), &plan.nuclide_grids)?;
    let union = match union {
        Some(u) => Some((
            place(as_bytes(u.energies()), &plan.union_energies)?,
            place(as_bytes(u.index_table()), &plan.index_table)?,
        )),
        None => None,
    };
    Ok(PlacedDataset {
        topo: topo.clone(),
        materials: ds.materials.clone(),
        gridpoints: ds.grids.gridpoints(),
        fingerprint: ds.grids.fingerprint(),
        grids,
        union,
    })
}

fn replica_for_domain(r: &PlacedRegion, topo: &Topology, d: usize) -> Result<usize, PlacementError> {
    if r.policy().is_replicated() {
        r.replica_index_for_cpu(topo, topo.master_cpu(d))
    } else {
        Ok(0)
    }
}

/// Lookup views over a placed dataset, one per domain, each reading the
/// replicas local to that domain.
pub struct PlacedViews<'a> {
    topo: &'a Topology,
    per_domain: Vec<LookupData<'a>>,
}

impl PlacedDataset {
    pub fn views(&self) -> Result<PlacedViews<'_>, BenchError> {
        let mut per_domain = Vec::with_capacity(self.topo.n_domains());
        for d in 0..self.topo.n_domains() {
            let points = self.grids.slice(replica_for_domain(&self.grids, &self.topo, d)?);
            let (energies, index): (&[f64], &[u32]) = match &self.union {
                Some((e, i)) => (
                    e.slice(replica_for_domain(e, &self.topo, d)?),
                    i.slice(replica_for_domain(i, &self.topo, d)?),
                ),
                None => (&[], &[]),
            };
            per_domain.push(LookupData::from_parts(
                points,
                self.gridpoints,
                energies,
                index,
                &self.materials,
                self.fingerprint,
            )?);
        }
        Ok(PlacedViews {
            topo: &self.topo,
            per_domain,
        })
    }
}

impl ViewSource for PlacedViews<'_> {
    fn view_for(&self, _worker: usize, cpu: Option<usize>) -> LookupData<'_> {
        let d = cpu.and_then(|c| self.topo.socket_from_cpu(c).ok()).unwrap_or(0);
        self.per_domain[d]
    }
}

fn worker_cpus(topo: &Topology, order: CpuOrder) -> Vec<usize> {
    match order {
        CpuOrder::Spread => topo.spread_cpus(),
        CpuOrder::Compact => topo.compact_cpus(),
    }
}

/// Runs every (policy, thread count) point of `cfg`.
pub fn run_experiment(cfg: &RunConfig) -> Result<BenchReport, BenchError> {
    match cfg.mode {
        Mode::Simulate => run_simulated(cfg),
        Mode::Measure => run_measured(cfg, &discover_topology(), Arc::new(LinuxBackend)),
    }
}

fn metadata(cfg: &RunConfig, topo: &Topology, energy_available: bool) -> ReportMetadata {
    ReportMetadata {
        mode: cfg.mode,
        algorithm: cfg.algorithm,
        init_mode: cfg.init_mode,
        dataset: cfg.dataset,
        n_lookups: cfg.n_lookups,
        warmup_lookups: match cfg.mode {
            Mode::Measure => warmup_lookups(cfg.n_lookups),
            Mode::Simulate => 0,
        },
        seed: cfg.seed,
        cpu_order: cfg.cpu_order,
        topology: topo.cpus_per_domain().to_vec(),
        host: HostState::read(),
        energy_available,
        sim_params: None,
        calibration_residual: None,
    }
}

fn warmup_lookups(n: u64) -> u64 {
    (n / 10).max(1)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, BenchError> {
    match cfg.init_mode {
        InitMode::Generate => generate_dataset(&cfg.dataset).map_err(|e| BenchError::Config(e.to_string())),
        InitMode::File => {
            let path = cfg.dataset_file.as_ref().expect("validated");
            if !path.exists() {
                info!("{} not found; generating and writing it", path.display());
                let ds = generate_dataset(&cfg.dataset).map_err(|e| BenchError::Config(e.to_string()))?;
                write_dataset(path, &ds)?;
            }
            let ds = read_dataset(path)?;
            if ds.config() != cfg.dataset {
                warn!("dataset file {} overrides the configured dataset shape", path.display());
            }
            Ok(ds)
        }
    }
}

struct Point {
    lookups_per_s: f64,
    threads_used: usize,
    checksum: String,
    wall_time_s: f64,
    energy: Option<EnergyBreakdown>,
}

/// Measured sweep on `topo` through `backend`.
pub fn run_measured(
    cfg: &RunConfig,
    topo: &Topology,
    backend: Arc<dyn MemoryBackend>,
) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let union = (cfg.algorithm == Algorithm::Unionized).then(|| build_unionized(&ds.grids));
    let meter = match EnergyMeter::discover() {
        Ok(m) => Some(m),
        Err(e) => {
            info!("{e}; reports omit energy");
            None
        }
    };
    let cpus = worker_cpus(topo, cfg.cpu_order);

    let run_point = |views: &PlacedViews<'_>, threads: usize| -> Result<Point, BenchError> {
        let opts = RunOptions {
            worker_cpus: cpus.clone(),
            oversubscribe: cfg.oversubscribe,
            ..RunOptions::new(cfg.n_lookups, threads, cfg.seed, cfg.algorithm)
        };
        run_lookups(
            &RunOptions {
                n_lookups: warmup_lookups(cfg.n_lookups),
                ..opts.clone()
            },
            views,
        )?;
        let before = meter.as_ref().and_then(|m| m.read_sample().ok());
        let out = run_lookups(&opts, views)?;
        let after = meter.as_ref().and_then(|m| m.read_sample().ok());
        let energy = match (before, after) {
            (Some(a), Some(b)) => energy::delta(&a, &b, Some(cfg.n_lookups)).ok(),
            _ => None,
        };
        Ok(Point {
            lookups_per_s: out.lookups_per_s,
            threads_used: out.threads_used,
            checksum: out.checksum.to_string(),
            wall_time_s: out.elapsed.as_secs_f64(),
            energy,
        })
    };

    // baselines: each policy's own single-thread rate and the default's
    let mut single: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut results: Vec<(Preset, usize, Result<Point, String>)> = Vec::new();
    let mut presets = cfg.policies.clone();
    if !presets.contains(&Preset::Default) {
        presets.push(Preset::Default);
    }
    for &preset in &presets {
        let requested = cfg.policies.contains(&preset);
        let placed = match place_dataset(&ds, union.as_ref(), preset, topo, backend.clone(), cfg.init_mode) {
            Ok(p) => p,
            Err(e) => {
                warn!("{preset}: placement failed: {e}");
                if requested {
                    for &t in &cfg.threads {
                        results.push((preset, t, Err(e.to_string())));
                    }
                }
                continue;
            }
        };
        let views = placed.views()?;
        let mut counts: Vec<usize> = if requested { cfg.threads.clone() } else { Vec::new() };
        if !counts.contains(&1) {
            counts.insert(0, 1);
        }
        for t in counts {
            info!("{preset} with {t} threads");
            let r = run_point(&views, t).map_err(|e| e.to_string());
            if t == 1 {
                if let Ok(p) = &r {
                    single.insert(preset.name(), p.lookups_per_s);
                }
            }
            if requested && cfg.threads.contains(&t) {
                results.push((preset, t, r));
            }
        }
    }

    let rows = cfg
        .policies
        .iter()
        .flat_map(|&p| cfg.threads.iter().map(move |&t| (p, t)))
        .map(|(preset, t)| {
            let (_, _, r) = results
                .iter()
                .find(|(p, n, _)| *p == preset && *n == t)
                .expect("every requested point was attempted");
            match r {
                Err(e) => ReportRow::failed(preset, t, e.clone()),
                Ok(p) => ReportRow {
                    policy: preset,
                    threads: t,
                    threads_used: p.threads_used,
                    lookups_per_s: Some(p.lookups_per_s),
                    efficiency_pct: single
                        .get(preset.name())
                        .and_then(|&p1| efficiency(p.lookups_per_s, p1, p.threads_used).ok()),
                    rel_efficiency_pct: single
                        .get(Preset::Default.name())
                        .and_then(|&pd1| relative_efficiency(p.lookups_per_s, pd1, p.threads_used).ok()),
                    checksum_hex: Some(p.checksum.clone()),
                    wall_time_s: Some(p.wall_time_s),
                    energy: p.energy.clone(),
                    sim: None,
                    error: None,
                },
            }
        })
        .collect();

    Ok(BenchReport {
        metadata: metadata(cfg, topo, meter.is_some()),
        rows,
    })
}

fn sim_energy(r: &SimResult, n_lookups: u64) -> EnergyBreakdown {
    let n = n_lookups as f64;
    let mut zones: Vec<(String, f64)> = Vec::new();
    for (d, j) in r.cpu_j_per_lookup.iter().enumerate() {
        zones.push((format!("CPU{d}"), j * n));
    }
    for (d, j) in r.dram_j_per_lookup.iter().enumerate() {
        zones.push((format!("DRAM{d}"), j * n));
    }
    EnergyBreakdown {
        total_j: zones.iter().map(|(_, j)| j).sum(),
        zones,
        interval_ns: (n / r.lookups_per_s * 1e9).round() as u64,
        lookups: Some(n_lookups),
    }
}

/// Simulated sweep; parameters come from `cfg.sim_params` or, when absent,
/// from calibrating against the scaling anchors.
pub fn run_simulated(cfg: &RunConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let topo = &cfg.sim_topology;
    let materials = generate_materials(&cfg.dataset).map_err(|e| BenchError::Config(e.to_string()))?;
    let profile = AccessProfile::new(&cfg.dataset, &materials, cfg.algorithm);
    let (params, residual) = match &cfg.sim_params {
        Some(p) => (p.clone(), None),
        None => {
            let c = calibrate(&SimParams::default(), &profile, topo, &anchor_targets(topo))?;
            (c.params, Some(c.residual))
        }
    };
    let pd1 = simulate(&params, &profile, &Preset::Default.plan(topo), topo, 1)?.lookups_per_s;
    let mut rows = Vec::new();
    for &preset in &cfg.policies {
        let plan = preset.plan(topo);
        for &t in &cfg.threads {
            let r = simulate(&params, &profile, &plan, topo, t)?;
            rows.push(ReportRow {
                policy: preset,
                threads: t,
                threads_used: t,
                lookups_per_s: Some(r.lookups_per_s),
                efficiency_pct: Some(r.efficiency_pct),
                rel_efficiency_pct: Some(
                    relative_efficiency(r.lookups_per_s, pd1, t).map_err(|e| SimError::Usage(e.to_string()))?,
                ),
                checksum_hex: None,
                wall_time_s: Some(cfg.n_lookups as f64 / r.lookups_per_s),
                energy: Some(sim_energy(&r, cfg.n_lookups)),
                sim: Some(r),
                error: None,
            });
        }
    }
    let mut meta = metadata(cfg, topo, true);
    meta.sim_params = Some(params);
    meta.calibration_residual = residual;
    Ok(BenchReport { metadata: meta, rows })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report` as CSV (one row per point, fixed columns) or JSON.
pub fn write_report<W: Write>(report: &BenchReport, format: ReportFormat, mut out: W) -> Result<(), BenchError> {
    let err = |e: &dyn std::fmt::Display| BenchError::Output(e.to_string());
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, report).map_err(|e| err(&e))?;
            writeln!(out).map_err(|e| err(&e))?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(CSV_COLUMNS).map_err(|e| err(&e))?;
            for r in &report.rows {
                let zone = |l: &str| opt(r.energy.as_ref().and_then(|e| e.zone_j(l)));
                w.write_record([
                    r.policy.name().to_string(),
                    r.threads.to_string(),
                    opt(r.lookups_per_s),
                    opt(r.efficiency_pct),
                    opt(r.rel_efficiency_pct),
                    r.checksum_hex.clone().unwrap_or_default(),
                    zone("CPU0"),
                    zone("CPU1"),
                    zone("DRAM0"),
                    zone("DRAM1"),
                    opt(r.energy.as_ref().and_then(|e| e.uj_per_lookup())),
                ])
                .map_err(|e| err(&e))?;
            }
            w.flush().map_err(|e| err(&e))?;
        }
    }
    Ok(())
}

/// Writes the report to `path`, or to stdout when `path` is `None`.
pub fn emit_report(report: &BenchReport, format: ReportFormat, path: Option<&Path>) -> Result<(), BenchError> {
    match path {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(|e| BenchError::Output(format!("{}: {e}", p.display())))?;
            write_report(report, format, std::io::BufWriter::new(f))
        }
        None => write_report(report, format, std::io::stdout().lock()),
    }
}

pub fn parse_report_json(text: &str) -> Result<BenchReport, BenchError> {
    serde_json::from_str(text).map_err(|e| BenchError::Output(e.to_string()))
}
