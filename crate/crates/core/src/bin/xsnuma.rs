use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use xsnuma::bench::{
    emit_report, run_experiment, CpuOrder, InitMode, Mode, ReportFormat, RunConfig, EXIT_CHECKSUM_MISMATCH,
};
use xsnuma::grid::DatasetConfig;
use xsnuma::lookup::Algorithm;
use xsnuma::placement::{Preset, Topology};
use xsnuma::sim::SimParams;

/// Cross-section lookup benchmark with NUMA placement presets.
#[derive(Debug, Parser)]
#[command(name = "xsnuma", version)]
struct Cli {
    #[arg(long, default_value_t = 355)]
    nuclides: usize,
    /// Grid points per nuclide.
    #[arg(long, default_value_t = 11303)]
    gridpoints: usize,
    #[arg(long, default_value_t = 12)]
    materials: usize,
    /// Lookups per timed run [default: scaled from 15M at full size].
    #[arg(long)]
    lookups: Option<u64>,
    /// Comma-separated thread counts.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, default_value = "unionized")]
    algorithm: Algorithm,
    /// Comma-separated presets: default, interleave-all, numag, numag-hugetlb.
    #[arg(long, value_delimiter = ',', default_value = "default")]
    policy: Vec<Preset>,
    #[arg(long, default_value = "generate")]
    init: InitMode,
    /// Dataset file for --init file; written first if missing.
    #[arg(long)]
    dataset_file: Option<PathBuf>,
    #[arg(long, default_value = "measure")]
    mode: Mode,
    /// Seeds both dataset generation and the lookup inputs.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    /// Report path [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON simulator parameters; without it simulate mode calibrates.
    #[arg(long)]
    sim_params: Option<PathBuf>,
    /// Simulated topology as DOMAINSxCPUS.
    #[arg(long, default_value = "2x8")]
    sim_topology: String,
    /// Worker placement over domains.
    #[arg(long, default_value = "spread")]
    cpu_order: CpuOrder,
    /// Run all requested threads even with fewer CPUs.
    #[arg(long)]
    oversubscribe: bool,
}

fn parse_topology(s: &str) -> Result<Topology, String> {
    let (d, c) = s.split_once('x').ok_or_else(|| format!("expected DOMAINSxCPUS, got '{s}'"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Topology::uniform(num(d)?, num(c)?).map_err(|e| e.to_string())
}

fn config(cli: Cli) -> Result<(RunConfig, ReportFormat, Option<PathBuf>), String> {
    let dataset = DatasetConfig::new(cli.nuclides, cli.gridpoints, cli.materials, cli.seed);
    let base = RunConfig::new(dataset);
    let sim_params = match &cli.sim_params {
        Some(p) => Some(SimParams::from_json_file(p).map_err(|e| e.to_string())?),
        None => None,
    };
    let cfg = RunConfig {
        algorithm: cli.algorithm,
        policies: cli.policy,
        threads: cli.threads,
        n_lookups: cli.lookups.unwrap_or(base.n_lookups),
        init_mode: cli.init,
        dataset_file: cli.dataset_file,
        seed: cli.seed,
        mode: cli.mode,
        sim_params,
        sim_topology: parse_topology(&cli.sim_topology)?,
        cpu_order: cli.cpu_order,
        oversubscribe: cli.oversubscribe,
        ..base
    };
    Ok((cfg, cli.format, cli.out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (cfg, format, out) = match config(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = run_experiment(&cfg).and_then(|report| {
        emit_report(&report, format, out.as_deref())?;
        Ok(report)
    });
    match result {
        Ok(report) if !report.checksums_consistent() => {
            eprintln!("error: checksum differs between rows");
            ExitCode::from(EXIT_CHECKSUM_MISMATCH as u8)
        }
        Ok(report) => {
            for r in report.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("warning: {} @ {} threads failed: {}", r.policy, r.threads, r.error.as_deref().unwrap_or(""));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
