//! Analytic throughput model for lookups on a multi-domain host.
//!
//! Each lookup costs `t_cpu` plus, for every structure it touches, a memory
//! latency that depends on where the touched pages live relative to the
//! thread, how loaded that domain's memory is, and how often the access
//! misses the TLB. Threads are spread round-robin over domains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{footprint_nuclide_grids, footprint_unionized, DatasetConfig, MaterialTable, XS_TYPES};
use crate::lookup::Algorithm;
use crate::metrics::{efficiency, relative_efficiency};
use crate::placement::{PlacementPlan, PlacementPolicy, Preset, Structure, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulator parameters: {0}")]
    Params(String),
    #[error("invalid simulation request: {0}")]
    Usage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Compute time per lookup, ns.
    pub t_cpu: f64,
    /// Latency of one memory access to the local domain, ns.
    pub t_local: f64,
    /// Latency of one memory access to another domain, ns.
    pub t_remote: f64,
    /// Extra cost of a TLB miss, ns.
    pub t_tlb_refill: f64,
    /// Accesses per ns one domain serves before queueing; `None` is unlimited.
    pub bandwidth_cap: Option<f64>,
    pub page_size: usize,
    pub huge_page_size: usize,
    pub tlb_entries: usize,
    pub tlb_entries_huge: usize,
    /// Power drawn by each package while the run lasts, W.
    pub package_power_w: f64,
    /// DRAM energy per access, nJ.
    pub dram_nj_per_access: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            t_cpu: 100.0,
            t_local: 8.0,
            t_remote: 12.0,
            t_tlb_refill: 3.0,
            bandwidth_cap: None,
            page_size: 4096,
            huge_page_size: 2 * 1024 * 1024,
            tlb_entries: 64,
            tlb_entries_huge: 32,
            package_power_w: 60.0,
            dram_nj_per_access: 20.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let pos = [
            ("t_cpu", self.t_cpu),
            ("t_local", self.t_local),
            ("t_remote", self.t_remote),
            ("t_tlb_refill", self.t_tlb_refill),
            ("package_power_w", self.package_power_w),
            ("dram_nj_per_access", self.dram_nj_per_access),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Params(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(c) = self.bandwidth_cap {
            if !(c.is_finite() && c > 0.0) {
                return Err(SimError::Params(format!("bandwidth_cap must be positive, got {c}")));
            }
        }
        if self.t_remote <= self.t_local {
            return Err(SimError::Params("t_remote must exceed t_local".into()));
        }
        if [self.page_size, self.huge_page_size, self.tlb_entries, self.tlb_entries_huge].contains(&0) {
            return Err(SimError::Params("page sizes and TLB entries must be positive".into()));
        }
        Ok(())
    }

    /// Reads parameters from a JSON file.
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Params(format!("{}: {e}", path.display())))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| SimError::Params(format!("{}: {e}", path.display())))?;
        p.validate()?;
        Ok(p)
    }

    fn tlb_entries_for(&self, huge: bool) -> usize {
        if huge {
            self.tlb_entries_huge
        } else {
            self.tlb_entries
        }
    }
}

/// Fraction of uniformly random accesses over `working_set` bytes that miss
/// a TLB of `tlb_entries` entries mapping `page_size` pages.
pub fn tlb_miss_rate(working_set: u64, page_size: u64, tlb_entries: u64) -> f64 {
    let reach = page_size.saturating_mul(tlb_entries);
    if working_set <= reach {
        0.0
    } else {
        1.0 - reach as f64 / working_set as f64
    }
}

/// Per-lookup touches and sizes of each structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessProfile {
    pub union_touches: f64,
    pub index_touches: f64,
    pub grid_touches: f64,
    pub material_touches: f64,
    pub union_bytes: u64,
    pub index_bytes: u64,
    pub grid_bytes: u64,
    pub material_bytes: u64,
}

impl AccessProfile {
    pub fn new(cfg: &DatasetConfig, materials: &MaterialTable, algorithm: Algorithm) -> Self {
        let (n, m) = (cfg.n_nuclides, cfg.gridpoints_per_nuclide);
        let nucs = materials.mean_nuclides_per_lookup();
        let ceil_log2 = |x: usize| f64::from(usize::BITS - x.saturating_sub(1).leading_zeros());
        let union_bytes = (n * m * std::mem::size_of::<f64>()) as u64;
        let base = Self {
            union_touches: 0.0,
            index_touches: 0.0,
            grid_touches: 0.0,
            material_touches: 1.0,
            union_bytes,
            index_bytes: footprint_unionized(n, m) - union_bytes,
            grid_bytes: footprint_nuclide_grids(n, m),
            material_bytes: materials.allocated_bytes() as u64,
        };
        debug_assert_eq!(base.grid_bytes, (n * m * (1 + XS_TYPES) * 8) as u64);
        match algorithm {
            Algorithm::Unionized => Self {
                union_touches: ceil_log2(n * m),
                index_touches: nucs,
                grid_touches: 2.0 * nucs,
                ..base
            },
            Algorithm::Basic => Self {
                grid_touches: nucs * (ceil_log2(m) + 2.0),
                ..base
            },
        }
    }

    pub fn touches(&self, s: Structure) -> f64 {
        match s {
            Structure::UnionEnergies => self.union_touches,
            Structure::IndexTable => self.index_touches,
            Structure::NuclideGrids => self.grid_touches,
            Structure::Materials => self.material_touches,
        }
    }

    pub fn bytes(&self, s: Structure) -> u64 {
        match s {
            Structure::UnionEnergies => self.union_bytes,
            Structure::IndexTable => self.index_bytes,
            Structure::NuclideGrids => self.grid_bytes,
            Structure::Materials => self.material_bytes,
        }
    }

    pub fn total_touches(&self) -> f64 {
        Structure::ALL.iter().map(|&s| self.touches(s)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub threads: usize,
    pub lookups_per_s: f64,
    /// Against the same plan on one thread.
    pub efficiency_pct: f64,
    /// Memory accesses per lookup served by each domain.
    pub domain_accesses: Vec<f64>,
    pub remote_fraction: f64,
    pub tlb_miss_rate: f64,
    /// Queueing multiplier on each domain's memory latency.
    pub contention: Vec<f64>,
    pub cpu_j_per_lookup: Vec<f64>,
    pub dram_j_per_lookup: Vec<f64>,
}

struct StructureModel {
    touches: f64,
    miss_rate: f64,
    /// Access share per domain, indexed by the reading thread's domain.
    shares: Vec<Vec<f64>>,
}

fn structure_models(
    params: &SimParams,
    profile: &AccessProfile,
    plan: &PlacementPlan,
    topo: &Topology,
) -> Result<Vec<StructureModel>, SimError> {
    let topo = topo.clone().with_page_sizes(params.page_size, params.huge_page_size);
    let plan = plan.normalized(&topo).map_err(|e| SimError::Usage(e.to_string()))?;
    let d = topo.n_domains();
    Structure::ALL
        .iter()
        .map(|&s| {
            let policy = plan.get(s);
            let bytes = profile.bytes(s);
            let page = policy.page_size(&topo) as u64;
            let miss_rate = tlb_miss_rate(bytes, page, params.tlb_entries_for(policy.is_huge()) as u64);
            // the master thread that first touches runs in domain 0
            let counts = policy.expected_page_counts(bytes.max(1) as usize, &topo, 0);
            let share = |c: &[u64]| {
                let total: u64 = c.iter().sum();
                c.iter().map(|&x| x as f64 / total as f64).collect::<Vec<_>>()
            };
            let shares = (0..d)
                .map(|dom| {
                    let replica = match policy.base() {
                        PlacementPolicy::Replicate(ds) => ds.iter().position(|&x| x == dom).unwrap_or(0),
                        _ => 0,
                    };
                    share(&counts[replica])
                })
                .collect();
            Ok(StructureModel {
                touches: profile.touches(s),
                miss_rate,
                shares,
            })
        })
        .collect()
}

struct Eval {
    lookups_per_ns: f64,
    /// Threads placed in each domain.
    domain_threads: Vec<f64>,
    /// Lookup rate of one thread in each domain.
    domain_rate: Vec<f64>,
    /// Per-lookup accesses to each domain by a thread in each domain.
    domain_accesses: Vec<Vec<f64>>,
    contention: Vec<f64>,
}

fn evaluate(params: &SimParams, models: &[StructureModel], n_domains: usize, threads: usize) -> Eval {
    // round-robin: thread t runs in domain t mod n_domains, and all threads
    // of one domain see the same costs
    let domain_threads: Vec<f64> = (0..n_domains)
        .map(|dom| (threads / n_domains + usize::from(dom < threads % n_domains)) as f64)
        .collect();
    let lat = |from: usize, to: usize| if from == to { params.t_local } else { params.t_remote };

    let domain_accesses: Vec<Vec<f64>> = (0..n_domains)
        .map(|dt| {
            let mut a = vec![0.0; n_domains];
            for s in models {
                for (j, sh) in s.shares[dt].iter().enumerate() {
                    a[j] += s.touches * sh;
                }
            }
            a
        })
        .collect();

    let lookup_time = |dt: usize, mult: &[f64]| {
        let mut ns = params.t_cpu;
        for s in models {
            let mem: f64 = s.shares[dt].iter().enumerate().map(|(j, sh)| sh * lat(dt, j) * mult[j]).sum();
            ns += s.touches * (mem + s.miss_rate * params.t_tlb_refill);
        }
        ns
    };

    let ones = vec![1.0; n_domains];
    let contention = match params.bandwidth_cap {
        None => ones,
        Some(cap) => {
            let mut demand = vec![0.0; n_domains];
            for (dt, acc) in domain_accesses.iter().enumerate() {
                let rate = domain_threads[dt] / lookup_time(dt, &ones);
                for (j, a) in acc.iter().enumerate() {
                    demand[j] += a * rate;
                }
            }
            demand.iter().map(|&x| (x / cap).max(1.0)).collect()
        }
    };

    let domain_rate: Vec<f64> = (0..n_domains).map(|dt| 1.0 / lookup_time(dt, &contention)).collect();
    Eval {
        lookups_per_ns: domain_threads.iter().zip(&domain_rate).map(|(n, r)| n * r).sum(),
        domain_threads,
        domain_rate,
        domain_accesses,
        contention,
    }
}

/// Predicted throughput and resource use for `plan` at `threads` threads.
pub fn simulate(
    params: &SimParams,
    profile: &AccessProfile,
    plan: &PlacementPlan,
    topo: &Topology,
    threads: usize,
) -> Result<SimResult, SimError> {
    if threads == 0 {
        return Err(SimError::Usage("threads must be at least 1".into()));
    }
    params.validate()?;
    let models = structure_models(params, profile, plan, topo)?;
    let d = topo.n_domains();
    let ev = evaluate(params, &models, d, threads);
    let single = evaluate(params, &models, d, 1);

    // weight each domain by the share of lookups its threads complete
    let mut domain_accesses = vec![0.0; d];
    let mut remote = 0.0;
    for (dt, acc) in ev.domain_accesses.iter().enumerate() {
        let w = ev.domain_threads[dt] * ev.domain_rate[dt] / ev.lookups_per_ns;
        for (j, a) in acc.iter().enumerate() {
            domain_accesses[j] += w * a;
            if j != dt {
                remote += w * a;
            }
        }
    }
    let total: f64 = domain_accesses.iter().sum();
    let touches: f64 = models.iter().map(|s| s.touches).sum();
    let lookups_per_s = ev.lookups_per_ns * 1e9;
    Ok(SimResult {
        threads,
        lookups_per_s,
        efficiency_pct: efficiency(ev.lookups_per_ns, single.lookups_per_ns, threads)
            .map_err(|e| SimError::Usage(e.to_string()))?,
        remote_fraction: if total > 0.0 { remote / total } else { 0.0 },
        tlb_miss_rate: if touches > 0.0 {
            models.iter().map(|s| s.touches * s.miss_rate).sum::<f64>() / touches
        } else {
            0.0
        },
        contention: ev.contention,
        cpu_j_per_lookup: vec![params.package_power_w / lookups_per_s; d],
        dram_j_per_lookup: domain_accesses.iter().map(|a| a * params.dram_nj_per_access * 1e-9).collect(),
        domain_accesses,
    })
}

/// Simulates a preset at each thread count.
pub fn sweep(
    params: &SimParams,
    profile: &AccessProfile,
    preset: Preset,
    topo: &Topology,
    threads: &[usize],
) -> Result<Vec<SimResult>, SimError> {
    let plan = preset.plan(topo);
    threads.iter().map(|&n| simulate(params, profile, &plan, topo, n)).collect()
}

/// Which single-thread throughput an efficiency target is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    /// The same plan on one thread.
    SamePlan,
    /// The default (first-touch) plan on one thread.
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTarget {
    pub plan: PlacementPlan,
    pub threads: usize,
    pub efficiency_pct: f64,
    pub baseline: Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: SimParams,
    /// Sum of squared errors in percentage points.
    pub residual: f64,
    pub predictions: Vec<f64>,
}

/// Remote/local latency ratios searched by [`calibrate`].
pub fn ratio_grid() -> impl Iterator<Item = f64> {
    (101..=400).map(|k| k as f64 / 100.0)
}

/// Bandwidth caps searched by [`calibrate`], as multiples of one thread's
/// access rate at local latency; `None` is unlimited.
pub fn cap_grid() -> impl Iterator<Item = Option<f64>> {
    std::iter::once(None).chain((0..=128).map(|k| Some(2f64.powf(k as f64 / 16.0))))
}

/// Grid search over the remote/local latency ratio and the per-domain
/// bandwidth cap, keeping every other field of `base`. Ties keep the
/// earliest grid point.
pub fn calibrate(
    base: &SimParams,
    profile: &AccessProfile,
    topo: &Topology,
    targets: &[CalibrationTarget],
) -> Result<Calibration, SimError> {
    if targets.is_empty() {
        return Err(SimError::Usage("calibration needs at least one target".into()));
    }
    base.validate().or_else(|e| match e {
        // t_remote is overwritten below
        SimError::Params(ref m) if m.contains("t_remote") => Ok(()),
        other => Err(other),
    })?;
    if let Some(t) = targets.iter().find(|t| t.threads == 0) {
        return Err(SimError::Usage(format!("target with {} threads", t.threads)));
    }
    let default_plan = PlacementPlan::uniform(PlacementPolicy::FirstTouch);
    let d = topo.n_domains();
    let target_models: Vec<_> = targets
        .iter()
        .map(|t| structure_models(base, profile, &t.plan, topo))
        .collect::<Result<_, _>>()?;
    let default_models = structure_models(base, profile, &default_plan, topo)?;

    let one_thread_rate = profile.total_touches() / (base.t_cpu + profile.total_touches() * base.t_local);
    let mut best: Option<Calibration> = None;
    for ratio in ratio_grid() {
        for cap in cap_grid() {
            let params = SimParams {
                t_remote: base.t_local * ratio,
                bandwidth_cap: cap.map(|c| c * one_thread_rate),
                ..base.clone()
            };
            let default_one = evaluate(&params, &default_models, d, 1).lookups_per_ns;
            let mut residual = 0.0;
            let mut predictions = Vec::with_capacity(targets.len());
            for (t, models) in targets.iter().zip(&target_models) {
                let pn = evaluate(&params, models, d, t.threads).lookups_per_ns;
                let p1 = match t.baseline {
                    Baseline::SamePlan => evaluate(&params, models, d, 1).lookups_per_ns,
                    Baseline::Default => default_one,
                };
                let e = relative_efficiency(pn, p1, t.threads).map_err(|e| SimError::Usage(e.to_string()))?;
                residual += (e - t.efficiency_pct).powi(2);
                predictions.push(e);
            }
            if best.as_ref().is_none_or(|b| residual < b.residual) {
                best = Some(Calibration {
                    params,
                    residual,
                    predictions,
                });
            }
        }
    }
    Ok(best.expect("search grid is non-empty"))
}

/// The two scaling anchors: default at 16 threads near 70% and numag at 16
/// threads near 95% of the default single-thread rate.
pub fn anchor_targets(topo: &Topology) -> Vec<CalibrationTarget> {
    vec![
        CalibrationTarget {
            plan: Preset::Default.plan(topo),
            threads: 16,
            efficiency_pct: 70.0,
            baseline: Baseline::SamePlan,
        },
        CalibrationTarget {
            plan: Preset::Numag.plan(topo),
            threads: 16,
            efficiency_pct: 95.0,
            baseline: Baseline::Default,
        },
    ]
}
