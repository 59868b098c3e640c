//! Macroscopic cross-section lookups.
//!
//! Two algorithms compute the same quantity: the basic one binary-searches
//! every nuclide grid of the sampled material, the unionized one searches
//! the union grid once and reads precomputed per-nuclide indices. Both sum
//! over the material's nuclide list in the same order and resolve the same
//! interpolation index, so their results agree bit for bit.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{clamp_index, grid_fingerprint, MaterialTable, NuclideGridPoint, NuclideGrids, UnionizedGrid, XS_TYPES};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LookupError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unionized grid does not belong to these nuclide grids")]
    Consistency,
    #[error("invalid run configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookupInput {
    pub p_energy: f64,
    pub p_mat: usize,
}

/// Accumulated cross sections, one per interaction type.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct XsVector(pub [f64; XS_TYPES]);

impl XsVector {
    pub fn bits(&self) -> [u64; XS_TYPES] {
        self.0.map(f64::to_bits)
    }
}

/// XOR-combined digest of every lookup result; independent of the order in
/// which lookups ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct VerificationChecksum(pub u64);

impl VerificationChecksum {
    pub fn combine(self, other: Self) -> Self {
        Self(self.0 ^ other.0)
    }

    /// Digest contribution of one lookup.
    pub fn of_lookup(lookup_index: u64, xs: &XsVector) -> Self {
        let mut h = rng::mix64(lookup_index);
        for b in xs.bits() {
            h = rng::mix64(h ^ b);
        }
        Self(h)
    }
}

impl fmt::Display for VerificationChecksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Basic,
    Unionized,
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "basic" => Ok(Self::Basic),
            "unionized" => Ok(Self::Unionized),
            other => Err(format!("unknown algorithm '{other}' (expected basic or unionized)")),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Basic => "basic",
            Self::Unionized => "unionized",
        })
    }
}

/// How per-nuclide contributions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Plain sum over the material's nuclides.
    #[default]
    Unweighted,
    /// Each contribution scaled by [`nuclide_concentration`].
    Concentration,
}

/// Deterministic pseudo-concentration of a nuclide within a material, in (0, 1).
pub fn nuclide_concentration(material: usize, nuclide: u32) -> f64 {
    rng::to_open_unit(rng::mix64(
        ((material as u64) << 32) ^ u64::from(nuclide) ^ 0x636f_6e63_656e_7472,
    ))
}

/// Samples lookup `lookup_index` of the stream identified by `seed`.
pub fn rng_lookup(seed: u64, lookup_index: u64, selection_weights: &[f64]) -> LookupInput {
    let (e_bits, m_bits) = rng::lookup_draws(seed, lookup_index);
    LookupInput {
        p_energy: rng::to_open_unit(e_bits),
        p_mat: rng::pick_weighted(selection_weights, rng::to_unit(m_bits)),
    }
}

/// Largest `i` with `energies[i] <= e`, clamped to `[0, len - 2]`. With
/// duplicate energies the last duplicate wins.
pub fn lower_bound(energies: &[f64], e: f64) -> Result<usize, LookupError> {
    if energies.len() < 2 {
        return Err(LookupError::Precondition(format!(
            "lower_bound needs at least 2 energies, got {}",
            energies.len()
        )));
    }
    Ok(lower_bound_unchecked(energies, e))
}

#[inline]
fn lower_bound_unchecked(energies: &[f64], e: f64) -> usize {
    clamp_index(energies.partition_point(|&x| x <= e), energies.len())
}

#[inline]
fn lower_bound_points(points: &[NuclideGridPoint], e: f64) -> usize {
    clamp_index(points.partition_point(|p| p.energy <= e), points.len())
}

/// Linear interpolation (or extrapolation) of all cross sections between
/// points `idx` and `idx + 1`. A zero-width segment yields `points[idx].xs`.
pub fn interpolate(points: &[NuclideGridPoint], idx: usize, e: f64) -> XsVector {
    let lo = &points[idx];
    let hi = &points[idx + 1];
    let width = hi.energy - lo.energy;
    if width == 0.0 {
        return XsVector(lo.xs);
    }
    let f = (e - lo.energy) / width;
    let mut out = [0.0; XS_TYPES];
    for (o, (a, b)) in out.iter_mut().zip(lo.xs.iter().zip(&hi.xs)) {
        *o = a + f * (b - a);
    }
    XsVector(out)
}

/// Operation counting hook for the lookup loops.
pub trait OpCounter {
    fn lower_bound(&mut self);
    fn interpolation(&mut self);
}

/// Discards all counts.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoCount;

impl OpCounter for NoCount {
    #[inline(always)]
    fn lower_bound(&mut self) {}
    #[inline(always)]
    fn interpolation(&mut self) {}
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounts {
    pub lower_bound_calls: u64,
    pub interpolations: u64,
}

impl OpCounter for OpCounts {
    fn lower_bound(&mut self) {
        self.lower_bound_calls += 1;
    }
    fn interpolation(&mut self) {
        self.interpolations += 1;
    }
}

/// Borrowed, read-only view of everything a lookup touches. The slices may
/// live in ordinary heap memory or in NUMA-placed regions.
#[derive(Debug, Clone, Copy)]
pub struct LookupData<'a> {
    points: &'a [NuclideGridPoint],
    gridpoints: usize,
    n_nuclides: usize,
    union_energies: &'a [f64],
    index_table: &'a [u32],
    materials: &'a MaterialTable,
    weighting: Weighting,
}

impl<'a> LookupData<'a> {
    /// View over the basic-algorithm data only.
    pub fn basic(grids: &'a NuclideGrids, materials: &'a MaterialTable) -> Self {
        Self {
            points: grids.points(),
            gridpoints: grids.gridpoints(),
            n_nuclides: grids.n_nuclides(),
            union_energies: &[],
            index_table: &[],
            materials,
            weighting: Weighting::Unweighted,
        }
    }

    /// View over grids plus a unionized grid; rejects a unionized grid built
    /// from different grids.
    pub fn with_unionized(
        grids: &'a NuclideGrids,
        unionized: &'a UnionizedGrid,
        materials: &'a MaterialTable,
    ) -> Result<Self, LookupError> {
        if unionized.source_fingerprint() != grids.fingerprint()
            || unionized.n_nuclides() != grids.n_nuclides()
        {
            return Err(LookupError::Consistency);
        }
        Ok(Self {
            union_energies: unionized.energies(),
            index_table: unionized.index_table(),
            ..Self::basic(grids, materials)
        })
    }

    /// Assembles a view from raw slices, e.g. copies held in placed memory.
    /// `expected_fingerprint` is the fingerprint of the original grids; the
    /// copy is rehashed and compared.
    pub fn from_parts(
        points: &'a [NuclideGridPoint],
        gridpoints: usize,
        union_energies: &'a [f64],
        index_table: &'a [u32],
        materials: &'a MaterialTable,
        expected_fingerprint: u64,
    ) -> Result<Self, LookupError> {
        if gridpoints < 2 || points.is_empty() || points.len() % gridpoints != 0 {
            return Err(LookupError::Precondition("malformed grid slice".into()));
        }
        let n_nuclides = points.len() / gridpoints;
        let union_ok = union_energies.is_empty() && index_table.is_empty()
            || union_energies.len() == points.len() && index_table.len() == points.len() * n_nuclides;
        if !union_ok || grid_fingerprint(n_nuclides, gridpoints, points) != expected_fingerprint {
            return Err(LookupError::Consistency);
        }
        Ok(Self {
            points,
            gridpoints,
            n_nuclides,
            union_energies,
            index_table,
            materials,
            weighting: Weighting::Unweighted,
        })
    }

    pub fn weighted(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn materials(&self) -> &'a MaterialTable {
        self.materials
    }

    pub fn has_unionized(&self) -> bool {
        !self.union_energies.is_empty()
    }

    #[inline]
    fn grid(&self, nuc: usize) -> &'a [NuclideGridPoint] {
        &self.points[nuc * self.gridpoints..(nuc + 1) * self.gridpoints]
    }

    #[inline]
    fn accumulate(&self, acc: &mut [f64; XS_TYPES], mat: usize, nuc: u32, xs: XsVector) {
        match self.weighting {
            Weighting::Unweighted => {
                for (a, x) in acc.iter_mut().zip(xs.0) {
                    *a += x;
                }
            }
            Weighting::Concentration => {
                let c = nuclide_concentration(mat, nuc);
                for (a, x) in acc.iter_mut().zip(xs.0) {
                    *a += c * x;
                }
            }
        }
    }

    /// Basic algorithm: one binary search per nuclide in the material.
    pub fn macro_xs_basic<C: OpCounter>(&self, input: LookupInput, counter: &mut C) -> XsVector {
        let mut acc = [0.0; XS_TYPES];
        for &nuc in self.materials.nuclides(input.p_mat) {
            let grid = self.grid(nuc as usize);
            let idx = lower_bound_points(grid, input.p_energy);
            counter.lower_bound();
            let xs = interpolate(grid, idx, input.p_energy);
            counter.interpolation();
            self.accumulate(&mut acc, input.p_mat, nuc, xs);
        }
        XsVector(acc)
    }

    /// Unionized algorithm: one binary search on the union grid, then table
    /// lookups. Panics if the view has no unionized grid.
    pub fn macro_xs_unionized<C: OpCounter>(&self, input: LookupInput, counter: &mut C) -> XsVector {
        assert!(self.has_unionized(), "lookup view was built without a unionized grid");
        let entry = lower_bound_unchecked(self.union_energies, input.p_energy);
        counter.lower_bound();
        let row = &self.index_table[entry * self.n_nuclides..(entry + 1) * self.n_nuclides];
        let mut acc = [0.0; XS_TYPES];
        for &nuc in self.materials.nuclides(input.p_mat) {
            let grid = self.grid(nuc as usize);
            let xs = interpolate(grid, row[nuc as usize] as usize, input.p_energy);
            counter.interpolation();
            self.accumulate(&mut acc, input.p_mat, nuc, xs);
        }
        XsVector(acc)
    }

    pub fn macro_xs<C: OpCounter>(&self, algorithm: Algorithm, input: LookupInput, counter: &mut C) -> XsVector {
        match algorithm {
            Algorithm::Basic => self.macro_xs_basic(input, counter),
            Algorithm::Unionized => self.macro_xs_unionized(input, counter),
        }
    }

    /// Runs lookups `range` of stream `seed` and returns their combined checksum.
    pub fn checksum_range(&self, algorithm: Algorithm, seed: u64, range: std::ops::Range<u64>) -> VerificationChecksum {
        let weights = self.materials.selection_weights();
        let mut sum = VerificationChecksum::default();
        for i in range {
            let input = rng_lookup(seed, i, weights);
            let xs = self.macro_xs(algorithm, input, &mut NoCount);
            sum = sum.combine(VerificationChecksum::of_lookup(i, &xs));
        }
        sum
    }
}

/// Basic-algorithm lookup on owned dataset parts.
pub fn macro_xs_basic(input: LookupInput, grids: &NuclideGrids, materials: &MaterialTable) -> XsVector {
    LookupData::basic(grids, materials).macro_xs_basic(input, &mut NoCount)
}

/// Unionized-algorithm lookup on owned dataset parts.
pub fn macro_xs_unionized(
    input: LookupInput,
    unionized: &UnionizedGrid,
    grids: &NuclideGrids,
    materials: &MaterialTable,
) -> Result<XsVector, LookupError> {
    Ok(LookupData::with_unionized(grids, unionized, materials)?.macro_xs_unionized(input, &mut NoCount))
}

/// Supplies each worker with the view it should read, e.g. the replica local
/// to its CPU.
pub trait ViewSource: Sync {
    fn view_for(&self, worker: usize, cpu: Option<usize>) -> LookupData<'_>;
}

impl ViewSource for LookupData<'_> {
    fn view_for(&self, _worker: usize, _cpu: Option<usize>) -> LookupData<'_> {
        *self
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub n_lookups: u64,
    pub n_threads: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// CPU for each worker, cycled if shorter than the worker count. Empty
    /// leaves workers unpinned.
    pub worker_cpus: Vec<usize>,
    /// Keep `n_threads` workers even when it exceeds the available CPUs.
    pub oversubscribe: bool,
}

impl RunOptions {
    pub fn new(n_lookups: u64, n_threads: usize, seed: u64, algorithm: Algorithm) -> Self {
        Self {
            n_lookups,
            n_threads,
            seed,
            algorithm,
            worker_cpus: Vec::new(),
            oversubscribe: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub lookups_per_s: f64,
    pub checksum: VerificationChecksum,
    pub elapsed: Duration,
    pub threads_used: usize,
}

/// Contiguous share of `0..n` for worker `w` of `workers`.
pub fn partition(n: u64, workers: usize, w: usize) -> std::ops::Range<u64> {
    let workers = workers as u128;
    let start = (n as u128 * w as u128 / workers) as u64;
    let end = (n as u128 * (w as u128 + 1) / workers) as u64;
    start..end
}

pub fn available_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `n_lookups` lookups over `n_threads` workers and times them.
pub fn run_lookups(opts: &RunOptions, source: &impl ViewSource) -> Result<RunOutcome, LookupError> {
    if opts.n_lookups == 0 {
        return Err(LookupError::Config("n_lookups must be at least 1".into()));
    }
    if opts.n_threads == 0 {
        return Err(LookupError::Config("n_threads must be at least 1".into()));
    }
    let mut threads = opts.n_threads;
    let avail = available_cpus();
    if threads > avail && !opts.oversubscribe {
        warn!("requested {threads} threads but only {avail} CPUs are available; clamping");
        threads = avail;
    }
    if opts.algorithm == Algorithm::Unionized && !source.view_for(0, opts.worker_cpus.first().copied()).has_unionized() {
        return Err(LookupError::Config("unionized algorithm requested without a unionized grid".into()));
    }

    let start = Instant::now();
    let checksum = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let cpu = (!opts.worker_cpus.is_empty()).then(|| opts.worker_cpus[w % opts.worker_cpus.len()]);
                s.spawn(move || {
                    if let Some(cpu) = cpu {
                        if let Err(e) = crate::placement::pin_current_worker(cpu) {
                            warn!("worker {w}: {e}; continuing unpinned");
                        }
                    }
                    let view = source.view_for(w, cpu);
                    view.checksum_range(opts.algorithm, opts.seed, partition(opts.n_lookups, threads, w))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("lookup worker panicked"))
            .fold(VerificationChecksum::default(), VerificationChecksum::combine)
    });
    let elapsed = start.elapsed();
    Ok(RunOutcome {
        lookups_per_s: opts.n_lookups as f64 / elapsed.as_secs_f64().max(1e-9),
        checksum,
        elapsed,
        threads_used: threads,
    })
}
