//! Reactor data structures: per-nuclide energy grids, the material table,
//! and the unionized energy grid with its per-nuclide index table.
//!
//! Every nuclide shares the same number of gridpoints, so the nuclide grids
//! are stored as one flat `n * m` array of [`NuclideGridPoint`]s and the
//! index table as one flat `(n * m) * n` array of `u32`. The analytic
//! footprint functions describe exactly these two allocations.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of cross-section interaction types stored per gridpoint.
pub const XS_TYPES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// One energy level of a nuclide grid: normalized energy plus the total,
/// elastic, absorption, fission and nu-fission cross sections.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NuclideGridPoint {
    pub energy: f64,
    pub xs: [f64; XS_TYPES],
}

impl NuclideGridPoint {
    pub fn new(energy: f64, xs: [f64; XS_TYPES]) -> Self {
        Self { energy, xs }
    }
}

/// Borrowed view of a single nuclide's grid.
#[derive(Debug, Clone, Copy)]
pub struct NuclideGrid<'a> {
    pub nuclide_id: usize,
    pub points: &'a [NuclideGridPoint],
}

impl NuclideGrid<'_> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// All nuclide grids in one contiguous allocation, nuclide-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NuclideGrids {
    n_nuclides: usize,
    gridpoints: usize,
    points: Vec<NuclideGridPoint>,
    fingerprint: u64,
}

impl NuclideGrids {
    /// Wraps a flat `n_nuclides * gridpoints` point array after checking the
    /// per-grid invariants.
    pub fn from_flat(
        n_nuclides: usize,
        gridpoints: usize,
        points: Vec<NuclideGridPoint>,
    ) -> Result<Self> {
        if n_nuclides == 0 {
            return Err(GridError::Config("at least one nuclide grid is required".into()));
        }
        if gridpoints < 2 {
            return Err(GridError::Config(format!(
                "each nuclide grid needs at least 2 points, got {gridpoints}"
            )));
        }
        if points.len() != n_nuclides * gridpoints {
            return Err(GridError::Consistency(format!(
                "expected {} points, got {}",
                n_nuclides * gridpoints,
                points.len()
            )));
        }
        for (k, grid) in points.chunks_exact(gridpoints).enumerate() {
            validate_grid(k, grid)?;
        }
        let fingerprint = grid_fingerprint(n_nuclides, gridpoints, &points);
        Ok(Self {
            n_nuclides,
            gridpoints,
            points,
            fingerprint,
        })
    }

    /// Builds from one point list per nuclide; all lists must have equal length.
    pub fn from_grids(grids: Vec<Vec<NuclideGridPoint>>) -> Result<Self> {
        let n = grids.len();
        let m = grids.first().map_or(0, Vec::len);
        if let Some((k, g)) = grids.iter().enumerate().find(|(_, g)| g.len() != m) {
            return Err(GridError::Config(format!(
                "nuclide {k} has {} points, expected {m} (all grids share one length)",
                g.len()
            )));
        }
        Self::from_flat(n, m, grids.into_iter().flatten().collect())
    }

    /// Convenience for tests and examples: grids given only by their energies,
    /// with all cross sections set to zero.
    pub fn from_energies(energies: &[&[f64]]) -> Result<Self> {
        Self::from_grids(
            energies
                .iter()
                .map(|es| {
                    es.iter()
                        .map(|&e| NuclideGridPoint::new(e, [0.0; XS_TYPES]))
                        .collect()
                })
                .collect(),
        )
    }

    pub fn n_nuclides(&self) -> usize {
        self.n_nuclides
    }

    pub fn gridpoints(&self) -> usize {
        self.gridpoints
    }

    pub fn points(&self) -> &[NuclideGridPoint] {
        &self.points
    }

    pub fn grid(&self, nuclide_id: usize) -> NuclideGrid<'_> {
        let start = nuclide_id * self.gridpoints;
        NuclideGrid {
            nuclide_id,
            points: &self.points[start..start + self.gridpoints],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = NuclideGrid<'_>> {
        self.points
            .chunks_exact(self.gridpoints)
            .enumerate()
            .map(|(nuclide_id, points)| NuclideGrid { nuclide_id, points })
    }

    /// Size in bytes of the backing point array.
    pub fn allocated_bytes(&self) -> usize {
        std::mem::size_of_val(self.points.as_slice())
    }

    /// 64-bit digest of the grid energies, used to detect a unionized grid
    /// built from a different dataset.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

pub(crate) fn grid_fingerprint(n: usize, m: usize, points: &[NuclideGridPoint]) -> u64 {
    let mut h = crate::rng::mix64(n as u64 ^ ((m as u64) << 32));
    for p in points {
        h = crate::rng::mix64(h ^ p.energy.to_bits());
    }
    h
}

fn validate_grid(k: usize, grid: &[NuclideGridPoint]) -> Result<()> {
    for p in grid {
        if !p.xs.iter().all(|x| x.is_finite()) {
            return Err(GridError::Consistency(format!(
                "nuclide {k}: non-finite cross section at energy {}",
                p.energy
            )));
        }
        if !(p.energy > 0.0 && p.energy < 1.0) {
            return Err(GridError::Consistency(format!(
                "nuclide {k}: energy {} outside (0, 1)",
                p.energy
            )));
        }
    }
    if let Some(w) = grid.windows(2).find(|w| w[0].energy >= w[1].energy) {
        return Err(GridError::Consistency(format!(
            "nuclide {k}: energies not strictly ascending ({} then {})",
            w[0].energy, w[1].energy
        )));
    }
    Ok(())
}

/// Which nuclides make up each material and how often each material is
/// sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialTable {
    mats: Vec<Vec<u32>>,
    selection_weights: Vec<f64>,
}

impl MaterialTable {
    pub fn new(mats: Vec<Vec<u32>>, selection_weights: Vec<f64>) -> Result<Self> {
        if mats.is_empty() {
            return Err(GridError::Config("at least one material is required".into()));
        }
        if mats.len() != selection_weights.len() {
            return Err(GridError::Consistency(format!(
                "{} materials but {} selection weights",
                mats.len(),
                selection_weights.len()
            )));
        }
        for (i, nucs) in mats.iter().enumerate() {
            if nucs.is_empty() {
                return Err(GridError::Config(format!("material {i} has no nuclides")));
            }
            let mut sorted = nucs.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(GridError::Consistency(format!(
                    "material {i} lists a nuclide more than once"
                )));
            }
        }
        if selection_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GridError::Config("selection weights must be nonnegative".into()));
        }
        let total: f64 = selection_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(GridError::Config(format!(
                "selection weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            mats,
            selection_weights,
        })
    }

    /// Equal weight for every material.
    pub fn uniform(mats: Vec<Vec<u32>>) -> Result<Self> {
        let w = 1.0 / mats.len().max(1) as f64;
        let mut weights = vec![w; mats.len()];
        // absorb rounding so the sum is within 1e-12 of one
        if let Some(last) = weights.last_mut() {
            let rest: f64 = w * (mats.len() - 1) as f64;
            *last = 1.0 - rest;
        }
        Self::new(mats, weights)
    }

    pub fn n_materials(&self) -> usize {
        self.mats.len()
    }

    pub fn num_nucs(&self, mat: usize) -> usize {
        self.mats[mat].len()
    }

    pub fn nuclides(&self, mat: usize) -> &[u32] {
        &self.mats[mat]
    }

    pub fn mats(&self) -> &[Vec<u32>] {
        &self.mats
    }

    pub fn selection_weights(&self) -> &[f64] {
        &self.selection_weights
    }

    /// Expected number of nuclides visited by one lookup.
    pub fn mean_nuclides_per_lookup(&self) -> f64 {
        self.mats
            .iter()
            .zip(&self.selection_weights)
            .map(|(m, w)| m.len() as f64 * w)
            .sum()
    }

    /// Checks every nuclide ID against a dataset of `n_nuclides`.
    pub fn validate_against(&self, n_nuclides: usize) -> Result<()> {
        for (i, nucs) in self.mats.iter().enumerate() {
            if let Some(bad) = nucs.iter().find(|&&id| id as usize >= n_nuclides) {
                return Err(GridError::Consistency(format!(
                    "material {i} references nuclide {bad}, dataset has {n_nuclides}"
                )));
            }
        }
        Ok(())
    }

    pub fn allocated_bytes(&self) -> usize {
        self.mats.iter().map(|m| std::mem::size_of_val(m.as_slice())).sum::<usize>()
            + std::mem::size_of_val(self.selection_weights.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_nuclides: usize,
    pub gridpoints_per_nuclide: usize,
    pub n_materials: usize,
    pub rng_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_nuclides: 355,
            gridpoints_per_nuclide: 11303,
            n_materials: 12,
            rng_seed: 42,
        }
    }
}

impl DatasetConfig {
    pub fn new(n_nuclides: usize, gridpoints_per_nuclide: usize, n_materials: usize, rng_seed: u64) -> Self {
        Self {
            n_nuclides,
            gridpoints_per_nuclide,
            n_materials,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nuclides == 0 || self.n_materials == 0 {
            return Err(GridError::Config(
                "nuclide and material counts must be at least 1".into(),
            ));
        }
        if self.gridpoints_per_nuclide < 2 {
            return Err(GridError::Config(format!(
                "gridpoints per nuclide must be at least 2, got {}",
                self.gridpoints_per_nuclide
            )));
        }
        if self.n_nuclides > u32::MAX as usize {
            return Err(GridError::Config("nuclide IDs must fit in 32 bits".into()));
        }
        self.n_nuclides
            .checked_mul(self.gridpoints_per_nuclide)
            .and_then(|nm| nm.checked_mul(self.n_nuclides))
            .ok_or_else(|| GridError::Config("dataset dimensions overflow".into()))?;
        Ok(())
    }

    pub fn total_gridpoints(&self) -> usize {
        self.n_nuclides * self.gridpoints_per_nuclide
    }
}

/// A generated or loaded dataset: nuclide grids plus material table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grids: NuclideGrids,
    pub materials: MaterialTable,
    /// Seed the data was generated from; 0 for hand-built datasets.
    pub rng_seed: u64,
}

impl Dataset {
    pub fn new(grids: NuclideGrids, materials: MaterialTable) -> Result<Self> {
        materials.validate_against(grids.n_nuclides())?;
        Ok(Self {
            grids,
            materials,
            rng_seed: 0,
        })
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }

    pub fn config(&self) -> DatasetConfig {
        DatasetConfig::new(
            self.grids.n_nuclides(),
            self.grids.gridpoints(),
            self.materials.n_materials(),
            self.rng_seed,
        )
    }
}

/// Generates the synthetic dataset for `cfg`. The result depends only on
/// the config; the same seed always yields bit-identical data.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let m = cfg.gridpoints_per_nuclide;
    let mut points = Vec::with_capacity(cfg.total_gridpoints());
    let mut energies = Vec::with_capacity(m);
    for _ in 0..cfg.n_nuclides {
        loop {
            energies.clear();
            energies.extend((0..m).map(|_| open_unit(&mut rng)));
            energies.sort_unstable_by(f64::total_cmp);
            if energies.windows(2).all(|w| w[0] < w[1]) {
                break;
            }
        }
        for &energy in &energies {
            let mut xs = [0.0; XS_TYPES];
            for x in &mut xs {
                *x = open_unit(&mut rng);
            }
            points.push(NuclideGridPoint { energy, xs });
        }
    }
    let grids = NuclideGrids::from_flat(cfg.n_nuclides, m, points)?;
    let materials = generate_materials(cfg)?;
    Ok(Dataset::new(grids, materials)?.with_seed(cfg.rng_seed))
}

/// The material table `generate_dataset` produces, without the grids.
/// Materials come from their own stream of the seeded generator.
pub fn generate_materials(cfg: &DatasetConfig) -> Result<MaterialTable> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(MATERIAL_STREAM);
    generate_materials_with(cfg, &mut rng)
}

const MATERIAL_STREAM: u64 = 1;

fn generate_materials_with(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<MaterialTable> {
    let mats = (0..cfg.n_materials)
        .map(|_| {
            let size = rng.random_range(1..=cfg.n_nuclides);
            let mut ids: Vec<u32> = index::sample(rng, cfg.n_nuclides, size)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    MaterialTable::uniform(mats)
}

/// Uniform draw from the open interval (0, 1).
fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let x: f64 = rng.random();
        if x > 0.0 {
            return x;
        }
    }
}

/// Sorted union of every grid energy plus, for each union entry and each
/// nuclide, the interpolation index into that nuclide's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionizedGrid {
    n_nuclides: usize,
    energies: Vec<f64>,
    index_table: Vec<u32>,
    source_fingerprint: u64,
}

impl UnionizedGrid {
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// Row-major `len() * n_nuclides` table.
    pub fn index_table(&self) -> &[u32] {
        &self.index_table
    }

    pub fn n_nuclides(&self) -> usize {
        self.n_nuclides
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn index(&self, entry: usize, nuclide: usize) -> u32 {
        self.index_table[entry * self.n_nuclides + nuclide]
    }

    pub fn row(&self, entry: usize) -> &[u32] {
        &self.index_table[entry * self.n_nuclides..(entry + 1) * self.n_nuclides]
    }

    /// Fingerprint of the nuclide grids this was built from.
    pub fn source_fingerprint(&self) -> u64 {
        self.source_fingerprint
    }

    pub fn allocated_bytes(&self) -> usize {
        std::mem::size_of_val(self.energies.as_slice())
            + std::mem::size_of_val(self.index_table.as_slice())
    }
}

const UNION_CHUNK_ROWS: usize = 2048;

/// Builds the unionized grid. Rows are filled in parallel chunks; each chunk
/// seeds its per-nuclide cursor with a binary search and then advances it
/// monotonically, so the result is independent of the worker count.
pub fn build_unionized(grids: &NuclideGrids) -> UnionizedGrid {
    let n = grids.n_nuclides();
    let m = grids.gridpoints();

    let mut energies: Vec<f64> = grids.points().iter().map(|p| p.energy).collect();
    // stable, so equal energies keep nuclide order
    energies.par_sort_by(f64::total_cmp);

    let mut index_table = vec![0u32; energies.len() * n];
    index_table
        .par_chunks_mut(UNION_CHUNK_ROWS * n)
        .enumerate()
        .for_each(|(chunk, rows)| {
            let first = chunk * UNION_CHUNK_ROWS;
            let row_count = rows.len() / n;
            for (k, grid) in grids.iter().enumerate() {
                let pts = grid.points;
                // number of points with energy <= current union energy
                let mut count = pts.partition_point(|p| p.energy <= energies[first]);
                for r in 0..row_count {
                    let e = energies[first + r];
                    while count < m && pts[count].energy <= e {
                        count += 1;
                    }
                    rows[r * n + k] = clamp_index(count, m) as u32;
                }
            }
        });

    UnionizedGrid {
        n_nuclides: n,
        energies,
        index_table,
        source_fingerprint: grids.fingerprint(),
    }
}

/// Maps "number of entries <= e" to the interpolation index: the last such
/// entry, clamped to `[0, len - 2]`.
#[inline]
pub(crate) fn clamp_index(count_le: usize, len: usize) -> usize {
    count_le.saturating_sub(1).min(len - 2)
}

/// Bytes used by the nuclide grids: one energy and five cross sections per
/// point, all 8-byte reals.
pub fn footprint_nuclide_grids(n: usize, m: usize) -> u64 {
    n as u64 * m as u64 * (1 + XS_TYPES as u64) * 8
}

/// Bytes used by the unionized grid: an 8-byte energy plus `n` 32-bit
/// indices for each of the `n * m` entries.
pub fn footprint_unionized(n: usize, m: usize) -> u64 {
    n as u64 * m as u64 * (8 + n as u64 * 4)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_index(grid: &[NuclideGridPoint], e: f64) -> usize {
        let mut last = None;
        for (i, p) in grid.iter().enumerate() {
            if p.energy <= e {
                last = Some(i);
            }
        }
        last.unwrap_or(0).min(grid.len() - 2)
    }

    #[test]
    fn minimal_dataset() {
        let ds = generate_dataset(&DatasetConfig::new(1, 2, 1, 42)).unwrap();
        assert_eq!(ds.grids.n_nuclides(), 1);
        let g = ds.grids.grid(0);
        assert_eq!(g.len(), 2);
        assert!(g.points[0].energy < g.points[1].energy);
        assert_eq!(ds.materials.nuclides(0), &[0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DatasetConfig::new(7, 33, 4, 9);
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        let bits = |d: &Dataset| -> Vec<u64> {
            d.grids
                .points()
                .iter()
                .flat_map(|p| std::iter::once(p.energy).chain(p.xs))
                .map(f64::to_bits)
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.materials, b.materials);
        assert_ne!(bits(&a), bits(&generate_dataset(&DatasetConfig { rng_seed: 10, ..cfg }).unwrap()));
    }

    #[test]
    fn generated_values_respect_invariants() {
        let ds = generate_dataset(&DatasetConfig::new(5, 40, 6, 3)).unwrap();
        for g in ds.grids.iter() {
            assert!(g.points.windows(2).all(|w| w[0].energy < w[1].energy));
            for p in g.points {
                assert!(p.energy > 0.0 && p.energy < 1.0);
                assert!(p.xs.iter().all(|x| x.is_finite()));
            }
        }
        let w: f64 = ds.materials.selection_weights().iter().sum();
        assert!((w - 1.0).abs() <= 1e-12);
        for mat in ds.materials.mats() {
            assert!(!mat.is_empty());
            assert!(mat.iter().all(|&id| (id as usize) < 5));
        }
    }

    #[test]
    fn materials_only_matches_full_generation() {
        let cfg = DatasetConfig::new(6, 17, 5, 77);
        assert_eq!(
            generate_materials(&cfg).unwrap(),
            generate_dataset(&cfg).unwrap().materials
        );
    }

    #[test]
    fn paper_scale_gridpoint_count() {
        assert_eq!(DatasetConfig::default().total_gridpoints(), 4_012_565);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_dataset(&DatasetConfig::new(0, 2, 1, 0)).is_err());
        assert!(generate_dataset(&DatasetConfig::new(1, 1, 1, 0)).is_err());
        assert!(generate_dataset(&DatasetConfig::new(1, 2, 0, 0)).is_err());
    }

    #[test]
    fn material_table_rejects_duplicates_and_bad_weights() {
        assert!(MaterialTable::new(vec![vec![0, 0]], vec![1.0]).is_err());
        assert!(MaterialTable::new(vec![vec![0]], vec![0.5]).is_err());
        assert!(MaterialTable::new(vec![vec![0], vec![1]], vec![1.5, -0.5]).is_err());
        assert!(MaterialTable::new(vec![vec![]], vec![1.0]).is_err());
        let t = MaterialTable::uniform(vec![vec![3]]).unwrap();
        assert!(t.validate_against(3).is_err());
        assert!(t.validate_against(4).is_ok());
    }

    #[test]
    fn unsorted_grid_rejected() {
        assert!(NuclideGrids::from_energies(&[&[0.5, 0.2]]).is_err());
        assert!(NuclideGrids::from_energies(&[&[0.2, 0.2]]).is_err());
        assert!(NuclideGrids::from_energies(&[&[0.2, 0.3], &[0.1, 0.2, 0.3]]).is_err());
    }

    #[test]
    fn union_single_nuclide_clamps() {
        let g = NuclideGrids::from_energies(&[&[0.2, 0.5, 0.9]]).unwrap();
        let u = build_unionized(&g);
        assert_eq!(u.energies(), &[0.2, 0.5, 0.9]);
        assert_eq!(u.index_table(), &[0, 1, 1]);
    }

    #[test]
    fn union_two_nuclides() {
        let g = NuclideGrids::from_energies(&[&[0.1, 0.9], &[0.5, 0.6]]).unwrap();
        let u = build_unionized(&g);
        assert_eq!(u.energies(), &[0.1, 0.5, 0.6, 0.9]);
        for e in 0..4 {
            assert_eq!(u.row(e), &[0, 0]);
        }
    }

    #[test]
    fn union_with_ties_keeps_length_and_order() {
        let g = NuclideGrids::from_energies(&[&[0.1, 0.4, 0.8], &[0.2, 0.4, 0.9]]).unwrap();
        let u = build_unionized(&g);
        assert_eq!(u.energies(), &[0.1, 0.2, 0.4, 0.4, 0.8, 0.9]);
        // 0.4 resolves to the last point <= 0.4 in both grids
        assert_eq!(u.row(2), &[1, 1]);
        assert_eq!(u.row(3), &[1, 1]);
        assert_eq!(u.row(5), &[1, 1]);
        assert_eq!(u.row(0), &[0, 0]);
    }

    #[test]
    fn union_matches_linear_scan() {
        for seed in 0..12 {
            let cfg = DatasetConfig::new(1 + (seed as usize % 8), 2 + (seed as usize * 5) % 63, 3, seed);
            let ds = generate_dataset(&cfg).unwrap();
            let u = build_unionized(&ds.grids);
            assert_eq!(u.len(), cfg.total_gridpoints());
            assert!(u.energies().windows(2).all(|w| w[0] <= w[1]));
            for (e, &energy) in u.energies().iter().enumerate() {
                for grid in ds.grids.iter() {
                    let idx = u.index(e, grid.nuclide_id) as usize;
                    assert_eq!(idx, brute_index(grid.points, energy));
                    assert!(grid.points[idx].energy <= energy || idx == 0);
                }
            }
        }
    }

    #[test]
    fn union_chunk_boundaries_are_seamless() {
        // more rows than one parallel chunk
        let ds = generate_dataset(&DatasetConfig::new(3, 1500, 2, 5)).unwrap();
        let u = build_unionized(&ds.grids);
        for e in (0..u.len()).step_by(7) {
            for grid in ds.grids.iter() {
                assert_eq!(u.index(e, grid.nuclide_id) as usize, brute_index(grid.points, u.energies()[e]));
            }
        }
        assert_eq!(u, build_unionized(&ds.grids));
    }

    #[test]
    fn footprints() {
        assert_eq!(footprint_nuclide_grids(355, 11303), 192_603_120);
        assert_eq!(footprint_nuclide_grids(1, 2), 96);
        assert_eq!(footprint_nuclide_grids(3, 20), 2 * footprint_nuclide_grids(3, 10));
        assert_eq!(footprint_unionized(355, 11303), 5_729_942_820);
        assert_eq!(footprint_unionized(1, 2), 24);
    }

    #[test]
    fn footprints_match_allocations() {
        for n in 1..=4 {
            for m in [2, 5, 17, 32] {
                let ds = generate_dataset(&DatasetConfig::new(n, m, 2, 1)).unwrap();
                let u = build_unionized(&ds.grids);
                assert_eq!(ds.grids.allocated_bytes() as u64, footprint_nuclide_grids(n, m));
                assert_eq!(u.allocated_bytes() as u64, footprint_unionized(n, m));
            }
        }
    }
}
