//! Python bindings for the lookup kernel, dataset files and the NUMA cost model.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use xsnuma::grid::{self, build_unionized, UnionizedGrid};
use xsnuma::lookup::{run_lookups, Algorithm, LookupData, LookupInput, NoCount, RunOptions};
use xsnuma::placement::{Preset, Topology};
use xsnuma::sim::{self, AccessProfile, SimParams, SimResult};
use xsnuma::{io, metrics};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(value_err)
}

fn sim_params(json: Option<&str>) -> PyResult<Option<SimParams>> {
    json.map(|j| {
        let p: SimParams = serde_json::from_str(j).map_err(value_err)?;
        p.validate().map_err(value_err)?;
        Ok(p)
    })
    .transpose()
}

#[pyclass(name = "DatasetConfig", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyDatasetConfig(grid::DatasetConfig);

#[pymethods]
impl PyDatasetConfig {
    #[new]
    #[pyo3(signature = (n_nuclides=355, gridpoints_per_nuclide=11303, n_materials=12, rng_seed=42))]
    fn new(n_nuclides: usize, gridpoints_per_nuclide: usize, n_materials: usize, rng_seed: u64) -> PyResult<Self> {
        let cfg = grid::DatasetConfig::new(n_nuclides, gridpoints_per_nuclide, n_materials, rng_seed);
        cfg.validate().map_err(value_err)?;
        Ok(Self(cfg))
    }

    #[getter]
    fn n_nuclides(&self) -> usize {
        self.0.n_nuclides
    }

    #[getter]
    fn gridpoints_per_nuclide(&self) -> usize {
        self.0.gridpoints_per_nuclide
    }

    #[getter]
    fn n_materials(&self) -> usize {
        self.0.n_materials
    }

    #[getter]
    fn rng_seed(&self) -> u64 {
        self.0.rng_seed
    }

    /// Bytes of the per-nuclide grids.
    fn nuclide_grid_bytes(&self) -> u64 {
        grid::footprint_nuclide_grids(self.0.n_nuclides, self.0.gridpoints_per_nuclide)
    }

    /// Bytes of the per-nuclide grids plus the unionized grid.
    fn unionized_bytes(&self) -> u64 {
        grid::footprint_unionized(self.0.n_nuclides, self.0.gridpoints_per_nuclide)
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "DatasetConfig(n_nuclides={}, gridpoints_per_nuclide={}, n_materials={}, rng_seed={})",
            c.n_nuclides, c.gridpoints_per_nuclide, c.n_materials, c.rng_seed
        )
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    ds: grid::Dataset,
    union: UnionizedGrid,
}

impl PyDataset {
    fn wrap(ds: grid::Dataset) -> Self {
        let union = build_unionized(&ds.grids);
        Self { ds, union }
    }

    fn data(&self) -> LookupData<'_> {
        LookupData::with_unionized(&self.ds.grids, &self.union, &self.ds.materials).expect("unionized grid built from these grids")
    }
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn generate(cfg: &PyDatasetConfig) -> PyResult<Self> {
        Ok(Self::wrap(grid::generate_dataset(&cfg.0).map_err(value_err)?))
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        match io::read_dataset(path) {
            Ok(ds) => Ok(Self::wrap(ds)),
            Err(e @ io::DatasetIoError::Io { .. }) => Err(PyIOError::new_err(e.to_string())),
            Err(e) => Err(value_err(e)),
        }
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io::write_dataset(path, &self.ds).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn config(&self) -> PyDatasetConfig {
        PyDatasetConfig(self.ds.config())
    }

    #[getter]
    fn union_len(&self) -> usize {
        self.union.len()
    }

    /// Nuclide ids of material `mat`.
    fn material(&self, mat: usize) -> PyResult<Vec<u32>> {
        if mat >= self.ds.materials.n_materials() {
            return Err(value_err(format!("material {mat} out of range")));
        }
        Ok(self.ds.materials.nuclides(mat).to_vec())
    }

    /// Macroscopic cross sections for one (energy, material) pair.
    #[pyo3(signature = (energy, material, algorithm="unionized"))]
    fn macro_xs(&self, energy: f64, material: usize, algorithm: &str) -> PyResult<Vec<f64>> {
        if !(energy > 0.0 && energy < 1.0) {
            return Err(value_err("energy must lie in (0, 1)"));
        }
        if material >= self.ds.materials.n_materials() {
            return Err(value_err(format!("material {material} out of range")));
        }
        let input = LookupInput { p_energy: energy, p_mat: material };
        Ok(self.data().macro_xs(parse(algorithm)?, input, &mut NoCount).0.to_vec())
    }

    /// Checksum of lookups `0..n_lookups` as 16 lowercase hex digits.
    #[pyo3(signature = (n_lookups, algorithm="unionized", seed=42))]
    fn checksum(&self, n_lookups: u64, algorithm: &str, seed: u64) -> PyResult<String> {
        Ok(self.data().checksum_range(parse(algorithm)?, seed, 0..n_lookups).to_string())
    }

    /// Runs and times lookups; returns a dict with rate, checksum and threads used.
    #[pyo3(signature = (n_lookups, threads=1, algorithm="unionized", seed=42))]
    fn run<'py>(&self, py: Python<'py>, n_lookups: u64, threads: usize, algorithm: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let opts = RunOptions::new(n_lookups, threads, seed, parse::<Algorithm>(algorithm)?);
        let out = py.detach(|| run_lookups(&opts, &self.data())).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("lookups_per_s", out.lookups_per_s)?;
        d.set_item("checksum", out.checksum.to_string())?;
        d.set_item("wall_time_s", out.elapsed.as_secs_f64())?;
        d.set_item("threads_used", out.threads_used)?;
        Ok(d)
    }
}

fn result_dict<'py>(py: Python<'py>, preset: Preset, r: &SimResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("policy", preset.name())?;
    d.set_item("threads", r.threads)?;
    d.set_item("lookups_per_s", r.lookups_per_s)?;
    d.set_item("efficiency_pct", r.efficiency_pct)?;
    d.set_item("remote_fraction", r.remote_fraction)?;
    d.set_item("tlb_miss_rate", r.tlb_miss_rate)?;
    d.set_item("contention", r.contention.clone())?;
    d.set_item("cpu_j_per_lookup", r.cpu_j_per_lookup.clone())?;
    d.set_item("dram_j_per_lookup", r.dram_j_per_lookup.clone())?;
    Ok(d)
}

fn profile(cfg: &grid::DatasetConfig, algorithm: &str) -> PyResult<AccessProfile> {
    let mats = grid::generate_materials(cfg).map_err(value_err)?;
    Ok(AccessProfile::new(cfg, &mats, parse(algorithm)?))
}

/// Parameters fitted to the scaling anchors, as a JSON string.
#[pyfunction]
#[pyo3(signature = (domains=2, cpus_per_domain=8, config=None, algorithm="unionized"))]
fn calibrate(domains: usize, cpus_per_domain: usize, config: Option<&PyDatasetConfig>, algorithm: &str) -> PyResult<(String, f64)> {
    let topo = Topology::uniform(domains, cpus_per_domain).map_err(value_err)?;
    let cfg = config.map_or_else(grid::DatasetConfig::default, |c| c.0);
    let prof = profile(&cfg, algorithm)?;
    let cal = sim::calibrate(&SimParams::default(), &prof, &topo, &sim::anchor_targets(&topo)).map_err(value_err)?;
    Ok((serde_json::to_string(&cal.params).map_err(value_err)?, cal.residual))
}

/// Modelled sweep of one preset; `params` is a JSON object of every model parameter.
#[pyfunction]
#[pyo3(signature = (policy, threads, params=None, domains=2, cpus_per_domain=8, config=None, algorithm="unionized"))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    policy: &str,
    threads: Vec<usize>,
    params: Option<&str>,
    domains: usize,
    cpus_per_domain: usize,
    config: Option<&PyDatasetConfig>,
    algorithm: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let preset: Preset = parse(policy)?;
    let topo = Topology::uniform(domains, cpus_per_domain).map_err(value_err)?;
    let cfg = config.map_or_else(grid::DatasetConfig::default, |c| c.0);
    let prof = profile(&cfg, algorithm)?;
    let params = match sim_params(params)? {
        Some(p) => p,
        None => sim::calibrate(&SimParams::default(), &prof, &topo, &sim::anchor_targets(&topo)).map_err(value_err)?.params,
    };
    let rows = sim::sweep(&params, &prof, preset, &topo, &threads).map_err(value_err)?;
    rows.iter().map(|r| result_dict(py, preset, r)).collect()
}

#[pyfunction]
fn efficiency(p_n: f64, p_1: f64, n: usize) -> PyResult<f64> {
    metrics::efficiency(p_n, p_1, n).map_err(value_err)
}

#[pyfunction]
fn tlb_miss_rate(working_set: u64, page_size: u64, tlb_entries: u64) -> f64 {
    sim::tlb_miss_rate(working_set, page_size, tlb_entries)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    Preset::ALL.iter().map(|p| p.name()).collect()
}

#[pymodule]
fn xsnuma_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDatasetConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(tlb_miss_rate, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
