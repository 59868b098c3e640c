use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::PlacementError;

/// Overrides the sysfs NUMA node directory (test fixtures).
pub const NODE_ROOT_ENV: &str = "XSNUMA_NODE_ROOT";
pub const DEFAULT_NODE_ROOT: &str = "/sys/devices/system/node";

pub const DEFAULT_PAGE_SIZE: usize = 4096;
pub const DEFAULT_HUGE_PAGE_SIZE: usize = 2 * 1024 * 1024;

/// NUMA domains and the CPUs attached to each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    cpus_per_domain: Vec<Vec<usize>>,
    pub page_size: usize,
    pub huge_page_size: usize,
}

impl Topology {
    /// Builds a topology from per-domain CPU lists. Every CPU must appear in
    /// exactly one domain and every domain must own at least one CPU.
    pub fn new(mut cpus_per_domain: Vec<Vec<usize>>) -> Result<Self, PlacementError> {
        if cpus_per_domain.is_empty() {
            return Err(PlacementError::Topology("at least one domain is required".into()));
        }
        let mut seen = BTreeMap::new();
        for (d, cpus) in cpus_per_domain.iter_mut().enumerate() {
            if cpus.is_empty() {
                return Err(PlacementError::Topology(format!("domain {d} has no CPUs")));
            }
            cpus.sort_unstable();
            cpus.dedup();
            for &c in cpus.iter() {
                if let Some(prev) = seen.insert(c, d) {
                    return Err(PlacementError::Topology(format!(
                        "cpu {c} listed in domains {prev} and {d}"
                    )));
                }
            }
        }
        Ok(Self {
            cpus_per_domain,
            page_size: DEFAULT_PAGE_SIZE,
            huge_page_size: DEFAULT_HUGE_PAGE_SIZE,
        })
    }

    /// `domains` domains of `cpus_each` consecutively numbered CPUs.
    pub fn uniform(domains: usize, cpus_each: usize) -> Result<Self, PlacementError> {
        Self::new(
            (0..domains)
                .map(|d| (d * cpus_each..(d + 1) * cpus_each).collect())
                .collect(),
        )
    }

    pub fn single_domain(cpus: usize) -> Self {
        Self::uniform(1, cpus.max(1)).expect("valid single-domain topology")
    }

    pub fn with_page_sizes(mut self, page_size: usize, huge_page_size: usize) -> Self {
        self.page_size = page_size;
        self.huge_page_size = huge_page_size;
        self
    }

    pub fn n_domains(&self) -> usize {
        self.cpus_per_domain.len()
    }

    pub fn cpus(&self, domain: usize) -> &[usize] {
        &self.cpus_per_domain[domain]
    }

    pub fn cpus_per_domain(&self) -> &[Vec<usize>] {
        &self.cpus_per_domain
    }

    pub fn n_cpus(&self) -> usize {
        self.cpus_per_domain.iter().map(Vec::len).sum()
    }

    pub fn all_domains(&self) -> Vec<usize> {
        (0..self.n_domains()).collect()
    }

    /// The domain that owns `cpu`.
    pub fn socket_from_cpu(&self, cpu: usize) -> Result<usize, PlacementError> {
        self.cpus_per_domain
            .iter()
            .position(|cpus| cpus.binary_search(&cpu).is_ok())
            .ok_or(PlacementError::UnknownCpu(cpu))
    }

    /// True iff `cpu` is the lowest-numbered CPU of its domain.
    pub fn per_socket_master(&self, cpu: usize) -> Result<bool, PlacementError> {
        let d = self.socket_from_cpu(cpu)?;
        Ok(self.cpus_per_domain[d][0] == cpu)
    }

    pub fn master_cpu(&self, domain: usize) -> usize {
        self.cpus_per_domain[domain][0]
    }

    /// CPUs ordered round-robin across domains: first CPU of each domain,
    /// then the second of each, and so on.
    pub fn spread_cpus(&self) -> Vec<usize> {
        let longest = self.cpus_per_domain.iter().map(Vec::len).max().unwrap_or(0);
        (0..longest)
            .flat_map(|i| self.cpus_per_domain.iter().filter_map(move |c| c.get(i).copied()))
            .collect()
    }

    /// CPUs in domain order: all of domain 0, then domain 1, ...
    pub fn compact_cpus(&self) -> Vec<usize> {
        self.cpus_per_domain.iter().flatten().copied().collect()
    }
}

/// Reads the host topology from sysfs (or `$XSNUMA_NODE_ROOT`). Falls back
/// to a single domain over the available CPUs, with a warning, when the
/// node tree is missing or unreadable.
pub fn discover_topology() -> Topology {
    let root = std::env::var_os(NODE_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_NODE_ROOT));
    let topo = match read_node_tree(&root) {
        Ok(t) => t,
        Err(e) => {
            let cpus = crate::lookup::available_cpus();
            warn!("cannot read NUMA topology from {}: {e}; assuming one domain of {cpus} CPUs", root.display());
            Topology::single_domain(cpus)
        }
    };
    topo.with_page_sizes(system_page_size(), DEFAULT_HUGE_PAGE_SIZE)
}

/// Parses `<root>/node<N>/cpulist` for every node directory. Memory-only
/// nodes (empty cpulist) are skipped.
pub fn read_node_tree(root: &Path) -> Result<Topology, PlacementError> {
    let mut nodes = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| PlacementError::Topology(e.to_string()))?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(id) = name
            .to_str()
            .and_then(|n| n.strip_prefix("node"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        let list = fs::read_to_string(entry.path().join("cpulist"))
            .map_err(|e| PlacementError::Topology(format!("node{id}/cpulist: {e}")))?;
        let cpus = parse_cpu_list(&list)?;
        if !cpus.is_empty() {
            nodes.insert(id, cpus);
        }
    }
    if nodes.is_empty() {
        return Err(PlacementError::Topology("no NUMA nodes with CPUs found".into()));
    }
    Topology::new(nodes.into_values().collect())
}

/// Parses the kernel's CPU list format, e.g. `0-7,16-23` or `3`.
pub fn parse_cpu_list(s: &str) -> Result<Vec<usize>, PlacementError> {
    let bad = || PlacementError::Topology(format!("malformed cpu list '{}'", s.trim()));
    let mut out = Vec::new();
    for part in s.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if b < a {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn system_page_size() -> usize {
    #[cfg(unix)]
    {
        // SAFETY: sysconf has no memory-safety preconditions.
        let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if v > 0 {
            return v as usize;
        }
    }
    DEFAULT_PAGE_SIZE
}
