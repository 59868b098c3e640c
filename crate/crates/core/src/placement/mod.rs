//! NUMA-aware placement: topology discovery, worker pinning, and buffers
//! placed by first-touch, page interleave, bind, per-domain replication,
//! or explicit huge pages.
//!
//! All memory goes through a [`MemoryBackend`], so the same placement code
//! runs against the kernel ([`LinuxBackend`]) or an in-process model of a
//! multi-socket host ([`SimBackend`]).

mod backend;
mod plan;
mod topology;

use std::fmt;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use plan::{PlacementPlan, Preset, Structure};
pub use backend::{BindMode, LinuxBackend, MemoryBackend, RawRegion, SimBackend};
pub use topology::{
    discover_topology, parse_cpu_list, read_node_tree, Topology, DEFAULT_HUGE_PAGE_SIZE, DEFAULT_NODE_ROOT,
    DEFAULT_PAGE_SIZE, NODE_ROOT_ENV,
};

use crate::grid::NuclideGridPoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("topology: {0}")]
    Topology(String),
    #[error("cpu {0} is not part of the topology")]
    UnknownCpu(usize),
    #[error("domain {0} does not exist")]
    InvalidDomain(usize),
    #[error("allocation failed: {0}")]
    Alloc(String),
    #[error("memory policy could not be applied: {0}")]
    Bind(String),
    #[error("cannot pin to cpu {cpu}: {reason}")]
    Pin { cpu: usize, reason: String },
    #[error("invalid use: {0}")]
    Usage(String),
    #[error("region is frozen (read-only)")]
    Frozen,
    #[error("replica {0} differs from replica 0")]
    ReplicaMismatch(usize),
}

/// How a buffer's pages are spread over NUMA domains.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlacementPolicy {
    /// Pages land in the domain of the worker that first writes them.
    FirstTouch,
    /// Page `i` lives in `domains[i % domains.len()]` (domains ascending).
    Interleave(Vec<usize>),
    /// Every page in one domain.
    Bind(usize),
    /// One complete, domain-local copy per listed domain. Read-only after
    /// initialization.
    Replicate(Vec<usize>),
    /// The inner policy applied at huge-page granularity.
    HugePage(Box<PlacementPolicy>),
}

impl PlacementPolicy {
    pub fn interleave_all(topo: &Topology) -> Self {
        Self::Interleave(topo.all_domains())
    }

    pub fn replicate_all(topo: &Topology) -> Self {
        Self::Replicate(topo.all_domains())
    }

    pub fn huge(inner: PlacementPolicy) -> Self {
        Self::HugePage(Box::new(inner))
    }

    pub fn is_huge(&self) -> bool {
        matches!(self, Self::HugePage(_))
    }

    /// The policy with any huge-page wrapper removed.
    pub fn base(&self) -> &PlacementPolicy {
        match self {
            Self::HugePage(inner) => inner.base(),
            other => other,
        }
    }

    pub fn is_replicated(&self) -> bool {
        matches!(self.base(), Self::Replicate(_))
    }

    /// Checks domain references against `topo` and returns the canonical
    /// form: domain lists sorted and deduplicated, at most one huge wrapper.
    pub fn normalized(&self, topo: &Topology) -> Result<Self, PlacementError> {
        let check_list = |ds: &[usize]| -> Result<Vec<usize>, PlacementError> {
            if ds.is_empty() {
                return Err(PlacementError::Usage("policy needs at least one domain".into()));
            }
            let mut v = ds.to_vec();
            v.sort_unstable();
            v.dedup();
            match v.iter().find(|&&d| d >= topo.n_domains()) {
                Some(&d) => Err(PlacementError::InvalidDomain(d)),
                None => Ok(v),
            }
        };
        Ok(match self {
            Self::FirstTouch => Self::FirstTouch,
            Self::Interleave(ds) => Self::Interleave(check_list(ds)?),
            Self::Replicate(ds) => Self::Replicate(check_list(ds)?),
            Self::Bind(d) if *d < topo.n_domains() => Self::Bind(*d),
            Self::Bind(d) => return Err(PlacementError::InvalidDomain(*d)),
            Self::HugePage(inner) => Self::huge(inner.base().normalized(topo)?),
        })
    }

    /// Page size this policy places at.
    pub fn page_size(&self, topo: &Topology) -> usize {
        if self.is_huge() {
            topo.huge_page_size
        } else {
            topo.page_size
        }
    }

    /// Pages per domain for each replica, as the policy dictates for a
    /// buffer of `size` bytes first touched from `toucher_domain`.
    /// Closed form, so it is cheap even for multi-gigabyte buffers.
    pub fn expected_page_counts(&self, size: usize, topo: &Topology, toucher_domain: usize) -> Vec<Vec<u64>> {
        let pages = size.div_ceil(self.page_size(topo)) as u64;
        let n = topo.n_domains();
        let on = |d: usize| {
            let mut v = vec![0u64; n];
            v[d] = pages;
            v
        };
        match self.base() {
            Self::FirstTouch => vec![on(toucher_domain)],
            Self::Bind(d) => vec![on(*d)],
            Self::Replicate(ds) => ds.iter().map(|&d| on(d)).collect(),
            Self::Interleave(ds) => {
                let k = ds.len() as u64;
                let mut v = vec![0u64; n];
                for (i, &d) in ds.iter().enumerate() {
                    v[d] = pages / k + u64::from((i as u64) < pages % k);
                }
                vec![v]
            }
            Self::HugePage(_) => unreachable!("base() strips huge wrappers"),
        }
    }

    /// Domain of every page of every replica (same assumptions as
    /// [`expected_page_counts`](Self::expected_page_counts)).
    pub fn expected_page_map(&self, size: usize, topo: &Topology, toucher_domain: usize) -> Vec<Vec<usize>> {
        let pages = size.div_ceil(self.page_size(topo));
        match self.base() {
            Self::FirstTouch => vec![vec![toucher_domain; pages]],
            Self::Bind(d) => vec![vec![*d; pages]],
            Self::Replicate(ds) => ds.iter().map(|&d| vec![d; pages]).collect(),
            Self::Interleave(ds) => vec![(0..pages).map(|i| ds[i % ds.len()]).collect()],
            Self::HugePage(_) => unreachable!("base() strips huge wrappers"),
        }
    }
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |ds: &[usize]| ds.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        match self {
            Self::FirstTouch => write!(f, "first-touch"),
            Self::Interleave(ds) => write!(f, "interleave({})", list(ds)),
            Self::Bind(d) => write!(f, "bind({d})"),
            Self::Replicate(ds) => write!(f, "replicate({})", list(ds)),
            Self::HugePage(inner) => write!(f, "huge[{inner}]"),
        }
    }
}

/// Plain-old-data element types that may be viewed inside placed memory.
///
/// # Safety
/// Implementors must be `Copy`, contain no padding-sensitive invariants, and
/// accept any bit pattern produced by copying a valid value byte for byte.
pub unsafe trait Plain: Copy + 'static {}

// SAFETY: primitive numeric types and a repr(C) struct of f64s.
unsafe impl Plain for u8 {}
unsafe impl Plain for u32 {}
unsafe impl Plain for u64 {}
unsafe impl Plain for f64 {}
unsafe impl Plain for NuclideGridPoint {}

/// Bytes of a slice of plain values.
pub fn as_bytes<T: Plain>(v: &[T]) -> &[u8] {
    // SAFETY: T is Plain; the byte view covers exactly the slice.
    unsafe { std::slice::from_raw_parts(v.as_ptr().cast(), std::mem::size_of_val(v)) }
}

#[derive(Debug)]
struct Replica {
    domain: Option<usize>,
    raw: RawRegion,
}

/// A buffer placed according to a [`PlacementPolicy`].
///
/// Regions start writable. [`freeze`](Self::freeze) makes them read-only;
/// for replicated regions it also verifies that all copies are identical.
#[derive(Debug)]
pub struct PlacedRegion {
    size: usize,
    policy: PlacementPolicy,
    backend: Arc<dyn MemoryBackend>,
    replicas: Vec<Replica>,
    frozen: bool,
    huge_fallback: bool,
}

/// Allocates `size` bytes placed by `policy` on `backend`. Pages are
/// physically placed when first written through the region.
pub fn alloc_placed(
    size: usize,
    policy: &PlacementPolicy,
    topo: &Topology,
    backend: Arc<dyn MemoryBackend>,
) -> Result<PlacedRegion, PlacementError> {
    if size == 0 {
        return Err(PlacementError::Usage("cannot place an empty buffer".into()));
    }
    let policy = policy.normalized(topo)?;
    let huge = policy.is_huge();
    let page_size = policy.page_size(topo);
    let targets: Vec<(Option<usize>, BindMode)> = match policy.base() {
        PlacementPolicy::FirstTouch => vec![(None, BindMode::Local)],
        PlacementPolicy::Interleave(ds) => vec![(None, BindMode::Interleave(ds.clone()))],
        PlacementPolicy::Bind(d) => vec![(Some(*d), BindMode::Bind(*d))],
        PlacementPolicy::Replicate(ds) => ds.iter().map(|&d| (Some(d), BindMode::Bind(d))).collect(),
        PlacementPolicy::HugePage(_) => unreachable!("base() strips huge wrappers"),
    };
    let mut replicas = Vec::with_capacity(targets.len());
    let mut huge_fallback = false;
    for (domain, mode) in targets {
        let (raw, fell_back) = backend.allocate(size, page_size, huge)?;
        huge_fallback |= fell_back;
        if let Err(e) = backend.bind_range(&raw, &mode) {
            if topo.n_domains() > 1 {
                backend.release(&raw);
                return Err(e);
            }
            // single-domain hosts have nothing to bind
            warn!("{e}; ignoring on single-domain host");
        }
        replicas.push(Replica { domain, raw });
    }
    if huge_fallback {
        warn!("{policy}: huge pages unavailable, region uses base pages");
    }
    Ok(PlacedRegion {
        size,
        policy,
        backend,
        replicas,
        frozen: false,
        huge_fallback,
    })
}

impl PlacedRegion {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn policy(&self) -> &PlacementPolicy {
        &self.policy
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn replica_domain(&self, replica: usize) -> Option<usize> {
        self.replicas[replica].domain
    }

    /// Page size actually in use (base pages after a huge-page fallback).
    pub fn page_size(&self) -> usize {
        self.replicas[0].raw.page_size()
    }

    pub fn pages(&self) -> usize {
        self.size.div_ceil(self.page_size())
    }

    pub fn huge_fallback(&self) -> bool {
        self.huge_fallback
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bytes(&self, replica: usize) -> &[u8] {
        &self.replicas[replica].raw.as_bytes()[..self.size]
    }

    /// Typed view of a replica. `size` must be a multiple of `size_of::<T>()`.
    pub fn slice<T: Plain>(&self, replica: usize) -> &[T] {
        let sz = std::mem::size_of::<T>();
        assert_eq!(self.size % sz, 0, "region size is not a whole number of elements");
        let raw = &self.replicas[replica].raw;
        assert_eq!(raw.as_ptr() as usize % std::mem::align_of::<T>(), 0);
        // SAFETY: page-aligned, in bounds, T is Plain.
        unsafe { std::slice::from_raw_parts(raw.as_ptr().cast(), self.size / sz) }
    }

    /// Copies `src` into `replica` at `offset` from the calling worker, which
    /// becomes the first toucher of any page not yet placed.
    pub fn write(&mut self, replica: usize, offset: usize, src: &[u8]) -> Result<(), PlacementError> {
        if self.frozen {
            return Err(PlacementError::Frozen);
        }
        if offset + src.len() > self.size {
            return Err(PlacementError::Usage(format!(
                "write of {} bytes at {offset} exceeds region size {}",
                src.len(),
                self.size
            )));
        }
        if src.is_empty() {
            return Ok(());
        }
        let Replica { raw, .. } = &mut self.replicas[replica];
        raw.as_bytes_mut()[offset..offset + src.len()].copy_from_slice(src);
        let ps = raw.page_size();
        self.backend.record_touch(raw, offset / ps..(offset + src.len()).div_ceil(ps));
        Ok(())
    }

    /// Writes `src` to every replica from the calling worker.
    pub fn fill(&mut self, src: &[u8]) -> Result<(), PlacementError> {
        self.check_len(src)?;
        for k in 0..self.replicas.len() {
            self.write(k, 0, src)?;
        }
        Ok(())
    }

    /// Writes `src` into a non-replicated region with the pages split
    /// contiguously over one worker per entry of `cpus`, each pinned to its
    /// CPU. Under first-touch this spreads pages over the workers' domains.
    pub fn fill_parallel(&mut self, src: &[u8], cpus: &[usize]) -> Result<(), PlacementError> {
        self.check_len(src)?;
        if self.frozen {
            return Err(PlacementError::Frozen);
        }
        if self.replicas.len() != 1 {
            return Err(PlacementError::Usage("fill_parallel on a replicated region".into()));
        }
        if cpus.is_empty() {
            return self.fill(src);
        }
        let backend = &self.backend;
        let raw = &mut self.replicas[0].raw;
        let ps = raw.page_size();
        let pages = self.size.div_ceil(ps);
        let workers = cpus.len().min(pages);
        let raw_ref: &RawRegion = raw;
        // split by pages; each chunk boundary is page aligned
        let bounds: Vec<(usize, usize)> = (0..workers)
            .map(|w| (pages * w / workers * ps, (pages * (w + 1) / workers * ps).min(self.size)))
            .collect();
        let dst = raw_ref.as_ptr() as usize;
        std::thread::scope(|s| {
            for (w, &(lo, hi)) in bounds.iter().enumerate() {
                let cpu = cpus[w];
                let src = &src[lo..hi];
                s.spawn(move || {
                    if let Err(e) = backend.set_affinity(cpu) {
                        warn!("first-touch worker {w}: {e}");
                    }
                    // SAFETY: chunks [lo, hi) are disjoint and within the
                    // region; the region is exclusively borrowed for the
                    // duration of the scope.
                    unsafe {
                        std::ptr::copy_nonoverlapping(src.as_ptr(), (dst as *mut u8).add(lo), hi - lo);
                    }
                    backend.record_touch(raw_ref, lo / ps..hi.div_ceil(ps));
                });
            }
        });
        Ok(())
    }

    /// Initializes a replicated region cooperatively: the per-socket master
    /// of each replica's domain writes that replica, all masters finish,
    /// then the region is frozen.
    pub fn fill_replicas_by_masters(&mut self, src: &[u8], topo: &Topology) -> Result<(), PlacementError> {
        self.check_len(src)?;
        if self.frozen {
            return Err(PlacementError::Frozen);
        }
        let backend = &self.backend;
        let size = self.size;
        std::thread::scope(|s| {
            for rep in self.replicas.iter_mut() {
                let cpu = rep.domain.map(|d| topo.master_cpu(d));
                s.spawn(move || {
                    if let Some(cpu) = cpu {
                        if let Err(e) = backend.set_affinity(cpu) {
                            warn!("replica master on cpu {cpu}: {e}");
                        }
                    }
                    rep.raw.as_bytes_mut()[..size].copy_from_slice(src);
                    let ps = rep.raw.page_size();
                    backend.record_touch(&rep.raw, 0..size.div_ceil(ps));
                });
            }
        });
        self.freeze()
    }

    fn check_len(&self, src: &[u8]) -> Result<(), PlacementError> {
        if src.len() != self.size {
            return Err(PlacementError::Usage(format!(
                "source is {} bytes, region is {}",
                src.len(),
                self.size
            )));
        }
        Ok(())
    }

    /// Makes the region read-only. Replicas must be byte-identical.
    pub fn freeze(&mut self) -> Result<(), PlacementError> {
        let first = self.bytes(0);
        if let Some(k) = (1..self.replicas.len()).find(|&k| self.bytes(k) != first) {
            return Err(PlacementError::ReplicaMismatch(k));
        }
        self.frozen = true;
        Ok(())
    }

    /// Index of the replica local to `cpu`'s domain.
    pub fn replica_index_for_cpu(&self, topo: &Topology, cpu: usize) -> Result<usize, PlacementError> {
        if !self.policy.is_replicated() {
            return Err(PlacementError::Usage(format!("{} region has no per-domain replicas", self.policy)));
        }
        let d = topo.socket_from_cpu(cpu)?;
        Ok(self
            .replicas
            .iter()
            .position(|r| r.domain == Some(d))
            // a domain outside the replica set reads the first replica
            .unwrap_or(0))
    }

    /// The replica local to `cpu`'s domain.
    pub fn replica_for_cpu(&self, topo: &Topology, cpu: usize) -> Result<&[u8], PlacementError> {
        Ok(self.bytes(self.replica_index_for_cpu(topo, cpu)?))
    }

    /// Backing domain of every page of `replica` as reported by the backend.
    pub fn page_map(&self, replica: usize) -> Vec<Option<usize>> {
        let raw = &self.replicas[replica].raw;
        (0..self.pages()).map(|p| self.backend.query_page_domain(raw, p)).collect()
    }

    /// Pages of `replica` found in each domain; unplaced pages are skipped.
    pub fn page_counts(&self, replica: usize, n_domains: usize) -> Vec<u64> {
        let mut counts = vec![0u64; n_domains];
        for d in self.page_map(replica).into_iter().flatten() {
            if d < n_domains {
                counts[d] += 1;
            }
        }
        counts
    }
}

impl Drop for PlacedRegion {
    fn drop(&mut self) {
        for r in &self.replicas {
            self.backend.release(&r.raw);
        }
    }
}

/// Restricts the calling thread to exactly `cpu`.
pub fn pin_current_worker(cpu: usize) -> Result<(), PlacementError> {
    #[cfg(target_os = "linux")]
    {
        if cpu >= libc::CPU_SETSIZE as usize {
            return Err(PlacementError::Pin {
                cpu,
                reason: "beyond CPU_SETSIZE".into(),
            });
        }
        // SAFETY: cpu_set_t is plain data; CPU_SET is bounds-checked above.
        let rc = unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set)
        };
        if rc != 0 {
            return Err(PlacementError::Pin {
                cpu,
                reason: std::io::Error::last_os_error().to_string(),
            });
        }
        Ok(())
    }
    #[cfg(not(target_os = "linux"))]
    {
        Err(PlacementError::Pin {
            cpu,
            reason: "thread affinity unsupported on this platform".into(),
        })
    }
}

/// CPUs the calling thread may run on.
pub fn current_affinity() -> Result<Vec<usize>, PlacementError> {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: the set is plain data filled in by the kernel.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
                return Err(PlacementError::Usage(std::io::Error::last_os_error().to_string()));
            }
            Ok((0..libc::CPU_SETSIZE as usize).filter(|&c| libc::CPU_ISSET(c, &set)).collect())
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        Ok((0..crate::lookup::available_cpus()).collect())
    }
}
