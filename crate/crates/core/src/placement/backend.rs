//! The narrow OS interface placement is built on: allocate, bind a range,
//! query which domain backs a page, and set the calling worker's affinity.
//!
//! [`LinuxBackend`] issues the real syscalls. [`SimBackend`] keeps ordinary
//! heap memory and tracks page ownership itself, applying the same rules
//! the kernel does: a page is physically placed when first touched, on the
//! node chosen by the range's policy, or on the toucher's node when no
//! policy was set.

use std::alloc::Layout;
use std::cell::Cell;
use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use log::warn;

use super::{PlacementError, Topology};

/// Memory policy applied to a whole raw region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BindMode {
    /// Place on the first toucher's domain.
    Local,
    /// Round-robin over the listed domains, one page at a time, starting
    /// with the first.
    Interleave(Vec<usize>),
    Bind(usize),
}

#[derive(Debug)]
enum Storage {
    Heap(Layout),
    #[cfg(target_os = "linux")]
    Mmap,
}

/// Page-aligned memory obtained from a backend.
#[derive(Debug)]
pub struct RawRegion {
    id: u64,
    ptr: *mut u8,
    len: usize,
    page_size: usize,
    storage: Storage,
}

// SAFETY: RawRegion uniquely owns its allocation; shared access only hands
// out `&[u8]` and mutation requires `&mut`.
unsafe impl Send for RawRegion {}
unsafe impl Sync for RawRegion {}

static NEXT_REGION_ID: AtomicU64 = AtomicU64::new(1);

impl RawRegion {
    fn heap(len: usize, page_size: usize) -> Result<Self, PlacementError> {
        let layout = Layout::from_size_align(len, page_size)
            .map_err(|e| PlacementError::Alloc(e.to_string()))?;
        // SAFETY: layout has nonzero size (len >= one page).
        let ptr = unsafe { std::alloc::alloc_zeroed(layout) };
        if ptr.is_null() {
            return Err(PlacementError::Alloc(format!("out of memory allocating {len} bytes")));
        }
        Ok(Self {
            id: NEXT_REGION_ID.fetch_add(1, Ordering::Relaxed),
            ptr,
            len,
            page_size,
            storage: Storage::Heap(layout),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Length in bytes, a multiple of the page size.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn pages(&self) -> usize {
        self.len / self.page_size
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.ptr
    }

    pub fn as_bytes(&self) -> &[u8] {
        // SAFETY: ptr is valid for len bytes for the lifetime of self.
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        // SAFETY: as above, and &mut self guarantees exclusivity.
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.len) }
    }
}

impl Drop for RawRegion {
    fn drop(&mut self) {
        match self.storage {
            // SAFETY: allocated with this exact layout in `heap`.
            Storage::Heap(layout) => unsafe { std::alloc::dealloc(self.ptr, layout) },
            #[cfg(target_os = "linux")]
            // SAFETY: mapped with this length in `LinuxBackend::allocate`.
            Storage::Mmap => unsafe {
                libc::munmap(self.ptr.cast(), self.len);
            },
        }
    }
}

pub trait MemoryBackend: Send + Sync + std::fmt::Debug {
    /// Allocates `len` bytes (already rounded to `page_size`). Returns the
    /// region and whether a huge-page request fell back to base pages.
    fn allocate(&self, len: usize, page_size: usize, huge: bool) -> Result<(RawRegion, bool), PlacementError>;

    /// Applies a memory policy to the whole region before it is touched.
    fn bind_range(&self, region: &RawRegion, mode: &BindMode) -> Result<(), PlacementError>;

    /// The domain currently backing `page`, or `None` when the page has not
    /// been placed yet or the OS cannot say.
    fn query_page_domain(&self, region: &RawRegion, page: usize) -> Option<usize>;

    /// Restricts the calling worker to `cpu`.
    fn set_affinity(&self, cpu: usize) -> Result<(), PlacementError>;

    /// The calling worker's current affinity set.
    fn current_affinity(&self) -> Result<Vec<usize>, PlacementError>;

    /// Informs the backend that the calling worker wrote `pages`. The real
    /// kernel observes this through page faults.
    fn record_touch(&self, _region: &RawRegion, _pages: Range<usize>) {}

    /// Forgets any bookkeeping for a region about to be freed.
    fn release(&self, _region: &RawRegion) {}
}

thread_local! {
    static SIM_CPU: Cell<Option<usize>> = const { Cell::new(None) };
}

#[derive(Debug)]
struct SimRegion {
    mode: BindMode,
    owners: Vec<Option<usize>>,
}

/// In-process stand-in for a NUMA host with the given topology.
#[derive(Debug)]
pub struct SimBackend {
    topo: Topology,
    huge_pages_available: bool,
    regions: Mutex<HashMap<u64, SimRegion>>,
}

impl SimBackend {
    pub fn new(topo: Topology) -> Self {
        Self {
            topo,
            huge_pages_available: true,
            regions: Mutex::new(HashMap::new()),
        }
    }

    pub fn without_huge_pages(mut self) -> Self {
        self.huge_pages_available = false;
        self
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Domain of the calling worker: its pinned CPU, or the first CPU of
    /// domain 0 when unpinned (the master thread).
    fn current_domain(&self) -> usize {
        SIM_CPU
            .with(Cell::get)
            .and_then(|c| self.topo.socket_from_cpu(c).ok())
            .unwrap_or(0)
    }

    /// Clears the calling worker's simulated affinity.
    pub fn unpin_current(&self) {
        SIM_CPU.with(|c| c.set(None));
    }
}

impl MemoryBackend for SimBackend {
    fn allocate(&self, len: usize, page_size: usize, huge: bool) -> Result<(RawRegion, bool), PlacementError> {
        let (page, fell_back) = if huge && !self.huge_pages_available {
            warn!("huge pages unavailable on simulated host; falling back to {} byte pages", self.topo.page_size);
            (self.topo.page_size, true)
        } else {
            (page_size, false)
        };
        let len = len.div_ceil(page) * page;
        let region = RawRegion::heap(len, page)?;
        self.regions.lock().unwrap().insert(
            region.id,
            SimRegion {
                mode: BindMode::Local,
                owners: vec![None; region.pages()],
            },
        );
        Ok((region, fell_back))
    }

    fn bind_range(&self, region: &RawRegion, mode: &BindMode) -> Result<(), PlacementError> {
        let n = self.topo.n_domains();
        let bad = match mode {
            BindMode::Local => None,
            BindMode::Interleave(ds) => ds.iter().find(|&&d| d >= n).copied(),
            BindMode::Bind(d) => (*d >= n).then_some(*d),
        };
        if let Some(d) = bad {
            return Err(PlacementError::InvalidDomain(d));
        }
        let mut regions = self.regions.lock().unwrap();
        let r = regions
            .get_mut(&region.id)
            .ok_or_else(|| PlacementError::Usage("region not owned by this backend".into()))?;
        r.mode = mode.clone();
        Ok(())
    }

    fn query_page_domain(&self, region: &RawRegion, page: usize) -> Option<usize> {
        self.regions
            .lock()
            .unwrap()
            .get(&region.id)
            .and_then(|r| r.owners.get(page).copied().flatten())
    }

    fn set_affinity(&self, cpu: usize) -> Result<(), PlacementError> {
        self.topo.socket_from_cpu(cpu)?;
        SIM_CPU.with(|c| c.set(Some(cpu)));
        Ok(())
    }

    fn current_affinity(&self) -> Result<Vec<usize>, PlacementError> {
        Ok(match SIM_CPU.with(Cell::get) {
            Some(c) => vec![c],
            None => self.topo.compact_cpus(),
        })
    }

    fn record_touch(&self, region: &RawRegion, pages: Range<usize>) {
        let toucher = self.current_domain();
        let mut regions = self.regions.lock().unwrap();
        let Some(r) = regions.get_mut(&region.id) else {
            return;
        };
        for p in pages {
            let slot = &mut r.owners[p];
            if slot.is_none() {
                *slot = Some(match &r.mode {
                    BindMode::Local => toucher,
                    BindMode::Interleave(ds) => ds[p % ds.len()],
                    BindMode::Bind(d) => *d,
                });
            }
        }
    }

    fn release(&self, region: &RawRegion) {
        self.regions.lock().unwrap().remove(&region.id);
    }
}

/// Real Linux backend: `mmap`, `mbind`, `move_pages`, `sched_setaffinity`.
#[derive(Debug, Default)]
pub struct LinuxBackend;

#[cfg(target_os = "linux")]
mod linux {
    use super::*;

    const MPOL_DEFAULT: libc::c_long = 0;
    const MPOL_BIND: libc::c_long = 2;
    const MPOL_INTERLEAVE: libc::c_long = 3;
    const MAP_HUGE_2MB: libc::c_int = 21 << libc::MAP_HUGE_SHIFT;

    fn map(len: usize, extra: libc::c_int) -> Option<*mut u8> {
        // SAFETY: anonymous private mapping with no address hint.
        let p = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | extra,
                -1,
                0,
            )
        };
        (p != libc::MAP_FAILED).then_some(p.cast())
    }

    impl MemoryBackend for LinuxBackend {
        fn allocate(&self, len: usize, page_size: usize, huge: bool) -> Result<(RawRegion, bool), PlacementError> {
            let base = super::super::topology::DEFAULT_PAGE_SIZE;
            let mut fell_back = false;
            let (ptr, page, len) = if huge {
                let hlen = len.div_ceil(page_size) * page_size;
                match map(hlen, libc::MAP_HUGETLB | MAP_HUGE_2MB) {
                    Some(p) => (p, page_size, hlen),
                    None => {
                        warn!(
                            "huge page mapping of {hlen} bytes failed ({}); falling back to base pages",
                            std::io::Error::last_os_error()
                        );
                        fell_back = true;
                        let blen = len.div_ceil(base) * base;
                        let p = map(blen, 0).ok_or_else(|| {
                            PlacementError::Alloc(std::io::Error::last_os_error().to_string())
                        })?;
                        (p, base, blen)
                    }
                }
            } else {
                let blen = len.div_ceil(page_size) * page_size;
                let p = map(blen, 0)
                    .ok_or_else(|| PlacementError::Alloc(std::io::Error::last_os_error().to_string()))?;
                (p, page_size, blen)
            };
            Ok((
                RawRegion {
                    id: NEXT_REGION_ID.fetch_add(1, Ordering::Relaxed),
                    ptr,
                    len,
                    page_size: page,
                    storage: Storage::Mmap,
                },
                fell_back,
            ))
        }

        fn bind_range(&self, region: &RawRegion, mode: &BindMode) -> Result<(), PlacementError> {
            let (policy, nodes): (libc::c_long, &[usize]) = match mode {
                BindMode::Local => (MPOL_DEFAULT, &[]),
                BindMode::Interleave(ds) => (MPOL_INTERLEAVE, ds),
                BindMode::Bind(d) => (MPOL_BIND, std::slice::from_ref(d)),
            };
            let mut mask = [0u64; 16];
            for &n in nodes {
                if n >= 64 * mask.len() {
                    return Err(PlacementError::InvalidDomain(n));
                }
                mask[n / 64] |= 1 << (n % 64);
            }
            let mask_ptr = if nodes.is_empty() { std::ptr::null() } else { mask.as_ptr() };
            // SAFETY: the range is a live mapping we own; the mask outlives the call.
            let rc = unsafe {
                libc::syscall(
                    libc::SYS_mbind,
                    region.ptr,
                    region.len,
                    policy,
                    mask_ptr,
                    (64 * mask.len()) as libc::c_ulong,
                    0 as libc::c_uint,
                )
            };
            if rc != 0 {
                return Err(PlacementError::Bind(std::io::Error::last_os_error().to_string()));
            }
            Ok(())
        }

        fn query_page_domain(&self, region: &RawRegion, page: usize) -> Option<usize> {
            if page >= region.pages() {
                return None;
            }
            // SAFETY: address lies within our mapping.
            let addr = unsafe { region.ptr.add(page * region.page_size) } as *mut libc::c_void;
            let mut pages = [addr];
            let mut status = [-1 as libc::c_int];
            // SAFETY: nodes == NULL asks only for the current node of each page.
            let rc = unsafe {
                libc::syscall(
                    libc::SYS_move_pages,
                    0 as libc::pid_t,
                    1 as libc::c_ulong,
                    pages.as_mut_ptr(),
                    std::ptr::null::<libc::c_int>(),
                    status.as_mut_ptr(),
                    0 as libc::c_int,
                )
            };
            (rc == 0 && status[0] >= 0).then(|| status[0] as usize)
        }

        fn set_affinity(&self, cpu: usize) -> Result<(), PlacementError> {
            super::super::pin_current_worker(cpu)
        }

        fn current_affinity(&self) -> Result<Vec<usize>, PlacementError> {
            super::super::current_affinity()
        }
    }
}

#[cfg(not(target_os = "linux"))]
impl MemoryBackend for LinuxBackend {
    fn allocate(&self, len: usize, page_size: usize, huge: bool) -> Result<(RawRegion, bool), PlacementError> {
        if huge {
            warn!("huge pages unsupported on this platform; using base pages");
        }
        let page = if huge { 4096 } else { page_size };
        Ok((RawRegion::heap(len.div_ceil(page) * page, page)?, huge))
    }
    fn bind_range(&self, _region: &RawRegion, _mode: &BindMode) -> Result<(), PlacementError> {
        Ok(())
    }
    fn query_page_domain(&self, _region: &RawRegion, _page: usize) -> Option<usize> {
        None
    }
    fn set_affinity(&self, cpu: usize) -> Result<(), PlacementError> {
        super::pin_current_worker(cpu)
    }
    fn current_affinity(&self) -> Result<Vec<usize>, PlacementError> {
        super::current_affinity()
    }
}
