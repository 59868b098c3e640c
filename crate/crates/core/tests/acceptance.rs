//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Criterion 10 needs a dual-socket host; see
//! the hardware runbook in the README.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xsnuma::bench::{efficiency, place_dataset, relative_efficiency, InitMode};
use xsnuma::energy::{wrapping_delta, EnergyMeter};
use xsnuma::grid::{
    build_unionized, footprint_nuclide_grids, footprint_unionized, generate_dataset, DatasetConfig,
};
use xsnuma::io::{decode_dataset, encode_dataset, DatasetIoError, HEADER_LEN};
use xsnuma::lookup::{lower_bound, rng_lookup, run_lookups, Algorithm, LookupData, NoCount, RunOptions};
use xsnuma::placement::{
    alloc_placed, LinuxBackend, MemoryBackend, PlacementPlan, PlacementPolicy, Preset, SimBackend, Topology,
};
use xsnuma::sim::{anchor_targets, calibrate, simulate, tlb_miss_rate, AccessProfile, SimParams};

const MIB: f64 = 1024.0 * 1024.0;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    check(start.elapsed() < limit, || format!("took {:.2?}, limit {limit:?}", start.elapsed()))
}

/// Independent lower bound: scan for the last energy not above `e`.
fn lower_bound_oracle(energies: &[f64], e: f64) -> usize {
    let mut idx = 0;
    for (i, &x) in energies.iter().enumerate() {
        if x <= e {
            idx = i;
        }
    }
    idx.min(energies.len() - 2)
}

fn c1_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 24,
        failure_persistence: None,
        ..Config::default()
    });
    let datasets = (1usize..=8, 2usize..=64, 1usize..=6, any::<u64>());
    runner
        .run(&datasets, |(n, m, mats, seed)| {
            let ds = generate_dataset(&DatasetConfig::new(n, m, mats, seed)).unwrap();
            let u = build_unionized(&ds.grids);
            let basic = LookupData::basic(&ds.grids, &ds.materials);
            let union = LookupData::with_unionized(&ds.grids, &u, &ds.materials).unwrap();
            for i in 0..10_000u64 {
                let input = rng_lookup(seed, i, ds.materials.selection_weights());
                let a = basic.macro_xs_basic(input, &mut NoCount);
                let b = union.macro_xs_unionized(input, &mut NoCount);
                prop_assert_eq!(a.bits(), b.bits(), "lookup {}", i);
            }
            Ok(())
        })
        .map_err(|e| format!("unionized != basic: {e}"))?;

    let mut runner = TestRunner::new(Config {
        cases: 64,
        failure_persistence: None,
        ..Config::default()
    });
    let seqs = (proptest::collection::vec(0.0f64..1.0, 2..=64), any::<u64>());
    runner
        .run(&seqs, |(mut energies, seed)| {
            energies.sort_by(f64::total_cmp);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..10_000 {
                // probes inside, outside and exactly on grid points
                let e = match rng.random_range(0..4) {
                    0 => energies[rng.random_range(0..energies.len())],
                    1 => rng.random_range(-0.5..1.5),
                    _ => rng.random_range(0.0..1.0),
                };
                prop_assert_eq!(lower_bound(&energies, e).unwrap(), lower_bound_oracle(&energies, e));
            }
            Ok(())
        })
        .map_err(|e| format!("lower_bound != oracle: {e}"))?;
    within_time(start, Duration::from_secs(30))?;
    Ok(format!("24 datasets x 10^4 lookups, 64 sequences x 10^4 probes, {:.2?}", start.elapsed()))
}

fn c2_checksum_invariance() -> Outcome {
    let start = Instant::now();
    let cfg = DatasetConfig::new(16, 128, 6, 2024);
    let ds = generate_dataset(&cfg).unwrap();
    let u = build_unionized(&ds.grids);
    let n_lookups = 1_000_000;
    let seed = 77;
    let reference = LookupData::with_unionized(&ds.grids, &u, &ds.materials)
        .unwrap()
        .checksum_range(Algorithm::Unionized, seed, 0..n_lookups);

    let fake = Topology::uniform(2, 8).unwrap();
    let host = xsnuma::placement::discover_topology();
    let hosts: [(&str, Topology, Arc<dyn MemoryBackend>); 2] = [
        ("sim 2x8", fake.clone(), Arc::new(SimBackend::new(fake))),
        ("host", host, Arc::new(LinuxBackend)),
    ];
    let mut runs = 0;
    for (label, topo, backend) in hosts {
        for preset in Preset::ALL {
            let placed = place_dataset(&ds, Some(&u), preset, &topo, backend.clone(), InitMode::File)
                .map_err(|e| format!("{label} {preset}: {e}"))?;
            let views = placed.views().map_err(|e| e.to_string())?;
            for threads in [1, 2, 4, 8] {
                let opts = RunOptions {
                    worker_cpus: topo.spread_cpus(),
                    oversubscribe: true,
                    ..RunOptions::new(n_lookups, threads, seed, Algorithm::Unionized)
                };
                let out = run_lookups(&opts, &views).map_err(|e| e.to_string())?;
                check(out.checksum == reference, || {
                    format!("{label} {preset} {threads} threads: {} != {}", out.checksum, reference)
                })?;
                runs += 1;
            }
        }
    }
    within_time(start, Duration::from_secs(60))?;
    Ok(format!("checksum {reference} in all {runs} runs, {:.2?}", start.elapsed()))
}

fn c3_footprints() -> Outcome {
    // the table's MB are binary megabytes
    let grids = footprint_nuclide_grids(355, 11303) as f64 / MIB;
    let union = footprint_unionized(355, 11303) as f64 / MIB;
    let e_grids = (grids - 184.0).abs() / 184.0;
    let e_union = (union - 5617.0).abs() / 5617.0;
    check(e_grids <= 0.01, || format!("nuclide grids {grids:.1} MiB vs 184 ({:.2}%)", e_grids * 100.0))?;
    check(e_union <= 0.05, || format!("unionized {union:.1} MiB vs 5617 ({:.2}%)", e_union * 100.0))?;
    for n in 1..=4 {
        for m in 2..=32 {
            let ds = generate_dataset(&DatasetConfig::new(n, m, 2, (n * 100 + m) as u64)).unwrap();
            let u = build_unionized(&ds.grids);
            check(ds.grids.allocated_bytes() as u64 == footprint_nuclide_grids(n, m), || {
                format!("grids n={n} m={m}")
            })?;
            check(u.allocated_bytes() as u64 == footprint_unionized(n, m), || format!("unionized n={n} m={m}"))?;
        }
    }
    Ok(format!(
        "{grids:.1} MiB ({:.2}% off 184), {union:.1} MiB ({:.2}% off 5617), exact for n<=4 m<=32",
        e_grids * 100.0,
        e_union * 100.0
    ))
}

fn c4_efficiency() -> Outcome {
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let one = efficiency(2.5e6, 2.5e6, 1).unwrap();
    let one_rel = relative_efficiency(2.5e6, 2.5e6, 1).unwrap();
    let e70 = efficiency(11.2 * 1.7e5, 1.7e5, 16).unwrap();
    let e95 = relative_efficiency(15.2 * 1.7e5, 1.7e5, 16).unwrap();
    check(one == 100.0 && one_rel == 100.0, || format!("n=1 gives {one}, {one_rel}"))?;
    check(rel(e70, 70.0) <= 1e-12, || format!("11.2x at 16 gives {e70}"))?;
    check(rel(e95, 95.0) <= 1e-12, || format!("15.2x at 16 gives {e95}"))?;
    Ok(format!("100, {e70}, {e95}"))
}

fn paper_profile() -> AccessProfile {
    let cfg = DatasetConfig::default();
    let mats = xsnuma::grid::generate_materials(&cfg).unwrap();
    AccessProfile::new(&cfg, &mats, Algorithm::Unionized)
}

fn c5_simulator() -> Outcome {
    let start = Instant::now();
    let topo = Topology::uniform(2, 8).unwrap();
    let profile = paper_profile();
    let cal = calibrate(&SimParams::default(), &profile, &topo, &anchor_targets(&topo)).map_err(|e| e.to_string())?;
    let p = &cal.params;
    let rate = |preset: Preset, n: usize| simulate(p, &profile, &preset.plan(&topo), &topo, n).unwrap().lookups_per_s;
    let pd1 = rate(Preset::Default, 1);
    let ft16 = simulate(p, &profile, &Preset::Default.plan(&topo), &topo, 16).unwrap().efficiency_pct;
    let numag16 = relative_efficiency(rate(Preset::Numag, 16), pd1, 16).unwrap();

    let mut problems = Vec::new();
    if (ft16 - 70.0).abs() > 5.0 {
        problems.push(format!("default@16 = {ft16:.2}% (target 70 +-5)"));
    }
    if (numag16 - 95.0).abs() > 5.0 {
        problems.push(format!("numag@16 = {numag16:.2}% (target 95 +-5)"));
    }
    let mut broken = Vec::new();
    for n in 2..=16 {
        let (ft, il, ng) = (rate(Preset::Default, n), rate(Preset::InterleaveAll, n), rate(Preset::Numag, n));
        if !(ft < il && il < ng) {
            broken.push(n);
        }
    }
    if !broken.is_empty() {
        problems.push(format!("ordering default < interleave-all < numag fails at threads {broken:?}"));
    }

    let single = Topology::single_domain(8);
    for n in 1..=8 {
        let base = simulate(p, &profile, &Preset::Default.plan(&single), &single, n).unwrap();
        for preset in [Preset::InterleaveAll, Preset::Numag] {
            if simulate(p, &profile, &preset.plan(&single), &single, n).unwrap() != base {
                problems.push(format!("single domain: {preset} differs at {n} threads"));
            }
        }
    }
    if start.elapsed() >= Duration::from_secs(10) {
        problems.push(format!("took {:.2?}", start.elapsed()));
    }
    let summary = format!(
        "ratio {:.2}, cap {:?}, default@16 {ft16:.2}%, numag@16 {numag16:.2}%, residual {:.3}",
        p.t_remote / p.t_local,
        p.bandwidth_cap,
        cal.residual
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join("; ")))
    }
}

fn c6_tlb() -> Outcome {
    let mb = 1u64 << 20;
    let r4k = tlb_miss_rate(184 * mb, 4096, 64);
    let r2m = tlb_miss_rate(64 * mb, 2 * mb, 32);
    check(r4k >= 0.99, || format!("184 MB at 4 KB: {r4k}"))?;
    check(r2m == 0.0, || format!("64 MB at 2 MB: {r2m}"))?;

    let topo = Topology::uniform(2, 8).unwrap();
    let profile = paper_profile();
    check(profile.grid_bytes > 4096 * 64, || "grid fits the 4 KB reach".into())?;
    let p = SimParams::default();
    let ft = PlacementPlan::uniform(PlacementPolicy::FirstTouch);
    let ft_huge = PlacementPlan {
        nuclide_grids: PlacementPolicy::huge(PlacementPolicy::FirstTouch),
        ..ft.clone()
    };
    for n in [1, 8, 16] {
        let small = simulate(&p, &profile, &ft, &topo, n).unwrap().lookups_per_s;
        let huge = simulate(&p, &profile, &ft_huge, &topo, n).unwrap().lookups_per_s;
        check(huge > small, || format!("{n} threads: huge {huge} <= 4 KB {small}"))?;
        let ng = simulate(&p, &profile, &Preset::Numag.plan(&topo), &topo, n).unwrap().lookups_per_s;
        let ngh = simulate(&p, &profile, &Preset::NumagHugetlb.plan(&topo), &topo, n).unwrap().lookups_per_s;
        check(ngh > ng, || format!("{n} threads: numag-hugetlb {ngh} <= numag {ng}"))?;
    }
    Ok(format!("miss rate {r4k:.4} at 4 KB, {r2m} for 64 MB at 2 MB, huge pages faster"))
}

fn c7_placement() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for _ in 0..120 {
        let domains = rng.random_range(2..=4);
        let topo = Topology::uniform(domains, 2).unwrap();
        let backend = Arc::new(SimBackend::new(topo.clone()));
        let size: usize = rng.random_range(1..=300 * 4096);
        let src: Vec<u8> = (0..size).map(|i| i as u8).collect();
        let pages = size.div_ceil(4096);

        // interleave over a random subset, starting from its lowest domain
        let mut set: Vec<usize> = (0..domains).filter(|_| rng.random_bool(0.6)).collect();
        if set.is_empty() {
            set.push(rng.random_range(0..domains));
        }
        let mut il = alloc_placed(size, &PlacementPolicy::Interleave(set.clone()), &topo, backend.clone()).unwrap();
        il.fill(&src).unwrap();
        let map = il.page_map(0);
        check(map.len() == pages, || "page count".into())?;
        for (p, d) in map.iter().enumerate() {
            check(*d == Some(set[p % set.len()]), || format!("interleave {set:?} size {size}: page {p} on {d:?}"))?;
        }

        let mut rep = alloc_placed(size, &PlacementPolicy::replicate_all(&topo), &topo, backend.clone()).unwrap();
        rep.fill_replicas_by_masters(&src, &topo).unwrap();
        for k in 0..rep.replica_count() {
            let home = rep.replica_domain(k);
            check(rep.page_map(k).iter().all(|d| *d == home), || format!("replica {k} not local, size {size}"))?;
            check(rep.bytes(k) == &src[..], || format!("replica {k} contents"))?;
        }

        // file init: one master reads and writes everything
        let mut ft = alloc_placed(size, &PlacementPolicy::FirstTouch, &topo, backend.clone()).unwrap();
        let master = topo.master_cpu(0);
        std::thread::scope(|s| {
            s.spawn(|| {
                backend.set_affinity(master).unwrap();
                ft.fill(&src).unwrap();
            });
        });
        let mut expect = vec![0u64; domains];
        expect[0] = pages as u64;
        check(ft.page_counts(0, domains) == expect, || format!("first touch size {size}"))?;
        cases += 1;
    }

    // the same through the harness: default preset, file init
    let topo = Topology::uniform(2, 4).unwrap();
    let ds = generate_dataset(&DatasetConfig::new(6, 500, 3, 1)).unwrap();
    let u = build_unionized(&ds.grids);
    let placed = place_dataset(&ds, Some(&u), Preset::Default, &topo, Arc::new(SimBackend::new(topo.clone())), InitMode::File)
        .unwrap();
    let counts = placed.grids.page_counts(0, 2);
    check(counts[1] == 0 && counts[0] == placed.grids.pages() as u64, || format!("harness file init: {counts:?}"))?;
    within_time(start, Duration::from_secs(5))?;
    Ok(format!("{cases} randomized sizes x 3 policies, {:.2?}", start.elapsed()))
}

fn c8_energy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut wraps = 0;
    for i in 0..10_000 {
        let range: u64 = match i % 3 {
            0 => rng.random_range(1..=1000),
            1 => 262_143_328_850,
            _ => rng.random_range(1..=u64::MAX / 2),
        };
        let a = rng.random_range(0..range);
        // half the cases land just past the wrap point
        let b = if i % 2 == 0 {
            rng.random_range(0..range)
        } else {
            (a + rng.random_range(0..range.min(1000))) % range
        };
        wraps += usize::from(b < a);
        let want = (i128::from(b) - i128::from(a)).rem_euclid(i128::from(range)) as u64;
        let got = wrapping_delta(a, b, range);
        check(got == want, || format!("a={a} b={b} range={range}: {got} != {want}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let zone = |rel: &str, name: &str, uj: u64, max: u64| {
        let d = dir.path().join(rel);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join("name"), format!("{name}\n")).unwrap();
        std::fs::write(d.join("energy_uj"), format!("{uj}\n")).unwrap();
        std::fs::write(d.join("max_energy_range_uj"), format!("{max}\n")).unwrap();
    };
    zone("intel-rapl:0", "package-0", 12_345_678, 262_143_328_850);
    zone("intel-rapl:0/intel-rapl:0:0", "dram", 987_654, 65_712_999_613);
    zone("intel-rapl:1", "package-1", 1, 262_143_328_850);
    zone("intel-rapl:1/intel-rapl:1:0", "dram", 262_143_328_849, 262_143_328_850);
    let meter = EnergyMeter::discover_at(dir.path()).map_err(|e| e.to_string())?;
    let s = meter.read_sample().map_err(|e| e.to_string())?;
    let got: Vec<(&str, u64)> = s.zones.iter().map(|z| (z.label.as_str(), z.energy_uj)).collect();
    let want = [("CPU0", 12_345_678), ("DRAM0", 987_654), ("CPU1", 1), ("DRAM1", 262_143_328_849)];
    check(got == want, || format!("fixture parsed as {got:?}"))?;
    Ok(format!("10^4 triples ({wraps} wrapped), fixture values exact"))
}

fn c9_dataset_io() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..24 {
        let cfg = DatasetConfig::new(
            rng.random_range(1..=6),
            rng.random_range(2..=40),
            rng.random_range(1..=5),
            rng.random(),
        );
        let ds = generate_dataset(&cfg).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        check(encode_dataset(&ds).unwrap() == bytes, || format!("{cfg:?}: encoding not deterministic"))?;
        let back = decode_dataset(&bytes).map_err(|e| e.to_string())?;
        check(back == ds, || format!("{cfg:?}: decoded dataset differs"))?;
        check(encode_dataset(&back).unwrap() == bytes, || format!("{cfg:?}: re-encoding differs"))?;
    }
    let ds = generate_dataset(&DatasetConfig::new(3, 10, 2, 42)).unwrap();
    let good = encode_dataset(&ds).unwrap();
    let corrupt = |at: usize, v: u8| {
        let mut b = good.clone();
        b[at] = v;
        decode_dataset(&b)
    };
    check(matches!(corrupt(0, b'Y'), Err(DatasetIoError::BadMagic(_))), || "magic".into())?;
    check(matches!(corrupt(4, 2), Err(DatasetIoError::UnsupportedVersion(2))), || "version".into())?;
    check(
        matches!(corrupt(HEADER_LEN + 5, good[HEADER_LEN + 5] ^ 1), Err(DatasetIoError::Checksum { .. })),
        || "checksum".into(),
    )?;
    Ok("24 round trips byte-identical; magic, version, checksum errors distinct".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", c1_oracle_equivalence),
        ("checksum invariance", c2_checksum_invariance),
        ("footprint formulas", c3_footprints),
        ("efficiency equations", c4_efficiency),
        ("simulator reproduction", c5_simulator),
        ("TLB model", c6_tlb),
        ("placement postconditions", c7_placement),
        ("energy meter", c8_energy),
        ("dataset I/O", c9_dataset_io),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!("criterion 10: NOT RUN dual-socket hardware results (see README runbook)");
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
