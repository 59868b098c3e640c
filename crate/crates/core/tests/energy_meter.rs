use std::path::Path;

use proptest::prelude::*;
use xsnuma::energy::*;

fn write_zone(root: &Path, rel: &str, name: &str, uj: u64, max: u64) {
    let d = root.join(rel);
    std::fs::create_dir_all(&d).unwrap();
    std::fs::write(d.join("name"), format!("{name}\n")).unwrap();
    std::fs::write(d.join("energy_uj"), format!("{uj}\n")).unwrap();
    std::fs::write(d.join("max_energy_range_uj"), format!("{max}\n")).unwrap();
}

fn reading(label: &str, uj: u64, range: u64) -> ZoneReading {
    ZoneReading { label: label.into(), energy_uj: uj, max_range_uj: range }
}

proptest! {
    #[test]
    fn wrap_delta_is_modular(range in 1u64..u64::MAX / 2, a in any::<u64>(), b in any::<u64>()) {
        let (a, b) = (a % range, b % range);
        let want = (i128::from(b) - i128::from(a)).rem_euclid(i128::from(range)) as u64;
        prop_assert_eq!(wrapping_delta(a, b, range), want);
    }

    #[test]
    fn small_steps_across_the_wrap_add_up(range in 1000u64..1_000_000_000_000, start_back in 0u64..1000, steps in proptest::collection::vec(0u64..200, 1..20)) {
        let mut v = range - 1 - start_back.min(range - 1);
        let mut total = 0;
        for s in steps {
            let next = (v + s) % range;
            total += s;
            prop_assert_eq!(wrapping_delta(v, next, range), s);
            v = next;
        }
        prop_assert!(total < range);
    }

    #[test]
    fn breakdown_total_is_sum_of_zones(x in 0u64..1_000_000_000, y in 0u64..1_000_000_000, lookups in 1u64..10_000_000) {
        let a = EnergySample { zones: vec![reading("CPU0", 0, u64::MAX), reading("DRAM0", 0, u64::MAX)], timestamp_ns: 10 };
        let b = EnergySample { zones: vec![reading("CPU0", x, u64::MAX), reading("DRAM0", y, u64::MAX)], timestamp_ns: 20 };
        let d = delta(&a, &b, Some(lookups)).unwrap();
        let sum: f64 = d.zones.iter().map(|(_, j)| j).sum();
        prop_assert_eq!(d.total_j, sum);
        prop_assert!(d.zones.iter().all(|(_, j)| *j >= 0.0));
        prop_assert!((d.uj_per_lookup().unwrap() - (x + y) as f64 / lookups as f64).abs() <= 1e-9 * (1.0 + (x + y) as f64));
    }
}

#[test]
fn nested_fixture_parses_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    write_zone(dir.path(), "intel-rapl:0", "package-0", 12_345_678, 262_143_328_850);
    write_zone(dir.path(), "intel-rapl:0/intel-rapl:0:0", "dram", 42, 65_712_999_613);
    write_zone(dir.path(), "intel-rapl:0/intel-rapl:0:1", "core", 5, 100);
    write_zone(dir.path(), "intel-rapl:1", "package-1", 7, 262_143_328_850);
    write_zone(dir.path(), "intel-rapl:1/intel-rapl:1:0", "dram", 8, 65_712_999_613);
    let meter = EnergyMeter::discover_at(dir.path()).unwrap();
    assert_eq!(meter.labels(), ["CPU0", "DRAM0", "CPU1", "DRAM1"]);
    let s = meter.read_sample().unwrap();
    let vals: Vec<u64> = s.zones.iter().map(|z| z.energy_uj).collect();
    assert_eq!(vals, [12_345_678, 42, 7, 8]);
    assert_eq!(s.zones[1].max_range_uj, 65_712_999_613);
}

#[test]
fn flat_layout_via_environment() {
    // the kernel also lists sub-zones as siblings
    let dir = tempfile::tempdir().unwrap();
    write_zone(dir.path(), "intel-rapl:0", "package-0", 100, 1000);
    write_zone(dir.path(), "intel-rapl:0:0", "dram", 250, 1000);
    std::env::set_var(POWERCAP_ROOT_ENV, dir.path());
    let meter = EnergyMeter::discover().unwrap();
    std::env::remove_var(POWERCAP_ROOT_ENV);
    let a = meter.read_sample().unwrap();
    std::fs::write(dir.path().join("intel-rapl:0/energy_uj"), "50\n").unwrap();
    std::fs::write(dir.path().join("intel-rapl:0:0/energy_uj"), "400\n").unwrap();
    let b = meter.read_sample().unwrap();
    assert!(b.timestamp_ns > a.timestamp_ns);
    let d = delta(&a, &b, Some(3)).unwrap();
    assert_eq!(d.zone_j("CPU0").unwrap(), 950e-6);
    assert_eq!(d.zone_j("DRAM0").unwrap(), 150e-6);
    assert!((d.uj_per_lookup().unwrap() - 1100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn bad_counter_file_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    write_zone(dir.path(), "intel-rapl:0", "package-0", 1, 10);
    std::fs::write(dir.path().join("intel-rapl:0/energy_uj"), "-4\n").unwrap();
    let meter = EnergyMeter::discover_at(dir.path()).unwrap();
    assert!(matches!(meter.read_sample(), Err(EnergyError::Parse(_))));
}

#[test]
fn no_zones_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    write_zone(dir.path(), "intel-rapl:0", "psys", 1, 10);
    assert!(matches!(EnergyMeter::discover_at(dir.path()), Err(EnergyError::Unavailable(_))));
}
