use std::sync::Arc;

use proptest::prelude::*;
use xsnuma::placement::*;

fn policy_strategy(domains: usize) -> impl Strategy<Value = PlacementPolicy> {
    let subset = proptest::sample::subsequence((0..domains).collect::<Vec<_>>(), 1..=domains);
    let base = prop_oneof![
        Just(PlacementPolicy::FirstTouch),
        subset.clone().prop_map(PlacementPolicy::Interleave),
        (0..domains).prop_map(PlacementPolicy::Bind),
        subset.prop_map(PlacementPolicy::Replicate),
    ];
    (base, any::<bool>()).prop_map(|(p, huge)| if huge { PlacementPolicy::huge(p) } else { p })
}

fn fill_from(region: &mut PlacedRegion, backend: &Arc<SimBackend>, cpu: usize, src: &[u8]) {
    std::thread::scope(|s| {
        s.spawn(|| {
            backend.set_affinity(cpu).unwrap();
            region.fill(src).unwrap();
        });
    });
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    /// The simulated kernel places pages exactly as the closed form predicts.
    #[test]
    fn page_maps_match_closed_form(
        (domains, policy) in (1usize..=4).prop_flat_map(|d| (Just(d), policy_strategy(d))),
        size in 1usize..100_000,
        toucher in 0usize..4,
    ) {
        let topo = Topology::uniform(domains, 2).unwrap().with_page_sizes(4096, 16384);
        let toucher = toucher % domains;
        let backend = Arc::new(SimBackend::new(topo.clone()));
        let mut r = alloc_placed(size, &policy, &topo, backend.clone()).unwrap();
        let src = vec![7u8; size];
        fill_from(&mut r, &backend, topo.master_cpu(toucher), &src);
        let want = policy.normalized(&topo).unwrap().expected_page_map(size, &topo, toucher);
        prop_assert_eq!(r.replica_count(), want.len());
        for (k, pages) in want.iter().enumerate() {
            let got: Vec<usize> = r.page_map(k).into_iter().map(|d| d.unwrap()).collect();
            prop_assert_eq!(&got, pages);
            prop_assert_eq!(r.bytes(k), &src[..]);
        }
        let counts = policy.normalized(&topo).unwrap().expected_page_counts(size, &topo, toucher);
        for (k, c) in counts.iter().enumerate() {
            prop_assert_eq!(&r.page_counts(k, domains), c);
        }
    }

    #[test]
    fn cpu_lists_round_trip(cpus in proptest::collection::btree_set(0usize..256, 1..40)) {
        let text = cpus.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        prop_assert_eq!(parse_cpu_list(&text).unwrap(), cpus.into_iter().collect::<Vec<_>>());
    }
}

#[test]
fn node_tree_fixture_via_environment() {
    let dir = tempfile::tempdir().unwrap();
    for (node, list) in [("node0", "0-3,8-11\n"), ("node1", "4-7,12-15\n")] {
        std::fs::create_dir(dir.path().join(node)).unwrap();
        std::fs::write(dir.path().join(node).join("cpulist"), list).unwrap();
    }
    std::env::set_var(NODE_ROOT_ENV, dir.path());
    let topo = discover_topology();
    std::env::remove_var(NODE_ROOT_ENV);
    assert_eq!(topo.n_domains(), 2);
    assert_eq!(topo.cpus(1), &[4, 5, 6, 7, 12, 13, 14, 15]);
    assert_eq!(topo.socket_from_cpu(9).unwrap(), 0);
    assert!(topo.per_socket_master(4).unwrap());
    assert!(!topo.per_socket_master(5).unwrap());
    assert_eq!(&topo.spread_cpus()[..4], &[0, 4, 1, 5]);
    assert!(matches!(topo.socket_from_cpu(99), Err(PlacementError::UnknownCpu(99))));
}

#[test]
fn replicas_served_per_cpu() {
    let topo = Topology::uniform(2, 4).unwrap();
    let backend = Arc::new(SimBackend::new(topo.clone()));
    let mut r = alloc_placed(3 * 4096, &PlacementPolicy::replicate_all(&topo), &topo, backend).unwrap();
    r.fill_replicas_by_masters(&[1u8; 3 * 4096], &topo).unwrap();
    assert!(r.is_frozen());
    for cpu in topo.cpus(1) {
        let k = r.replica_index_for_cpu(&topo, *cpu).unwrap();
        assert_eq!(r.replica_domain(k), Some(1));
    }
    assert!(matches!(r.write(0, 0, &[0]), Err(PlacementError::Frozen)));
}

#[test]
fn invalid_domains_rejected() {
    let topo = Topology::uniform(2, 2).unwrap();
    let backend: Arc<dyn MemoryBackend> = Arc::new(SimBackend::new(topo.clone()));
    for p in [PlacementPolicy::Bind(2), PlacementPolicy::Interleave(vec![0, 5]), PlacementPolicy::Replicate(vec![])] {
        assert!(alloc_placed(4096, &p, &topo, backend.clone()).is_err(), "{p}");
    }
    assert!(alloc_placed(0, &PlacementPolicy::FirstTouch, &topo, backend).is_err());
}

#[test]
fn host_backend_places_and_reads_back() {
    // whatever the host, a placed region must hold what was written
    let topo = discover_topology();
    let backend: Arc<dyn MemoryBackend> = Arc::new(LinuxBackend);
    for p in [PlacementPolicy::FirstTouch, PlacementPolicy::interleave_all(&topo), PlacementPolicy::replicate_all(&topo)] {
        let mut r = alloc_placed(10_000, &p, &topo, backend.clone()).unwrap();
        let src: Vec<u8> = (0..10_000).map(|i| (i % 251) as u8).collect();
        r.fill(&src).unwrap();
        r.freeze().unwrap();
        for k in 0..r.replica_count() {
            assert_eq!(r.bytes(k), &src[..]);
        }
    }
}
