use dpar::patchifier::*;
use proptest::prelude::*;

fn replay(entropies: &[f64], cfg: &PatchifierConfig) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (t, &e) in entropies.iter().enumerate() {
        let current = spans.last().map_or(0, |&(s, end)| end - s + 1);
        match incremental_decision(e, current, t, cfg) {
            Decision::Extend => spans.last_mut().unwrap().1 = t,
            Decision::NewPatch => spans.push((t, t)),
        }
    }
    spans
}

fn check_invariants(p: &PatchPartition, len: usize, cfg: &PatchifierConfig) {
    let spans = p.spans();
    assert_eq!(spans[0], (0, 0));
    assert_eq!(spans.last().unwrap().1, len - 1);
    for w in spans.windows(2) {
        assert_eq!(w[1].0, w[0].1 + 1);
    }
    for &(s, e) in spans {
        assert!(e >= s);
        assert!(e - s < cfg.max_patch_len);
        assert_eq!(s / cfg.row_width, e / cfg.row_width);
    }
    if len > 1 {
        assert_eq!(spans[1].0, 1);
    }
    p.validate(cfg).unwrap();
}

fn arb_case() -> impl Strategy<Value = (Vec<f64>, PatchifierConfig)> {
    (1usize..1025, 0.0f64..5.0, 1usize..9, 1usize..40).prop_flat_map(|(t, th, pmax, w)| {
        prop::collection::vec(0.0f64..5.0, t).prop_map(move |mut e| {
            e[0] = f64::INFINITY;
            (e, PatchifierConfig::new(th, pmax, w))
        })
    })
}

#[test]
fn worked_example() {
    let e = [f64::INFINITY, 0.5, 0.3, 2.0, 0.2, 0.4, 0.1, 0.9];
    let cfg = PatchifierConfig::new(1.0, 2, 4);
    let p = patchify(&e, &cfg).unwrap();
    assert_eq!(p.spans(), &[(0, 0), (1, 2), (3, 3), (4, 5), (6, 7)]);
    assert_eq!(replay(&e, &cfg), p.spans());
    let stats = partition_stats(&[p]).unwrap();
    assert!((stats.avg_patch_len - 1.6).abs() < 1e-12);
    assert_eq!(stats.generation_steps, 5.0);
}

#[test]
fn decision_examples() {
    let cfg = PatchifierConfig::new(1.0, 3, 4);
    assert_eq!(incremental_decision(1.0, 1, 2, &cfg), Decision::Extend);
    assert_eq!(incremental_decision(0.0, 3, 2, &cfg), Decision::NewPatch);
    assert_eq!(incremental_decision(0.0, 1, 4, &cfg), Decision::NewPatch);
    assert_eq!(incremental_decision(0.0, 1, 1, &cfg), Decision::NewPatch);
}

#[test]
fn static_layout() {
    let cfg = PatchifierConfig::new(1.0, 3, 4);
    let p = static_patchify(8, 3, &cfg).unwrap();
    assert_eq!(p.spans(), &[(0, 2), (3, 3), (4, 6), (7, 7)]);
    assert_eq!(
        static_patchify(5, 1, &cfg).unwrap(),
        PatchPartition::singletons(5).unwrap()
    );
    let rows = static_patchify(12, 9, &cfg).unwrap();
    assert_eq!(rows.spans(), &[(0, 3), (4, 7), (8, 11)]);
    assert!(static_patchify(4, 0, &cfg).is_err());
}

#[test]
fn high_entropy_gives_singletons() {
    let cfg = PatchifierConfig::new(1.0, 4, 8);
    let mut e = vec![3.0; 20];
    e[0] = f64::INFINITY;
    let p = patchify(&e, &cfg).unwrap();
    assert_eq!(p.num_patches(), 20);
    let stats = partition_stats(&[p]).unwrap();
    assert_eq!(stats.avg_patch_len, 1.0);
    assert_eq!(stats.generation_steps, 20.0);
}

#[test]
fn input_errors() {
    let cfg = PatchifierConfig::new(1.0, 4, 8);
    assert!(patchify(&[], &cfg).is_err());
    assert!(patchify(&[0.0, 0.0], &cfg).is_err());
    assert!(patchify(&[f64::INFINITY, f64::NAN], &cfg).is_err());
    assert!(partition_stats(&[]).is_err());
    assert!(PatchPartition::from_spans(vec![(0, 0), (2, 3)]).is_err());
    assert!(PatchPartition::parse_dump_line("0:0 1").is_err());
}

#[test]
fn pgm_has_header_and_size() {
    let e = [f64::INFINITY, 0.5, 0.3, 2.0, 0.2, 0.4, 0.1, 0.9];
    let p = patchify(&e, &PatchifierConfig::new(1.0, 2, 4)).unwrap();
    let img = partition_pgm(&e, &p, 4, 4, 2.0).unwrap();
    let header = b"P5\n16 8\n255\n";
    assert_eq!(&img[..header.len()], header);
    assert_eq!(img.len(), header.len() + 16 * 8);
    assert!(partition_pgm(&e, &p, 3, 4, 2.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn invariants_and_replay((e, cfg) in arb_case()) {
        let p = patchify(&e, &cfg).unwrap();
        check_invariants(&p, e.len(), &cfg);
        prop_assert_eq!(replay(&e, &cfg), p.spans().to_vec());
        let parsed = PatchPartition::parse_dump_line(&p.dump_line()).unwrap();
        prop_assert_eq!(&parsed, &p);
        let patch_of = p.patch_of();
        prop_assert_eq!(patch_of.len(), e.len());
        prop_assert!(patch_of.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
    }

    #[test]
    fn raising_threshold_never_adds_patches((e, cfg) in arb_case(), bump in 0.0f64..3.0) {
        let low = patchify(&e, &cfg).unwrap().num_patches();
        let high = patchify(&e, &cfg.with_threshold(cfg.entropy_threshold + bump)).unwrap();
        prop_assert!(high.num_patches() <= low);
    }

    #[test]
    fn ungated_equals_static((e, cfg) in arb_case()) {
        let ungated = PatchifierConfig { entropy_gating: false, ..cfg.clone() };
        let p = patchify(&e, &ungated).unwrap();
        prop_assert_eq!(&p, &static_patchify(e.len(), cfg.max_patch_len, &cfg).unwrap());
        prop_assert_eq!(replay(&e, &ungated), p.spans().to_vec());
    }

    #[test]
    fn disabled_gates_are_respected((e, cfg) in arb_case(), no_cap: bool, no_reset: bool) {
        let c = PatchifierConfig { max_length: !no_cap, row_reset: !no_reset, ..cfg };
        let p = patchify(&e, &c).unwrap();
        prop_assert_eq!(replay(&e, &c), p.spans().to_vec());
        p.validate(&c).unwrap();
    }
}
