//! Cross-module behaviour through the public API.

use hierloc::experiments::{list_experiments, run, RunConfig, EXPERIMENTS};
use hierloc::lattice::{LatticeBox, Site, SiteSet};
use hierloc::linalg::eigvals;
use hierloc::operator::{assemble, green, GreenSolver, ModelParams};
use hierloc::potential::{sample_bernoulli, symmetric_hierarchical, total_potential, HierarchyParams};
use hierloc::schur::{CascadeConfig, CountMethod, SchurCascadeState};
use hierloc::stats::wilson;
use proptest::prelude::*;

fn chain(n: i64) -> SiteSet {
    SiteSet::new((0..n).map(|i| Site::new(&[i])).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assembly_is_affine_in_the_potential(v in prop::collection::vec(0.0f64..30.0, 2..20), w in prop::collection::vec(0.0f64..30.0, 20)) {
        let p = ModelParams::new(1, 20.0, 1.0).unwrap();
        let dom = chain(v.len() as i64);
        let w = &w[..v.len()];
        let sum: Vec<f64> = v.iter().zip(w).map(|(a, b)| a + b).collect();
        let (a, b) = (assemble(&dom, &sum, p).unwrap().to_dense(), assemble(&dom, &v, p).unwrap().to_dense());
        for i in 0..v.len() {
            for j in 0..v.len() {
                let expect = if i == j { w[i] } else { 0.0 };
                prop_assert!((a[(i, j)] - b[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn green_inverts_the_operator(bits in prop::collection::vec(0u8..4, 3..30), e in -0.005f64..5.0) {
        let p = ModelParams::new(1, 20.0, 1.0).unwrap();
        let v: Vec<f64> = bits.iter().map(|&b| if b & 2 == 0 { 0.0 } else { 20.0 } + (b & 1) as f64).collect();
        let op = assemble(&chain(v.len() as i64), &v, p).unwrap();
        let Ok(solver) = GreenSolver::new(&op, e) else { return Ok(()) };
        let x: Vec<f64> = (0..op.n()).map(|i| (i as f64).sin()).collect();
        let hx = op.apply(&x);
        let back = solver.solve(&hx.iter().zip(&x).map(|(a, b)| a - e * b).collect::<Vec<_>>());
        let scale = 1.0 + x.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-6 * scale);
        }
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(k in 0u64..1000, extra in 0u64..1000) {
        let n = k + extra;
        prop_assume!(n > 0);
        let ci = wilson(k, n, 4.0);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= ci.lo && ci.lo <= p + 1e-12 && p <= ci.hi + 1e-12 && ci.hi <= 1.0);
    }
}

#[test]
fn hierarchical_spectrum_splits_into_two_bands() {
    let hp = HierarchyParams::new(1, 2, 2.0, 20.0, 1.0).with_ladder(vec![2, 9, 41]);
    let v_hi = symmetric_hierarchical(&hp, 2).unwrap();
    let dom = LatticeBox::centered(1, 120).to_site_set();
    let omega = sample_bernoulli(&dom, 4);
    let op = assemble(&dom, &total_potential(&v_hi, &omega, 1.0).unwrap(), ModelParams::new(1, 20.0, 1.0).unwrap()).unwrap();
    let vals = eigvals(&op.to_dense());
    assert!(vals.iter().all(|&l| (0.0..=5.0).contains(&l) || (20.0..=25.0).contains(&l)));
    assert!(vals.iter().any(|&l| l < 5.0));
    // Low-window eigenvalues are exactly the ones that make the Green's function blow up.
    let near = vals.iter().copied().find(|&l| l < 5.0).unwrap();
    assert!(green(&op, near).is_err());
}

#[test]
fn every_preset_parses_and_validates() {
    assert_eq!(list_experiments().lines().count(), EXPERIMENTS.len());
    for info in EXPERIMENTS.iter() {
        let text = format!("# preset\nexperiment = {}\nseed = 3\n", info.name);
        let cfg = RunConfig::parse_kv(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 3);
    }
    assert!(RunConfig::parse_kv("experiment = toolbox\nbogus = 1\n").is_err());
    assert!(RunConfig::parse_kv("seed = 1\n").is_err());
}

#[test]
fn reports_are_stable_under_reruns() {
    let mut cfg = RunConfig::preset("toolbox").unwrap();
    cfg.trials = 20;
    let (a, b) = (run(&cfg).unwrap(), run(&cfg).unwrap());
    assert_eq!(a.to_json_stable(), b.to_json_stable());
    assert!(a.passed());
}

#[test]
fn window_counts_at_desk_scale_are_certain() {
    let hp = HierarchyParams::new(1, 2, 2.0, 20.0, 1.0).with_ladder(vec![2, 781410]);
    let cfg = CascadeConfig { l0: Some(1), p: Some(3), ..Default::default() };
    for seed in 0..5 {
        let st = SchurCascadeState::new(&hp, 0, &cfg, seed).unwrap();
        let e = st.anchor_energy(0, 2.0).unwrap();
        for level in 0..=3 {
            let wc = st.window_count(level, e).unwrap();
            assert!(wc.certain(), "seed {seed} level {level}: {wc:?}");
            if level == 0 {
                assert_eq!(wc.method, CountMethod::Resolved);
            }
            if wc.method == CountMethod::Accurate {
                let (dist, err) = wc.accurate.unwrap();
                assert!(err < dist || wc.count == 1);
            }
        }
    }
}
