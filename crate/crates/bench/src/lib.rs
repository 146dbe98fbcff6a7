//! Fixtures shared by the benches.

use hierloc::lattice::LatticeBox;
use hierloc::operator::{assemble, BoxOperator, ModelParams};
use hierloc::potential::{sample_bernoulli, symmetric_hierarchical, total_potential, HierarchyParams};
use hierloc::schur::{CascadeConfig, SchurCascadeState};

/// Hierarchical operator H_k + βω on a centered box.
pub fn operator(d: usize, radius: u64, k: usize, seed: u64) -> BoxOperator {
    let hp = HierarchyParams::new(d, 2, 2.0, 20.0, 1.0).with_ladder(vec![2, 9, 41]);
    let v_hi = symmetric_hierarchical(&hp, k).expect("hierarchy");
    let domain = LatticeBox::centered(d, radius).to_site_set();
    let omega = sample_bernoulli(&domain, seed);
    let v = total_potential(&v_hi, &omega, 1.0).expect("potential");
    assemble(&domain, &v, ModelParams::new(d, 20.0, 1.0).expect("params")).expect("operator")
}

/// Desk cascade with `p` scales.
pub fn cascade(p: usize, seed: u64) -> SchurCascadeState {
    let hp = HierarchyParams::new(1, 2, 2.0, 20.0, 1.0).with_ladder(vec![2, 781410]);
    let cfg = CascadeConfig { l0: Some(1), p: Some(p), ..Default::default() };
    SchurCascadeState::new(&hp, 0, &cfg, seed).expect("cascade")
}
