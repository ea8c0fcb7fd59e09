//! Declared block sparsity of condensed network problems covers every nonzero block.

use dual_mpc::harness::{gen_input_coupled, gen_ring_traffic, TrafficParams};
use dual_mpc::model::{validate_problem, CoupledQp};
use dual_mpc::mpc::{self, NetworkSystem};
use nalgebra::DVector;

fn assert_covered(qp: &CoupledQp) {
    let sp = qp.sparsity.as_ref().expect("network problems declare their sparsity");
    let part = &qp.partition;
    let h_pairs = sp.h_pairs();
    let g_pairs = sp.g_pairs();
    for i in 0..part.count() {
        let ri = part.range(i);
        for j in 0..part.count() {
            let rj = part.range(j);
            let block = qp.hessian.view((ri.start, rj.start), (ri.len(), rj.len()));
            if block.amax() != 0.0 {
                assert!(h_pairs.contains(&(i, j)), "H block ({i}, {j}) is nonzero but undeclared");
            }
        }
        for r in 0..sp.row_blocks.count() {
            let rr = sp.row_blocks.range(r);
            let block = qp.coupling.view((rr.start, ri.start), (rr.len(), ri.len()));
            if block.amax() != 0.0 {
                assert!(g_pairs.contains(&(r, i)), "G block ({r}, {i}) is nonzero but undeclared");
            }
        }
    }
    assert!(validate_problem(qp).is_valid());
}

fn condensed_at(sys: &NetworkSystem, horizon: usize, x: &DVector<f64>) -> CoupledQp {
    mpc::condense(sys, horizon).unwrap().instantiate(x).unwrap()
}

#[test]
fn ring_traffic_neighbors_follow_the_ring() {
    for m in [4, 6, 8] {
        let (sys, states) = gen_ring_traffic(m, 3, 1, 1, &TrafficParams::default()).unwrap();
        for (i, s) in sys.subsystems.iter().enumerate() {
            assert!(s.neighbors.contains(&i));
            assert!(s.neighbors.contains(&((i + m - 1) % m)), "junction {i} misses its upstream link");
            assert!(s.neighbors.iter().all(|&j| {
                let d = (j + m - i) % m;
                d <= 1 || d == m - 1
            }));
        }
        assert_covered(&condensed_at(&sys, 3, &states[0]));
    }
}

#[test]
fn input_coupled_sparsity_is_complete() {
    for seed in 0..5u64 {
        let (sys, x0) = gen_input_coupled(3, 3, seed).unwrap();
        let qp = condensed_at(&sys, 3, &x0);
        assert_covered(&qp);
        // a chain couples only adjacent subsystems through G
        let sp = qp.sparsity.as_ref().unwrap();
        for (r, j) in sp.g_pairs() {
            assert!(r.abs_diff(j) <= 1, "row block {r} touches subsystem {j}");
        }
    }
}
