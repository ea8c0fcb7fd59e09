use dual_mpc::dual::{self, certificates, Method, OuterParams};
use dual_mpc::harness::gen_random_qp;
use dual_mpc::model::{self, constraints, lagrangian, objective};
use dual_mpc::mpc;
use dual_mpc::oracle;
use nalgebra::DVector;
use proptest::prelude::*;

fn multipliers(p: usize) -> impl Strategy<Value = DVector<f64>> {
    proptest::collection::vec(0.0f64..2.0, p).prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lagrangian_splits_into_objective_and_constraints(seed in 0u64..500, lam in multipliers(64)) {
        let qp = gen_random_qp(8, seed).unwrap();
        let lam = lam.rows(0, qp.p()).into_owned();
        let u = qp.bounds.project(&DVector::from_fn(qp.n(), |i, _| ((i as f64) * 0.37).sin()));
        let lhs = lagrangian(&qp, &u, &lam).unwrap();
        let rhs = objective(&qp, &u).unwrap() + lam.dot(&constraints(&qp, &u).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn weak_duality_holds(seed in 0u64..500, lam in multipliers(64)) {
        let qp = gen_random_qp(8, seed).unwrap();
        let lam = lam.rows(0, qp.p()).into_owned();
        let f_star = oracle::reference_solve(&qp, 1e-10).unwrap().f_star;
        let d = oracle::exact_dual(&qp, &lam, 1e-10).unwrap();
        prop_assert!(d <= f_star + 1e-8, "d = {d}, F* = {f_star}");
    }

    #[test]
    fn certificates_shrink_with_iterations(
        k in 0usize..10_000,
        eps_in in 0.0f64..1e-1,
        l in 1e-2f64..1e2,
        r in 1e-3f64..10.0,
    ) {
        for method in [Method::Idg, Method::Idfg] {
            let a = certificates(method, k, eps_in, l, r, 0.0);
            let b = certificates(method, k + 1, eps_in, l, r, 0.0);
            if method == Method::Idg {
                prop_assert!(b.dual_subopt_bound <= a.dual_subopt_bound + 1e-15);
            }
            prop_assert!(b.feas_violation_bound <= a.feas_violation_bound + 1e-15);
            prop_assert!(b.primal_subopt_lower <= a.primal_subopt_lower + 1e-15);
            prop_assert!(a.dual_subopt_bound >= 0.0 && a.primal_subopt_upper >= 0.0);
        }
    }

    #[test]
    fn tightening_shifts_every_row(seed in 0u64..500, eps_c in 1e-6f64..1.0) {
        let qp = gen_random_qp(6, seed).unwrap();
        let tight = mpc::tighten(&qp, eps_c).unwrap();
        let u = qp.bounds.projected_origin();
        let h = constraints(&qp, &u).unwrap();
        let ht = constraints(&tight, &u).unwrap();
        for (a, b) in h.iter().zip(ht.iter()) {
            prop_assert!((b - a - eps_c).abs() <= 1e-12);
        }
        prop_assert_eq!(&tight.hessian, &qp.hessian);
        prop_assert_eq!(&tight.coupling, &qp.coupling);
    }

    #[test]
    fn iterates_stay_in_the_box(seed in 0u64..200) {
        let qp = gen_random_qp(6, seed).unwrap();
        let l_d = model::constants(&qp).unwrap().l_d_exact;
        for method in [Method::Idg, Method::Idfg] {
            let params = OuterParams::from_rule_with(method, 1e-1, 1.0, l_d).unwrap();
            let mut ok = true;
            dual::solve_observed(&qp, &params, |v| {
                ok &= qp.bounds.contains(v.u_hat, 1e-12) && v.lambda_next.iter().all(|&x| x >= 0.0);
                dual::Control::Continue
            })
            .unwrap();
            prop_assert!(ok);
        }
    }
}

#[test]
fn certificates_vanish_with_exact_inner_solves() {
    for method in [Method::Idg, Method::Idfg] {
        let c = certificates(method, 10_000_000, 0.0, 2.0, 0.5, 0.0);
        assert!(c.dual_subopt_bound < 1e-6);
        assert!(c.feas_violation_bound < 1e-6);
        assert!(c.primal_subopt_lower < 1e-6);
        assert_eq!(c.primal_subopt_upper, 0.0);
    }
}
