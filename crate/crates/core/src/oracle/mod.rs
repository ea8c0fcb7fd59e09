//! Reference solver and KKT checks.
//!
//! Shares no iteration code with [`crate::pcd`] or [`crate::dual`]: the inner
//! box QP is solved by active-set Newton steps, the outer problem by a
//! restarted dual fast gradient method followed by an active-set KKT solve.

mod boxqp;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, BoxSet, CoupledQp};
use boxqp::BoxQp;

const MAX_DUAL_ITERS: usize = 400_000;
const MULTIPLIER_BLOWUP: f64 = 1e9;
const POLISH_ROUNDS: usize = 60;

/// KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// Distance of `−∇𝓛` to the normal cone of the box at `u`.
    pub stationarity: f64,
    /// `‖[Gu + g]₊‖` plus the box violation of `u`.
    pub primal_feas: f64,
    /// `‖[−λ]₊‖`.
    pub dual_feas: f64,
    /// `|⟨λ, Gu + g⟩|` plus the implied box-multiplier products.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal_feas).max(self.dual_feas).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub u_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub f_star: f64,
    pub residuals: KktResiduals,
}

/// QP with inequality rows `Au + a ≤ 0`, equality rows `Bu + b = 0` and a box.
#[derive(Debug, Clone)]
pub struct GeneralQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq: DMatrix<f64>,
    pub ineq_offset: DVector<f64>,
    pub eq: DMatrix<f64>,
    pub eq_offset: DVector<f64>,
    pub bounds: BoxSet,
}

#[derive(Debug, Clone)]
pub struct GeneralSolution {
    pub u: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub value: f64,
    pub residual: f64,
}

impl From<&CoupledQp> for GeneralQp {
    fn from(qp: &CoupledQp) -> Self {
        let n = qp.n();
        Self {
            hessian: qp.hessian.clone(),
            linear: qp.linear.clone(),
            ineq: qp.coupling.clone(),
            ineq_offset: qp.offset.clone(),
            eq: DMatrix::zeros(0, n),
            eq_offset: DVector::zeros(0),
            bounds: qp.bounds.clone(),
        }
    }
}

impl GeneralQp {
    fn n(&self) -> usize {
        self.hessian.nrows()
    }

    fn p(&self) -> usize {
        self.ineq.nrows()
    }

    fn rows(&self) -> DMatrix<f64> {
        let (p, m, n) = (self.p(), self.eq.nrows(), self.n());
        let mut out = DMatrix::zeros(p + m, n);
        out.rows_mut(0, p).copy_from(&self.ineq);
        out.rows_mut(p, m).copy_from(&self.eq);
        out
    }

    fn offsets(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.p() + self.eq.nrows());
        out.rows_mut(0, self.p()).copy_from(&self.ineq_offset);
        out.rows_mut(self.p(), self.eq.nrows()).copy_from(&self.eq_offset);
        out
    }

    fn value(&self, u: &DVector<f64>) -> f64 {
        model::quad_value(&self.hessian, &self.linear, u)
    }

    /// Largest KKT residual with equality multipliers left free.
    pub fn kkt_residual(&self, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let p = self.p();
        let rows = self.rows();
        let grad = &self.hessian * u + &self.linear + rows.tr_mul(y);
        let h = &rows * u + self.offsets();
        let stat = normal_cone_distance(&self.bounds, u, &grad);
        let ineq_viol = linalg::positive_part_norm(&h.rows(0, p).into_owned());
        let eq_viol = h.rows(p, self.eq.nrows()).norm();
        let box_viol = (u - self.bounds.project(u)).norm();
        let dual = y.rows(0, p).iter().map(|x| (-x).max(0.0).powi(2)).sum::<f64>().sqrt();
        let comp = y.rows(0, p).dot(&h.rows(0, p)).abs() + box_complementarity(&self.bounds, u, &grad);
        stat.max(ineq_viol + eq_viol + box_viol).max(dual).max(comp)
    }

    /// Solves to KKT residual at most `tol`.
    pub fn solve(&self, tol: f64) -> Result<GeneralSolution> {
        let p = self.p();
        let rows = self.rows();
        let offsets = self.offsets();
        let total = rows.nrows();
        let (sigma, lmax) = linalg::sym_eig_extremes(&linalg::symmetrize(&self.hessian));
        if sigma <= model::PD_TOL {
            return Err(Error::InvalidProblem(format!("H not positive definite (λ_min = {sigma:e})")));
        }
        let inner_tol = (tol * tol).max(1e-20);
        let inner = |y: &DVector<f64>, warm: Option<&DVector<f64>>| -> Result<DVector<f64>> {
            let bqp = BoxQp {
                h: &self.hessian,
                c: &self.linear + rows.tr_mul(y),
                bounds: &self.bounds,
                sigma,
                lmax,
            };
            Ok(bqp.solve(warm, inner_tol)?.0)
        };

        let project = |y: &mut DVector<f64>| {
            for r in 0..p {
                y[r] = y[r].max(0.0);
            }
        };

        let mut u = inner(&DVector::zeros(total), None)?;
        if total == 0 {
            let value = self.value(&u);
            return Ok(GeneralSolution {
                residual: self.kkt_residual(&u, &DVector::zeros(0)),
                u,
                lambda_ineq: DVector::zeros(0),
                lambda_eq: DVector::zeros(0),
                value,
            });
        }
        let l_d = (linalg::spectral_norm_sq(&rows) / sigma).max(f64::MIN_POSITIVE);
        let mut lam = DVector::zeros(total);
        let mut y = lam.clone();
        let mut u_y = u.clone();
        let mut t = 1.0f64;
        let mut next_polish = 0usize;
        for k in 0..MAX_DUAL_ITERS {
            if k == next_polish {
                if let Some(sol) = self.polish(&u, &lam, tol) {
                    return Ok(sol);
                }
                next_polish = (next_polish * 3 / 2).max(next_polish + 10);
            }
            u_y = inner(&y, Some(&u_y))?;
            let grad = &rows * &u_y + &offsets;
            let mut next = &y + grad / l_d;
            project(&mut next);
            if (&y - &next).dot(&(&next - &lam)) > 0.0 {
                t = 1.0;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &lam) * ((t - 1.0) / t_next);
            project(&mut y);
            lam = next;
            t = t_next;
            if lam.amax() > MULTIPLIER_BLOWUP {
                return Err(Error::Infeasible("dual iterates diverge; coupling rows inconsistent with the box".into()));
            }
            u = inner(&lam, Some(&u_y))?;
        }
        Err(Error::NotConverged(format!("reference solve did not reach KKT tolerance {tol:e}")))
    }

    /// Active-set KKT solve seeded from an approximate primal-dual pair.
    fn polish(&self, u0: &DVector<f64>, y0: &DVector<f64>, tol: f64) -> Option<GeneralSolution> {
        let n = self.n();
        let p = self.p();
        let m = self.eq.nrows();
        let rows = self.rows();
        let offsets = self.offsets();
        let h0 = &rows * u0 + &offsets;
        let scale = 1.0 + self.linear.amax() + self.ineq_offset.amax();
        let guess = 1e-6 * scale;

        let mut active: Vec<bool> = (0..p).map(|r| y0[r] > guess || h0[r] > -guess).collect();
        // 0 free, -1 at lb, +1 at ub
        let mut side: Vec<i8> = (0..n)
            .map(|j| {
                let (lo, hi) = (self.bounds.lb[j], self.bounds.ub[j]);
                if lo == hi || u0[j] <= lo + guess * (1.0 + lo.abs()) {
                    -1
                } else if u0[j] >= hi - guess * (1.0 + hi.abs()) {
                    1
                } else {
                    0
                }
            })
            .collect();
        let eps = tol * 0.1;

        for _ in 0..POLISH_ROUNDS {
            let free: Vec<usize> = (0..n).filter(|&j| side[j] == 0).collect();
            let fixed: Vec<usize> = (0..n).filter(|&j| side[j] != 0).collect();
            let act: Vec<usize> = (0..p).filter(|&r| active[r]).chain(p..p + m).collect();
            let mut u = DVector::zeros(n);
            for &j in &fixed {
                u[j] = if side[j] < 0 { self.bounds.lb[j] } else { self.bounds.ub[j] };
            }
            let c_all = rows.select_rows(&act);
            let mut r2 = -offsets.select_rows(&act);
            if !fixed.is_empty() {
                r2 -= c_all.select_columns(&fixed) * u.select_rows(&fixed);
            }
            let mut y_act = DVector::zeros(act.len());
            if !free.is_empty() {
                let h_ff = self.hessian.select_rows(&free).select_columns(&free);
                let mut r1 = -self.linear.select_rows(&free);
                if !fixed.is_empty() {
                    r1 -= self.hessian.select_rows(&free).select_columns(&fixed) * u.select_rows(&fixed);
                }
                let chol = Cholesky::new(h_ff)?;
                if !act.is_empty() {
                    let c_f = c_all.select_columns(&free);
                    let k = chol.solve(&c_f.transpose());
                    let s = &c_f * &k;
                    let rhs = &c_f * chol.solve(&r1) - &r2;
                    y_act = linalg::psd_pinv_solve(&s, &rhs, 1e-13);
                    r1 -= c_f.tr_mul(&y_act);
                }
                let u_f = chol.solve(&r1);
                for (k, &j) in free.iter().enumerate() {
                    u[j] = u_f[k];
                }
            }
            let mut y = DVector::zeros(p + m);
            for (k, &r) in act.iter().enumerate() {
                y[r] = y_act[k];
            }
            let grad = &self.hessian * &u + &self.linear + rows.tr_mul(&y);
            let h = &rows * &u + &offsets;

            let mut changed = false;
            for j in 0..n {
                match side[j] {
                    0 if u[j] < self.bounds.lb[j] - eps => {
                        side[j] = -1;
                        changed = true;
                    }
                    0 if u[j] > self.bounds.ub[j] + eps => {
                        side[j] = 1;
                        changed = true;
                    }
                    -1 if grad[j] < -eps && self.bounds.lb[j] < self.bounds.ub[j] => {
                        side[j] = 0;
                        changed = true;
                    }
                    1 if grad[j] > eps => {
                        side[j] = 0;
                        changed = true;
                    }
                    _ => {}
                }
            }
            for r in 0..p {
                if active[r] && y[r] < -eps {
                    active[r] = false;
                    changed = true;
                } else if !active[r] && h[r] > eps {
                    active[r] = true;
                    changed = true;
                }
            }
            if changed {
                continue;
            }
            let u = self.bounds.project(&u);
            for r in 0..p {
                y[r] = y[r].max(0.0);
            }
            let residual = self.kkt_residual(&u, &y);
            if residual > tol {
                return None;
            }
            return Some(GeneralSolution {
                value: self.value(&u),
                lambda_ineq: y.rows(0, p).into_owned(),
                lambda_eq: y.rows(p, m).into_owned(),
                u,
                residual,
            });
        }
        None
    }
}

fn normal_cone_distance(bounds: &BoxSet, u: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    u.iter()
        .enumerate()
        .map(|(j, &x)| {
            let at_lb = x <= bounds.lb[j];
            let at_ub = x >= bounds.ub[j];
            let d = match (at_lb, at_ub) {
                (true, true) => 0.0,
                (true, false) => (-grad[j]).max(0.0),
                (false, true) => grad[j].max(0.0),
                (false, false) => grad[j].abs(),
            };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn box_complementarity(bounds: &BoxSet, u: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    u.iter()
        .enumerate()
        .map(|(j, &x)| {
            let mut s = 0.0;
            if bounds.lb[j].is_finite() {
                s += grad[j].max(0.0) * (x - bounds.lb[j]).abs();
            }
            if bounds.ub[j].is_finite() {
                s += (-grad[j]).max(0.0) * (bounds.ub[j] - x).abs();
            }
            s
        })
        .sum()
}

/// KKT residuals of `(u, λ)` for a coupled QP.
pub fn kkt_residual(qp: &CoupledQp, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<KktResiduals> {
    if u.len() != qp.n() || lambda.len() != qp.p() {
        return Err(Error::Dimension("u or lambda has the wrong length".into()));
    }
    let grad = &qp.hessian * u + &qp.linear + qp.coupling.tr_mul(lambda);
    let h = &qp.coupling * u + &qp.offset;
    Ok(KktResiduals {
        stationarity: normal_cone_distance(&qp.bounds, u, &grad),
        primal_feas: linalg::positive_part_norm(&h) + (u - qp.bounds.project(u)).norm(),
        dual_feas: lambda.iter().map(|x| (-x).max(0.0).powi(2)).sum::<f64>().sqrt(),
        complementarity: lambda.dot(&h).abs() + box_complementarity(&qp.bounds, u, &grad),
    })
}

/// High-accuracy primal-dual solution with KKT residual at most `tol`.
pub fn reference_solve(qp: &CoupledQp, tol: f64) -> Result<ReferenceSolution> {
    model::validate_problem(qp).into_result()?;
    let sol = GeneralQp::from(qp).solve(tol)?;
    let residuals = kkt_residual(qp, &sol.u, &sol.lambda_ineq)?;
    Ok(ReferenceSolution { f_star: sol.value, u_star: sol.u, lambda_star: sol.lambda_ineq, residuals })
}

/// `u(λ) = argmin_box 𝓛(·, λ)` and `d(λ)`, with inner gap at most `tol`.
pub fn exact_inner(qp: &CoupledQp, lambda: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, f64)> {
    ExactDual::new(qp)?.inner(lambda, tol)
}

/// `d(λ)` to accuracy `tol`.
pub fn exact_dual(qp: &CoupledQp, lambda: &DVector<f64>, tol: f64) -> Result<f64> {
    Ok(exact_inner(qp, lambda, tol)?.1)
}

/// Dual-function evaluator that caches the spectral constants of `H`.
pub struct ExactDual<'a> {
    qp: &'a CoupledQp,
    sigma: f64,
    lmax: f64,
}

impl<'a> ExactDual<'a> {
    pub fn new(qp: &'a CoupledQp) -> Result<Self> {
        let (sigma, lmax) = linalg::sym_eig_extremes(&linalg::symmetrize(&qp.hessian));
        if sigma <= model::PD_TOL {
            return Err(Error::InvalidProblem(format!("H not positive definite (λ_min = {sigma:e})")));
        }
        Ok(Self { qp, sigma, lmax })
    }

    pub fn inner(&self, lambda: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, f64)> {
        self.inner_warm(lambda, tol, None)
    }

    pub fn inner_warm(
        &self,
        lambda: &DVector<f64>,
        tol: f64,
        warm: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, f64)> {
        model::check_multiplier(lambda, self.qp.p())?;
        let bqp = BoxQp {
            h: &self.qp.hessian,
            c: &self.qp.linear + self.qp.coupling.tr_mul(lambda),
            bounds: &self.qp.bounds,
            sigma: self.sigma,
            lmax: self.lmax,
        };
        let (u, _) = bqp.solve(warm, tol)?;
        let d = bqp.value(&u) + lambda.dot(&self.qp.offset);
        Ok((u, d))
    }

    pub fn value(&self, lambda: &DVector<f64>, tol: f64) -> Result<f64> {
        Ok(self.inner(lambda, tol)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_var_qp;
    use crate::model::BlockPartition;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn p1_reference() {
        let sol = reference_solve(&two_var_qp(), 1e-10).unwrap();
        assert!((sol.u_star - v(&[0.5, 0.5])).amax() < 1e-8);
        assert!((sol.lambda_star[0] - 0.5).abs() < 1e-8);
        assert!((sol.f_star - 0.25).abs() < 1e-8);
        assert!(sol.residuals.max() <= 1e-10);
    }

    #[test]
    fn inactive_coupling_gives_projected_minimum() {
        let mut qp = two_var_qp();
        qp.linear = v(&[-20.0, 3.0]);
        qp.offset = v(&[-100.0]);
        let sol = reference_solve(&qp, 1e-10).unwrap();
        assert_eq!(sol.lambda_star[0], 0.0);
        assert!((sol.u_star - v(&[10.0, -3.0])).amax() < 1e-10);
    }

    #[test]
    fn origin_optimum() {
        let mut qp = two_var_qp();
        qp.offset = v(&[-1.0]);
        let sol = reference_solve(&qp, 1e-10).unwrap();
        assert!(sol.u_star.amax() < 1e-12);
        assert!(sol.f_star.abs() < 1e-12);
    }

    #[test]
    fn infeasible_rows_are_detected() {
        let mut qp = two_var_qp();
        qp.offset = v(&[100.0]);
        assert!(matches!(reference_solve(&qp, 1e-9), Err(Error::Infeasible(_))));
    }

    #[test]
    fn p1_exact_inner() {
        let (u, d) = exact_inner(&two_var_qp(), &v(&[0.5]), 1e-14).unwrap();
        assert!((u - v(&[0.5, 0.5])).amax() < 1e-10);
        assert_relative_eq!(d, 0.25, epsilon = 1e-12);
        // d(λ) = λ − λ² on [0, 10]
        for lam in [0.0, 0.3, 1.7, 6.0] {
            assert_relative_eq!(exact_dual(&two_var_qp(), &v(&[lam]), 1e-14).unwrap(), lam - lam * lam, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_multiplier_inner_is_projected_minimum() {
        let mut qp = two_var_qp();
        qp.linear = v(&[-30.0, 4.0]);
        let (u, _) = exact_inner(&qp, &v(&[0.0]), 1e-14).unwrap();
        assert!((u - v(&[10.0, -4.0])).amax() < 1e-10);
    }

    #[test]
    fn kkt_residual_at_p1_optimum() {
        let r = kkt_residual(&two_var_qp(), &v(&[0.5, 0.5]), &v(&[0.5])).unwrap();
        assert!(r.max() <= 1e-10);
        let perturbed = kkt_residual(&two_var_qp(), &v(&[0.5 + 1e-3, 0.5]), &v(&[0.5])).unwrap();
        assert!(perturbed.stationarity > 5e-4 && perturbed.stationarity < 2e-3);
    }

    #[test]
    fn equality_rows_are_honored() {
        // min ½‖u‖² s.t. u₁ + u₂ = 1 and u₁ − u₂ ≤ −0.4
        let gq = GeneralQp {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::zeros(2),
            ineq: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            ineq_offset: v(&[0.4]),
            eq: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            eq_offset: v(&[-1.0]),
            bounds: BoxSet::symmetric(2, 5.0),
        };
        let sol = gq.solve(1e-10).unwrap();
        assert!((sol.u - v(&[0.3, 0.7])).amax() < 1e-9);
        assert!(sol.lambda_ineq[0] > 0.0);
    }

    fn random_qp(seed: u64, n: usize, p: usize) -> CoupledQp {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        CoupledQp::new(
            a.transpose() * &a + DMatrix::identity(n, n),
            DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
            DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(p, |_, _| -rng.random_range(0.05..0.5)),
            BoxSet::symmetric(n, 1.0),
            BlockPartition::singletons(n).unwrap(),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn dual_is_concave(seed in 0u64..500, theta in 0.05f64..0.95) {
            let qp = random_qp(seed, 6, 4);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
            let l1 = DVector::from_fn(4, |_, _| rng.random_range(0.0..3.0));
            let l2 = DVector::from_fn(4, |_, _| rng.random_range(0.0..3.0));
            let tol = 1e-12;
            let mid = &l1 * theta + &l2 * (1.0 - theta);
            let d = |l: &DVector<f64>| exact_dual(&qp, l, tol).unwrap();
            prop_assert!(d(&mid) >= theta * d(&l1) + (1.0 - theta) * d(&l2) - 2.0 * tol);
        }

        #[test]
        fn dual_gradient_matches_finite_differences(seed in 0u64..500) {
            let qp = random_qp(seed, 6, 3);
            let lam = DVector::from_element(3, 0.8);
            let (u, _) = exact_inner(&qp, &lam, 1e-16).unwrap();
            let grad = model::constraints(&qp, &u).unwrap();
            let h = 1e-5;
            for r in 0..3 {
                let mut plus = lam.clone();
                plus[r] += h;
                let mut minus = lam.clone();
                minus[r] -= h;
                let fd = (exact_dual(&qp, &plus, 1e-16).unwrap() - exact_dual(&qp, &minus, 1e-16).unwrap()) / (2.0 * h);
                prop_assert!((fd - grad[r]).abs() <= 1e-5 * grad[r].abs().max(1.0));
            }
        }

        #[test]
        fn dual_gradient_is_lipschitz(seed in 0u64..500) {
            let qp = random_qp(seed, 6, 3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 7);
            let l1 = DVector::from_fn(3, |_, _| rng.random_range(0.0..4.0));
            let l2 = DVector::from_fn(3, |_, _| rng.random_range(0.0..4.0));
            let l_d = model::constants(&qp).unwrap().l_d_exact;
            let h1 = model::constraints(&qp, &exact_inner(&qp, &l1, 1e-16).unwrap().0).unwrap();
            let h2 = model::constraints(&qp, &exact_inner(&qp, &l2, 1e-16).unwrap().0).unwrap();
            prop_assert!((h1 - h2).norm() <= l_d * (&l1 - &l2).norm() * (1.0 + 1e-6) + 1e-12);
        }

        #[test]
        fn reference_meets_kkt(seed in 0u64..500) {
            let qp = random_qp(seed, 8, 5);
            let sol = reference_solve(&qp, 1e-9).unwrap();
            prop_assert!(sol.residuals.max() <= 1e-9);
            prop_assert!(sol.lambda_star.iter().all(|&x| x >= 0.0));
        }
    }
}
