use nalgebra::DVector;

use super::trace::{IterRecord, OuterTrace, TraceLevel};
use super::{Method, OuterParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, CoupledQp};
use crate::pcd::{InnerSolution, PcdSolver};

/// Inner minimization of `𝓛(·, λ)` over the box.
pub trait InnerOracle {
    fn solve(&mut self, lambda: &DVector<f64>, warm: &DVector<f64>, eps_in: f64) -> Result<InnerSolution>;
}

/// The default inner solver: PCD with the given budget.
pub struct PcdInner<'a> {
    pub solver: PcdSolver<'a>,
    pub budget: Option<usize>,
}

impl InnerOracle for PcdInner<'_> {
    fn solve(&mut self, lambda: &DVector<f64>, warm: &DVector<f64>, eps_in: f64) -> Result<InnerSolution> {
        self.solver.solve(lambda, warm, eps_in, self.budget)
    }
}

/// What the observer sees after outer iteration `k`.
pub struct IterateView<'a> {
    pub k: usize,
    /// `λ^k`, where the inexact gradient was evaluated.
    pub lambda: &'a DVector<f64>,
    /// `λ^{k+1}`.
    pub lambda_next: &'a DVector<f64>,
    /// IDG/subgradient: weighted dual average; IDFG: the gradient step `λ̂^k`.
    pub lambda_hat: &'a DVector<f64>,
    pub u_bar: &'a DVector<f64>,
    pub u_hat: &'a DVector<f64>,
    /// `d̄(λ^k) = 𝓛(ū^k, λ^k)`.
    pub d_bar: f64,
    /// `∇̄d(λ^k) = h(ū^k)`.
    pub grad: &'a DVector<f64>,
    pub inner: &'a InnerSolution,
    /// `S^k = Σ_{j≤k} α^j` (IDG and subgradient; the IDFG weight sum otherwise).
    pub weight_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct OuterSolution {
    pub u_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    /// `λ^{k+1}` after the last iteration.
    pub lambda_last: DVector<f64>,
    pub trace: OuterTrace,
}

/// One IDG step: inner solve at `λ^k`, then `λ^{k+1} = [λ^k + α·h(ū)]₊`.
pub fn idg_step(
    qp: &CoupledQp,
    inner: &mut dyn InnerOracle,
    lambda_k: &DVector<f64>,
    alpha: f64,
    eps_in: f64,
    warm: &DVector<f64>,
) -> Result<(DVector<f64>, InnerSolution)> {
    model::check_multiplier(lambda_k, qp.p())?;
    let sol = inner.solve(lambda_k, warm, eps_in)?;
    let grad = model::constraints(qp, &sol.u_bar)?;
    Ok((linalg::positive_part(&(lambda_k + grad * alpha)), sol))
}

/// IDFG state: `λ^k`, the running sum `z_k` and the index `k`.
#[derive(Debug, Clone)]
pub struct IdfgState {
    pub lambda: DVector<f64>,
    pub z: DVector<f64>,
    pub k: usize,
}

impl IdfgState {
    pub fn start(lambda0: DVector<f64>) -> Self {
        Self { z: lambda0.clone(), lambda: lambda0, k: 0 }
    }
}

/// One IDFG step. Returns `λ̂^k` and the inner solution; `state` advances
/// to `(λ^{k+1}, z_{k+1}, k+1)`.
pub fn idfg_step(
    qp: &CoupledQp,
    inner: &mut dyn InnerOracle,
    state: &mut IdfgState,
    l_d: f64,
    eps_in: f64,
    warm: &DVector<f64>,
) -> Result<(DVector<f64>, InnerSolution)> {
    model::check_multiplier(&state.lambda, qp.p())?;
    let sol = inner.solve(&state.lambda, warm, eps_in)?;
    let grad = model::constraints(qp, &sol.u_bar)?;
    let step = 0.5 / l_d;
    let k = state.k as f64;
    let lambda_hat = linalg::positive_part(&(&state.lambda + &grad * step));
    state.z += &grad * (step * (k + 1.0) / 2.0);
    state.lambda = &lambda_hat * ((k + 1.0) / (k + 3.0)) + linalg::positive_part(&state.z) * (2.0 / (k + 3.0));
    state.k += 1;
    Ok((lambda_hat, sol))
}

/// Runs the configured method with PCD inner solves.
pub fn solve(qp: &CoupledQp, params: &OuterParams) -> Result<OuterSolution> {
    solve_observed(qp, params, |_| Control::Continue)
}

/// Baseline run; `params.method` must be [`Method::Subgrad`].
pub fn subgradient_solve(qp: &CoupledQp, params: &OuterParams) -> Result<OuterSolution> {
    if params.method != Method::Subgrad {
        return Err(Error::InvalidParameter("subgradient_solve needs method subgrad".into()));
    }
    solve(qp, params)
}

pub fn solve_observed(
    qp: &CoupledQp,
    params: &OuterParams,
    observer: impl FnMut(&IterateView) -> Control,
) -> Result<OuterSolution> {
    let mut inner = PcdInner { solver: PcdSolver::new(qp)?, budget: params.inner_budget };
    solve_with_inner(qp, params, &mut inner, observer)
}

/// Runs `k = 0..=k_out` outer iterations (fewer if the observer stops),
/// maintaining the averaged primal and dual sequences.
pub fn solve_with_inner(
    qp: &CoupledQp,
    params: &OuterParams,
    inner: &mut dyn InnerOracle,
    mut observer: impl FnMut(&IterateView) -> Control,
) -> Result<OuterSolution> {
    model::validate_problem(qp).into_result()?;
    params.validate(qp.p())?;
    let p = qp.p();
    let n = qp.n();
    let lambda0 = params.lambda0.clone().unwrap_or_else(|| DVector::zeros(p));

    let mut lambda = lambda0.clone();
    let mut idfg = IdfgState::start(lambda0.clone());
    let mut warm = qp.bounds.projected_origin();
    let mut sum_u = DVector::zeros(n);
    let mut sum_lambda = DVector::zeros(p);
    let mut weight_sum = 0.0;
    let mut trace = OuterTrace::new(params);
    let mut u_hat = warm.clone();
    let mut lambda_hat = lambda0.clone();

    for k in 0..=params.k_out {
        let (lambda_next, hat_k, sol) = match params.method {
            Method::Idg => {
                let (next, sol) = idg_step(qp, inner, &lambda, params.step, params.eps_in, &warm)?;
                (next, None, sol)
            }
            Method::Subgrad => {
                let gamma = params.step / ((k + 1) as f64).sqrt();
                let (next, sol) = idg_step(qp, inner, &lambda, gamma, params.eps_in, &warm)?;
                (next, None, sol)
            }
            Method::Idfg => {
                let (hat, sol) = idfg_step(qp, inner, &mut idfg, params.l_d, params.eps_in, &warm)?;
                (idfg.lambda.clone(), Some(hat), sol)
            }
        };
        let grad = model::constraints(qp, &sol.u_bar)?;
        let weight = match params.method {
            Method::Idg => params.step,
            Method::Subgrad => params.step / ((k + 1) as f64).sqrt(),
            Method::Idfg => (k + 1) as f64,
        };
        sum_u += &sol.u_bar * weight;
        weight_sum += weight;
        match hat_k {
            Some(hat) => {
                // weights 2(s+1)/((k+1)(k+2)) sum to one
                u_hat = &sum_u * (2.0 / (((k + 1) * (k + 2)) as f64));
                lambda_hat = hat;
            }
            None => {
                sum_lambda += &lambda_next * weight;
                if weight_sum > 0.0 {
                    u_hat = &sum_u / weight_sum;
                    lambda_hat = &sum_lambda / weight_sum;
                } else {
                    u_hat = sol.u_bar.clone();
                    lambda_hat = lambda.clone();
                }
            }
        }
        let d_bar = sol.value;
        trace.push(IterRecord {
            k,
            d_bar,
            grad_norm: grad.norm(),
            feas_violation: model::feasibility_violation(qp, &u_hat)?,
            primal_value: model::objective(qp, &u_hat)?,
            inner_iterations: sol.iterations,
            inner_gap: sol.gap_bound,
            inner_certified: sol.certified,
            lambda: (params.trace == TraceLevel::Full).then(|| lambda.clone()),
            lambda_hat: (params.trace == TraceLevel::Full).then(|| lambda_hat.clone()),
            u_bar: (params.trace == TraceLevel::Full).then(|| sol.u_bar.clone()),
        });
        let control = observer(&IterateView {
            k,
            lambda: &lambda,
            lambda_next: &lambda_next,
            lambda_hat: &lambda_hat,
            u_bar: &sol.u_bar,
            u_hat: &u_hat,
            d_bar,
            grad: &grad,
            inner: &sol,
            weight_sum,
        });
        warm = sol.u_bar;
        lambda = lambda_next;
        if control == Control::Stop {
            break;
        }
    }
    trace.finish(weight_sum, idfg.z.clone());
    Ok(OuterSolution { u_hat, lambda_hat, lambda_last: lambda, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{certificates, idg_iterations};
    use crate::model::fixtures::two_var_qp;
    use crate::oracle::{self, ExactDual};
    use crate::pcd::StopReason;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    /// Inner solves through the oracle, used to isolate the outer recursion.
    struct Exact<'a>(ExactDual<'a>);

    impl InnerOracle for Exact<'_> {
        fn solve(&mut self, lambda: &DVector<f64>, warm: &DVector<f64>, _eps_in: f64) -> Result<InnerSolution> {
            let (u, d) = self.0.inner_warm(lambda, 1e-15, Some(warm))?;
            Ok(InnerSolution {
                u_bar: u,
                value: d,
                iterations: 0,
                gap_bound: 0.0,
                stop_reason: StopReason::GapCertified,
                certified: true,
                values: Vec::new(),
            })
        }
    }

    #[test]
    fn idg_first_step_on_p1() {
        let qp = two_var_qp();
        let mut inner = Exact(ExactDual::new(&qp).unwrap());
        let warm = qp.bounds.projected_origin();
        let (next, sol) = idg_step(&qp, &mut inner, &v(&[0.0]), 0.25, 1e-3, &warm).unwrap();
        assert_relative_eq!(next[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(model::constraints(&qp, &sol.u_bar).unwrap()[0], 1.0, epsilon = 1e-12);
        let (same, _) = idg_step(&qp, &mut inner, &v(&[0.7]), 0.0, 1e-3, &warm).unwrap();
        assert_eq!(same, v(&[0.7]));
    }

    #[test]
    fn nonpositive_gradient_at_zero_stays_zero() {
        let mut qp = two_var_qp();
        qp.offset = v(&[-3.0]);
        let mut inner = Exact(ExactDual::new(&qp).unwrap());
        let warm = qp.bounds.projected_origin();
        let (next, _) = idg_step(&qp, &mut inner, &v(&[0.0]), 0.25, 1e-3, &warm).unwrap();
        assert_eq!(next, v(&[0.0]));
        let mut state = IdfgState::start(v(&[0.0]));
        let (hat, _) = idfg_step(&qp, &mut inner, &mut state, 2.0, 1e-3, &warm).unwrap();
        assert_eq!(hat, v(&[0.0]));
        assert_eq!(state.lambda, v(&[0.0]));
    }

    #[test]
    fn idfg_first_step_on_p1() {
        let qp = two_var_qp();
        let mut inner = Exact(ExactDual::new(&qp).unwrap());
        let mut state = IdfgState::start(v(&[0.0]));
        let warm = qp.bounds.projected_origin();
        let (hat, _) = idfg_step(&qp, &mut inner, &mut state, 2.0, 1e-3, &warm).unwrap();
        assert_relative_eq!(hat[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(state.z[0], 0.125, epsilon = 1e-12);
        assert_relative_eq!(state.lambda[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_eq!(state.k, 1);
    }

    #[test]
    fn idg_on_p1_meets_conclusions() {
        let qp = two_var_qp();
        let params = OuterParams::from_rule(&qp, Method::Idg, 0.01, 0.5).unwrap();
        assert_eq!(params.k_out, 200);
        let out = solve(&qp, &params).unwrap();
        let f = model::objective(&qp, &out.u_hat).unwrap();
        assert!(model::feasibility_violation(&qp, &out.u_hat).unwrap() <= 0.04);
        assert!(f - 0.25 <= 0.01 && f - 0.25 >= -0.02);
        assert!(out.trace.all_inner_certified());
    }

    #[test]
    fn idfg_on_p1_meets_conclusions() {
        let qp = two_var_qp();
        let params = OuterParams::from_rule(&qp, Method::Idfg, 0.01, 0.5).unwrap();
        let out = solve(&qp, &params).unwrap();
        let f = model::objective(&qp, &out.u_hat).unwrap();
        assert!(model::feasibility_violation(&qp, &out.u_hat).unwrap() <= 0.12);
        assert!(f - 0.25 <= 0.02 && f - 0.25 >= -0.06);
        let d = oracle::exact_dual(&qp, &out.lambda_hat, 1e-14).unwrap();
        assert!(0.25 - d <= 0.03);
    }

    #[test]
    fn optimal_start_is_immediately_good() {
        let qp = two_var_qp();
        let params = OuterParams::new(Method::Idg, 0.01, 1e-6, 0, 2.0).with_lambda0(v(&[0.5]));
        let mut inner = Exact(ExactDual::new(&qp).unwrap());
        let out = solve_with_inner(&qp, &params, &mut inner, |_| Control::Continue).unwrap();
        assert!(model::feasibility_violation(&qp, &out.u_hat).unwrap() <= 1e-12);
        assert!(model::objective(&qp, &out.u_hat).unwrap() <= 0.25 + 0.01);
    }

    #[test]
    fn zero_start_with_exact_inner_stays_below_optimum() {
        let qp = two_var_qp();
        for method in [Method::Idg, Method::Idfg] {
            let params = OuterParams::from_rule(&qp, method, 0.01, 0.5).unwrap();
            let mut inner = Exact(ExactDual::new(&qp).unwrap());
            solve_with_inner(&qp, &params, &mut inner, |view| {
                assert!(model::objective(&qp, view.u_hat).unwrap() <= 0.25 + 1e-10);
                Control::Continue
            })
            .unwrap();
        }
    }

    #[test]
    fn observer_can_stop_early() {
        let qp = two_var_qp();
        let params = OuterParams::from_rule(&qp, Method::Idg, 0.01, 0.5).unwrap();
        let out = solve_observed(&qp, &params, |view| if view.k == 4 { Control::Stop } else { Control::Continue })
            .unwrap();
        assert_eq!(out.trace.records.len(), 5);
        assert_eq!(out.trace.last_k(), Some(4));
    }

    #[test]
    fn averages_match_recomputation() {
        let qp = two_var_qp();
        for method in [Method::Idg, Method::Idfg, Method::Subgrad] {
            let params = OuterParams::from_rule(&qp, method, 0.05, 0.5).unwrap().with_trace(TraceLevel::Full);
            let mut lambdas_next = Vec::new();
            let out = solve_observed(&qp, &params, |view| {
                lambdas_next.push(view.lambda_next.clone());
                Control::Continue
            })
            .unwrap();
            let recs = &out.trace.records;
            let k = recs.len() - 1;
            let weights: Vec<f64> = (0..=k)
                .map(|j| match method {
                    Method::Idg => params.step,
                    Method::Subgrad => params.step / ((j + 1) as f64).sqrt(),
                    Method::Idfg => 2.0 * (j + 1) as f64 / ((k + 1) * (k + 2)) as f64,
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = DVector::zeros(2);
            let mut lam = DVector::zeros(1);
            for j in 0..=k {
                u += recs[j].u_bar.as_ref().unwrap() * (weights[j] / total);
                lam += &lambdas_next[j] * (weights[j] / total);
            }
            assert!((u - &out.u_hat).amax() < 1e-12);
            if method != Method::Idfg {
                assert!((lam - &out.lambda_hat).amax() < 1e-12);
            }
            assert!(out.trace.records.iter().all(|r| r.lambda.as_ref().unwrap()[0] >= 0.0));
        }
    }

    #[test]
    fn idg_multipliers_stay_near_optimum() {
        let qp = two_var_qp();
        let params = OuterParams::from_rule(&qp, Method::Idg, 0.01, 0.5).unwrap();
        let star = 0.5;
        solve_observed(&qp, &params, |view| {
            let lhs = (view.lambda_next[0] - star).powi(2);
            assert!(lhs <= star * star + 2.0 * view.weight_sum * params.eps_in + 1e-12);
            Control::Continue
        })
        .unwrap();
    }

    #[test]
    fn subgradient_is_worse_than_idg_on_p1() {
        let qp = two_var_qp();
        let k = 10_000;
        let l_d = 2.0;
        let sub = OuterParams::new(Method::Subgrad, 0.01, 1e-4, k, l_d);
        let idg = OuterParams::new(Method::Idg, 0.01, 1e-4, k, l_d);
        let vs = model::feasibility_violation(&qp, &subgradient_solve(&qp, &sub).unwrap().u_hat).unwrap();
        let vi = model::feasibility_violation(&qp, &solve(&qp, &idg).unwrap().u_hat).unwrap();
        assert!(vs > vi, "subgradient {vs} vs idg {vi}");
        assert!(idg_iterations(l_d, 0.5, 0.01) < k);
    }

    #[test]
    fn frozen_subgradient_keeps_lambda0() {
        let qp = two_var_qp();
        let params = OuterParams::new(Method::Subgrad, 0.01, 1e-3, 20, 2.0).with_step(0.0).with_lambda0(v(&[0.3]));
        let out = subgradient_solve(&qp, &params).unwrap();
        assert_eq!(out.lambda_last, v(&[0.3]));
    }

    #[test]
    fn certificates_hold_along_p1_runs() {
        let qp = two_var_qp();
        for method in [Method::Idg, Method::Idfg] {
            let params = OuterParams::from_rule(&qp, method, 0.01, 0.5).unwrap();
            solve_observed(&qp, &params, |view| {
                let c = certificates(method, view.k, params.eps_in, params.l_d, 0.5, 0.0);
                let viol = model::feasibility_violation(&qp, view.u_hat).unwrap();
                let gap = model::objective(&qp, view.u_hat).unwrap() - 0.25;
                let d = oracle::exact_dual(&qp, view.lambda_hat, 1e-14).unwrap();
                assert!(viol <= c.feas_violation_bound + 1e-9);
                assert!(gap <= c.primal_subopt_upper + 1e-9 && -gap <= c.primal_subopt_lower + 1e-9);
                assert!(0.25 - d <= c.dual_subopt_bound + 1e-9);
                Control::Continue
            })
            .unwrap();
        }
    }
}
