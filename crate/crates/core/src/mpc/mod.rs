//! Distributed MPC on top of the dual solvers: condensing, constraint
//! tightening, parameter selection and the receding-horizon loop.

mod condense;
mod system;
mod terminal;

use std::io::Write;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dual::{self, Method, OuterParams};
use crate::error::{Error, Result};
use crate::model::{self, BoxSet, CoupledQp};
use crate::pcd::PcdSolver;

pub use condense::{condense, CondensedMpc, RowInfo};
pub use system::{CouplingMode, NetworkSystem, Subsystem, Terminal};
pub use terminal::{check_terminal, dare, default_terminal, lyapunov, terminal_weight_for, TerminalReport};

/// Default floor on the next outer accuracy.
pub const EPS_MIN: f64 = 1e-8;
/// Default floor on the multiplier bound.
pub const R_MIN: f64 = 1e-6;
/// Absolute slack in the Lyapunov decrease check.
const LYAPUNOV_TOL: f64 = 1e-10;
const PHASE_ONE_ITERS: usize = 5_000;

/// Copy of `qp` with every coupling row tightened by `eps_c`.
pub fn tighten(qp: &CoupledQp, eps_c: f64) -> Result<CoupledQp> {
    if !(eps_c > 0.0) {
        return Err(Error::InvalidParameter(format!("eps_c must be positive, got {eps_c}")));
    }
    Ok(qp.shifted(eps_c))
}

/// Largest admissible tightening for the Slater vector `u_tilde`: half its
/// minimum slack.
pub fn eps_c_max(qp: &CoupledQp, u_tilde: &DVector<f64>) -> Result<f64> {
    let slack = model::min_slack(qp, u_tilde)?;
    if slack <= 0.0 {
        return Err(Error::SlaterViolation { min_slack: slack });
    }
    Ok(0.5 * slack)
}

/// `c(p)` in the admissibility cap and the accuracy update.
pub fn c_of_p(method: Method, p: usize) -> Result<f64> {
    let root = (p as f64).sqrt();
    match method {
        Method::Idg => Ok(root + 0.05),
        Method::Idfg => Ok(root + 0.5),
        Method::Subgrad => Err(Error::InvalidParameter("MPC rules exist for idg and idfg only".into())),
    }
}

/// Largest admissible `ε_out`: `c(p)·R̄_d·slack`.
pub fn admissibility_cap(method: Method, p: usize, r_bar: f64, min_slack: f64) -> Result<f64> {
    Ok(c_of_p(method, p)? * r_bar * min_slack)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MpcParams {
    pub k_out: usize,
    pub eps_in: f64,
    pub eps_c: f64,
}

/// Outer iteration count, inner accuracy and tightening for one MPC step.
pub fn mpc_params(
    method: Method,
    eps_out: f64,
    l_d: f64,
    r_bar: f64,
    p: usize,
    min_slack: f64,
) -> Result<MpcParams> {
    for (name, v) in [("eps_out", eps_out), ("L_d", l_d), ("R_d", r_bar), ("min_slack", min_slack)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
        }
    }
    let cap = admissibility_cap(method, p, r_bar, min_slack)?;
    if eps_out > cap {
        return Err(Error::Admissibility { eps_out, cap });
    }
    let root = (p as f64).sqrt();
    Ok(match method {
        Method::Idg => {
            let a = 2.0 * root + 0.1;
            MpcParams {
                k_out: (10.0 * a * l_d * r_bar * r_bar / eps_out).floor() as usize,
                eps_in: eps_out / (20.0 * a),
                eps_c: eps_out / (a * r_bar),
            }
        }
        _ => {
            // ε_in = ε·√ε/(8√2·√L_d·R̄_d·a^{3/2}) = ε/(√2·a·κ)
            let a = 2.0 * root + 1.0;
            let kappa = 8.0 * (a * l_d * r_bar * r_bar / eps_out).sqrt();
            MpcParams {
                k_out: kappa.floor() as usize,
                eps_in: eps_out / (2f64.sqrt() * a * kappa.max(1.0)),
                eps_c: eps_out / (a * r_bar),
            }
        }
    })
}

/// `min{½‖x‖²_Q, c(p)·slack⁺}`, floored at `eps_min`.
pub fn next_accuracy(x: &DVector<f64>, q: &DMatrix<f64>, c_p: f64, slack_plus: f64, eps_min: f64) -> Result<f64> {
    if !(slack_plus > 0.0) {
        return Err(Error::SlaterViolation { min_slack: slack_plus });
    }
    Ok((0.5 * x.dot(&(q * x))).min(c_p * slack_plus).max(eps_min))
}

/// `(ε_c⟨λ̂, e⟩ + 4ε_out − ‖x‖²_Q) / slack⁺`, floored at `r_min`.
pub fn update_rd(
    lambda_hat: &DVector<f64>,
    eps_c: f64,
    eps_out: f64,
    x_q_sq: f64,
    slack_plus: f64,
    r_min: f64,
) -> Result<f64> {
    if !(slack_plus > 0.0) {
        return Err(Error::SlaterViolation { min_slack: slack_plus });
    }
    let raw = (eps_c * lambda_hat.sum() + 4.0 * eps_out - x_q_sq) / slack_plus;
    if raw < r_min {
        debug!("multiplier bound update {raw:e} clamped to {r_min:e}");
    }
    Ok(raw.max(r_min))
}

/// Slater bound at `λ̃ = 0`, with `d(0)` bounded below by a certified inner solve.
pub fn slater_bound_at_zero(qp: &CoupledQp, u_tilde: &DVector<f64>, eps: f64) -> Result<f64> {
    let solver = PcdSolver::new(qp)?;
    let zero = DVector::zeros(qp.p());
    let sol = solver.solve(&zero, &qp.bounds.project(u_tilde), eps, None)?;
    model::slater_dual_bound(qp, u_tilde, &zero, sol.value - sol.gap_bound)
}

/// Strictly feasible point for `qp`: the best of `candidates`, or a
/// phase-one point minimizing `½‖[Gu + g + τe]₊‖²` over the box for
/// decreasing `τ`.
pub fn find_slater(qp: &CoupledQp, candidates: &[DVector<f64>]) -> Result<DVector<f64>> {
    find_slater_with_margin(qp, candidates, 0.0)
}

/// [`find_slater`] that gives up once no point with slack above `margin`
/// can be found.
pub fn find_slater_with_margin(qp: &CoupledQp, candidates: &[DVector<f64>], margin: f64) -> Result<DVector<f64>> {
    let mut best: Option<(DVector<f64>, f64)> = None;
    for c in candidates {
        let u = qp.bounds.project(c);
        let s = model::min_slack(qp, &u)?;
        if s > 0.0 && best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((u, s));
        }
    }
    let lip = crate::linalg::spectral_norm_sq(&qp.coupling).max(1e-300);
    let mut tau = qp.offset.amax().max(1.0);
    let mut start = best.as_ref().map_or_else(|| qp.bounds.projected_origin(), |(u, _)| u.clone());
    for _ in 0..40 {
        if 0.5 * tau < margin {
            break;
        }
        if best.as_ref().is_some_and(|(_, b)| *b >= tau) {
            break;
        }
        let shifted = &qp.offset + DVector::from_element(qp.p(), tau);
        let u = phase_one(&qp.coupling, &shifted, &qp.bounds, lip, &start, 0.5 * tau);
        let s = model::min_slack(qp, &u)?;
        if s > 0.5 * tau {
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                best = Some((u, s));
            }
            break;
        }
        start = u;
        tau *= 0.5;
    }
    best.filter(|(_, s)| *s > margin)
        .map(|(u, _)| u)
        .ok_or(Error::Infeasible("no strictly feasible point found".into()))
}

/// Accelerated projected gradient on `½‖[Gu + c]₊‖²`, stopped once
/// `max(Gu + c) ≤ accept`.
fn phase_one(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    bounds: &BoxSet,
    lip: f64,
    start: &DVector<f64>,
    accept: f64,
) -> DVector<f64> {
    let mut x = bounds.project(start);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..PHASE_ONE_ITERS {
        let h = g * &y + c;
        if h.max() <= accept {
            return y;
        }
        let r = h.map(|v| v.max(0.0));
        let next = bounds.project(&(&y - g.tr_mul(&r) / lip));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = bounds.project(&(&next + (&next - &x) * ((t - 1.0) / t_next)));
        x = next;
        t = t_next;
    }
    x
}

/// Result of one MPC step.
#[derive(Debug, Clone)]
pub struct MpcStepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    pub eps_c: f64,
    pub k_out: usize,
    /// Outer iterations actually run (`k_out + 1` without early stop).
    pub k_used: usize,
    pub r_d_bar: f64,
    pub p: usize,
    pub u_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    /// First input `û(0)`.
    pub applied: DVector<f64>,
    /// `min_j{−(Gû + Ex + g)_j}` on the untightened rows.
    pub slack_min: f64,
    /// `F(x, û)` including the state-only part.
    pub f_value: f64,
    pub inner_iterations: usize,
    pub inner_certified: bool,
    /// Decrease check against the previous step; `None` on the first step.
    pub lyapunov_ok: Option<bool>,
}

impl MpcStepRecord {
    pub fn strictly_feasible(&self, bounds: &BoxSet) -> bool {
        self.slack_min > 0.0 && bounds.contains(&self.u_hat, model::BOX_TOL)
    }
}

/// Everything needed to run one MPC step, before running it.
#[derive(Debug, Clone)]
pub struct MpcPlan {
    pub qp: CoupledQp,
    pub tightened: CoupledQp,
    pub params: MpcParams,
    pub outer: OuterParams,
    pub slater_slack: f64,
}

pub fn plan_mpc_step(
    c: &CondensedMpc,
    x: &DVector<f64>,
    method: Method,
    eps_out: f64,
    slater: &DVector<f64>,
    r_bar: f64,
) -> Result<MpcPlan> {
    let qp = c.instantiate(x)?;
    if let Some((index, value)) = qp.bounds.violation(slater, model::BOX_TOL) {
        return Err(Error::OutsideBox { index, value });
    }
    let slack = model::min_slack(&qp, slater)?;
    if slack <= 0.0 {
        return Err(Error::SlaterViolation { min_slack: slack });
    }
    let l_d = model::constants(&qp)?.l_d_exact;
    let params = mpc_params(method, eps_out, l_d, r_bar, qp.p(), slack)?;
    let tightened = tighten(&qp, params.eps_c)?;
    let outer = OuterParams::new(method, eps_out, params.eps_in, params.k_out, l_d).with_r_d(2.0 * r_bar);
    Ok(MpcPlan { qp, tightened, params, outer, slater_slack: slack })
}

/// Solves the tightened problem at `x` with the MPC parameter rule.
pub fn solve_mpc_step(
    c: &CondensedMpc,
    x: &DVector<f64>,
    method: Method,
    eps_out: f64,
    slater: &DVector<f64>,
    r_bar: f64,
) -> Result<MpcStepRecord> {
    solve_mpc_step_with(c, x, method, eps_out, slater, r_bar, None)
}

/// [`solve_mpc_step`] with an optional warm start `λ⁰`. A nonzero `λ⁰`
/// voids the certificates, which assume `λ⁰ = 0`.
pub fn solve_mpc_step_with(
    c: &CondensedMpc,
    x: &DVector<f64>,
    method: Method,
    eps_out: f64,
    slater: &DVector<f64>,
    r_bar: f64,
    lambda0: Option<&DVector<f64>>,
) -> Result<MpcStepRecord> {
    let plan = plan_mpc_step(c, x, method, eps_out, slater, r_bar)?;
    let mut outer = plan.outer.clone();
    if let Some(l0) = lambda0 {
        outer = outer.with_lambda0(l0.clone());
        outer.r_d = None;
    }
    let sol = dual::solve(&plan.tightened, &outer)?;
    Ok(MpcStepRecord {
        t: 0,
        x: x.clone(),
        method,
        eps_out,
        eps_in: plan.params.eps_in,
        eps_c: plan.params.eps_c,
        k_out: plan.params.k_out,
        k_used: sol.trace.records.len(),
        r_d_bar: r_bar,
        p: plan.qp.p(),
        applied: c.first_input(&sol.u_hat),
        slack_min: model::min_slack(&plan.qp, &sol.u_hat)?,
        f_value: c.cost(x, &sol.u_hat)?,
        inner_iterations: sol.trace.total_inner_iterations(),
        inner_certified: sol.trace.all_inner_certified(),
        lyapunov_ok: None,
        u_hat: sol.u_hat,
        lambda_hat: sol.lambda_hat,
    })
}

#[derive(Debug, Clone)]
pub struct ClosedLoopConfig {
    pub steps: usize,
    pub method: Method,
    /// Requested first-step accuracy; capped by admissibility.
    pub eps_out0: f64,
    pub eps_min: f64,
    pub r_min: f64,
    /// Start each step from the previous `λ̂` instead of zero.
    pub warm_lambda: bool,
}

impl ClosedLoopConfig {
    pub fn new(method: Method, steps: usize, eps_out0: f64) -> Self {
        Self { steps, method, eps_out0, eps_min: EPS_MIN, r_min: R_MIN, warm_lambda: false }
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub method: Method,
    pub horizon: usize,
    pub records: Vec<MpcStepRecord>,
    pub terminal: TerminalReport,
    /// `‖x‖²_Q` per step.
    pub state_costs: Vec<f64>,
}

#[derive(Serialize)]
struct ClosedLoopRow {
    t: usize,
    x_norm: f64,
    x_q_sq: f64,
    f_value: f64,
    eps_out: f64,
    eps_in: f64,
    eps_c: f64,
    k_out: usize,
    k_used: usize,
    r_d_bar: f64,
    slack_min: f64,
    lyapunov_ok: Option<bool>,
    method: Method,
    horizon: usize,
}

impl ClosedLoopTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (r, &xq) in self.records.iter().zip(&self.state_costs) {
            w.serialize(ClosedLoopRow {
                t: r.t,
                x_norm: r.x.norm(),
                x_q_sq: xq,
                f_value: r.f_value,
                eps_out: r.eps_out,
                eps_in: r.eps_in,
                eps_c: r.eps_c,
                k_out: r.k_out,
                k_used: r.k_used,
                r_d_bar: r.r_d_bar,
                slack_min: r.slack_min,
                lyapunov_ok: r.lyapunov_ok,
                method: self.method,
                horizon: self.horizon,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn terminal_box(sys: &NetworkSystem) -> Result<BoxSet> {
    BoxSet::new(sys.stacked(|s| &s.xf_lb), sys.stacked(|s| &s.xf_ub))
}

/// Receding-horizon simulation from `x0` with the terminal ingredients in
/// `sys.terminal` and the terminal box in the subsystems.
pub fn closed_loop(
    sys: &NetworkSystem,
    horizon: usize,
    x0: &DVector<f64>,
    slater0: &DVector<f64>,
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopTrace> {
    let term = sys
        .terminal
        .as_ref()
        .ok_or_else(|| Error::InvalidProblem("closed loop needs terminal ingredients".into()))?;
    let report = check_terminal(sys, &term.k, &term.p, &terminal_box(sys)?, 256);
    if !report.passed() {
        return Err(Error::InvalidProblem(format!("terminal check failed: {}", report.violations.join("; "))));
    }
    let c = condense(sys, horizon)?;
    let q = sys.state_weight();
    let mut x = x0.clone();
    let mut slater = slater0.clone();
    let qp0 = c.instantiate(&x)?;
    let mut r_bar = slater_bound_at_zero(&qp0, &slater, 1e-10)?.max(cfg.r_min);
    let slack0 = model::min_slack(&qp0, &slater)?;
    let mut eps = cfg.eps_out0.min(admissibility_cap(cfg.method, qp0.p(), r_bar, slack0)?);
    let mut lambda_prev: Option<DVector<f64>> = None;
    let mut records: Vec<MpcStepRecord> = Vec::with_capacity(cfg.steps);
    let mut state_costs = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        let warm = if cfg.warm_lambda { lambda_prev.as_ref() } else { None };
        let mut rec = solve_mpc_step_with(&c, &x, cfg.method, eps, &slater, r_bar, warm)?;
        rec.t = t;
        let x_q_sq = x.dot(&(&q * &x));
        if let Some(prev) = records.last() {
            let prev_xq = state_costs[t - 1];
            rec.lyapunov_ok = Some(rec.f_value <= prev.f_value - prev_xq + rec.eps_out + LYAPUNOV_TOL);
        }
        let x_next = c.next_state(&x, &rec.u_hat);
        let shifted = c.shift(&rec.u_hat, &x, &term.k);
        let qp_next = c.instantiate(&x_next)?;
        let slack_next = model::min_slack(&qp_next, &shifted)?;
        if !(slack_next > 0.0) || !qp_next.bounds.contains(&shifted, model::BOX_TOL) {
            return Err(Error::ShiftInfeasible { step: t, min_slack: slack_next });
        }
        let c_p = c_of_p(cfg.method, qp_next.p())?;
        let rd_rule = update_rd(&rec.lambda_hat, rec.eps_c, rec.eps_out, x_q_sq, slack_next, cfg.r_min)?;
        let rd_slater = slater_bound_at_zero(&qp_next, &shifted, 1e-10)?;
        let r_next = rd_rule.max(rd_slater);
        let eps_next = next_accuracy(&x, &q, c_p, slack_next, cfg.eps_min)?
            .min(admissibility_cap(cfg.method, qp_next.p(), r_next, slack_next)?);
        debug!("step {t}: F = {:.6e}, eps_out = {eps:.3e}, R_d = {r_bar:.3e}", rec.f_value);

        lambda_prev = Some(rec.lambda_hat.clone());
        records.push(rec);
        state_costs.push(x_q_sq);
        x = x_next;
        slater = shifted;
        r_bar = r_next;
        eps = eps_next;
    }
    Ok(ClosedLoopTrace { method: cfg.method, horizon, records, terminal: report, state_costs })
}

/// Hand-checkable reference instances.
pub mod fixtures {
    use super::*;

    /// Scalar `x⁺ = x + u`, `Q = R = 1`, horizon-independent bounds
    /// `|x| ≤ 1`, `|u| ≤ 1`, terminal box `[−1, 1]`, Riccati feedback and
    /// its Lyapunov terminal weight.
    pub fn scalar_mpc() -> NetworkSystem {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let v = |x: f64| DVector::from_element(1, x);
        let mut sys = NetworkSystem {
            mode: CouplingMode::General,
            subsystems: vec![Subsystem {
                nx: 1,
                nu: 1,
                neighbors: vec![0],
                a: vec![m(1.0)],
                b: vec![m(1.0)],
                q: m(1.0),
                r: m(1.0),
                p: m(1.0),
                x_lb: v(-1.0),
                x_ub: v(1.0),
                u_lb: v(-1.0),
                u_ub: v(1.0),
                xf_lb: v(-1.0),
                xf_ub: v(1.0),
            }],
            terminal: None,
        };
        let (_, k) = dare(&m(1.0), &m(1.0), &m(1.0), &m(1.0)).expect("scalar Riccati converges");
        let p = terminal_weight_for(&sys, &k).expect("stable feedback");
        sys.subsystems[0].p = p.clone();
        sys.terminal = Some(Terminal { k, p });
        sys
    }

    pub const SCALAR_MPC_HORIZON: usize = 2;
    pub const SCALAR_MPC_X0: f64 = 0.5;

    /// Slater vector from the terminal feedback rolled out over the horizon.
    pub fn feedback_rollout(c: &CondensedMpc, x: &DVector<f64>) -> Option<DVector<f64>> {
        let k = c.terminal_gain.as_ref()?;
        let mut seq = Vec::with_capacity(c.horizon);
        let mut s = x.clone();
        for _ in 0..c.horizon {
            let u = k * &s;
            s = &c.a * &s + &c.b * &u;
            seq.push(u);
        }
        Some(c.pack_inputs(&seq))
    }
}
