//! Experiment drivers. Every study returns typed rows that serialize to
//! CSV; each row carries the method, accuracies, iteration budget and seed
//! needed to replay it.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cpu_time::ThreadTime;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::generate::{gen_random_qp, gen_ring_traffic, TrafficParams};
use crate::dual::{self, Control, Method, OuterParams};
use crate::error::{Error, Result};
use crate::model::{self, CoupledQp};
use crate::{mpc, oracle};

/// Absolute floating-point allowance when measured values are compared
/// with their targets.
pub const TARGET_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-10;
/// Certified accuracy of the inner solve behind the MPC multiplier bound.
const SLATER_EPS: f64 = 1e-6;
/// Stand-in for `‖λ*‖ = 0`, where the rules need a positive radius.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    RandomQp,
    InnerSensitivity,
    TrafficMpc,
    FixtureSuite,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::RandomQp => "random_qp",
            Experiment::InnerSensitivity => "inner_sensitivity",
            Experiment::TrafficMpc => "traffic_mpc",
            Experiment::FixtureSuite => "fixture_suite",
        })
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "random_qp" => Ok(Experiment::RandomQp),
            "inner_sensitivity" => Ok(Experiment::InnerSensitivity),
            "traffic_mpc" => Ok(Experiment::TrafficMpc),
            "fixture_suite" => Ok(Experiment::FixtureSuite),
            other => Err(Error::InvalidParameter(format!("unknown experiment {other:?}"))),
        }
    }
}

/// Study configuration. Empty lists and zero counts are filled from the
/// experiment's defaults by [`ExperimentConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Problem sizes `n` (random QP studies) or junction counts `M` (traffic).
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eps_out: Vec<f64>,
    /// Inner accuracies swept by the sensitivity study.
    pub eps_in: Vec<f64>,
    pub methods: Vec<Method>,
    pub horizon: usize,
    /// Initial states per traffic network.
    pub instances: usize,
    /// Iteration budget of the subgradient baseline.
    pub subgrad_iters: usize,
    /// Use the large sizes instead of the desk-scale ones.
    pub full: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::blank(Experiment::RandomQp)
    }
}

impl ExperimentConfig {
    fn blank(experiment: Experiment) -> Self {
        Self {
            experiment,
            sizes: Vec::new(),
            seeds: Vec::new(),
            eps_out: Vec::new(),
            eps_in: Vec::new(),
            methods: Vec::new(),
            horizon: 0,
            instances: 0,
            subgrad_iters: 0,
            full: false,
            out: None,
        }
    }

    /// Defaults of `experiment`, fully resolved.
    pub fn desk(experiment: Experiment) -> Self {
        Self::blank(experiment).resolved()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let full = c.full;
        let fill = |v: &mut Vec<usize>, desk: &[usize], big: &[usize]| {
            if v.is_empty() {
                *v = if full { big.to_vec() } else { desk.to_vec() };
            }
        };
        match c.experiment {
            Experiment::RandomQp => {
                fill(&mut c.sizes, &[10, 30, 100], &[10, 30, 100, 1000]);
                default_list(&mut c.seeds, (0..10).collect());
                default_list(&mut c.eps_out, vec![1e-3]);
                default_list(&mut c.methods, vec![Method::Idg, Method::Idfg]);
            }
            Experiment::InnerSensitivity => {
                fill(&mut c.sizes, &[10], &[10, 100]);
                default_list(&mut c.seeds, (0..10).collect());
                default_list(&mut c.eps_out, vec![1e-3]);
                default_list(&mut c.eps_in, vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]);
                default_list(&mut c.methods, vec![Method::Idg, Method::Idfg]);
            }
            Experiment::TrafficMpc => {
                fill(&mut c.sizes, &[4, 6], &[6, 12, 18]);
                default_list(&mut c.seeds, vec![1]);
                default_list(&mut c.eps_out, vec![1e-2]);
                default_list(&mut c.methods, vec![Method::Idg, Method::Idfg, Method::Subgrad]);
                if c.horizon == 0 {
                    c.horizon = if full { 10 } else { 5 };
                }
                if c.instances == 0 {
                    c.instances = 10;
                }
                if c.subgrad_iters == 0 {
                    c.subgrad_iters = 20_000;
                }
            }
            Experiment::FixtureSuite => {
                default_list(&mut c.eps_out, vec![1e-2]);
                default_list(&mut c.methods, vec![Method::Idg, Method::Idfg]);
                if c.horizon == 0 {
                    c.horizon = mpc::fixtures::SCALAR_MPC_HORIZON;
                }
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if self.eps_out.iter().chain(&self.eps_in).any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad("accuracies must be positive and finite");
        }
        match self.experiment {
            Experiment::RandomQp | Experiment::InnerSensitivity if self.sizes.iter().any(|&n| n < 2) => {
                bad("random QP sizes must be at least 2")
            }
            Experiment::TrafficMpc if self.sizes.iter().any(|&m| m < 4 || m % 2 != 0) => {
                bad("junction counts must be even and at least 4")
            }
            Experiment::TrafficMpc if self.horizon == 0 || self.instances == 0 => {
                bad("traffic study needs a positive horizon and instance count")
            }
            Experiment::RandomQp | Experiment::InnerSensitivity | Experiment::FixtureSuite
                if self.methods.contains(&Method::Subgrad) =>
            {
                bad("the subgradient baseline only runs in the traffic study")
            }
            _ => Ok(()),
        }
    }
}

fn default_list<T>(v: &mut Vec<T>, default: Vec<T>) {
    if v.is_empty() {
        *v = default;
    }
}

/// Guarantees a run must reach: `‖[h(û)]₊‖ ≤ violation` and
/// `−lower ≤ F(û) − F* ≤ upper`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Targets {
    pub violation: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Targets {
    /// IDG: `2ε/R`, `[−2ε, ε]`. IDFG: `6ε/R`, `[−6ε, 2ε]`.
    pub fn for_method(method: Method, eps_out: f64, r_d: f64) -> Self {
        let (v, lo, up) = match method {
            Method::Idfg => (6.0, 6.0, 2.0),
            _ => (2.0, 2.0, 1.0),
        };
        Self { violation: v * eps_out / r_d, lower: lo * eps_out, upper: up * eps_out }
    }

    pub fn subopt_met(&self, subopt: f64) -> bool {
        subopt >= -self.lower - TARGET_TOL && subopt <= self.upper + TARGET_TOL
    }

    pub fn violation_met(&self, violation: f64) -> bool {
        violation <= self.violation + TARGET_TOL
    }

    pub fn met(&self, subopt: f64, violation: f64) -> bool {
        self.subopt_met(subopt) && self.violation_met(violation)
    }
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

fn cpu_seconds(start: &ThreadTime) -> f64 {
    start.elapsed().as_secs_f64()
}

/// A random QP with its oracle solution and multiplier bounds.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub qp: CoupledQp,
    pub f_star: f64,
    pub lambda_norm: f64,
    pub l_d: f64,
    /// Slater bound at `u = 0`, `λ̃ = 0` with the exact `d(0)`.
    pub r_bar: f64,
}

impl QpInstance {
    pub fn random(n: usize, seed: u64) -> Result<Self> {
        Self::from_qp(gen_random_qp(n, seed)?, &DVector::zeros(n))
    }

    pub fn from_qp(qp: CoupledQp, slater: &DVector<f64>) -> Result<Self> {
        let reference = oracle::reference_solve(&qp, ORACLE_TOL)?;
        let l_d = model::constants(&qp)?.l_d_exact;
        let zero = DVector::zeros(qp.p());
        let d0 = oracle::exact_dual(&qp, &zero, ORACLE_TOL)?;
        let r_bar = model::slater_dual_bound(&qp, slater, &zero, d0)?;
        Ok(Self { f_star: reference.f_star, lambda_norm: reference.lambda_star.norm(), l_d, r_bar, qp })
    }

    /// `‖λ*‖`, floored so that the rules stay defined.
    pub fn lambda_radius(&self) -> f64 {
        self.lambda_norm.max(NORM_FLOOR)
    }
}

/// Outcome of a run stopped as soon as its targets hold.
#[derive(Debug, Clone)]
pub struct TargetRun {
    pub k_real: Option<usize>,
    pub subopt: f64,
    pub violation: f64,
    /// `û` at the stop, or after the last iteration.
    pub u_hat: DVector<f64>,
}

/// Runs `params` on `qp` and stops at the first `k` where
/// `stop(û, F(û) − F*, ‖[h(û)]₊‖)` holds.
pub fn run_until(
    qp: &CoupledQp,
    params: &OuterParams,
    f_star: f64,
    stop: impl Fn(&DVector<f64>, f64, f64) -> bool,
) -> Result<TargetRun> {
    let mut hit = None;
    let mut last = (f64::NAN, f64::NAN);
    let out = dual::solve_observed(qp, params, |view| {
        let subopt = model::objective(qp, view.u_hat).map_or(f64::NAN, |f| f - f_star);
        let violation = model::feasibility_violation(qp, view.u_hat).unwrap_or(f64::NAN);
        last = (subopt, violation);
        if stop(view.u_hat, subopt, violation) {
            hit = Some(view.k);
            Control::Stop
        } else {
            Control::Continue
        }
    })?;
    Ok(TargetRun { k_real: hit, subopt: last.0, violation: last.1, u_hat: out.u_hat })
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomQpRow {
    pub n: usize,
    pub seed: u64,
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    /// Budget of the run (the rule with `‖λ*‖`).
    pub k_out: usize,
    pub l_d: f64,
    pub r_bar: f64,
    pub lambda_norm: f64,
    pub k_bound: usize,
    pub k_samp: usize,
    pub k_real: Option<usize>,
    pub subopt: f64,
    pub violation: f64,
    /// `k_real ≤ k_samp ≤ k_bound`.
    pub ordered: bool,
    pub cpu_seconds: f64,
}

fn rule_count(method: Method, l_d: f64, r: f64, eps: f64) -> usize {
    match method {
        Method::Idfg => dual::idfg_iterations(l_d, r, eps).0,
        _ => dual::idg_iterations(l_d, r, eps),
    }
}

pub fn random_qp_rows(inst: &QpInstance, n: usize, seed: u64, method: Method, eps: f64) -> Result<RandomQpRow> {
    let start = ThreadTime::now();
    let r = inst.lambda_radius();
    let params = OuterParams::from_rule_with(method, eps, r, inst.l_d)?;
    let targets = Targets::for_method(method, eps, r);
    let run = run_until(&inst.qp, &params, inst.f_star, |_, s, v| targets.met(s, v))?;
    let k_bound = rule_count(method, inst.l_d, inst.r_bar, eps);
    let k_samp = params.k_out;
    Ok(RandomQpRow {
        n,
        seed,
        method,
        eps_out: eps,
        eps_in: params.eps_in,
        k_out: params.k_out,
        l_d: inst.l_d,
        r_bar: inst.r_bar,
        lambda_norm: inst.lambda_norm,
        k_bound,
        k_samp,
        k_real: run.k_real,
        subopt: run.subopt,
        violation: run.violation,
        ordered: run.k_real.is_some_and(|k| k <= k_samp) && k_samp <= k_bound,
        cpu_seconds: cpu_seconds(&start),
    })
}

pub fn run_random_qp_study(cfg: &ExperimentConfig) -> Result<Vec<RandomQpRow>> {
    let tasks: Vec<(usize, u64)> = cfg.sizes.iter().flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s))).collect();
    let nested = par_map(&tasks, |&(n, seed)| {
        let inst = QpInstance::random(n, seed)?;
        let mut rows = Vec::new();
        for &eps in &cfg.eps_out {
            for &method in &cfg.methods {
                rows.push(random_qp_rows(&inst, n, seed, method, eps)?);
            }
        }
        Ok(rows)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityRow {
    pub n: usize,
    pub seed: u64,
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    /// The row uses the selection rule's `ε_in` rather than a swept value.
    pub rule_eps_in: bool,
    pub k_out: usize,
    pub subopt: f64,
    pub violation: f64,
    pub subopt_met: bool,
    pub violation_met: bool,
    pub cpu_seconds: f64,
}

/// Full `k_out` runs at the rule's budget for the rule `ε_in` and each swept value.
pub fn sensitivity_rows(inst: &QpInstance, n: usize, seed: u64, method: Method, eps: f64, sweep: &[f64]) -> Result<Vec<SensitivityRow>> {
    let r = inst.lambda_radius();
    let base = OuterParams::from_rule_with(method, eps, r, inst.l_d)?;
    let targets = Targets::for_method(method, eps, r);
    let runs = std::iter::once((base.eps_in, true)).chain(sweep.iter().map(|&e| (e, false)));
    let mut rows = Vec::new();
    for (eps_in, rule) in runs {
        let start = ThreadTime::now();
        let params = base.clone().with_eps_in(eps_in);
        let out = dual::solve(&inst.qp, &params)?;
        let subopt = model::objective(&inst.qp, &out.u_hat)? - inst.f_star;
        let violation = model::feasibility_violation(&inst.qp, &out.u_hat)?;
        rows.push(SensitivityRow {
            n,
            seed,
            method,
            eps_out: eps,
            eps_in,
            rule_eps_in: rule,
            k_out: params.k_out,
            subopt,
            violation,
            subopt_met: targets.subopt_met(subopt),
            violation_met: targets.violation_met(violation),
            cpu_seconds: cpu_seconds(&start),
        });
    }
    Ok(rows)
}

pub fn run_sensitivity_study(cfg: &ExperimentConfig) -> Result<Vec<SensitivityRow>> {
    let tasks: Vec<(usize, u64)> = cfg.sizes.iter().flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s))).collect();
    let nested = par_map(&tasks, |&(n, seed)| {
        let inst = QpInstance::random(n, seed)?;
        let mut rows = Vec::new();
        for &eps in &cfg.eps_out {
            for &method in &cfg.methods {
                rows.extend(sensitivity_rows(&inst, n, seed, method, eps, &cfg.eps_in)?);
            }
        }
        Ok(rows)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrafficRow {
    pub junctions: usize,
    pub horizon: usize,
    pub seed: u64,
    pub instance: usize,
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    pub eps_c: f64,
    pub k_out: usize,
    pub k_real: Option<usize>,
    pub r_bar: f64,
    pub lambda_norm: f64,
    pub subopt: f64,
    /// `max_j (Gû + Ex + g)_j` on the untightened rows.
    pub max_constraint: f64,
    pub strictly_feasible: bool,
    /// Stopping rule met within `k_out`.
    pub success: bool,
    pub cpu_seconds: f64,
}

/// One MPC step at `x0`. IDG and IDFG solve the tightened problem with the
/// MPC rule; the baseline runs on the untightened problem with IDG's
/// inner accuracy. All stop once `û` is strictly feasible and within
/// `ε_out` of `F*`.
pub fn traffic_rows(
    c: &mpc::CondensedMpc,
    x0: &DVector<f64>,
    ids: (usize, u64, usize),
    cfg: &ExperimentConfig,
    eps_req: f64,
) -> Result<Vec<TrafficRow>> {
    let (junctions, seed, instance) = ids;
    let qp = c.instantiate(x0)?;
    let reference = oracle::reference_solve(&qp, ORACLE_TOL)?;
    let slater = mpc::find_slater(&qp, &[])?;
    let slack = model::min_slack(&qp, &slater)?;
    let r_bar = mpc::slater_bound_at_zero(&qp, &slater, SLATER_EPS)?;
    let l_d = model::constants(&qp)?.l_d_exact;
    let stop = |u: &DVector<f64>, eps: f64, subopt: f64| subopt <= eps && model::min_slack(&qp, u).is_ok_and(|s| s > 0.0);
    let clamp = |method: Method| -> Result<f64> { Ok(eps_req.min(mpc::admissibility_cap(method, qp.p(), r_bar, slack)?)) };

    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let start = ThreadTime::now();
        let (eps, params, eps_c, run_qp) = match method {
            Method::Subgrad => {
                let eps = clamp(Method::Idg)?;
                let eps_in = mpc::mpc_params(Method::Idg, eps, l_d, r_bar, qp.p(), slack)?.eps_in;
                let budget = cfg.subgrad_iters.max(1) - 1;
                (eps, OuterParams::new(Method::Subgrad, eps, eps_in, budget, l_d), 0.0, qp.clone())
            }
            _ => {
                let eps = clamp(method)?;
                let plan = mpc::plan_mpc_step(c, x0, method, eps, &slater, r_bar)?;
                (eps, plan.outer, plan.params.eps_c, plan.tightened)
            }
        };
        // tightening leaves the objective unchanged, so F* of the original problem applies
        let run = run_until(&run_qp, &params, reference.f_star, |u, subopt, _| stop(u, eps, subopt))?;
        let max_constraint = -model::min_slack(&qp, &run.u_hat)?;
        rows.push(TrafficRow {
            junctions,
            horizon: c.horizon,
            seed,
            instance,
            method,
            eps_out: eps,
            eps_in: params.eps_in,
            eps_c,
            k_out: params.k_out,
            k_real: run.k_real,
            r_bar,
            lambda_norm: reference.lambda_star.norm(),
            subopt: run.subopt,
            max_constraint,
            strictly_feasible: max_constraint < 0.0,
            success: run.k_real.is_some(),
            cpu_seconds: cpu_seconds(&start),
        });
    }
    Ok(rows)
}

pub fn run_traffic_study(cfg: &ExperimentConfig) -> Result<Vec<TrafficRow>> {
    let params = TrafficParams::default();
    let mut tasks = Vec::new();
    let mut systems = Vec::new();
    for &m in &cfg.sizes {
        for &seed in &cfg.seeds {
            let (sys, states) = gen_ring_traffic(m, cfg.horizon, seed, cfg.instances, &params)?;
            let sys_index = systems.len();
            systems.push(mpc::condense(&sys, cfg.horizon)?);
            tasks.extend(states.into_iter().enumerate().map(|(i, x0)| (sys_index, m, seed, i, x0)));
        }
    }
    let mut rows = Vec::new();
    for &eps in &cfg.eps_out {
        let nested = par_map(&tasks, |(s, m, seed, i, x0)| traffic_rows(&systems[*s], x0, (*m, *seed, *i), cfg, eps))?;
        rows.extend(nested.into_iter().flatten());
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureRow {
    pub fixture: String,
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    pub k_out: usize,
    pub seed: Option<u64>,
    /// `F* − d(λ̂)`; empty for closed-loop rows.
    pub dual_gap: Option<f64>,
    /// Largest coupling violation; for closed-loop rows the largest
    /// `max_j (Gû + Ex + g)_j` over the steps.
    pub violation: f64,
    pub subopt: Option<f64>,
    pub passed: bool,
    pub cpu_seconds: f64,
}

fn fixture_qp_row(method: Method, eps: f64) -> Result<FixtureRow> {
    let start = ThreadTime::now();
    let qp = model::fixtures::two_var_qp();
    let inst = QpInstance::from_qp(qp, &DVector::from_element(2, 1.0))?;
    let r = inst.lambda_radius();
    let params = OuterParams::from_rule_with(method, eps, r, inst.l_d)?;
    let out = dual::solve(&inst.qp, &params)?;
    let dual_gap = inst.f_star - oracle::exact_dual(&inst.qp, &out.lambda_hat, ORACLE_TOL)?;
    let subopt = model::objective(&inst.qp, &out.u_hat)? - inst.f_star;
    let violation = model::feasibility_violation(&inst.qp, &out.u_hat)?;
    let gap_factor = if method == Method::Idfg { 3.0 } else { 1.25 };
    let passed = dual_gap <= gap_factor * eps + TARGET_TOL && Targets::for_method(method, eps, r).met(subopt, violation);
    Ok(FixtureRow {
        fixture: "two_var_qp".into(),
        method,
        eps_out: eps,
        eps_in: params.eps_in,
        k_out: params.k_out,
        seed: None,
        dual_gap: Some(dual_gap),
        violation,
        subopt: Some(subopt),
        passed,
        cpu_seconds: cpu_seconds(&start),
    })
}

/// Closed loop on the scalar MPC fixture; passes when every step is
/// strictly feasible and every decrease check holds.
fn fixture_mpc_row(method: Method, eps: f64, steps: usize) -> Result<FixtureRow> {
    let start = ThreadTime::now();
    let sys = mpc::fixtures::scalar_mpc();
    let horizon = mpc::fixtures::SCALAR_MPC_HORIZON;
    let c = mpc::condense(&sys, horizon)?;
    let x0 = DVector::from_element(1, mpc::fixtures::SCALAR_MPC_X0);
    let slater = mpc::fixtures::feedback_rollout(&c, &x0)
        .ok_or_else(|| Error::Infeasible("fixture feedback rollout leaves the constraints".into()))?;
    let trace = mpc::closed_loop(&sys, horizon, &x0, &slater, &mpc::ClosedLoopConfig::new(method, steps, eps))?;
    let first = &trace.records[0];
    let violation = trace.records.iter().map(|r| -r.slack_min).fold(f64::NEG_INFINITY, f64::max);
    let passed = trace.records.iter().all(|r| r.strictly_feasible(&c.bounds) && r.lyapunov_ok != Some(false));
    Ok(FixtureRow {
        fixture: "scalar_mpc".into(),
        method,
        eps_out: first.eps_out,
        eps_in: first.eps_in,
        k_out: first.k_out,
        seed: None,
        dual_gap: None,
        violation,
        subopt: None,
        passed,
        cpu_seconds: cpu_seconds(&start),
    })
}

/// Closed-loop length of the fixture suite.
pub const FIXTURE_STEPS: usize = 20;

pub fn run_fixture_suite(cfg: &ExperimentConfig) -> Result<Vec<FixtureRow>> {
    let mut rows = Vec::new();
    for &eps in &cfg.eps_out {
        for &method in &cfg.methods {
            rows.push(fixture_qp_row(method, eps)?);
            rows.push(fixture_mpc_row(method, eps, FIXTURE_STEPS)?);
        }
    }
    Ok(rows)
}

/// Rows of one study.
#[derive(Debug, Clone)]
pub enum StudyTable {
    RandomQp(Vec<RandomQpRow>),
    InnerSensitivity(Vec<SensitivityRow>),
    TrafficMpc(Vec<TrafficRow>),
    FixtureSuite(Vec<FixtureRow>),
}

impl StudyTable {
    pub fn len(&self) -> usize {
        match self {
            StudyTable::RandomQp(r) => r.len(),
            StudyTable::InnerSensitivity(r) => r.len(),
            StudyTable::TrafficMpc(r) => r.len(),
            StudyTable::FixtureSuite(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        fn write<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
        match self {
            StudyTable::RandomQp(r) => write(out, r),
            StudyTable::InnerSensitivity(r) => write(out, r),
            StudyTable::TrafficMpc(r) => write(out, r),
            StudyTable::FixtureSuite(r) => write(out, r),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Resolves, validates and runs `cfg`.
pub fn run_study(cfg: &ExperimentConfig) -> Result<StudyTable> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(match cfg.experiment {
        Experiment::RandomQp => StudyTable::RandomQp(run_random_qp_study(&cfg)?),
        Experiment::InnerSensitivity => StudyTable::InnerSensitivity(run_sensitivity_study(&cfg)?),
        Experiment::TrafficMpc => StudyTable::TrafficMpc(run_traffic_study(&cfg)?),
        Experiment::FixtureSuite => StudyTable::FixtureSuite(run_fixture_suite(&cfg)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_per_experiment() {
        let c = ExperimentConfig::desk(Experiment::TrafficMpc);
        assert_eq!(c.sizes, vec![4, 6]);
        assert_eq!(c.instances, 10);
        assert_eq!(c.subgrad_iters, 20_000);
        assert_eq!(c.eps_out, vec![1e-2]);
        let full = ExperimentConfig { full: true, ..ExperimentConfig::blank(Experiment::TrafficMpc) }.resolved();
        assert_eq!(full.sizes, vec![6, 12, 18]);
        assert_eq!(full.horizon, 10);
        let q = ExperimentConfig::desk(Experiment::RandomQp);
        assert_eq!(q.sizes, vec![10, 30, 100]);
        assert_eq!(q.seeds.len(), 10);
        assert!(q.validate().is_ok());
    }

    #[test]
    fn config_round_trips_and_fills_blanks() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"experiment":"inner_sensitivity","seeds":[3]}"#).unwrap();
        let r = c.resolved();
        assert_eq!(r.seeds, vec![3]);
        assert_eq!(r.sizes, vec![10]);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!("traffic-mpc".parse::<Experiment>().unwrap(), Experiment::TrafficMpc);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ExperimentConfig::desk(Experiment::TrafficMpc);
        c.sizes = vec![5];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk(Experiment::RandomQp);
        c.methods.push(Method::Subgrad);
        assert!(c.validate().is_err());
        c = ExperimentConfig::desk(Experiment::RandomQp);
        c.eps_out = vec![0.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn targets_follow_the_method() {
        let t = Targets::for_method(Method::Idg, 0.01, 0.5);
        assert_eq!((t.violation, t.lower, t.upper), (0.04, 0.02, 0.01));
        let t = Targets::for_method(Method::Idfg, 0.01, 0.5);
        assert_eq!((t.violation, t.lower, t.upper), (0.12, 0.06, 0.02));
        assert!(t.met(0.02, 0.12));
        assert!(!t.met(0.021, 0.0));
        assert!(!t.met(-0.061, 0.0));
    }

    #[test]
    fn random_qp_rows_are_ordered() {
        let inst = QpInstance::random(6, 2).unwrap();
        assert!(inst.r_bar >= inst.lambda_norm);
        for m in [Method::Idg, Method::Idfg] {
            let row = random_qp_rows(&inst, 6, 2, m, 1e-2).unwrap();
            assert!(row.ordered, "{row:?}");
        }
    }

    #[test]
    fn fixture_suite_passes() {
        let rows = run_study(&ExperimentConfig::blank(Experiment::FixtureSuite)).unwrap();
        let StudyTable::FixtureSuite(rows) = rows else { panic!() };
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.passed), "{rows:?}");
        let mut buf = Vec::new();
        StudyTable::FixtureSuite(rows).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("fixture,method,eps_out,eps_in,k_out,seed,"));
    }
}
