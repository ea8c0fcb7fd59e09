//! Parallel coordinate descent for the inner problem `min_{u ∈ box} 𝓛(u, λ)`.
//!
//! One step reads a snapshot `u`, and for every block `i` computes
//! `v_i = clamp(u_i − ∇_i𝓛(u)/L_i)` and `u_i⁺ = v_i/M + (M−1)/M·u_i`.
//! Blocks write disjoint coordinates, so the parallel and sequential
//! schedules produce bit-identical iterates.

use nalgebra::DVector;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{self, BoxSet, CoupledQp, PartialLagrangian, ProblemConstants, BOX_TOL};

/// Iteration cap used when the box diameter is infinite and only the
/// certified gap can stop the loop.
pub const CERTIFIED_STOP_CAP: usize = 5_000_000;

/// Below this many multiply-adds per gradient the parallel schedule
/// falls back to the sequential loop.
pub const PARALLEL_MIN_WORK: usize = 1 << 15;
#[cfg(feature = "parallel")]
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon over coordinates; identical to `Sequential` without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    IterationBudget,
    GapCertified,
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub u_bar: DVector<f64>,
    /// `𝓛(ū, λ)`.
    pub value: f64,
    pub iterations: usize,
    /// Certified upper bound on `𝓛(ū, λ) − min_box 𝓛(·, λ)`.
    pub gap_bound: f64,
    pub stop_reason: StopReason,
    /// Whether `gap_bound ≤ ε_in/3` holds at return.
    pub certified: bool,
    /// `𝓛(u^l, λ)` for `l = 0..=iterations`, filled only by recording solves.
    pub values: Vec<f64>,
}

/// `l_in = ⌊(M·L_max/σ_F)·ln(3·L_max·D²/ε_in)⌋`, at least 1.
pub fn inner_iteration_count(constants: &ProblemConstants, eps_in: f64) -> Result<usize> {
    if !(eps_in > 0.0) {
        return Err(Error::InvalidParameter(format!("eps_in must be positive, got {eps_in}")));
    }
    if !constants.diam_finite {
        return Err(Error::InfiniteDiameter);
    }
    let m = constants.block_count() as f64;
    let ratio = m * constants.l_max / constants.sigma_f;
    let log = (3.0 * constants.l_max * constants.diameter.powi(2) / eps_in).ln();
    Ok(((ratio * log).floor().max(1.0)) as usize)
}

/// Reusable PCD solver for one problem; caches the block Lipschitz constants.
#[derive(Debug, Clone)]
pub struct PcdSolver<'a> {
    qp: &'a CoupledQp,
    constants: ProblemConstants,
    /// `1/L_i` expanded per coordinate.
    inv_l: DVector<f64>,
    execution: Execution,
}

impl<'a> PcdSolver<'a> {
    pub fn new(qp: &'a CoupledQp) -> Result<Self> {
        Ok(Self::with_constants(qp, model::constants(qp)?))
    }

    pub fn with_constants(qp: &'a CoupledQp, constants: ProblemConstants) -> Self {
        let mut inv_l = DVector::zeros(qp.n());
        for i in 0..qp.block_count() {
            for j in qp.partition.range(i) {
                inv_l[j] = 1.0 / constants.l_blocks[i];
            }
        }
        Self { qp, constants, inv_l, execution: Execution::default() }
    }

    pub fn execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    pub fn qp(&self) -> &CoupledQp {
        self.qp
    }

    /// `∇𝓛(u, λ) = Hu + c` with `c = q + Gᵀλ` precomputed.
    pub fn gradient(&self, c: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        match self.execution {
            #[cfg(feature = "parallel")]
            Execution::Parallel if self.qp.n() * self.qp.n() >= PARALLEL_MIN_WORK => {
                out.as_mut_slice().par_chunks_mut(CHUNK).enumerate().for_each(|(k, chunk)| {
                    for (off, slot) in chunk.iter_mut().enumerate() {
                        *slot = self.gradient_entry(c, u, k * CHUNK + off);
                    }
                });
            }
            _ => {
                for (a, slot) in out.iter_mut().enumerate() {
                    *slot = self.gradient_entry(c, u, a);
                }
            }
        }
        out
    }

    /// One coordinate of `Hu + c`, using column `a` of the symmetric `H`
    /// restricted to the neighbor blocks when a sparsity descriptor exists.
    #[inline]
    fn gradient_entry(&self, c: &DVector<f64>, u: &DVector<f64>, a: usize) -> f64 {
        let h = &self.qp.hessian;
        let col = h.column(a);
        let dot = match &self.qp.sparsity {
            Some(sp) => {
                let i = self.qp.partition.block_of(a);
                sp.h_neighbors[i]
                    .iter()
                    .map(|&j| {
                        let r = self.qp.partition.range(j);
                        col.rows_range(r.clone()).dot(&u.rows_range(r))
                    })
                    .sum::<f64>()
            }
            None => col.dot(u),
        };
        c[a] + dot
    }

    /// Jacobi-snapshot update from a precomputed gradient at `u`.
    pub fn step_from_gradient(&self, u: &DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
        let m = self.qp.block_count() as f64;
        let keep = (m - 1.0) / m;
        let bounds = &self.qp.bounds;
        DVector::from_iterator(
            u.len(),
            (0..u.len()).map(|j| {
                let v = bounds.clamp(j, u[j] - grad[j] * self.inv_l[j]);
                v / m + keep * u[j]
            }),
        )
    }

    pub fn step(&self, lambda: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_in_box(&self.qp.bounds, u)?;
        let lag = PartialLagrangian::new(self.qp, lambda)?;
        Ok(self.step_from_gradient(u, &self.gradient(&lag.linear, u)))
    }

    /// Runs PCD until `budget` steps are spent or the certified gap is at
    /// most `ε_in/3`. The default budget is `l_in`, or [`CERTIFIED_STOP_CAP`]
    /// for an unbounded box.
    pub fn solve(
        &self,
        lambda: &DVector<f64>,
        u0: &DVector<f64>,
        eps_in: f64,
        budget: Option<usize>,
    ) -> Result<InnerSolution> {
        self.run(lambda, u0, eps_in, budget, false)
    }

    /// Like [`PcdSolver::solve`] but keeps `𝓛(u^l, λ)` for every iterate.
    pub fn solve_recorded(
        &self,
        lambda: &DVector<f64>,
        u0: &DVector<f64>,
        eps_in: f64,
        budget: Option<usize>,
    ) -> Result<InnerSolution> {
        self.run(lambda, u0, eps_in, budget, true)
    }

    pub fn default_budget(&self, eps_in: f64) -> Result<usize> {
        match inner_iteration_count(&self.constants, eps_in) {
            Err(Error::InfiniteDiameter) => Ok(CERTIFIED_STOP_CAP),
            other => other,
        }
    }

    fn run(
        &self,
        lambda: &DVector<f64>,
        u0: &DVector<f64>,
        eps_in: f64,
        budget: Option<usize>,
        record: bool,
    ) -> Result<InnerSolution> {
        if !(eps_in > 0.0) {
            return Err(Error::InvalidParameter(format!("eps_in must be positive, got {eps_in}")));
        }
        check_in_box(&self.qp.bounds, u0)?;
        let lag = PartialLagrangian::new(self.qp, lambda)?;
        let budget = match budget {
            Some(b) => b,
            None => self.default_budget(eps_in)?,
        };
        let target = eps_in / 3.0;
        let sigma = self.constants.sigma_f;
        let mut values = Vec::new();
        let mut u = u0.clone();
        let mut l = 0;
        loop {
            let grad = self.gradient(&lag.linear, &u);
            let gap = model::strong_convexity_gap(&u, &grad, &self.qp.bounds, sigma);
            // ½uᵀHu + cᵀu = ½uᵀ(∇ + c)
            let value = 0.5 * u.dot(&(&grad + &lag.linear)) + lag.constant;
            if record {
                values.push(value);
            }
            let reason = if l >= budget {
                Some(StopReason::IterationBudget)
            } else if gap <= target {
                Some(StopReason::GapCertified)
            } else {
                None
            };
            if let Some(stop_reason) = reason {
                return Ok(InnerSolution {
                    u_bar: u,
                    value,
                    iterations: l,
                    gap_bound: gap,
                    stop_reason,
                    certified: gap <= target,
                    values,
                });
            }
            u = self.step_from_gradient(&u, &grad);
            l += 1;
        }
    }
}

fn check_in_box(bounds: &BoxSet, u: &DVector<f64>) -> Result<()> {
    if u.len() != bounds.dim() {
        return Err(Error::Dimension(format!("u has {} entries, expected {}", u.len(), bounds.dim())));
    }
    match bounds.violation(u, BOX_TOL) {
        Some((index, value)) => Err(Error::OutsideBox { index, value }),
        None => Ok(()),
    }
}

/// One PCD step with the default schedule.
pub fn pcd_step(qp: &CoupledQp, lambda: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    PcdSolver::new(qp)?.step(lambda, u)
}

pub fn pcd_step_sequential(qp: &CoupledQp, lambda: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    PcdSolver::new(qp)?.execution(Execution::Sequential).step(lambda, u)
}

#[cfg(feature = "parallel")]
pub fn pcd_step_parallel(qp: &CoupledQp, lambda: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    PcdSolver::new(qp)?.execution(Execution::Parallel).step(lambda, u)
}

/// Solves the inner problem at `λ` from `u0`; see [`PcdSolver::solve`].
pub fn solve_inner(
    qp: &CoupledQp,
    lambda: &DVector<f64>,
    u0: &DVector<f64>,
    eps_in: f64,
    budget: Option<usize>,
) -> Result<InnerSolution> {
    PcdSolver::new(qp)?.solve(lambda, u0, eps_in, budget)
}
