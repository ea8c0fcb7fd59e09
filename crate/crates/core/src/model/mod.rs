//! Coupled QP problem class and its problem constants.
//!
//! Every solver in the crate consumes a [`CoupledQp`]:
//!
//! ```text
//! minimize    F(u) = ½ uᵀHu + qᵀu
//! subject to  h(u) = Gu + g ≤ 0
//!             lb ≤ u ≤ ub
//! ```
//!
//! with `H` symmetric positive definite and the box split into `M`
//! contiguous coordinate blocks. The coupling rows are dualized; the box is
//! kept as the simple set of the inner problem.

mod io;

pub use io::{ProblemJson, SparsityJson};
pub(crate) use io::matrix_to_rows;

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on `λ_min(H)` below which `H` is reported as not positive definite.
pub const PD_TOL: f64 = 1e-10;
/// Membership tolerance used when checking that a point lies in the box.
pub const BOX_TOL: f64 = 1e-12;

/// Contiguous partition of the coordinates into `M` blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    dim: usize,
}

impl BlockPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidProblem("partition needs at least one block".into()));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidProblem(format!("block {i} has size zero")));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        Ok(Self { sizes, offsets, dim: acc })
    }

    /// `n` blocks of size one.
    pub fn singletons(n: usize) -> Result<Self> {
        Self::new(vec![1; n])
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, i: usize) -> usize {
        self.sizes[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Coordinate range of block `i` (the selector `E_i`).
    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i] + self.sizes[i]
    }

    /// Block that owns coordinate `j`.
    pub fn block_of(&self, j: usize) -> usize {
        match self.offsets.binary_search(&j) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }
}

/// Box `lb ≤ u ≤ ub`; entries may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl BoxSet {
    pub fn new(lb: DVector<f64>, ub: DVector<f64>) -> Result<Self> {
        if lb.len() != ub.len() {
            return Err(Error::Dimension(format!("lb has {} entries, ub has {}", lb.len(), ub.len())));
        }
        Ok(Self { lb, ub })
    }

    pub fn symmetric(n: usize, radius: f64) -> Self {
        Self { lb: DVector::from_element(n, -radius), ub: DVector::from_element(n, radius) }
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().enumerate().map(|(j, &x)| self.clamp(j, x)))
    }

    #[inline]
    pub fn clamp(&self, j: usize, x: f64) -> f64 {
        x.max(self.lb[j]).min(self.ub[j])
    }

    /// First coordinate that leaves the box by more than `tol`, if any.
    pub fn violation(&self, u: &DVector<f64>, tol: f64) -> Option<(usize, f64)> {
        u.iter()
            .enumerate()
            .find(|(j, &x)| x < self.lb[*j] - tol || x > self.ub[*j] + tol)
            .map(|(j, &x)| (j, x))
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.len() == self.dim() && self.violation(u, tol).is_none()
    }

    /// `‖ub − lb‖`, infinite when any bound is.
    pub fn diameter(&self) -> f64 {
        (&self.ub - &self.lb).norm()
    }

    pub fn is_bounded(&self) -> bool {
        self.lb.iter().chain(self.ub.iter()).all(|x| x.is_finite())
    }

    /// Box-projected zero vector; the default cold start of every solver.
    pub fn projected_origin(&self) -> DVector<f64> {
        self.project(&DVector::zeros(self.dim()))
    }
}

/// Block-sparsity descriptor.
///
/// `h_neighbors[i]` lists the column blocks `j` with `H_ij ≠ 0`;
/// `g_row_blocks[j]` lists the row blocks `r` with `G_rj ≠ 0`. Row blocks
/// partition the `p` coupling rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparsity {
    pub row_blocks: BlockPartition,
    pub h_neighbors: Vec<Vec<usize>>,
    pub g_row_blocks: Vec<Vec<usize>>,
}

impl Sparsity {
    /// Builds the adjacency lists from `(i, j)` pairs for `H` and
    /// `(row block, column block)` pairs for `G`.
    pub fn from_pairs(
        blocks: usize,
        row_blocks: BlockPartition,
        h_pairs: &[(usize, usize)],
        g_pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let mut h_neighbors = vec![Vec::new(); blocks];
        for &(i, j) in h_pairs {
            if i >= blocks || j >= blocks {
                return Err(Error::InvalidProblem(format!("H block pair ({i}, {j}) out of range")));
            }
            h_neighbors[i].push(j);
        }
        let mut g_row_blocks = vec![Vec::new(); blocks];
        for &(r, j) in g_pairs {
            if r >= row_blocks.count() || j >= blocks {
                return Err(Error::InvalidProblem(format!("G block pair ({r}, {j}) out of range")));
            }
            g_row_blocks[j].push(r);
        }
        for list in h_neighbors.iter_mut().chain(g_row_blocks.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { row_blocks, h_neighbors, g_row_blocks })
    }

    pub fn h_pairs(&self) -> Vec<(usize, usize)> {
        self.h_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn g_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = self
            .g_row_blocks
            .iter()
            .enumerate()
            .flat_map(|(j, rs)| rs.iter().map(move |&r| (r, j)))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Strongly convex QP with box local constraints and affine coupling rows.
#[derive(Debug, Clone)]
pub struct CoupledQp {
    /// `H`, symmetric positive definite (n × n).
    pub hessian: DMatrix<f64>,
    /// `q` (in MPC, `Wx + w`).
    pub linear: DVector<f64>,
    /// `G` (p × n).
    pub coupling: DMatrix<f64>,
    /// `g` (in MPC, `Ex + g`, plus `ε_c·e` once tightened).
    pub offset: DVector<f64>,
    pub bounds: BoxSet,
    pub partition: BlockPartition,
    pub sparsity: Option<Sparsity>,
}

impl CoupledQp {
    /// Checks dimensions only; use [`validate_problem`] for the full report.
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        coupling: DMatrix<f64>,
        offset: DVector<f64>,
        bounds: BoxSet,
        partition: BlockPartition,
    ) -> Result<Self> {
        let qp = Self { hessian, linear, coupling, offset, bounds, partition, sparsity: None };
        let dims = qp.dimension_errors();
        if let Some(first) = dims.into_iter().next() {
            return Err(Error::Dimension(first));
        }
        Ok(qp)
    }

    pub fn with_sparsity(mut self, sparsity: Sparsity) -> Result<Self> {
        if sparsity.h_neighbors.len() != self.partition.count()
            || sparsity.row_blocks.dim() != self.p()
        {
            return Err(Error::Dimension("sparsity descriptor does not match the problem".into()));
        }
        self.sparsity = Some(sparsity);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.hessian.ncols()
    }

    pub fn p(&self) -> usize {
        self.coupling.nrows()
    }

    pub fn block_count(&self) -> usize {
        self.partition.count()
    }

    fn dimension_errors(&self) -> Vec<String> {
        let n = self.hessian.ncols();
        let mut out = Vec::new();
        if self.hessian.nrows() != n {
            out.push(format!("H is {}x{}, not square", self.hessian.nrows(), n));
        }
        if self.linear.len() != n {
            out.push(format!("q has {} entries, expected {n}", self.linear.len()));
        }
        if self.coupling.ncols() != n {
            out.push(format!("G has {} columns, expected {n}", self.coupling.ncols()));
        }
        if self.offset.len() != self.coupling.nrows() {
            out.push(format!("g has {} entries, G has {} rows", self.offset.len(), self.coupling.nrows()));
        }
        if self.bounds.lb.len() != n || self.bounds.ub.len() != n {
            out.push(format!("box has dimension {}, expected {n}", self.bounds.lb.len()));
        }
        if self.partition.dim() != n {
            out.push(format!("blocks sum to {}, expected {n}", self.partition.dim()));
        }
        out
    }

    /// Copy with every coupling row shifted by `shift` (`g ← g + shift·e`).
    pub fn shifted(&self, shift: f64) -> Self {
        let mut out = self.clone();
        out.offset.add_scalar_mut(shift);
        out
    }
}

/// One entry of a [`ValidationReport`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dimension(String),
    NonFinite(&'static str),
    NotSymmetric { max_asymmetry: f64 },
    NotPositiveDefinite { lambda_min: f64 },
    InvertedBounds { index: usize },
    NoCouplingRows,
    /// `0·u + g_j ≤ 0` with `g_j > 0`: no point satisfies the row.
    InfeasibleZeroRow { row: usize },
    RedundantZeroRow { row: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension(s) => write!(f, "dimension mismatch: {s}"),
            Violation::NonFinite(what) => write!(f, "{what} has non-finite entries"),
            Violation::NotSymmetric { max_asymmetry } => {
                write!(f, "H not symmetric (max |H - Hᵀ| = {max_asymmetry:e})")
            }
            Violation::NotPositiveDefinite { lambda_min } => {
                write!(f, "H not positive definite (λ_min = {lambda_min:e})")
            }
            Violation::InvertedBounds { index } => write!(f, "lb > ub at coordinate {index}"),
            Violation::NoCouplingRows => write!(f, "no coupling rows (p = 0)"),
            Violation::InfeasibleZeroRow { row } => write!(f, "infeasible zero row {row}"),
            Violation::RedundantZeroRow { row } => write!(f, "redundant zero row {row}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            let msg: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidProblem(msg.join("; ")))
        }
    }
}

/// Lists every violated precondition; an empty report means the problem is valid.
pub fn validate_problem(qp: &CoupledQp) -> ValidationReport {
    let mut violations: Vec<Violation> =
        qp.dimension_errors().into_iter().map(Violation::Dimension).collect();
    if !violations.is_empty() {
        return ValidationReport { violations };
    }
    if qp.hessian.iter().any(|x| !x.is_finite()) {
        violations.push(Violation::NonFinite("H"));
    }
    if qp.linear.iter().any(|x| !x.is_finite()) {
        violations.push(Violation::NonFinite("q"));
    }
    if qp.coupling.iter().any(|x| !x.is_finite()) {
        violations.push(Violation::NonFinite("G"));
    }
    if qp.offset.iter().any(|x| !x.is_finite()) {
        violations.push(Violation::NonFinite("g"));
    }
    if !violations.is_empty() {
        return ValidationReport { violations };
    }

    let scale = qp.hessian.amax().max(1.0);
    let asym = (&qp.hessian - qp.hessian.transpose()).amax();
    if asym > 1e-10 * scale {
        violations.push(Violation::NotSymmetric { max_asymmetry: asym });
    } else {
        let lmin = linalg::lambda_min(&linalg::symmetrize(&qp.hessian));
        if lmin <= PD_TOL {
            violations.push(Violation::NotPositiveDefinite { lambda_min: lmin });
        }
    }
    for j in 0..qp.n() {
        let (lo, hi) = (qp.bounds.lb[j], qp.bounds.ub[j]);
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            violations.push(Violation::InvertedBounds { index: j });
        }
    }
    if qp.p() == 0 {
        violations.push(Violation::NoCouplingRows);
    }
    for r in 0..qp.p() {
        if qp.coupling.row(r).iter().all(|&x| x == 0.0) {
            if qp.offset[r] > 0.0 {
                violations.push(Violation::InfeasibleZeroRow { row: r });
            } else {
                violations.push(Violation::RedundantZeroRow { row: r });
            }
        }
    }
    ValidationReport { violations }
}

fn check_len(v: &DVector<f64>, expected: usize, what: &str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension(format!("{what} has {} entries, expected {expected}", v.len())));
    }
    Ok(())
}

pub(crate) fn check_multiplier(lambda: &DVector<f64>, p: usize) -> Result<()> {
    check_len(lambda, p, "lambda")?;
    if let Some((index, &value)) = lambda.iter().enumerate().find(|(_, &x)| x < 0.0 || x.is_nan()) {
        return Err(Error::NegativeMultiplier { index, value });
    }
    Ok(())
}

/// `F(u) = ½ uᵀHu + qᵀu`.
pub fn objective(qp: &CoupledQp, u: &DVector<f64>) -> Result<f64> {
    check_len(u, qp.n(), "u")?;
    Ok(quad_value(&qp.hessian, &qp.linear, u))
}

#[inline]
pub(crate) fn quad_value(h: &DMatrix<f64>, q: &DVector<f64>, u: &DVector<f64>) -> f64 {
    0.5 * u.dot(&(h * u)) + q.dot(u)
}

/// `h(u) = Gu + g`.
pub fn constraints(qp: &CoupledQp, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(u, qp.n(), "u")?;
    Ok(&qp.coupling * u + &qp.offset)
}

/// `‖[h(u)]₊‖`.
pub fn feasibility_violation(qp: &CoupledQp, u: &DVector<f64>) -> Result<f64> {
    Ok(linalg::positive_part_norm(&constraints(qp, u)?))
}

/// `min_j −h_j(u)`; positive exactly when `u` is strictly feasible for the rows.
pub fn min_slack(qp: &CoupledQp, u: &DVector<f64>) -> Result<f64> {
    Ok(-linalg::max_entry(&constraints(qp, u)?))
}

/// Partial Lagrangian `F(u) + ⟨λ, h(u)⟩`.
pub fn lagrangian(qp: &CoupledQp, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
    check_multiplier(lambda, qp.p())?;
    Ok(objective(qp, u)? + lambda.dot(&constraints(qp, u)?))
}

/// `Hu + q + Gᵀλ`.
pub fn lagrangian_gradient(qp: &CoupledQp, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(u, qp.n(), "u")?;
    check_multiplier(lambda, qp.p())?;
    Ok(&qp.hessian * u + &qp.linear + qp.coupling.tr_mul(lambda))
}

/// Data block read while assembling one block gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockAccess {
    /// `H_ij` and `u_j` for column block `j`.
    Hessian(usize),
    /// Multiplier rows of row block `r` (dense problems report row indices).
    Multiplier(usize),
}

/// `∇_i 𝓛(u, λ)`, the gradient restricted to block `i`.
pub fn lagrangian_block_gradient(
    qp: &CoupledQp,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
    i: usize,
) -> Result<DVector<f64>> {
    lagrangian_block_gradient_traced(qp, u, lambda, i, |_| {})
}

/// Same as [`lagrangian_block_gradient`], reporting every block it reads.
///
/// With a sparsity descriptor only the neighbor blocks of `i` are touched.
pub fn lagrangian_block_gradient_traced(
    qp: &CoupledQp,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
    i: usize,
    mut visit: impl FnMut(BlockAccess),
) -> Result<DVector<f64>> {
    let m = qp.block_count();
    if i >= m {
        return Err(Error::BlockIndex { index: i, count: m });
    }
    check_len(u, qp.n(), "u")?;
    check_multiplier(lambda, qp.p())?;
    let ri = qp.partition.range(i);
    let mut grad = qp.linear.rows_range(ri.clone()).into_owned();
    match &qp.sparsity {
        Some(sp) => {
            for &j in &sp.h_neighbors[i] {
                visit(BlockAccess::Hessian(j));
                let rj = qp.partition.range(j);
                grad += qp.hessian.view((ri.start, rj.start), (ri.len(), rj.len()))
                    * u.rows_range(rj);
            }
            for &r in &sp.g_row_blocks[i] {
                visit(BlockAccess::Multiplier(r));
                let rr = sp.row_blocks.range(r);
                grad += qp.coupling.view((rr.start, ri.start), (rr.len(), ri.len())).tr_mul(
                    &lambda.rows_range(rr),
                );
            }
        }
        None => {
            for j in 0..m {
                visit(BlockAccess::Hessian(j));
            }
            for r in 0..qp.p() {
                visit(BlockAccess::Multiplier(r));
            }
            grad += qp.hessian.rows_range(ri.clone()) * u;
            grad += qp.coupling.columns_range(ri).tr_mul(lambda);
        }
    }
    Ok(grad)
}

/// Constants consumed by the solvers and certificates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    /// `σ_F = λ_min(H)`.
    pub sigma_f: f64,
    /// `λ_max(H)`, the global Lipschitz constant of `∇𝓛(·, λ)`.
    pub lambda_max_h: f64,
    /// `‖G‖² / σ_F`.
    pub l_d_exact: f64,
    /// `‖G‖_F² / σ_F`, an upper bound computable block by block.
    pub l_d_frobenius: f64,
    /// `L_i = λ_max(H_ii)`.
    pub l_blocks: Vec<f64>,
    pub l_max: f64,
    /// `σ_F / L_max`, strong convexity w.r.t. `‖u‖₁² = Σ L_i‖u_i‖²`.
    pub sigma_1: f64,
    pub diameter: f64,
    pub diam_finite: bool,
}

impl ProblemConstants {
    pub fn block_count(&self) -> usize {
        self.l_blocks.len()
    }
}

pub fn constants(qp: &CoupledQp) -> Result<ProblemConstants> {
    let (sigma_f, lambda_max_h) = linalg::sym_eig_extremes(&linalg::symmetrize(&qp.hessian));
    if sigma_f <= PD_TOL {
        return Err(Error::InvalidProblem(format!("H not positive definite (λ_min = {sigma_f:e})")));
    }
    let l_blocks: Vec<f64> = (0..qp.block_count())
        .map(|i| {
            let r = qp.partition.range(i);
            let block = qp.hessian.view((r.start, r.start), (r.len(), r.len())).into_owned();
            linalg::lambda_max(&linalg::symmetrize(&block))
        })
        .collect();
    let l_max = l_blocks.iter().cloned().fold(0.0, f64::max);
    let diameter = qp.bounds.diameter();
    Ok(ProblemConstants {
        sigma_f,
        lambda_max_h,
        l_d_exact: linalg::spectral_norm_sq(&qp.coupling) / sigma_f,
        l_d_frobenius: linalg::frobenius_sq(&qp.coupling) / sigma_f,
        l_blocks,
        l_max,
        sigma_1: (sigma_f / l_max).min(1.0),
        diameter,
        diam_finite: diameter.is_finite(),
    })
}

/// Slater bound on the optimal multiplier norm:
/// `(F(ũ) − d(λ̃)) / min_j{−h_j(ũ)} ≥ ‖λ*‖`.
pub fn slater_dual_bound(
    qp: &CoupledQp,
    u_tilde: &DVector<f64>,
    lambda_tilde: &DVector<f64>,
    d_at_lambda_tilde: f64,
) -> Result<f64> {
    check_multiplier(lambda_tilde, qp.p())?;
    if let Some((index, value)) = qp.bounds.violation(u_tilde, BOX_TOL) {
        return Err(Error::OutsideBox { index, value });
    }
    let slack = min_slack(qp, u_tilde)?;
    if slack <= 0.0 {
        return Err(Error::SlaterViolation { min_slack: slack });
    }
    Ok(((objective(qp, u_tilde)? - d_at_lambda_tilde) / slack).max(0.0))
}

/// Componentwise clamp onto the box.
pub fn box_project(bounds: &BoxSet, v: &DVector<f64>) -> DVector<f64> {
    bounds.project(v)
}

/// Certified upper bound on `f(u) − min_box f` for a `σ`-strongly convex `f`
/// with gradient `grad` at `u ∈ box`.
///
/// Minimizes the strong-convexity lower model
/// `f(u) + ⟨∇f(u), v − u⟩ + (σ/2)‖v − u‖²` over the box (a separable clamp)
/// and returns the model decrease. Zero exactly at the box-constrained minimizer.
pub fn strong_convexity_gap(u: &DVector<f64>, grad: &DVector<f64>, bounds: &BoxSet, sigma: f64) -> f64 {
    u.iter()
        .zip(grad.iter())
        .enumerate()
        .map(|(j, (&uj, &gj))| {
            let d = bounds.clamp(j, uj - gj / sigma) - uj;
            (-(gj * d) - 0.5 * sigma * d * d).max(0.0)
        })
        .sum()
}

/// `𝓛(·, λ)` at a fixed multiplier, with `q + Gᵀλ` folded into one vector.
#[derive(Debug, Clone)]
pub struct PartialLagrangian<'a> {
    pub qp: &'a CoupledQp,
    /// `q + Gᵀλ`.
    pub linear: DVector<f64>,
    /// `⟨λ, g⟩`.
    pub constant: f64,
}

impl<'a> PartialLagrangian<'a> {
    pub fn new(qp: &'a CoupledQp, lambda: &DVector<f64>) -> Result<Self> {
        check_multiplier(lambda, qp.p())?;
        Ok(Self {
            qp,
            linear: &qp.linear + qp.coupling.tr_mul(lambda),
            constant: lambda.dot(&qp.offset),
        })
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        quad_value(&self.qp.hessian, &self.linear, u) + self.constant
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.qp.hessian * u + &self.linear
    }
}

/// Small hand-solvable instances.
pub mod fixtures {
    use super::*;

    /// n = 2, two singleton blocks, H = I, q = 0, G = [−1, −1], g = 1, box [−10, 10]².
    pub fn two_var_qp() -> CoupledQp {
        CoupledQp::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]),
            DVector::from_element(1, 1.0),
            BoxSet::symmetric(2, 10.0),
            BlockPartition::singletons(2).unwrap(),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::two_var_qp;
    use super::*;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn p1_is_valid() {
        assert!(validate_problem(&two_var_qp()).is_valid());
    }

    #[test]
    fn indefinite_hessian_is_reported() {
        let mut qp = two_var_qp();
        qp.hessian = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let report = validate_problem(&qp);
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::NotPositiveDefinite { lambda_min }] if (*lambda_min + 1.0).abs() < 1e-10
        ));
        assert!(report.violations[0].to_string().contains("H not positive definite"));
    }

    #[test]
    fn zero_row_is_infeasible_or_redundant() {
        let mut qp = two_var_qp();
        qp.coupling = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 0.0, 0.0]);
        qp.offset = v(&[1.0, 0.5]);
        let report = validate_problem(&qp);
        assert_eq!(report.violations, vec![Violation::InfeasibleZeroRow { row: 1 }]);
        assert!(report.violations[0].to_string().contains("infeasible zero row"));
        qp.offset = v(&[1.0, -0.5]);
        assert_eq!(validate_problem(&qp).violations, vec![Violation::RedundantZeroRow { row: 1 }]);
    }

    #[test]
    fn inverted_bounds_and_dimensions() {
        let mut qp = two_var_qp();
        qp.bounds.lb[1] = 11.0;
        assert_eq!(validate_problem(&qp).violations, vec![Violation::InvertedBounds { index: 1 }]);
        qp.linear = DVector::zeros(3);
        assert!(matches!(validate_problem(&qp).violations[0], Violation::Dimension(_)));
    }

    #[test]
    fn objective_values() {
        let mut qp = two_var_qp();
        assert_relative_eq!(objective(&qp, &v(&[0.5, 0.5])).unwrap(), 0.25);
        assert_eq!(objective(&qp, &v(&[0.0, 0.0])).unwrap(), 0.0);
        qp.hessian *= 2.0;
        assert_relative_eq!(objective(&qp, &v(&[0.5, 0.5])).unwrap(), 0.5);
        assert!(objective(&qp, &v(&[0.5])).is_err());
    }

    #[test]
    fn constraint_values() {
        let qp = two_var_qp();
        assert_relative_eq!(constraints(&qp, &v(&[0.5, 0.5])).unwrap()[0], 0.0);
        assert_eq!(constraints(&qp, &v(&[0.0, 0.0])).unwrap(), qp.offset);
        assert_relative_eq!(constraints(&qp, &v(&[1.0, 1.0])).unwrap()[0], -1.0);
        assert_eq!(feasibility_violation(&qp, &v(&[1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn lagrangian_values() {
        let qp = two_var_qp();
        let u = v(&[0.3, -0.2]);
        assert_eq!(lagrangian(&qp, &u, &v(&[0.0])).unwrap(), objective(&qp, &u).unwrap());
        assert_relative_eq!(lagrangian(&qp, &v(&[0.0, 0.0]), &v(&[0.5])).unwrap(), 0.5);
        assert_relative_eq!(lagrangian(&qp, &v(&[0.5, 0.5]), &v(&[0.5])).unwrap(), 0.25);
        assert!(matches!(
            lagrangian(&qp, &u, &v(&[-0.1])),
            Err(Error::NegativeMultiplier { index: 0, .. })
        ));
    }

    #[test]
    fn block_gradient_examples() {
        let qp = two_var_qp();
        let g = lagrangian_block_gradient(&qp, &v(&[10.0, 10.0]), &v(&[0.0]), 0).unwrap();
        assert_relative_eq!(g[0], 10.0);
        let g = lagrangian_block_gradient(&qp, &v(&[0.5, 0.5]), &v(&[0.5]), 0).unwrap();
        assert_relative_eq!(g[0], 0.0);
        let mut qp2 = two_var_qp();
        qp2.linear = v(&[3.0, -4.0]);
        let g = lagrangian_block_gradient(&qp2, &v(&[0.0, 0.0]), &v(&[0.0]), 1).unwrap();
        assert_eq!(g[0], -4.0);
        assert!(matches!(
            lagrangian_block_gradient(&qp, &v(&[0.0, 0.0]), &v(&[0.0]), 2),
            Err(Error::BlockIndex { index: 2, count: 2 })
        ));
    }

    #[test]
    fn p1_constants() {
        let c = constants(&two_var_qp()).unwrap();
        assert_relative_eq!(c.sigma_f, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.l_d_exact, 2.0, epsilon = 1e-12);
        assert_eq!(c.l_blocks, vec![1.0, 1.0]);
        assert_relative_eq!(c.sigma_1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.diameter, 800f64.sqrt(), epsilon = 1e-12);
        assert!(c.diam_finite);
        assert!(c.l_d_exact <= c.l_d_frobenius + 1e-12);
    }

    #[test]
    fn identity_coupling_constant() {
        let c = 4.0;
        let qp = CoupledQp::new(
            DMatrix::identity(3, 3) * c,
            DVector::zeros(3),
            DMatrix::identity(3, 3),
            DVector::from_element(3, -1.0),
            BoxSet::symmetric(3, 1.0),
            BlockPartition::new(vec![2, 1]).unwrap(),
        )
        .unwrap();
        let k = constants(&qp).unwrap();
        assert_relative_eq!(k.l_d_exact, 1.0 / c, epsilon = 1e-12);
    }

    #[test]
    fn infinite_box_flags_diameter() {
        let mut qp = two_var_qp();
        qp.bounds.ub[0] = f64::INFINITY;
        let c = constants(&qp).unwrap();
        assert!(!c.diam_finite);
        assert!(validate_problem(&qp).is_valid());
    }

    #[test]
    fn slater_bound_examples() {
        let qp = two_var_qp();
        let r = slater_dual_bound(&qp, &v(&[1.0, 1.0]), &v(&[0.0]), 0.0).unwrap();
        assert_relative_eq!(r, 1.0);
        assert!(matches!(
            slater_dual_bound(&qp, &v(&[0.5, 0.5]), &v(&[0.0]), 0.0),
            Err(Error::SlaterViolation { .. })
        ));
        let mut scaled = two_var_qp();
        scaled.coupling *= 2.0;
        scaled.offset *= 2.0;
        let r2 = slater_dual_bound(&scaled, &v(&[1.0, 1.0]), &v(&[0.0]), 0.0).unwrap();
        assert_relative_eq!(r2, 0.5);
    }

    #[test]
    fn projection_examples() {
        let b = BoxSet::symmetric(3, 1.0);
        let x = v(&[2.0, -3.0, 0.0]);
        assert_eq!(box_project(&b, &x), v(&[1.0, -1.0, 0.0]));
        let inside = v(&[0.1, -0.2, 0.9]);
        assert_eq!(box_project(&b, &inside), inside);
        let once = box_project(&b, &x);
        assert_eq!(box_project(&b, &once), once);
    }

    #[test]
    fn gap_certificate_zero_at_minimizer() {
        let qp = two_var_qp();
        let lag = PartialLagrangian::new(&qp, &v(&[0.5])).unwrap();
        let u = v(&[0.5, 0.5]);
        assert!(strong_convexity_gap(&u, &lag.gradient(&u), &qp.bounds, 1.0) < 1e-15);
        let u = v(&[0.0, 0.0]);
        let gap = strong_convexity_gap(&u, &lag.gradient(&u), &qp.bounds, 1.0);
        // exact gap for H = I is ‖∇‖²/2 when the box is inactive
        assert_relative_eq!(gap, lag.value(&u) - 0.25, epsilon = 1e-14);
    }

    #[test]
    fn partition_lookup() {
        let p = BlockPartition::new(vec![2, 3, 1]).unwrap();
        assert_eq!(p.range(1), 2..5);
        assert_eq!(p.block_of(0), 0);
        assert_eq!(p.block_of(4), 1);
        assert_eq!(p.block_of(5), 2);
        assert!(BlockPartition::new(vec![]).is_err());
        assert!(BlockPartition::new(vec![1, 0]).is_err());
    }
}
