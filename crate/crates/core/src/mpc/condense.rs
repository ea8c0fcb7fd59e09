//! Elimination of the predicted states.
//!
//! Decision variables are ordered subsystem-major:
//! `u = [u_1(0), …, u_1(N−1), u_2(0), …]`, so that block `i` of the QP
//! holds the whole input sequence of subsystem `i`.

use nalgebra::{DMatrix, DVector};

use super::system::NetworkSystem;
use crate::error::{Error, Result};
use crate::model::{BlockPartition, BoxSet, CoupledQp, Sparsity};

/// Origin of one coupling row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowInfo {
    pub subsystem: usize,
    /// Prediction step `1..=N`.
    pub step: usize,
    /// State component within the subsystem.
    pub component: usize,
    pub upper: bool,
}

/// Condensed MPC problem family parameterized by the initial state `x`:
/// `F(x, u) = ½uᵀHu + (Wx + w)ᵀu + xᵀCx` subject to `Gu + Ex + g ≤ 0`, `u ∈ box`.
#[derive(Debug, Clone)]
pub struct CondensedMpc {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub hessian: DMatrix<f64>,
    pub w_mat: DMatrix<f64>,
    pub w_vec: DVector<f64>,
    pub coupling: DMatrix<f64>,
    pub e_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub bounds: BoxSet,
    pub partition: BlockPartition,
    pub sparsity: Option<Sparsity>,
    /// `C` in the constant cost term `xᵀCx`.
    pub cost_const: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub state_weight: DMatrix<f64>,
    /// Predicted states `x(1..N)`, time-major: `X = Φx + Γu`.
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// `(step, global input component)` of every decision variable.
    pub var_map: Vec<(usize, usize)>,
    pub rows: Vec<RowInfo>,
    /// Rows with `G_r = 0`, dropped from the QP (they only constrain `x`).
    pub dropped_rows: usize,
    pub terminal_gain: Option<DMatrix<f64>>,
}

pub fn condense(sys: &NetworkSystem, horizon: usize) -> Result<CondensedMpc> {
    sys.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let (a, b) = sys.dynamics();
    let (nx, nu) = (sys.nx(), sys.nu());
    let nn = horizon * nu;
    let xo = sys.x_offsets();
    let uo = sys.u_offsets();

    let mut var_map = Vec::with_capacity(nn);
    for (i, s) in sys.subsystems.iter().enumerate() {
        for t in 0..horizon {
            for c in 0..s.nu {
                var_map.push((t, uo[i] + c));
            }
        }
    }

    // powers A^0..A^N
    let mut powers = vec![DMatrix::identity(nx, nx)];
    for t in 1..=horizon {
        powers.push(&a * &powers[t - 1]);
    }
    let mut phi = DMatrix::zeros(horizon * nx, nx);
    let mut gamma = DMatrix::zeros(horizon * nx, nn);
    let mut ab: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    for t in 0..horizon {
        ab.push(&powers[t] * &b);
    }
    for t in 1..=horizon {
        phi.view_mut(((t - 1) * nx, 0), (nx, nx)).copy_from(&powers[t]);
        for (var, &(s, comp)) in var_map.iter().enumerate() {
            if s < t {
                gamma.view_mut(((t - 1) * nx, var), (nx, 1)).copy_from(&ab[t - 1 - s].column(comp));
            }
        }
    }

    let q = sys.state_weight();
    let r = sys.input_weight();
    let p = sys.terminal_weight();
    let mut qbar = DMatrix::zeros(horizon * nx, horizon * nx);
    for t in 1..=horizon {
        let w = if t == horizon { &p } else { &q };
        qbar.view_mut(((t - 1) * nx, (t - 1) * nx), (nx, nx)).copy_from(w);
    }
    let mut rbar = DMatrix::zeros(nn, nn);
    for (va, &(ta, ca)) in var_map.iter().enumerate() {
        for (vb, &(tb, cb)) in var_map.iter().enumerate() {
            if ta == tb {
                rbar[(va, vb)] = r[(ca, cb)];
            }
        }
    }
    let gq = gamma.transpose() * &qbar;
    let mut hessian = (&gq * &gamma + &rbar) * 2.0;
    hessian = (&hessian + hessian.transpose()) * 0.5;
    let w_mat = &gq * &phi * 2.0;
    let cost_const = &q + phi.transpose() * &qbar * &phi;

    let mut g_rows: Vec<DVector<f64>> = Vec::new();
    let mut e_rows: Vec<DVector<f64>> = Vec::new();
    let mut offs = Vec::new();
    let mut rows = Vec::new();
    let mut dropped_rows = 0;
    let mut rows_per_block = vec![0usize; sys.m()];
    for (i, s) in sys.subsystems.iter().enumerate() {
        for t in 1..=horizon {
            let (lb, ub) = if t == horizon { (&s.xf_lb, &s.xf_ub) } else { (&s.x_lb, &s.x_ub) };
            for c in 0..s.nx {
                let sidx = (t - 1) * nx + xo[i] + c;
                let grow = gamma.row(sidx).transpose();
                let erow = phi.row(sidx).transpose();
                for (upper, bound) in [(true, ub[c]), (false, lb[c])] {
                    if !bound.is_finite() {
                        continue;
                    }
                    if grow.amax() == 0.0 {
                        dropped_rows += 1;
                        continue;
                    }
                    let sign = if upper { 1.0 } else { -1.0 };
                    g_rows.push(&grow * sign);
                    e_rows.push(&erow * sign);
                    offs.push(-sign * bound);
                    rows.push(RowInfo { subsystem: i, step: t, component: c, upper });
                    rows_per_block[i] += 1;
                }
            }
        }
    }
    let prow = g_rows.len();
    let coupling = DMatrix::from_fn(prow, nn, |r, c| g_rows[r][c]);
    let e_mat = DMatrix::from_fn(prow, nx, |r, c| e_rows[r][c]);

    let lb = DVector::from_iterator(nn, var_map.iter().map(|&(_, c)| input_bound(sys, c, false)));
    let ub = DVector::from_iterator(nn, var_map.iter().map(|&(_, c)| input_bound(sys, c, true)));
    let partition = BlockPartition::new(sys.subsystems.iter().map(|s| s.nu * horizon).collect())?;

    let sparsity = if rows_per_block.iter().all(|&r| r > 0) {
        let row_blocks = BlockPartition::new(rows_per_block)?;
        let m = sys.m();
        let mut h_pairs = Vec::new();
        let mut g_pairs = Vec::new();
        for i in 0..m {
            let ri = partition.range(i);
            for j in 0..m {
                let rj = partition.range(j);
                if hessian.view((ri.start, rj.start), (ri.len(), rj.len())).amax() != 0.0 {
                    h_pairs.push((i, j));
                }
            }
            for rb in 0..m {
                let rr = row_blocks.range(rb);
                if coupling.view((rr.start, ri.start), (rr.len(), ri.len())).amax() != 0.0 {
                    g_pairs.push((rb, i));
                }
            }
        }
        Some(Sparsity::from_pairs(m, row_blocks, &h_pairs, &g_pairs)?)
    } else {
        None
    };

    Ok(CondensedMpc {
        horizon,
        nx,
        nu,
        hessian,
        w_mat,
        w_vec: DVector::zeros(nn),
        coupling,
        e_mat,
        g_vec: DVector::from_vec(offs),
        bounds: BoxSet::new(lb, ub)?,
        partition,
        sparsity,
        cost_const,
        a,
        b,
        state_weight: q,
        phi,
        gamma,
        var_map,
        rows,
        dropped_rows,
        terminal_gain: sys.terminal.as_ref().map(|t| t.k.clone()),
    })
}

fn input_bound(sys: &NetworkSystem, comp: usize, upper: bool) -> f64 {
    let mut o = 0;
    for s in &sys.subsystems {
        if comp < o + s.nu {
            return if upper { s.u_ub[comp - o] } else { s.u_lb[comp - o] };
        }
        o += s.nu;
    }
    unreachable!("input component {comp} out of range")
}

impl CondensedMpc {
    pub fn n(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn p(&self) -> usize {
        self.coupling.nrows()
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.nx {
            return Err(Error::Dimension(format!("state has {} entries, expected {}", x.len(), self.nx)));
        }
        Ok(())
    }

    /// The QP at state `x`: `q = Wx + w`, `g = Ex + g`.
    pub fn instantiate(&self, x: &DVector<f64>) -> Result<CoupledQp> {
        self.check_state(x)?;
        let qp = CoupledQp::new(
            self.hessian.clone(),
            &self.w_mat * x + &self.w_vec,
            self.coupling.clone(),
            &self.e_mat * x + &self.g_vec,
            self.bounds.clone(),
            self.partition.clone(),
        )?;
        match &self.sparsity {
            Some(sp) => qp.with_sparsity(sp.clone()),
            None => Ok(qp),
        }
    }

    /// `xᵀCx`, the part of the cost that does not depend on `u`.
    pub fn cost_offset(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.cost_const * x))
    }

    /// Full horizon cost `F(x, u)` including the constant term.
    pub fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        let q = &self.w_mat * x + &self.w_vec;
        Ok(0.5 * u.dot(&(&self.hessian * u)) + q.dot(u) + self.cost_offset(x))
    }

    /// Global input at prediction step `t`.
    pub fn input_at(&self, u: &DVector<f64>, t: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.nu);
        for (var, &(s, c)) in self.var_map.iter().enumerate() {
            if s == t {
                out[c] = u[var];
            }
        }
        out
    }

    pub fn first_input(&self, u: &DVector<f64>) -> DVector<f64> {
        self.input_at(u, 0)
    }

    /// Predicted state `x(t)` for `t` in `1..=N`.
    pub fn predicted_state(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> DVector<f64> {
        let r = (t - 1) * self.nx;
        self.phi.rows(r, self.nx) * x + self.gamma.rows(r, self.nx) * u
    }

    pub fn next_state(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * self.first_input(u)
    }

    /// `ũ⁺ = [û(1), …, û(N−1), K·x(N)]`.
    pub fn shift(&self, u: &DVector<f64>, x: &DVector<f64>, k: &DMatrix<f64>) -> DVector<f64> {
        let tail = k * self.predicted_state(x, u, self.horizon);
        let mut index = vec![vec![0usize; self.nu]; self.horizon];
        for (var, &(s, c)) in self.var_map.iter().enumerate() {
            index[s][c] = var;
        }
        DVector::from_iterator(
            u.len(),
            self.var_map.iter().map(|&(s, c)| if s + 1 < self.horizon { u[index[s + 1][c]] } else { tail[c] }),
        )
    }

    /// Embeds a global per-step input sequence `seq[t]` into the decision vector.
    pub fn pack_inputs(&self, seq: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.var_map.iter().map(|&(s, c)| seq[s][c]))
    }
}
