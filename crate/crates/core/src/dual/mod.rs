//! Outer dual solvers: inexact dual gradient (IDG), inexact dual fast
//! gradient (IDFG) and a projected dual subgradient baseline, together with
//! the iteration-count rules and the a-priori certificates.

mod solver;
mod trace;

pub use solver::{
    idfg_step, idg_step, solve, solve_observed, solve_with_inner, subgradient_solve, Control, IdfgState, InnerOracle,
    IterateView, OuterSolution, PcdInner,
};
pub use trace::{IterRecord, OuterTrace, TraceLevel};

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, CoupledQp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Idg,
    Idfg,
    Subgrad,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Idg => "idg",
            Method::Idfg => "idfg",
            Method::Subgrad => "subgrad",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "idg" => Ok(Method::Idg),
            "idfg" => Ok(Method::Idfg),
            "subgrad" => Ok(Method::Subgrad),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Parameters of one outer run.
#[derive(Debug, Clone)]
pub struct OuterParams {
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    /// Last outer index; the run performs `k_out + 1` inner solves.
    pub k_out: usize,
    /// Lipschitz constant `L_d` of the dual gradient.
    pub l_d: f64,
    /// `L̄ ≥ L_d` used in the IDG certificates.
    pub l_used: f64,
    /// IDG step `α` (default `1/(2L_d)`), or `γ₀` for the subgradient rule
    /// `γ_k = γ₀/√(k+1)` (default `1/L_d`).
    pub step: f64,
    /// `λ⁰`; `None` means the zero vector.
    pub lambda0: Option<DVector<f64>>,
    /// Bound on the optimal multiplier norm used for certificates.
    pub r_d: Option<f64>,
    /// Per-call PCD budget; `None` uses `l_in`.
    pub inner_budget: Option<usize>,
    pub trace: TraceLevel,
}

impl OuterParams {
    pub fn new(method: Method, eps_out: f64, eps_in: f64, k_out: usize, l_d: f64) -> Self {
        let step = match method {
            Method::Subgrad => 1.0 / l_d,
            _ => 0.5 / l_d,
        };
        Self {
            method,
            eps_out,
            eps_in,
            k_out,
            l_d,
            l_used: l_d,
            step,
            lambda0: None,
            r_d: None,
            inner_budget: None,
            trace: TraceLevel::Summary,
        }
    }

    /// Selection rule for `k_out` and `ε_in` from `L_d = ‖G‖²/σ_F` and a
    /// multiplier bound `r_d`. The subgradient baseline uses the IDG rule.
    pub fn from_rule(qp: &CoupledQp, method: Method, eps_out: f64, r_d: f64) -> Result<Self> {
        let l_d = model::constants(qp)?.l_d_exact;
        Self::from_rule_with(method, eps_out, r_d, l_d)
    }

    pub fn from_rule_with(method: Method, eps_out: f64, r_d: f64, l_d: f64) -> Result<Self> {
        check_positive(&[("L_d", l_d), ("R_d", r_d), ("eps_out", eps_out)])?;
        let (k_out, eps_in) = match method {
            Method::Idfg => idfg_iterations(l_d, r_d, eps_out),
            _ => (idg_iterations(l_d, r_d, eps_out), eps_out),
        };
        let mut p = Self::new(method, eps_out, eps_in, k_out, l_d);
        p.r_d = Some(r_d);
        Ok(p)
    }

    pub fn with_lambda0(mut self, lambda0: DVector<f64>) -> Self {
        self.lambda0 = Some(lambda0);
        self
    }

    pub fn with_r_d(mut self, r_d: f64) -> Self {
        self.r_d = Some(r_d);
        self
    }

    pub fn with_eps_in(mut self, eps_in: f64) -> Self {
        self.eps_in = eps_in;
        self
    }

    pub fn with_k_out(mut self, k_out: usize) -> Self {
        self.k_out = k_out;
        self
    }

    /// IDG with an upper bound `L̄ ≥ L_d`; the step becomes `1/(2L̄)`.
    pub fn with_l_used(mut self, l_used: f64) -> Self {
        self.l_used = l_used;
        if self.method == Method::Idg {
            self.step = 0.5 / l_used;
        }
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_inner_budget(mut self, budget: usize) -> Self {
        self.inner_budget = Some(budget);
        self
    }

    pub fn with_trace(mut self, level: TraceLevel) -> Self {
        self.trace = level;
        self
    }

    pub fn lambda0_norm(&self) -> f64 {
        self.lambda0.as_ref().map_or(0.0, |l| l.norm())
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        check_positive(&[("eps_in", self.eps_in), ("L_d", self.l_d)])?;
        if let Some(l0) = &self.lambda0 {
            model::check_multiplier(l0, p)?;
        }
        match self.method {
            Method::Idg => {
                if self.l_used < self.l_d {
                    return Err(Error::InvalidParameter(format!(
                        "L_used = {} is below L_d = {}",
                        self.l_used, self.l_d
                    )));
                }
                let (lo, hi) = (0.5 / self.l_used, 0.5 / self.l_d);
                if self.step < lo * (1.0 - 1e-12) || self.step > hi * (1.0 + 1e-12) {
                    return Err(Error::InvalidParameter(format!(
                        "IDG step {} outside [{lo}, {hi}]",
                        self.step
                    )));
                }
            }
            Method::Subgrad if self.step < 0.0 => {
                return Err(Error::InvalidParameter("subgradient γ₀ must be nonnegative".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_positive(values: &[(&str, f64)]) -> Result<()> {
    for (name, x) in values {
        if !(*x > 0.0) || !x.is_finite() {
            return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {x}")));
        }
    }
    Ok(())
}

fn floor_count(x: f64) -> usize {
    x.floor().max(1.0) as usize
}

/// IDG rule `k_out = ⌊4·L_d·R_d²/ε_out⌋` (at least 1), used with `ε_in = ε_out`.
pub fn idg_iterations(l_d: f64, r_d: f64, eps_out: f64) -> usize {
    floor_count(4.0 * l_d * r_d * r_d / eps_out)
}

/// IDFG rule `k_out = ⌊2·R_d·√(L_d/ε_out)⌋` (at least 1) and
/// `ε_in = ε_out·√ε_out / (2·R_d·√L_d)`, i.e. `ε_out/κ` with `κ` the unfloored
/// count. For `κ < 1` the inner accuracy is held at `ε_out`.
pub fn idfg_iterations(l_d: f64, r_d: f64, eps_out: f64) -> (usize, f64) {
    let kappa = 2.0 * r_d * (l_d / eps_out).sqrt();
    (floor_count(kappa), eps_out / kappa.max(1.0))
}

/// A-priori bounds after `k` outer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateSet {
    /// Bound on `F* − d(λ̂^k)`.
    pub dual_subopt_bound: f64,
    /// `v(k, ε_in)`, bound on `‖[h(û^k)]₊‖`.
    pub feas_violation_bound: f64,
    /// Bound on `F(û^k) − F*` from above.
    pub primal_subopt_upper: f64,
    /// Magnitude of the lower bound: `F(û^k) − F* ≥ −primal_subopt_lower`.
    pub primal_subopt_lower: f64,
}

/// Evaluates the certificates of the given method. For IDG `l_used` is
/// `L̄`; for IDFG it is `L_d`. The subgradient baseline carries no
/// certificates and yields infinite bounds.
pub fn certificates(
    method: Method,
    k: usize,
    eps_in: f64,
    l_used: f64,
    r_d: f64,
    lambda0_norm: f64,
) -> CertificateSet {
    let k1 = (k + 1) as f64;
    let l = l_used;
    match method {
        Method::Idg => {
            let v = 4.0 * l * r_d / k1 + 6.0 * l * lambda0_norm / k1 + 2.0 * (l * eps_in / k1).sqrt();
            CertificateSet {
                dual_subopt_bound: l * r_d * r_d / k1 + eps_in,
                feas_violation_bound: v,
                primal_subopt_upper: l * lambda0_norm * lambda0_norm / k1 + eps_in,
                primal_subopt_lower: (r_d + lambda0_norm) * v,
            }
        }
        Method::Idfg => {
            let k2 = k1 * k1;
            let v = 16.0 * l * r_d / k2 + 8.0 * l * lambda0_norm / k2 + 4.0 * (l * eps_in / k1).sqrt();
            CertificateSet {
                dual_subopt_bound: 4.0 * l * r_d * r_d / k2 + k1 * eps_in,
                feas_violation_bound: v,
                primal_subopt_upper: 4.0 * l * lambda0_norm * lambda0_norm / k2 + k1 * eps_in,
                primal_subopt_lower: (r_d + lambda0_norm) * v,
            }
        }
        Method::Subgrad => CertificateSet {
            dual_subopt_bound: f64::INFINITY,
            feas_violation_bound: f64::INFINITY,
            primal_subopt_upper: f64::INFINITY,
            primal_subopt_lower: f64::INFINITY,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn idg_rule_examples() {
        assert_eq!(idg_iterations(2.0, 0.5, 0.01), 200);
        assert_eq!(idg_iterations(2.0, 0.5, 10.0), 1);
        assert_eq!(idg_iterations(2.0, 0.5, 0.005), 400);
    }

    #[test]
    fn idfg_rule_examples() {
        let (k, e) = idfg_iterations(2.0, 0.5, 0.01);
        assert_eq!(k, 14);
        assert_relative_eq!(e, 7.0710678e-4, epsilon = 1e-10);
        let (k4, _) = idfg_iterations(2.0, 50.0, 0.04);
        let (k1, _) = idfg_iterations(2.0, 50.0, 0.01);
        assert_eq!(k1, 2 * k4);
        let (_, e1) = idfg_iterations(3.0, 2.0, 0.01);
        let (_, e4) = idfg_iterations(3.0, 2.0, 0.04);
        assert_relative_eq!(e4 / e1, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn certificate_examples() {
        let c = certificates(Method::Idg, 199, 0.01, 2.0, 0.5, 0.0);
        assert_relative_eq!(c.dual_subopt_bound, 0.0125, epsilon = 1e-15);
        let c = certificates(Method::Idfg, 13, 7.071e-4, 2.0, 0.5, 0.0);
        assert_relative_eq!(c.dual_subopt_bound, 2.0 / 196.0 + 14.0 * 7.071e-4, epsilon = 1e-15);
        assert!((c.dual_subopt_bound - 0.0201).abs() < 1e-4);
        for m in [Method::Idg, Method::Idfg] {
            let c = certificates(m, 10_000_000, 0.0, 2.0, 0.5, 0.0);
            assert!(c.dual_subopt_bound < 1e-6 && c.feas_violation_bound < 1e-6);
            assert_eq!(c.primal_subopt_upper, 0.0);
        }
    }

    #[test]
    fn conclusions_follow_from_the_rules() {
        for &(l_d, r_d, eps) in &[(2.0, 0.5, 0.01), (180.0, 1.3, 1e-3), (0.7, 20.0, 0.1)] {
            let k = idg_iterations(l_d, r_d, eps);
            let c = certificates(Method::Idg, k, eps, l_d, r_d, 0.0);
            assert!(c.dual_subopt_bound <= 1.25 * eps);
            assert!(c.feas_violation_bound <= 2.0 * eps / r_d);
            assert!(c.primal_subopt_lower <= 2.0 * eps && c.primal_subopt_upper <= eps);
            let (k, e_in) = idfg_iterations(l_d, r_d, eps);
            let c = certificates(Method::Idfg, k, e_in, l_d, r_d, 0.0);
            assert!(c.dual_subopt_bound <= 3.0 * eps);
            assert!(c.feas_violation_bound <= 6.0 * eps / r_d);
            assert!(c.primal_subopt_lower <= 6.0 * eps && c.primal_subopt_upper <= 2.0 * eps);
        }
    }

    #[test]
    fn step_interval_is_enforced() {
        let p = OuterParams::new(Method::Idg, 0.01, 0.01, 10, 2.0).with_step(0.5);
        assert!(p.validate(1).is_err());
        let p = OuterParams::new(Method::Idg, 0.01, 0.01, 10, 2.0).with_l_used(4.0);
        assert_relative_eq!(p.step, 0.125);
        assert!(p.validate(1).is_ok());
    }

    #[test]
    fn method_parses() {
        assert_eq!("IDFG".parse::<Method>().unwrap(), Method::Idfg);
        assert!("newton".parse::<Method>().is_err());
        assert_eq!(Method::Subgrad.to_string(), "subgrad");
    }
}
