//! Terminal feedback, terminal weight and terminal box.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::system::{NetworkSystem, Terminal};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::BoxSet;

const RICCATI_MAX_ITERS: usize = 200_000;
const LYAPUNOV_MAX_DOUBLINGS: usize = 60;
/// Relative inflation of the Lyapunov solution so the decrease inequality
/// holds strictly.
const P_INFLATION: f64 = 1e-6;
const LMI_TOL: f64 = 1e-9;
const VERTEX_ENUM_MAX_DIM: usize = 14;

/// Stabilizing solution of the discrete algebraic Riccati equation and
/// its gain `K` (with `u = Kx`).
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITERS {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let chol = s.clone().cholesky().ok_or_else(|| Error::NotConverged("Riccati: R + BᵀPB not PD".into()))?;
        let k = -chol.solve(&(&btp * a));
        let next = linalg::symmetrize(&(q + a.transpose() * &p * a + a.transpose() * p.transpose() * b * &k));
        let diff = (&next - &p).amax();
        p = next;
        if diff <= 1e-13 * p.amax().max(1.0) {
            let btp = b.transpose() * &p;
            let k = -(r + &btp * b).cholesky().expect("checked above").solve(&(&btp * a));
            return Ok((p, k));
        }
    }
    Err(Error::NotConverged("Riccati iteration did not converge".into()))
}

/// Solves `AᵀPA − P = −W` for Schur-stable `A` by Smith doubling.
pub fn lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = w.clone();
    let mut ak = a.clone();
    for _ in 0..LYAPUNOV_MAX_DOUBLINGS {
        let inc = ak.transpose() * &p * &ak;
        p += &inc;
        ak = &ak * &ak;
        if !(p.amax().is_finite() && ak.amax().is_finite()) {
            break;
        }
        if inc.amax() <= 1e-16 * p.amax() {
            return Ok(linalg::symmetrize(&p));
        }
    }
    Err(Error::InvalidParameter("closed-loop matrix is not Schur stable".into()))
}

/// `P` with `(A+BK)ᵀP(A+BK) − P = −(Q + KᵀRK)`, slightly inflated.
pub fn terminal_weight_for(sys: &NetworkSystem, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = sys.dynamics();
    let ak = &a + &b * k;
    let w = sys.state_weight() + k.transpose() * sys.input_weight() * k;
    Ok(lyapunov(&ak, &w)? * (1.0 + P_INFLATION))
}

#[derive(Debug, Clone, Default)]
pub struct TerminalReport {
    pub violations: Vec<String>,
    /// `λ_max((A+BK)ᵀP(A+BK) − P + Q + KᵀRK)`; must be `≤ 0`.
    pub lmi_max_eig: f64,
    /// Smallest distance of `(A+BK)x` to the boundary of `X_f` over the
    /// checked points; must be positive.
    pub invariance_margin: f64,
    pub points_checked: usize,
}

impl TerminalReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Numeric check of the terminal assumptions: `X_f ⊂ X`, `(A+BK)X_f ⊂ int X_f`,
/// `K X_f ⊂ U`, and the Lyapunov matrix inequality.
pub fn check_terminal(
    sys: &NetworkSystem,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
    xf: &BoxSet,
    sample_count: usize,
) -> TerminalReport {
    let mut rep = TerminalReport { invariance_margin: f64::INFINITY, ..Default::default() };
    let (nx, nu) = (sys.nx(), sys.nu());
    if k.shape() != (nu, nx) || p.shape() != (nx, nx) || xf.dim() != nx {
        rep.violations.push("dimension mismatch".into());
        return rep;
    }
    let (a, b) = sys.dynamics();
    let ak = &a + &b * k;
    let q = sys.state_weight();
    let r = sys.input_weight();
    let lmi = ak.transpose() * p * &ak - p + &q + k.transpose() * &r * k;
    rep.lmi_max_eig = linalg::lambda_max(&linalg::symmetrize(&lmi));
    if !(rep.lmi_max_eig <= LMI_TOL * (1.0 + p.amax())) {
        rep.violations.push(format!("Lyapunov inequality fails: max eigenvalue {:.3e}", rep.lmi_max_eig));
    }
    if (&p.transpose() - p).amax() > 1e-9 * p.amax().max(1.0) || linalg::lambda_min(p) <= 0.0 {
        rep.violations.push("P not symmetric positive definite".into());
    }
    if !xf.is_bounded() {
        rep.violations.push("terminal box must be bounded".into());
        return rep;
    }
    let x_lb = sys.stacked(|s| &s.x_lb);
    let x_ub = sys.stacked(|s| &s.x_ub);
    let u_lb = sys.stacked(|s| &s.u_lb);
    let u_ub = sys.stacked(|s| &s.u_ub);
    for j in 0..nx {
        if xf.lb[j] < x_lb[j] || xf.ub[j] > x_ub[j] {
            rep.violations.push(format!("terminal box leaves the state box in component {j}"));
        }
        if !(xf.lb[j] < 0.0 && xf.ub[j] > 0.0) {
            rep.violations.push(format!("origin not interior to the terminal box in component {j}"));
        }
    }

    let mut points: Vec<DVector<f64>> = Vec::new();
    let corner = |mask: &dyn Fn(usize) -> bool| {
        DVector::from_fn(nx, |j, _| if mask(j) { xf.ub[j] } else { xf.lb[j] })
    };
    if nx <= VERTEX_ENUM_MAX_DIM {
        for bits in 0u64..(1u64 << nx) {
            points.push(corner(&|j| bits >> j & 1 == 1));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e51);
        for _ in 0..sample_count.max(1) {
            let mask: Vec<bool> = (0..nx).map(|_| rng.random()).collect();
            points.push(corner(&|j| mask[j]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f);
    for _ in 0..sample_count {
        points.push(DVector::from_fn(nx, |j, _| rng.random_range(xf.lb[j]..=xf.ub[j])));
    }
    let mut input_bad = false;
    for x in &points {
        let y = &ak * x;
        for j in 0..nx {
            rep.invariance_margin = rep.invariance_margin.min(xf.ub[j] - y[j]).min(y[j] - xf.lb[j]);
        }
        let u = k * x;
        input_bad |= (0..nu).any(|j| u[j] < u_lb[j] - 1e-12 || u[j] > u_ub[j] + 1e-12);
    }
    rep.points_checked = points.len();
    if !(rep.invariance_margin > 0.0) {
        rep.violations.push(format!("terminal box not invariant: margin {:.3e}", rep.invariance_margin));
    }
    if input_bad {
        rep.violations.push("terminal feedback violates the input box".into());
    }
    rep
}

/// Terminal ingredients from a centralized Riccati gain: `P` from the
/// Lyapunov equation of `A+BK` and `X_f = [−s·v, s·v]` with
/// `v = (I − |A+BK|)⁻¹·1`, scaled to fit the state and input boxes.
/// A cheaper gain (larger input weight) is tried first; more aggressive
/// weights follow until a gain with a contractive `|A+BK|` is found.
pub fn default_terminal(sys: &NetworkSystem) -> Result<NetworkSystem> {
    sys.validate()?;
    let (a, b) = sys.dynamics();
    let q = sys.state_weight();
    let r = sys.input_weight();
    let nx = sys.nx();
    let x_lb = sys.stacked(|s| &s.x_lb);
    let x_ub = sys.stacked(|s| &s.x_ub);
    let u_lb = sys.stacked(|s| &s.u_lb);
    let u_ub = sys.stacked(|s| &s.u_ub);
    for scale in [1.0, 0.1, 0.01, 1e-3, 1e-4] {
        let Ok((_, k)) = dare(&a, &b, &q, &(&r * scale)) else { continue };
        let ak = &a + &b * &k;
        let abs = ak.abs();
        let Some(v) = (DMatrix::identity(nx, nx) - &abs).lu().solve(&DVector::from_element(nx, 1.0)) else {
            continue;
        };
        if v.iter().any(|&x| !(x > 0.0)) {
            continue;
        }
        let mut s = f64::INFINITY;
        for j in 0..nx {
            s = s.min((-x_lb[j]).min(x_ub[j]) / v[j]);
        }
        let kv = k.abs() * &v;
        for j in 0..kv.len() {
            if kv[j] > 0.0 {
                s = s.min((-u_lb[j]).min(u_ub[j]) / kv[j]);
            }
        }
        if !(s.is_finite() && s > 0.0) {
            continue;
        }
        let half = v * (0.99 * s);
        let xf = BoxSet::new(-&half, half.clone())?;
        let mut out = sys.clone();
        let p = terminal_weight_for(sys, &k)?;
        if !check_terminal(sys, &k, &p, &xf, 256).passed() {
            continue;
        }
        let mut o = 0;
        for sub in &mut out.subsystems {
            sub.xf_lb = xf.lb.rows(o, sub.nx).into_owned();
            sub.xf_ub = xf.ub.rows(o, sub.nx).into_owned();
            o += sub.nx;
        }
        out.terminal = Some(Terminal { k, p });
        return Ok(out);
    }
    Err(Error::InvalidProblem("no terminal ingredients found".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::fixtures::scalar_mpc;
    use crate::mpc::system::{CouplingMode, Subsystem};

    fn scalar(a: f64, b: f64) -> NetworkSystem {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let v = |x: f64| DVector::from_element(1, x);
        NetworkSystem {
            mode: CouplingMode::General,
            subsystems: vec![Subsystem {
                nx: 1,
                nu: 1,
                neighbors: vec![0],
                a: vec![m(a)],
                b: vec![m(b)],
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
        }
    }

    #[test]
    fn riccati_scalar_is_golden_ratio() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (p, k) = dare(&one, &one, &one, &one).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - phi).abs() < 1e-10);
        assert!((k[(0, 0)] + phi / (1.0 + phi)).abs() < 1e-10);
    }

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let p = lyapunov(&a, &w).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        assert!(lyapunov(&DMatrix::from_element(1, 1, 1.5), &w).is_err());
    }

    #[test]
    fn contractive_scalar_passes() {
        let sys = scalar(0.5, 0.0);
        let k = DMatrix::zeros(1, 1);
        let p = terminal_weight_for(&sys, &k).unwrap();
        let rep = check_terminal(&sys, &k, &p, &BoxSet::symmetric(1, 1.0), 50);
        assert!(rep.passed(), "{:?}", rep.violations);
    }

    #[test]
    fn unstable_closed_loop_fails() {
        let sys = scalar(1.5, 0.0);
        let k = DMatrix::zeros(1, 1);
        let p = DMatrix::from_element(1, 1, 1.0);
        let rep = check_terminal(&sys, &k, &p, &BoxSet::symmetric(1, 1.0), 50);
        assert!(rep.violations.iter().any(|v| v.contains("Lyapunov")));
        assert!(rep.violations.iter().any(|v| v.contains("invariant")));
    }

    #[test]
    fn scalar_fixture_ingredients_pass() {
        let sys = scalar_mpc();
        let t = sys.terminal.as_ref().unwrap();
        let xf = BoxSet::new(sys.stacked(|s| &s.xf_lb), sys.stacked(|s| &s.xf_ub)).unwrap();
        let rep = check_terminal(&sys, &t.k, &t.p, &xf, 100);
        assert!(rep.passed(), "{:?}", rep.violations);
        // unit terminal weight is too small for the Riccati gain
        let weak = DMatrix::from_element(1, 1, 1.0);
        assert!(!check_terminal(&sys, &t.k, &weak, &xf, 100).passed());
    }

    #[test]
    fn default_terminal_passes_its_own_check() {
        let sys = default_terminal(&scalar(1.2, 1.0)).unwrap();
        let t = sys.terminal.as_ref().unwrap();
        let xf = BoxSet::new(sys.stacked(|s| &s.xf_lb), sys.stacked(|s| &s.xf_ub)).unwrap();
        assert!(check_terminal(&sys, &t.k, &t.p, &xf, 100).passed());
    }
}
