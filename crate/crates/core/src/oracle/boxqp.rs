//! Exact solver for `min ½uᵀHu + cᵀu` over a box: primal-dual active-set
//! Newton steps, with accelerated projected gradient to reach a good active
//! set when the Newton iteration stalls.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{strong_convexity_gap, BoxSet};

const NEWTON_ROUNDS: usize = 30;
const GRADIENT_ROUNDS: usize = 200;
const MAX_CYCLES: usize = 400;

pub(crate) struct BoxQp<'a> {
    pub h: &'a DMatrix<f64>,
    pub c: DVector<f64>,
    pub bounds: &'a BoxSet,
    pub sigma: f64,
    pub lmax: f64,
}

impl BoxQp<'_> {
    pub fn value(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(self.h * u)) + self.c.dot(u)
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        self.h * u + &self.c
    }

    pub fn gap(&self, u: &DVector<f64>) -> f64 {
        strong_convexity_gap(u, &self.gradient(u), self.bounds, self.sigma)
    }

    /// Returns a minimizer with certified gap at most `tol`.
    pub fn solve(&self, warm: Option<&DVector<f64>>, tol: f64) -> Result<(DVector<f64>, f64)> {
        let mut u = match warm {
            Some(w) => self.bounds.project(w),
            None => self.bounds.projected_origin(),
        };
        // rounding floor relative to the objective scale
        let tol = tol.max(1e-14 * (1.0 + self.c.norm_squared() / self.sigma));
        let mut gap = self.gap(&u);
        for _ in 0..MAX_CYCLES {
            if gap <= tol {
                return Ok((u, gap));
            }
            if let Some((cand, cand_gap)) = self.newton(&u) {
                if cand_gap < gap {
                    u = cand;
                    gap = cand_gap;
                }
                if gap <= tol {
                    return Ok((u, gap));
                }
            }
            u = self.accelerated(&u, GRADIENT_ROUNDS);
            gap = self.gap(&u);
        }
        Err(Error::NotConverged(format!("box QP gap {gap:e} above {tol:e}")))
    }

    fn newton(&self, start: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let n = start.len();
        let mut u = start.clone();
        let mut best: Option<(DVector<f64>, f64)> = None;
        let mut last_free: Option<Vec<usize>> = None;
        for _ in 0..NEWTON_ROUNDS {
            let g = self.gradient(&u);
            let z = DVector::from_fn(n, |j, _| self.bounds.clamp(j, u[j] - g[j] / self.lmax));
            let free: Vec<usize> =
                (0..n).filter(|&j| z[j] > self.bounds.lb[j] && z[j] < self.bounds.ub[j]).collect();
            if last_free.as_ref() == Some(&free) {
                break;
            }
            let mut next = z.clone();
            for j in 0..n {
                if !free.contains(&j) {
                    next[j] = if z[j] <= self.bounds.lb[j] { self.bounds.lb[j] } else { self.bounds.ub[j] };
                }
            }
            if !free.is_empty() {
                let fixed: Vec<usize> = (0..n).filter(|j| !free.contains(j)).collect();
                let h_ff = self.h.select_rows(&free).select_columns(&free);
                let mut rhs = -self.c.select_rows(&free);
                if !fixed.is_empty() {
                    rhs -= self.h.select_rows(&free).select_columns(&fixed) * next.select_rows(&fixed);
                }
                let sol = Cholesky::new(h_ff)?.solve(&rhs);
                for (k, &j) in free.iter().enumerate() {
                    next[j] = sol[k];
                }
            }
            u = self.bounds.project(&next);
            let gap = self.gap(&u);
            if best.as_ref().is_none_or(|(_, b)| gap < *b) {
                best = Some((u.clone(), gap));
            }
            last_free = Some(free);
        }
        best
    }

    /// FISTA with function-value restart.
    fn accelerated(&self, start: &DVector<f64>, rounds: usize) -> DVector<f64> {
        let step = 1.0 / self.lmax;
        let mut x = start.clone();
        let mut y = x.clone();
        let mut fx = self.value(&x);
        let mut t = 1.0f64;
        for _ in 0..rounds {
            let g = self.gradient(&y);
            let next = self.bounds.project(&(&y - g * step));
            let fnext = self.value(&next);
            if fnext > fx {
                y = x.clone();
                t = 1.0;
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            y = self.bounds.project(&y);
            x = next;
            fx = fnext;
            t = t_next;
        }
        x
    }
}
