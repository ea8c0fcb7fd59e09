use std::io::Write;

use nalgebra::DVector;
use serde::Serialize;

use super::{certificates, Method, OuterParams};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceLevel {
    /// Scalars only.
    #[default]
    Summary,
    /// Scalars plus `λ^k`, `λ̂^k` and `ū^k` for every iteration.
    Full,
}

#[derive(Debug, Clone)]
pub struct IterRecord {
    pub k: usize,
    pub d_bar: f64,
    pub grad_norm: f64,
    /// `‖[h(û^k)]₊‖`.
    pub feas_violation: f64,
    /// `F(û^k)`.
    pub primal_value: f64,
    pub inner_iterations: usize,
    pub inner_gap: f64,
    pub inner_certified: bool,
    pub lambda: Option<DVector<f64>>,
    pub lambda_hat: Option<DVector<f64>>,
    pub u_bar: Option<DVector<f64>>,
}

/// Per-iteration history of one outer run.
#[derive(Debug, Clone)]
pub struct OuterTrace {
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    pub k_out: usize,
    pub l_used: f64,
    pub r_d: Option<f64>,
    pub lambda0_norm: f64,
    pub records: Vec<IterRecord>,
    /// Final `S^k` (IDG, subgradient) or `Σ(s+1)` (IDFG).
    pub weight_sum: f64,
    /// Final IDFG running sum `z`.
    pub z: DVector<f64>,
}

#[derive(Serialize)]
struct CsvRow {
    k: usize,
    d_bar: f64,
    feas_violation: f64,
    primal_value: f64,
    dual_bound: Option<f64>,
    feas_bound: Option<f64>,
    primal_upper: Option<f64>,
    primal_lower: Option<f64>,
    inner_iters: usize,
    method: Method,
    eps_out: f64,
    eps_in: f64,
    k_out: usize,
    seed: Option<u64>,
}

impl OuterTrace {
    pub(crate) fn new(params: &OuterParams) -> Self {
        Self {
            method: params.method,
            eps_out: params.eps_out,
            eps_in: params.eps_in,
            k_out: params.k_out,
            l_used: match params.method {
                Method::Idg => params.l_used,
                _ => params.l_d,
            },
            r_d: params.r_d,
            lambda0_norm: params.lambda0_norm(),
            records: Vec::new(),
            weight_sum: 0.0,
            z: DVector::zeros(0),
        }
    }

    pub(crate) fn push(&mut self, rec: IterRecord) {
        self.records.push(rec);
    }

    pub(crate) fn finish(&mut self, weight_sum: f64, z: DVector<f64>) {
        self.weight_sum = weight_sum;
        self.z = z;
    }

    pub fn last_k(&self) -> Option<usize> {
        self.records.last().map(|r| r.k)
    }

    pub fn total_inner_iterations(&self) -> usize {
        self.records.iter().map(|r| r.inner_iterations).sum()
    }

    /// Whether every inner solve ended with gap bound `≤ ε_in/3`.
    pub fn all_inner_certified(&self) -> bool {
        self.records.iter().all(|r| r.inner_certified)
    }

    /// Writes the trace as CSV; bound columns are empty without `R_d`.
    pub fn write_csv<W: Write>(&self, out: W, seed: Option<u64>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            let c = self
                .r_d
                .map(|rd| certificates(self.method, r.k, self.eps_in, self.l_used, rd, self.lambda0_norm));
            w.serialize(CsvRow {
                k: r.k,
                d_bar: r.d_bar,
                feas_violation: r.feas_violation,
                primal_value: r.primal_value,
                dual_bound: c.map(|c| c.dual_subopt_bound),
                feas_bound: c.map(|c| c.feas_violation_bound),
                primal_upper: c.map(|c| c.primal_subopt_upper),
                primal_lower: c.map(|c| -c.primal_subopt_lower),
                inner_iters: r.inner_iterations,
                method: self.method,
                eps_out: self.eps_out,
                eps_in: self.eps_in,
                k_out: self.k_out,
                seed,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use crate::dual::{solve, Method, OuterParams};
    use crate::model::fixtures::two_var_qp;

    #[test]
    fn csv_has_documented_header() {
        let qp = two_var_qp();
        let params = OuterParams::from_rule(&qp, Method::Idfg, 0.05, 0.5).unwrap();
        let out = solve(&qp, &params).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf, Some(3)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,d_bar,feas_violation,primal_value,dual_bound,feas_bound,primal_upper,primal_lower,inner_iters,method,eps_out,eps_in,k_out,seed"
        );
        assert_eq!(lines.count(), params.k_out + 1);
        assert!(text.contains(",idfg,0.05,"));
    }
}
