//! JSON problem format.
//!
//! ```json
//! {"n": 2, "p": 1, "blocks": [1, 1],
//!  "H": [[1, 0], [0, 1]], "q": [0, 0],
//!  "G": [[-1, -1]], "g": [1],
//!  "lb": [-10, -10], "ub": [10, null],
//!  "sparsity": {"row_blocks": [1], "h_pairs": [[0, 0], [1, 1]], "g_pairs": [[0, 0], [0, 1]]}}
//! ```
//!
//! Matrices are row-major nested arrays. A `null` bound is an infinite one
//! (`-inf` in `lb`, `+inf` in `ub`).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BlockPartition, BoxSet, CoupledQp, Sparsity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityJson {
    pub row_blocks: Vec<usize>,
    pub h_pairs: Vec<(usize, usize)>,
    pub g_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemJson {
    pub n: usize,
    pub p: usize,
    pub blocks: Vec<usize>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    #[serde(rename = "G")]
    pub g_mat: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub lb: Vec<Option<f64>>,
    pub ub: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityJson>,
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn bound_to_json(v: &DVector<f64>) -> Vec<Option<f64>> {
    v.iter().map(|&x| x.is_finite().then_some(x)).collect()
}

fn bound_from_json(v: &[Option<f64>], missing: f64) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|x| x.unwrap_or(missing)))
}

impl From<&CoupledQp> for ProblemJson {
    fn from(qp: &CoupledQp) -> Self {
        Self {
            n: qp.n(),
            p: qp.p(),
            blocks: qp.partition.sizes().to_vec(),
            h: matrix_to_rows(&qp.hessian),
            q: qp.linear.iter().cloned().collect(),
            g_mat: matrix_to_rows(&qp.coupling),
            g: qp.offset.iter().cloned().collect(),
            lb: bound_to_json(&qp.bounds.lb),
            ub: bound_to_json(&qp.bounds.ub),
            sparsity: qp.sparsity.as_ref().map(|s| SparsityJson {
                row_blocks: s.row_blocks.sizes().to_vec(),
                h_pairs: s.h_pairs(),
                g_pairs: s.g_pairs(),
            }),
        }
    }
}

impl TryFrom<ProblemJson> for CoupledQp {
    type Error = Error;

    fn try_from(j: ProblemJson) -> Result<Self> {
        let partition = BlockPartition::new(j.blocks)?;
        let qp = CoupledQp::new(
            rows_to_matrix(&j.h, j.n, j.n, "H")?,
            DVector::from_vec(j.q),
            rows_to_matrix(&j.g_mat, j.p, j.n, "G")?,
            DVector::from_vec(j.g),
            BoxSet::new(bound_from_json(&j.lb, f64::NEG_INFINITY), bound_from_json(&j.ub, f64::INFINITY))?,
            partition,
        )?;
        match j.sparsity {
            Some(s) => {
                let rows = BlockPartition::new(s.row_blocks)?;
                let sp = Sparsity::from_pairs(qp.block_count(), rows, &s.h_pairs, &s.g_pairs)?;
                qp.with_sparsity(sp)
            }
            None => Ok(qp),
        }
    }
}

impl CoupledQp {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ProblemJson>(s)?.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::two_var_qp;
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut qp = two_var_qp();
        qp.bounds.ub[1] = f64::INFINITY;
        let rows = BlockPartition::new(vec![1]).unwrap();
        let qp = qp
            .with_sparsity(Sparsity::from_pairs(2, rows, &[(0, 0), (1, 1)], &[(0, 0), (0, 1)]).unwrap())
            .unwrap();
        let back = CoupledQp::from_json(&qp.to_json().unwrap()).unwrap();
        assert_eq!(back.hessian, qp.hessian);
        assert_eq!(back.coupling, qp.coupling);
        assert_eq!(back.offset, qp.offset);
        assert_eq!(back.bounds, qp.bounds);
        assert_eq!(back.partition, qp.partition);
        assert_eq!(back.sparsity, qp.sparsity);
    }

    #[test]
    fn null_bounds_are_infinite() {
        let s = r#"{"n":1,"p":1,"blocks":[1],"H":[[2]],"q":[0],"G":[[1]],"g":[-1],"lb":[null],"ub":[null]}"#;
        let qp = CoupledQp::from_json(s).unwrap();
        assert_eq!(qp.bounds.lb[0], f64::NEG_INFINITY);
        assert_eq!(qp.bounds.ub[0], f64::INFINITY);
    }

    #[test]
    fn ragged_matrix_is_rejected() {
        let s = r#"{"n":2,"p":1,"blocks":[2],"H":[[1,0],[0]],"q":[0,0],"G":[[1,1]],"g":[-1],"lb":[0,0],"ub":[1,1]}"#;
        assert!(matches!(CoupledQp::from_json(s), Err(Error::Dimension(_))));
    }
}
