//! Linear network systems `x_i⁺ = Σ_j A_ij x_j + B_ij u_j`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// States and inputs of neighbors both enter the dynamics.
    General,
    /// Only neighbor inputs enter: `A_ij = 0` for `j ≠ i`.
    InputCoupled,
}

/// One subsystem; `a[k]` and `b[k]` belong to `neighbors[k]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subsystem {
    pub nx: usize,
    pub nu: usize,
    pub neighbors: Vec<usize>,
    #[serde(with = "mat_list")]
    pub a: Vec<DMatrix<f64>>,
    #[serde(with = "mat_list")]
    pub b: Vec<DMatrix<f64>>,
    #[serde(with = "mat")]
    pub q: DMatrix<f64>,
    #[serde(with = "mat")]
    pub r: DMatrix<f64>,
    #[serde(with = "mat")]
    pub p: DMatrix<f64>,
    #[serde(with = "lower")]
    pub x_lb: DVector<f64>,
    #[serde(with = "upper")]
    pub x_ub: DVector<f64>,
    #[serde(with = "lower")]
    pub u_lb: DVector<f64>,
    #[serde(with = "upper")]
    pub u_ub: DVector<f64>,
    #[serde(with = "lower")]
    pub xf_lb: DVector<f64>,
    #[serde(with = "upper")]
    pub xf_ub: DVector<f64>,
}

/// Terminal feedback `u = Kx` and a full terminal weight overriding
/// `blockdiag(P_i)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Terminal {
    #[serde(with = "mat")]
    pub k: DMatrix<f64>,
    #[serde(with = "mat")]
    pub p: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSystem {
    pub mode: CouplingMode,
    pub subsystems: Vec<Subsystem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<Terminal>,
}

impl NetworkSystem {
    pub fn m(&self) -> usize {
        self.subsystems.len()
    }

    pub fn nx(&self) -> usize {
        self.subsystems.iter().map(|s| s.nx).sum()
    }

    pub fn nu(&self) -> usize {
        self.subsystems.iter().map(|s| s.nu).sum()
    }

    pub fn x_offsets(&self) -> Vec<usize> {
        offsets(self.subsystems.iter().map(|s| s.nx))
    }

    pub fn u_offsets(&self) -> Vec<usize> {
        offsets(self.subsystems.iter().map(|s| s.nu))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::InvalidProblem("network has no subsystems".into()));
        }
        for (i, s) in self.subsystems.iter().enumerate() {
            let bad = |msg: String| Err(Error::Dimension(format!("subsystem {i}: {msg}")));
            if !s.neighbors.contains(&i) {
                return bad("neighbor set must contain the subsystem itself".into());
            }
            if s.a.len() != s.neighbors.len() || s.b.len() != s.neighbors.len() {
                return bad("one A and one B block per neighbor".into());
            }
            for (k, &j) in s.neighbors.iter().enumerate() {
                if j >= m {
                    return bad(format!("neighbor {j} out of range"));
                }
                let other = &self.subsystems[j];
                if s.a[k].shape() != (s.nx, other.nx) || s.b[k].shape() != (s.nx, other.nu) {
                    return bad(format!("A/B block for neighbor {j} has the wrong shape"));
                }
                if self.mode == CouplingMode::InputCoupled && j != i && s.a[k].amax() != 0.0 {
                    return bad(format!("input-coupled mode needs A_{i}{j} = 0"));
                }
            }
            for (name, w, d) in [("Q", &s.q, s.nx), ("R", &s.r, s.nu), ("P", &s.p, s.nx)] {
                if w.shape() != (d, d) {
                    return bad(format!("{name} must be {d}x{d}"));
                }
                if (w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0) || linalg::lambda_min(w) <= 0.0 {
                    return Err(Error::InvalidProblem(format!("subsystem {i}: {name} not symmetric positive definite")));
                }
            }
            for (name, v, d) in [
                ("x_lb", &s.x_lb, s.nx),
                ("x_ub", &s.x_ub, s.nx),
                ("u_lb", &s.u_lb, s.nu),
                ("u_ub", &s.u_ub, s.nu),
                ("xf_lb", &s.xf_lb, s.nx),
                ("xf_ub", &s.xf_ub, s.nx),
            ] {
                if v.len() != d {
                    return bad(format!("{name} must have {d} entries"));
                }
            }
        }
        if let Some(t) = &self.terminal {
            if t.k.shape() != (self.nu(), self.nx()) || t.p.shape() != (self.nx(), self.nx()) {
                return Err(Error::Dimension("terminal K must be nu x nx and P nx x nx".into()));
            }
        }
        Ok(())
    }

    /// Global `A` and `B`.
    pub fn dynamics(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (nx, nu) = (self.nx(), self.nu());
        let (xo, uo) = (self.x_offsets(), self.u_offsets());
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        for (i, s) in self.subsystems.iter().enumerate() {
            for (k, &j) in s.neighbors.iter().enumerate() {
                let other = &self.subsystems[j];
                a.view_mut((xo[i], xo[j]), (s.nx, other.nx)).copy_from(&s.a[k]);
                b.view_mut((xo[i], uo[j]), (s.nx, other.nu)).copy_from(&s.b[k]);
            }
        }
        (a, b)
    }

    pub fn state_weight(&self) -> DMatrix<f64> {
        block_diag(self.subsystems.iter().map(|s| &s.q))
    }

    pub fn input_weight(&self) -> DMatrix<f64> {
        block_diag(self.subsystems.iter().map(|s| &s.r))
    }

    /// `P` from the terminal ingredients, else `blockdiag(P_i)`.
    pub fn terminal_weight(&self) -> DMatrix<f64> {
        match &self.terminal {
            Some(t) => t.p.clone(),
            None => block_diag(self.subsystems.iter().map(|s| &s.p)),
        }
    }

    pub fn stacked(&self, pick: impl Fn(&Subsystem) -> &DVector<f64>) -> DVector<f64> {
        let parts: Vec<f64> = self.subsystems.iter().flat_map(|s| pick(s).iter().cloned()).collect();
        DVector::from_vec(parts)
    }

    /// `‖x‖²_Q`.
    pub fn state_cost(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(self.state_weight() * x))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sys: Self = serde_json::from_str(s)?;
        sys.validate()?;
        Ok(sys)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

pub(crate) fn block_diag<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let n: usize = blocks.clone().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), b.shape()).copy_from(b);
        o += b.nrows();
    }
    out
}

mod mat {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        crate::model::matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

mod mat_list {
    use nalgebra::DMatrix;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(ms.len()))?;
        for m in ms {
            seq.serialize_element(&crate::model::matrix_to_rows(m))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
        all.into_iter()
            .map(|rows| {
                let ncols = rows.first().map_or(0, |r| r.len());
                if rows.iter().any(|r| r.len() != ncols) {
                    return Err(serde::de::Error::custom("ragged matrix"));
                }
                Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
            })
            .collect()
    }
}

/// Vectors with `null` for infinite entries.
mod bounds {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| x.is_finite().then_some(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn read<'de, D: Deserializer<'de>>(d: D, missing: f64) -> Result<DVector<f64>, D::Error> {
        let raw = Vec::<Option<f64>>::deserialize(d)?;
        Ok(DVector::from_iterator(raw.len(), raw.iter().map(|x| x.unwrap_or(missing))))
    }
}

mod lower {
    pub use super::bounds::serialize;

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<nalgebra::DVector<f64>, D::Error> {
        super::bounds::read(d, f64::NEG_INFINITY)
    }
}

mod upper {
    pub use super::bounds::serialize;

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<nalgebra::DVector<f64>, D::Error> {
        super::bounds::read(d, f64::INFINITY)
    }
}
