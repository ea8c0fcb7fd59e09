//! Dual decomposition for strongly convex QPs with coupling inequalities.
//!
//! The crate solves
//!
//! ```text
//! min ½ uᵀHu + qᵀu   s.t.  Gu + g ≤ 0,  lb ≤ u ≤ ub
//! ```
//!
//! by dualizing the coupling rows. The outer loop runs an inexact dual
//! gradient ([`dual::Method::Idg`]) or inexact dual fast gradient
//! ([`dual::Method::Idfg`]) method; each outer step solves the box-constrained
//! Lagrangian minimization with parallel coordinate descent ([`pcd`]). Every
//! run comes with a-priori certificates on dual suboptimality, primal
//! feasibility violation and primal suboptimality.
//!
//! [`mpc`] turns linear network systems into condensed QPs, tightens the
//! coupling rows and runs a receding-horizon loop with feasibility and
//! Lyapunov bookkeeping. [`oracle`] is an independent high-accuracy
//! reference solver, and [`harness`] contains generators, studies and the CLI.
//!
//! ```
//! use dual_mpc::{dual, model, oracle};
//! use nalgebra::{DMatrix, DVector};
//!
//! let qp = model::CoupledQp::new(
//!     DMatrix::identity(2, 2),
//!     DVector::zeros(2),
//!     DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]),
//!     DVector::from_element(1, 1.0),
//!     model::BoxSet::symmetric(2, 10.0),
//!     model::BlockPartition::singletons(2).unwrap(),
//! )
//! .unwrap();
//! let reference = oracle::reference_solve(&qp, 1e-10).unwrap();
//! let params = dual::OuterParams::from_rule(&qp, dual::Method::Idfg, 1e-2, 0.5).unwrap();
//! let out = dual::solve(&qp, &params).unwrap();
//! assert!(model::feasibility_violation(&qp, &out.u_hat).unwrap() <= 0.12);
//! assert!((model::objective(&qp, &out.u_hat).unwrap() - reference.f_star).abs() <= 0.06);
//! ```

pub mod dual;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod oracle;
pub mod pcd;

pub use error::{Error, Result};
pub use model::{BlockPartition, BoxSet, CoupledQp, ProblemConstants};
