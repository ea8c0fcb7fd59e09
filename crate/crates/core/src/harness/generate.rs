//! Seeded instance generators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{BlockPartition, BoxSet, CoupledQp};
use crate::mpc::{self, CouplingMode, NetworkSystem, Subsystem};

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random QP with `H = H₀ᵀH₀ + I`, a `2n × n` Gaussian coupling matrix,
/// box `[−1, 1]ⁿ`, `q ~ U[−1, 1]` and `g_j = −|U[−1, 1]| − 0.1`, so that
/// `u = 0` is strictly feasible. Blocks are singletons.
pub fn gen_random_qp(n: usize, seed: u64) -> Result<CoupledQp> {
    if n < 2 {
        return Err(Error::InvalidParameter("random QP needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h0 = normal_matrix(&mut rng, n, n);
    let h = h0.transpose() * &h0 + DMatrix::identity(n, n);
    let g = normal_matrix(&mut rng, 2 * n, n);
    let q = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
    let offset = DVector::from_fn(2 * n, |_, _| -rng.random_range(-1.0f64..=1.0).abs() - 0.1);
    CoupledQp::new(
        crate::linalg::symmetrize(&h),
        q,
        g,
        offset,
        BoxSet::symmetric(n, 1.0),
        BlockPartition::singletons(n)?,
    )
}

/// Flow constants of the ring traffic generator, in vehicles per step
/// before normalization.
#[derive(Debug, Clone)]
pub struct TrafficParams {
    /// Arrivals on each input link are drawn from this range.
    pub demand: (f64, f64),
    /// Exit fraction at output junctions.
    pub exit_ratio: (f64, f64),
    pub ring_capacity: f64,
    pub input_capacity: f64,
    /// Outflow limits as multiples of the equilibrium flow.
    pub flow_headroom: f64,
    /// Equilibrium queue as a fraction of capacity.
    pub nominal_fill: f64,
    /// Initial queues as a fraction of the distance to the upper bound.
    pub initial_fill: (f64, f64),
    /// Initial states are kept only if the MPC problem has a point with
    /// at least this coupling slack.
    pub min_slack: f64,
    pub state_weight: f64,
    pub input_weight: f64,
    /// States and flows are divided by this.
    pub scale: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            demand: (150.0, 250.0),
            exit_ratio: (0.3, 0.5),
            ring_capacity: 1000.0,
            input_capacity: 600.0,
            flow_headroom: 1.5,
            nominal_fill: 0.5,
            initial_fill: (0.45, 0.85),
            min_slack: 5e-3,
            state_weight: 1e-3,
            input_weight: 1e-2,
            scale: 1e3,
        }
    }
}

/// Ring of `m` junctions. Junction `i` owns the ring link entering it;
/// even junctions also own an input link merging into the next ring
/// link, odd junctions send a fraction of their outflow off the ring.
/// States are queue deviations from the equilibrium, inputs are outflow
/// deviations, both divided by `scale`.
pub fn gen_ring_traffic(
    m: usize,
    horizon: usize,
    seed: u64,
    instances: usize,
    params: &TrafficParams,
) -> Result<(NetworkSystem, Vec<DVector<f64>>)> {
    if m < 4 || m % 2 != 0 {
        return Err(Error::InvalidParameter("ring traffic needs an even junction count >= 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let demand: Vec<f64> = (0..m).map(|i| if i % 2 == 0 { rng.random_range(params.demand.0..=params.demand.1) } else { 0.0 }).collect();
    let exit: Vec<f64> = (0..m)
        .map(|i| if i % 2 == 1 { rng.random_range(params.exit_ratio.0..=params.exit_ratio.1) } else { 0.0 })
        .collect();
    // ring flows: F_{i+1} = (1 − ρ_i)·F_i + d_i
    let mut shift = DMatrix::<f64>::identity(m, m);
    for i in 0..m {
        shift[((i + 1) % m, i)] -= 1.0 - exit[i];
    }
    let inj = DVector::from_fn(m, |r, _| demand[(r + m - 1) % m]);
    let flows = shift.lu().solve(&inj).ok_or_else(|| Error::InvalidProblem("ring has no equilibrium".into()))?;

    let s = params.scale;
    let eye = |n: usize| DMatrix::<f64>::identity(n, n);
    let nx = |i: usize| if i % 2 == 0 { 2 } else { 1 };
    let mut subsystems = Vec::with_capacity(m);
    for i in 0..m {
        let prev = (i + m - 1) % m;
        let next = (i + 1) % m;
        let n_i = nx(i);
        let mut b_prev = DMatrix::zeros(n_i, nx(prev));
        b_prev[(0, 0)] = 1.0 - exit[prev];
        if prev % 2 == 0 {
            b_prev[(0, 1)] = 1.0;
        }
        let mut x_ub = DVector::from_element(n_i, params.ring_capacity);
        let mut u_ub = DVector::from_element(n_i, params.flow_headroom * flows[i]);
        let mut u_eq = DVector::from_element(n_i, flows[i]);
        if n_i == 2 {
            x_ub[1] = params.input_capacity;
            u_ub[1] = params.flow_headroom * demand[i];
            u_eq[1] = demand[i];
        }
        let x_eq = &x_ub * params.nominal_fill;
        subsystems.push(Subsystem {
            nx: n_i,
            nu: n_i,
            neighbors: vec![prev, i, next],
            a: vec![DMatrix::zeros(n_i, nx(prev)), eye(n_i), DMatrix::zeros(n_i, nx(next))],
            b: vec![b_prev, -eye(n_i), DMatrix::zeros(n_i, nx(next))],
            q: eye(n_i) * params.state_weight,
            r: eye(n_i) * params.input_weight,
            p: eye(n_i),
            x_lb: -&x_eq / s,
            x_ub: (&x_ub - &x_eq) / s,
            u_lb: -&u_eq / s,
            u_ub: (&u_ub - &u_eq) / s,
            xf_lb: -&x_eq / s,
            xf_ub: (&x_ub - &x_eq) / s,
        });
    }
    let sys = NetworkSystem { mode: CouplingMode::InputCoupled, subsystems, terminal: None };
    let sys = mpc::default_terminal(&sys)?;
    let c = mpc::condense(&sys, horizon)?;
    let x_ub = sys.stacked(|s| &s.x_ub);
    let mut states = Vec::with_capacity(instances);
    let mut attempts = 0;
    while states.len() < instances {
        attempts += 1;
        if attempts > 50 * instances.max(1) {
            return Err(Error::Infeasible("could not draw feasible initial states".into()));
        }
        let x0 = DVector::from_fn(x_ub.len(), |j, _| x_ub[j] * rng.random_range(params.initial_fill.0..=params.initial_fill.1));
        let qp = c.instantiate(&x0)?;
        if mpc::find_slater_with_margin(&qp, &[], params.min_slack).is_ok() {
            states.push(x0);
        }
    }
    Ok((sys, states))
}

/// Small random input-coupled chain with a verified terminal set and an
/// initial state whose feedback rollout is strictly feasible.
pub fn gen_input_coupled(m: usize, horizon: usize, seed: u64) -> Result<(NetworkSystem, DVector<f64>)> {
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one subsystem".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Vec<(usize, usize)> = (0..m).map(|_| (rng.random_range(1..=2), rng.random_range(1..=2))).collect();
    for _ in 0..20 {
        let mut subsystems = Vec::with_capacity(m);
        for i in 0..m {
            let (nx, nu) = dims[i];
            let neighbors: Vec<usize> = [i.checked_sub(1), Some(i), (i + 1 < m).then_some(i + 1)].into_iter().flatten().collect();
            let mut a = Vec::new();
            let mut b = Vec::new();
            for &j in &neighbors {
                let (nxj, nuj) = dims[j];
                if j == i {
                    a.push(DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-0.6..=0.6)) + DMatrix::identity(nx, nx) * 0.5);
                    b.push(DMatrix::from_fn(nx, nuj, |_, _| rng.random_range(0.5..=1.0) * if rng.random() { 1.0 } else { -1.0 }));
                } else {
                    a.push(DMatrix::zeros(nx, nxj));
                    b.push(DMatrix::from_fn(nx, nuj, |_, _| rng.random_range(-0.3..=0.3)));
                }
            }
            let x_box = rng.random_range(0.8..=1.5);
            let u_box = rng.random_range(0.8..=1.5);
            subsystems.push(Subsystem {
                nx,
                nu,
                neighbors,
                a,
                b,
                q: DMatrix::identity(nx, nx),
                r: DMatrix::identity(nu, nu) * rng.random_range(0.5..=2.0),
                p: DMatrix::identity(nx, nx),
                x_lb: DVector::from_element(nx, -x_box),
                x_ub: DVector::from_element(nx, x_box),
                u_lb: DVector::from_element(nu, -u_box),
                u_ub: DVector::from_element(nu, u_box),
                xf_lb: DVector::from_element(nx, -x_box),
                xf_ub: DVector::from_element(nx, x_box),
            });
        }
        let sys = NetworkSystem { mode: CouplingMode::InputCoupled, subsystems, terminal: None };
        let Ok(sys) = mpc::default_terminal(&sys) else { continue };
        let xf_ub = sys.stacked(|s| &s.xf_ub);
        let x0 = DVector::from_fn(xf_ub.len(), |j, _| xf_ub[j] * rng.random_range(-0.9..=0.9));
        let c = mpc::condense(&sys, horizon)?;
        if c.p() == 0 {
            continue;
        }
        let qp = c.instantiate(&x0)?;
        let Some(slater) = mpc::fixtures::feedback_rollout(&c, &x0) else { continue };
        if crate::model::min_slack(&qp, &slater)? > 0.0 {
            return Ok((sys, x0));
        }
    }
    Err(Error::InvalidProblem("no stabilizable random system found".into()))
}
