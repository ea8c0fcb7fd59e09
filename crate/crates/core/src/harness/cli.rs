//! `dual-mpc` command line.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::generate::{gen_input_coupled, gen_random_qp, gen_ring_traffic, TrafficParams};
use super::study::{run_study, Experiment, ExperimentConfig};
use crate::dual::{self, CertificateSet, Method, OuterParams};
use crate::error::{Error, Result};
use crate::model::{self, CoupledQp};
use crate::mpc::{self, NetworkSystem};
use crate::oracle::{self, KktResiduals};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dual-mpc", version, about = "Inexact dual gradient solvers for coupled QPs and distributed MPC")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a problem JSON and write the solution JSON.
    Solve(SolveArgs),
    /// Run a receding-horizon closed loop on a system JSON.
    Mpc(MpcArgs),
    /// Write a generated instance as JSON.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Run an experiment and write its CSV.
    Study(StudyArgs),
    /// KKT report for a solution JSON.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Idg,
    Idfg,
    Subgrad,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Idg => Method::Idg,
            MethodArg::Idfg => Method::Idfg,
            MethodArg::Subgrad => Method::Subgrad,
        }
    }
}

#[derive(Debug, Args)]
struct SolveArgs {
    problem: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    eps_out: f64,
    /// Overrides the rule's inner accuracy.
    #[arg(long)]
    eps_in: Option<f64>,
    /// Multiplier bound; defaults to the Slater bound at a phase-one point.
    #[arg(long)]
    r_d: Option<f64>,
    /// Echoed into the trace CSV.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MpcArgs {
    system: PathBuf,
    #[arg(long)]
    horizon: usize,
    #[arg(long)]
    steps: usize,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Vec<f64>,
    #[arg(long, value_enum, default_value = "idfg")]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-2)]
    eps_out: f64,
    /// Reuse the previous multipliers (disables certificates).
    #[arg(long)]
    warm: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum GenCommand {
    /// Random QP with a Slater point at the origin.
    RandomQp {
        #[arg(short = 'n', long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ring traffic network; initial states go to `--states`.
    Traffic {
        #[arg(short = 'm', long, default_value_t = 6)]
        junctions: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long)]
        states: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Small random input-coupled chain; the initial state goes to `--states`.
    InputCoupled {
        #[arg(short = 'm', long, default_value_t = 3)]
        subsystems: usize,
        #[arg(long, default_value_t = 3)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        states: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Built-in hand-solvable instances.
    Fixture {
        #[arg(value_enum)]
        name: FixtureArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FixtureArg {
    TwoVarQp,
    ScalarMpc,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Experiment config JSON; blank fields take the experiment defaults.
    config: Option<PathBuf>,
    /// Experiment to run when no config is given.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    full: bool,
    /// Restricts the seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    eps_out: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    eps_in: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    method: Vec<MethodArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    solution: PathBuf,
    problem: PathBuf,
    /// Compare against the reference solver as well.
    #[arg(long)]
    reference: bool,
}

/// Output of `solve`, input of `verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub method: Method,
    pub eps_out: f64,
    pub eps_in: f64,
    pub k_out: usize,
    pub r_d: f64,
    pub seed: Option<u64>,
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub violation: f64,
    pub certificates: Option<CertificateSet>,
}

#[derive(Debug, Clone, Serialize)]
struct VerifyReport {
    objective: f64,
    violation: f64,
    min_slack: f64,
    kkt: KktResiduals,
    kkt_max: f64,
    reference_objective: Option<f64>,
    subopt: Option<f64>,
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match with_threads(cli.threads, || dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) | Error::SlaterViolation { .. } | Error::ShiftInfeasible { .. } | Error::Admissibility { .. } => {
            EXIT_INFEASIBLE
        }
        Error::Io(_) | Error::Json(_) | Error::InvalidParameter(_) | Error::Dimension(_) | Error::InvalidProblem(_) => {
            EXIT_USAGE
        }
        _ => EXIT_NUMERIC,
    }
}

fn with_threads(threads: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match threads {
        #[cfg(feature = "parallel")]
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .install(f),
        #[cfg(not(feature = "parallel"))]
        Some(_) => {
            log::warn!("built without the parallel feature; --threads ignored");
            f()
        }
        None => f(),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    let mut w = output(path)?;
    w.write_all(text.as_bytes())?;
    if path.is_none() {
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Solve(a) => solve(a),
        Command::Mpc(a) => run_mpc(a),
        Command::Gen(g) => generate(g),
        Command::Study(a) => study(a),
        Command::Verify(a) => verify(a),
    }
}

/// Slater bound at `λ̃ = 0` from a phase-one point.
fn default_r_d(qp: &CoupledQp) -> Result<f64> {
    let slater = mpc::find_slater(qp, &[])?;
    Ok(mpc::slater_bound_at_zero(qp, &slater, 1e-10)?.max(mpc::R_MIN))
}

fn solve(a: SolveArgs) -> Result<()> {
    let qp = CoupledQp::load(&a.problem)?;
    let method = Method::from(a.method);
    let r_d = match a.r_d {
        Some(r) => r,
        None => default_r_d(&qp)?,
    };
    let mut params = OuterParams::from_rule(&qp, method, a.eps_out, r_d)?;
    if let Some(e) = a.eps_in {
        params = params.with_eps_in(e);
    }
    let out = dual::solve(&qp, &params)?;
    let certificates =
        (method != Method::Subgrad).then(|| dual::certificates(method, params.k_out, params.eps_in, params.l_used, r_d, 0.0));
    let file = SolutionFile {
        method,
        eps_out: a.eps_out,
        eps_in: params.eps_in,
        k_out: params.k_out,
        r_d,
        seed: a.seed,
        objective: model::objective(&qp, &out.u_hat)?,
        violation: model::feasibility_violation(&qp, &out.u_hat)?,
        u: out.u_hat.iter().copied().collect(),
        lambda: out.lambda_hat.iter().copied().collect(),
        certificates,
    };
    if let Some(t) = &a.trace {
        out.trace.write_csv(File::create(t)?, a.seed)?;
    }
    write_text(a.out.as_deref(), &serde_json::to_string_pretty(&file)?)
}

fn run_mpc(a: MpcArgs) -> Result<()> {
    let mut sys = NetworkSystem::load(&a.system)?;
    if sys.terminal.is_none() {
        sys = mpc::default_terminal(&sys)?;
    }
    if a.x0.len() != sys.nx() {
        return Err(Error::Dimension(format!("--x0 has {} entries, the system has {} states", a.x0.len(), sys.nx())));
    }
    let x0 = DVector::from_vec(a.x0);
    let c = mpc::condense(&sys, a.horizon)?;
    let qp = c.instantiate(&x0)?;
    let rollout: Vec<DVector<f64>> = mpc::fixtures::feedback_rollout(&c, &x0).into_iter().collect();
    let slater = mpc::find_slater(&qp, &rollout)?;
    let mut cfg = mpc::ClosedLoopConfig::new(a.method.into(), a.steps, a.eps_out);
    cfg.warm_lambda = a.warm;
    let trace = mpc::closed_loop(&sys, a.horizon, &x0, &slater, &cfg)?;
    trace.write_csv(output(a.out.as_deref())?)
}

fn save_states(path: Option<&Path>, states: &[DVector<f64>]) -> Result<()> {
    if let Some(p) = path {
        let rows: Vec<Vec<f64>> = states.iter().map(|x| x.iter().copied().collect()).collect();
        std::fs::write(p, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn generate(g: GenCommand) -> Result<()> {
    match g {
        GenCommand::RandomQp { n, seed, out } => write_text(out.as_deref(), &gen_random_qp(n, seed)?.to_json()?),
        GenCommand::Traffic { junctions, horizon, seed, instances, states, out } => {
            let (sys, xs) = gen_ring_traffic(junctions, horizon, seed, instances, &TrafficParams::default())?;
            save_states(states.as_deref(), &xs)?;
            write_text(out.as_deref(), &sys.to_json()?)
        }
        GenCommand::InputCoupled { subsystems, horizon, seed, states, out } => {
            let (sys, x0) = gen_input_coupled(subsystems, horizon, seed)?;
            save_states(states.as_deref(), &[x0])?;
            write_text(out.as_deref(), &sys.to_json()?)
        }
        GenCommand::Fixture { name, out } => {
            let text = match name {
                FixtureArg::TwoVarQp => model::fixtures::two_var_qp().to_json()?,
                FixtureArg::ScalarMpc => mpc::fixtures::scalar_mpc().to_json()?,
            };
            write_text(out.as_deref(), &text)
        }
    }
}

fn study(a: StudyArgs) -> Result<()> {
    let mut cfg = match (&a.config, &a.experiment) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig { experiment: name.parse::<Experiment>()?, ..Default::default() },
        (None, None) => return Err(Error::InvalidParameter("study needs a config file or --experiment".into())),
    };
    cfg.full |= a.full;
    if !a.seed.is_empty() {
        cfg.seeds = a.seed;
    }
    if !a.eps_out.is_empty() {
        cfg.eps_out = a.eps_out;
    }
    if !a.eps_in.is_empty() {
        cfg.eps_in = a.eps_in;
    }
    if !a.method.is_empty() {
        cfg.methods = a.method.into_iter().map(Method::from).collect();
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let table = run_study(&cfg)?;
    table.write_csv(output(cfg.out.as_deref())?)
}

fn verify(a: VerifyArgs) -> Result<()> {
    let qp = CoupledQp::load(&a.problem)?;
    let sol: SolutionFile = serde_json::from_str(&std::fs::read_to_string(&a.solution)?)?;
    let u = DVector::from_vec(sol.u);
    let lambda = DVector::from_vec(sol.lambda);
    let kkt = oracle::kkt_residual(&qp, &u, &lambda)?;
    let objective = model::objective(&qp, &u)?;
    let reference = if a.reference { Some(oracle::reference_solve(&qp, 1e-10)?.f_star) } else { None };
    let report = VerifyReport {
        objective,
        violation: model::feasibility_violation(&qp, &u)?,
        min_slack: model::min_slack(&qp, &u)?,
        kkt,
        kkt_max: kkt.max(),
        reference_objective: reference,
        subopt: reference.map(|f| objective - f),
    };
    write_text(None, &serde_json::to_string_pretty(&report)?)
}
