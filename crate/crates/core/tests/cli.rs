use std::path::Path;
use std::process::Command;

use dual_mpc::harness::{cli_main, SolutionFile, EXIT_INFEASIBLE, EXIT_OK, EXIT_USAGE};
use tempfile::tempdir;

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("dual-mpc").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn solve_then_verify_the_fixture() {
    let dir = tempdir().unwrap();
    let problem = dir.path().join("qp.json");
    let solution = dir.path().join("sol.json");
    let trace = dir.path().join("trace.csv");
    assert_eq!(run(&["gen", "fixture", "two-var-qp", "--out", p(&problem)]), EXIT_OK);
    let code = run(&[
        "solve",
        p(&problem),
        "--method",
        "idfg",
        "--eps-out",
        "1e-2",
        "--trace",
        p(&trace),
        "--out",
        p(&solution),
    ]);
    assert_eq!(code, EXIT_OK);
    let sol: SolutionFile = serde_json::from_str(&std::fs::read_to_string(&solution).unwrap()).unwrap();
    assert_eq!(sol.u.len(), 2);
    assert!(sol.violation <= 0.12, "violation {}", sol.violation);
    let cert = sol.certificates.expect("idfg carries certificates");
    assert!(sol.violation <= cert.feas_violation_bound + 1e-9);

    let header = std::fs::read_to_string(&trace).unwrap();
    assert!(header.starts_with("k,d_bar,feas_violation,primal_value,dual_bound,feas_bound,primal_upper,primal_lower,inner_iters"));
    assert_eq!(header.lines().count(), sol.k_out + 2);

    assert_eq!(run(&["verify", p(&solution), p(&problem), "--reference"]), EXIT_OK);
}

#[test]
fn generation_is_deterministic() {
    let dir = tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let c = dir.path().join("c.json");
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        assert_eq!(run(&["gen", "random-qp", "-n", "12", "--seed", seed, "--out", p(out)]), EXIT_OK);
    }
    let read = |f: &Path| std::fs::read_to_string(f).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["solve"]), EXIT_USAGE);
    assert_eq!(run(&["study", "--experiment", "no-such-thing"]), EXIT_USAGE);
    assert_eq!(run(&["solve", "/nonexistent/qp.json", "--method", "idg", "--eps-out", "1e-2"]), EXIT_USAGE);
}

#[test]
fn infeasible_start_exits_three() {
    let dir = tempdir().unwrap();
    let sys = dir.path().join("sys.json");
    assert_eq!(run(&["gen", "fixture", "scalar-mpc", "--out", p(&sys)]), EXIT_OK);
    let code = run(&["mpc", p(&sys), "--horizon", "2", "--steps", "3", "--x0", "5.0"]);
    assert_eq!(code, EXIT_INFEASIBLE);
}

#[test]
fn closed_loop_csv_has_one_row_per_step() {
    let dir = tempdir().unwrap();
    let sys = dir.path().join("sys.json");
    let out = dir.path().join("loop.csv");
    assert_eq!(run(&["gen", "fixture", "scalar-mpc", "--out", p(&sys)]), EXIT_OK);
    let code = run(&["mpc", p(&sys), "--horizon", "2", "--steps", "5", "--x0", "-0.5", "--out", p(&out)]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("t,x_norm,x_q_sq,"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dual-mpc");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
    let bad = Command::new(bin).args(["gen", "random-qp"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_USAGE));
    let fixture = Command::new(bin).args(["gen", "fixture", "two-var-qp"]).output().unwrap();
    assert_eq!(fixture.status.code(), Some(EXIT_OK));
    let json: serde_json::Value = serde_json::from_slice(&fixture.stdout).unwrap();
    assert_eq!(json["n"], 2);
}
