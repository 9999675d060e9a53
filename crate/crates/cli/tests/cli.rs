use std::fs;

use disclab::Error;
use disclab_cli::{cli_dispatch, exit_code, parse_atom_range, parse_atoms, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};

fn run(args: &[&str]) -> i32 {
    cli_dispatch(std::iter::once("disclab").chain(args.iter().copied()))
}

#[test]
fn scheme_compare_writes_all_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let code = run(&[
        "scheme-compare",
        "--schemes",
        "time,space",
        "--eps-ladder",
        "0.2,0.1",
        "--reps",
        "300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    for f in ["records.csv", "summary.csv", "ratios.csv", "histogram.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let records = fs::read_to_string(out.join("records.csv")).unwrap();
    assert!(records.starts_with("rep,scheme,epsilon,t,z,n_stops,u_cost,c_cost"));
    assert_eq!(records.lines().count(), 1 + 2 * 2 * 300);
}

#[test]
fn output_is_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let read = |threads: &str| {
        let out = dir.path().join(threads);
        let code = run(&[
            "em-sim",
            "--eps",
            "0.2",
            "--reps",
            "600",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        fs::read_to_string(out.join("records.csv")).unwrap()
    };
    assert_eq!(read("1"), read("2"));
}

#[test]
fn json_format_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(
        &cfg,
        r#"
kind = "em"
replications = 50
eps_ladder = [0.2]
schemes = [{ name = "space" }]
[model]
name = "ou"
x0 = 0.0
lambda = 1.0
mean = 0.0
vol = 1.0
"#,
    )
    .unwrap();
    let out = dir.path().join("json");
    let code = run(&["em-sim", "--config", cfg.to_str().unwrap(), "--format", "json", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("records.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 50);
}

#[test]
fn usage_and_config_errors_exit_two() {
    assert_eq!(run(&["scheme-compare", "--reps", "1"]), EXIT_USAGE);
    assert_eq!(run(&["scheme-compare", "--eps", "0.1,0.2"]), EXIT_USAGE);
    assert_eq!(run(&["scheme-compare", "--schemes", "zigzag"]), EXIT_USAGE);
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(run(&["em-sim", "--model", "em-unknown"]), EXIT_USAGE);
    assert_eq!(run(&["decompose", "--dist", "1:0.5,2:0.5"]), EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "replications = 0\nunknown_key = 3\n").unwrap();
    assert_eq!(run(&["scheme-compare", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
}

#[test]
fn numerical_failures_exit_three() {
    assert_eq!(exit_code(&Error::Estimation("x".into())), EXIT_NUMERICAL);
    assert_eq!(exit_code(&Error::DegenerateBarrier("x".into())), EXIT_NUMERICAL);
    assert_eq!(exit_code(&Error::Input("x".into())), EXIT_USAGE);
}

#[test]
fn small_commands_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.csv");
    assert_eq!(run(&["gtable", "--out", g.to_str().unwrap()]), EXIT_OK);
    assert!(fs::read_to_string(&g).unwrap().starts_with("x,g"));
    assert_eq!(run(&["sample-exit", "--eps", "0.5", "--reps", "100"]), EXIT_OK);
    assert_eq!(run(&["sample-exit", "--eps", "0.5", "--down", "1.5", "--reps", "100"]), EXIT_OK);
    assert_eq!(run(&["inequality-check", "--random", "500", "--atoms", "2..8"]), EXIT_OK);
    assert_eq!(run(&["decompose", "--dist=-1:0.25,1:0.25,-0.5:0.25,0.5:0.25"]), EXIT_OK);
}

#[test]
fn argument_parsers() {
    assert_eq!(parse_atom_range("2..8").unwrap(), (2, 8));
    assert!(parse_atom_range("1..3").is_err());
    assert!(parse_atom_range("5..3").is_err());
    assert_eq!(parse_atoms("-1:0.5,1:0.5").unwrap(), vec![(-1.0, 0.5), (1.0, 0.5)]);
    assert!(parse_atoms("1;2").is_err());
}
