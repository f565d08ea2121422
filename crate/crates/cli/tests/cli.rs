use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dfsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfsim"))
        .args(args)
        .current_dir(dir)
        .env_remove("DFSIM_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn footer(text: &str, key: &str) -> f64 {
    let prefix = format!("# {key}=");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no {key} footer in\n{text}"))
        .parse()
        .unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const PHASE: &str = "[[elements]]\ntheta = 0.0\ngamma_s = 1.0\ngamma_f = 1.0\nphi = 0.7\n";
const ROTATOR: &str = "[[elements]]\ntheta = 0.4\ngamma_s = 1.0\ngamma_f = 1.0\nphi = -1.1\n\
                       [[elements]]\ntheta = 1.3\ngamma_s = 1.0\ngamma_f = 1.0\nphi = 0.2\n";
const IDENTITY: &str = "[[elements]]\ntheta = 0.0\ngamma_s = 1.0\ngamma_f = 1.0\nphi = 0.0\n";

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "phase.toml", PHASE);
    write(dir.path(), "rot.toml", ROTATOR);
    write(dir.path(), "id.toml", IDENTITY);
    dir
}

#[test]
fn reciprocity_identity_channel_has_zero_deviation() {
    let d = setup();
    let o = dfsim(&["reciprocity", "--channel", "id.toml"], d.path());
    assert!(o.status.success());
    let row = stdout(&o).lines().nth(2).unwrap().to_string();
    assert_eq!(row.split(',').nth(2).unwrap().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn reciprocity_random_suite_passes() {
    let d = setup();
    let o = dfsim(&["reciprocity", "--random", "20", "--trials", "1000"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains(",true"));
}

#[test]
fn reciprocity_negative_control_fails() {
    let d = setup();
    let o = dfsim(
        &["reciprocity", "--channel", "rot.toml", "--matrix", "1,0,0.5,0,0,0,1,0"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains(",false"));
}

#[test]
fn protocol_a_lossless_phase_channel() {
    let d = setup();
    let o = dfsim(&["protocol", "--protocol", "a", "--channel", "phase.toml"], d.path());
    assert!(o.status.success());
    let t = stdout(&o);
    assert!((footer(&t, "decoded_fidelity") - 1.0).abs() < 1e-12);
    assert!((footer(&t, "success_probability") - 0.5).abs() < 1e-12);
}

#[test]
fn protocol_d_unitary_channels() {
    let d = setup();
    let o = dfsim(
        &["protocol", "--protocol", "d", "--channel", "rot.toml", "--channel2", "phase.toml"],
        d.path(),
    );
    assert!(o.status.success());
    assert!((footer(&stdout(&o), "decoded_fidelity") - 1.0).abs() < 1e-10);
}

#[test]
fn protocol_d_without_second_channel_is_a_usage_error() {
    let d = setup();
    let o = dfsim(&["protocol", "--protocol", "d", "--channel", "rot.toml"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_protocol_and_bad_channel_file_are_usage_errors() {
    let d = setup();
    let o = dfsim(&["protocol", "--protocol", "e", "--channel", "rot.toml"], d.path());
    assert_eq!(o.status.code(), Some(2));
    write(
        d.path(),
        "both.toml",
        &format!("matrix = [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]\n{IDENTITY}"),
    );
    let o = dfsim(&["protocol", "--protocol", "a", "--channel", "both.toml"], d.path());
    assert_eq!(o.status.code(), Some(2));
    let o = dfsim(&["protocol", "--protocol", "a", "--channel", "missing.toml"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn matrix_channel_file_is_accepted() {
    let d = setup();
    write(
        d.path(),
        "m.toml",
        "matrix = [[0.0, 0.0], [0.0, -1.0], [0.0, -1.0], [0.0, 0.0]]\n",
    );
    let o = dfsim(
        &["protocol", "--protocol", "b", "--channel", "m.toml", "--channel2", "m.toml"],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_slopes() {
    let d = setup();
    let grid = "1e-3,3.16e-3,1e-2,3.16e-2,1e-1";
    let o = dfsim(
        &[
            "sweep", "--protocol", "b", "--channel", "rot.toml", "--channel2", "phase.toml",
            "--T-grid", grid,
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let slope = footer(&stdout(&o), "slope");
    assert!((1.95..=2.05).contains(&slope), "{slope}");

    let o = dfsim(
        &[
            "sweep", "--protocol", "d", "--channel", "rot.toml", "--channel2", "phase.toml",
            "--mu", "0.01", "--T-grid", grid,
        ],
        d.path(),
    );
    assert!(o.status.success());
    let slope = footer(&stdout(&o), "slope");
    assert!((0.95..=1.05).contains(&slope), "{slope}");
    assert_eq!(stdout(&o).lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn sweep_with_single_point_is_a_usage_error() {
    let d = setup();
    let o = dfsim(
        &["sweep", "--protocol", "b", "--channel", "rot.toml", "--channel2", "rot.toml", "--T-grid", "0.1"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tradeoff_table_is_deterministic_and_monotone() {
    let d = setup();
    let args = [
        "tradeoff", "--T", "0.1", "--mu-grid", "0,0.001,0.01,0.1,0.5,1,2", "--out", "t1.csv",
    ];
    assert!(dfsim(&args, d.path()).status.success());
    let mut args2 = args;
    args2[6] = "t2.csv";
    assert!(dfsim(&args2, d.path()).status.success());
    let a = std::fs::read(d.path().join("t1.csv")).unwrap();
    let b = std::fs::read(d.path().join("t2.csv")).unwrap();
    assert_eq!(a, b);

    let text = String::from_utf8(a).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(2)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0][1], 1.0);
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]));
    assert!(text.contains("# fidelity_monotone=true"));
}

#[test]
fn oracle_check_default_grid_passes() {
    let d = setup();
    let o = dfsim(&["oracle-check"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(footer(&stdout(&o), "max_deviation") < 1e-6);
}

#[test]
fn oracle_check_warns_on_truncation_and_zero_rows_are_exact() {
    let d = setup();
    let o = dfsim(
        &["oracle-check", "--grid-spec", "m=0.5;l=0.5;a=0.5", "--cutoff", "2"],
        d.path(),
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncation"));
    let o = dfsim(&["oracle-check", "--grid-spec", "m=0.5,1;l=0.3;a=0"], d.path());
    assert!(o.status.success());
    for row in stdout(&o).lines().skip(2).filter(|l| !l.starts_with('#')) {
        let f: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(&f[3..8], &[0.0; 5]);
    }
}

#[test]
fn seeded_runs_are_reproducible_and_replayable() {
    let d = setup();
    let base = [
        "protocol", "--protocol", "b", "--channel", "rot.toml", "--channel2", "phase.toml",
        "--randomize", "haar", "--samples", "200", "--seed", "11",
    ];
    let a = dfsim(&[&base[..], &["--out", "a.csv"]].concat(), d.path());
    let b = dfsim(&[&base[..], &["--out", "b.csv"]].concat(), d.path());
    assert!(a.status.success() && b.status.success());
    let fa = std::fs::read(d.path().join("a.csv")).unwrap();
    assert_eq!(fa, std::fs::read(d.path().join("b.csv")).unwrap());

    let r = dfsim(&["replay", "a.csv", "--out", "r.csv"], d.path());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fa, std::fs::read(d.path().join("r.csv")).unwrap());

    let other = dfsim(&[&base[..10], &["--seed", "12"]].concat(), d.path());
    assert_ne!(fa, other.stdout);
}

#[test]
fn seed_defaults_from_environment() {
    let d = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_dfsim"))
        .args(["tradeoff", "--T", "0.5", "--mu-grid", "0.1"])
        .current_dir(d.path())
        .env("DFSIM_SEED", "77")
        .output()
        .unwrap();
    assert!(stdout(&o).lines().next().unwrap().contains("\"seed\":77"));
}

#[test]
fn every_output_starts_with_a_manifest() {
    let d = setup();
    for args in [
        vec!["reciprocity", "--random", "3", "--trials", "5"],
        vec!["protocol", "--protocol", "c", "--channel", "phase.toml", "--mu", "0.1"],
        vec!["tradeoff", "--T", "0.5", "--mu-grid", "0.1,0.2"],
    ] {
        let o = dfsim(&args, d.path());
        let first = stdout(&o).lines().next().unwrap().to_string();
        assert!(first.starts_with("# {\"command\":"), "{first}");
        assert!(first.contains("\"tool_version\""));
    }
}
