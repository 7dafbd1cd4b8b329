use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
days = 120

[[communities]]
name = "a"
buildings = 6
split = "full-history"
rounds = 2
participants = 3

[[communities]]
name = "b"
buildings = 3
split = "scarce"
rounds = 1
participants = 3
transfer_from = "a"

[learner]
epochs = 1

[experiment]
months = ["april"]
"#;

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tec.toml"), config).unwrap();
    dir
}

fn tec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tec"))
        .current_dir(dir)
        .arg("--config")
        .arg(dir.join("tec.toml"))
        .args(args)
        .env_remove("TEC_LOG")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_flow_writes_reports() {
    let dir = setup(CONFIG);
    let d = dir.path();
    ok(&tec(d, &["generate"]));
    assert!(d.join("data/a/a000/demand.csv").exists());
    assert!(d.join("data/b/buildings.csv").exists());

    // Transfer needs the source community's model first.
    let early = tec(d, &["train", "--method", "flf", "--community", "b"]);
    assert_eq!(early.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&early.stderr).contains("train flf for a"));

    ok(&tec(d, &["train", "--method", "flf"]));
    assert!(d.join("models/b/april/flf/generation.weights").exists());
    assert!(d.join("models/a/april/flf/train_log_demand.csv").exists());

    let missing = tec(d, &["simulate"]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--method lmf"));

    ok(&tec(d, &["train", "--method", "lmf"]));
    let grid = ok(&tec(d, &["simulate"]));
    for m in ["RND", "FLF", "LMF"] {
        assert!(grid.contains(m), "{grid}");
    }
    let summary = fs::read_to_string(d.join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("# config_hash="));
    assert!(summary.contains("seed=5"));
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 3);
    let gaps = fs::read_to_string(d.join("out/price_gaps_b_april.csv")).unwrap();
    assert_eq!(gaps.lines().filter(|l| !l.starts_with('#')).count(), 1 + 96 * 3);

    fs::remove_file(d.join("out/price_gaps_b_april.csv")).unwrap();
    assert_eq!(ok(&tec(d, &["report"])), grid);
    assert!(d.join("out/price_gaps_b_april.csv").exists());
}

#[test]
fn method_filter_and_seed_override() {
    let dir = setup(CONFIG);
    let d = dir.path();
    ok(&tec(d, &["generate", "--seed", "9"]));
    let grid = ok(&tec(d, &["simulate", "--method", "rnd", "--seed", "9", "--out", "rnd_only"]));
    assert!(grid.contains("RND") && !grid.contains("FLF"));
    let summary = fs::read_to_string(d.join("rnd_only/summary.csv")).unwrap();
    assert!(summary.contains("seed=9"));
}

#[test]
fn solve_prints_both_solutions_and_traces() {
    let dir = setup(CONFIG);
    let d = dir.path();
    let text = ok(&tec(d, &["solve", "--community", "a", "--demand", "4.5", "--trace", "trace.csv"]));
    assert!(text.contains("lambda*"), "{text}");
    assert!(text.contains("converged = true"), "{text}");
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    let mut body = trace.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(body.next(), Some("iteration,agent_id,lambda,power,neighbor_gap,oracle_gap"));
    assert!(body.next().unwrap().starts_with("1,vpp0,"));

    let export = ok(&tec(d, &["solve", "--community", "a", "--demand", "-3"]));
    assert!(export.contains("CommunityToGrid"), "{export}");

    let none = ok(&tec(d, &["solve", "--demand", "0"]));
    assert!(none.contains("NoFlow"));

    let too_much = tec(d, &["solve", "--community", "a", "--demand", "1e6"]);
    assert_eq!(too_much.status.code(), Some(6));
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = setup("seed = 1\nbogus = 2\n");
    let out = tec(dir.path(), &["show-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let dir = setup(CONFIG);
    let out = tec(dir.path(), &["train", "--method", "rnd"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tec(dir.path(), &["solve", "--community", "zz", "--demand", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = setup(CONFIG);
    let out = tec(dir.path(), &["train", "--method", "lmf"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn show_config_roundtrips() {
    let dir = setup(CONFIG);
    let shown = ok(&tec(dir.path(), &["show-config"]));
    let again = setup(&shown);
    assert_eq!(ok(&tec(again.path(), &["show-config"])), shown);
}
