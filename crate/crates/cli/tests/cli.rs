use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gka(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gka"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("GKA_THREADS", "1")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn empty_problem_list_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"prefixes": []}"#);
    let o = gka(&["solver-bench", "--config", &cfg], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("solver_bench.csv")).unwrap();
    assert_eq!(csv, "# schema: gka-solver-bench/1\nsolver,precision,problem_id,iter,residual\n");
}

#[test]
fn csv_has_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"dim": 8, "prefixes": [3, 20], "solvers": ["ch", "cg"]}"#);
    let o = gka(&["solver-bench", "--config", &cfg, "--iters", "5"], dir.path());
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("solver_bench.csv")).unwrap();
    // schema + header + 2 solvers × 2 problems × (5 + 1) iterates
    assert_eq!(csv.lines().count(), 2 + 2 * 2 * 6);
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"problem": 3}"#);
    for cmd in ["solver-bench", "grad-check", "equivalence", "mqar"] {
        let o = gka(&[cmd, "--config", &cfg], dir.path());
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"), "{cmd}");
    }
}

#[test]
fn summary_json_keys_are_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"dim": 8, "problems": 4}"#);
    assert!(gka(&["solver-bench", "--config", &cfg], dir.path()).status.success());
    let text = fs::read_to_string(dir.path().join("solver_bench_summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let first_key = text.lines().nth(1).unwrap().trim();
    assert!(first_key.starts_with("\"checks\""), "{first_key}");
}

#[test]
fn failing_check_gives_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    // Rank-deficient prefixes at D=128 keep 30 conjugate gradient steps above 1e-10.
    let cfg = write(dir.path(), "c.json", r#"{"dim": 128, "problems": 3, "prefix_min": 100, "prefix_max": 120}"#);
    let o = gka(&["solver-bench", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("FAIL"));
}

#[test]
fn runs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = write(d.path(), "c.json", r#"{"dim": 8, "problems": 3}"#);
        assert!(gka(&["solver-bench", "--config", &cfg, "--seed", "9"], d.path()).status.success());
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("solver_bench.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn equivalence_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"batches": 3, "time": 40, "kf_time": 24}"#);
    let o = gka(&["equivalence", "--config", &cfg], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("equivalence.json").exists());
}

#[test]
fn small_mqar_run_writes_rows_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{
            "task": {"vocab": 16, "num_kv": 2, "seq_len": 8, "seed": 0},
            "mixers": ["gla", "gka"],
            "d_model": 8,
            "head_dim": 4,
            "train": {"steps": 3, "batch_size": 2, "eval_size": 4, "learning_rates": [1e-3, 1e-2]}
        }"#,
    );
    let o = gka(&["mqar", "--config", &cfg], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("mqar_runs.csv")).unwrap();
    assert!(csv.starts_with("# schema: gka-mqar-runs/1\nmixer,lr,seed,accuracy"));
    assert_eq!(csv.lines().count(), 2 + 4);
    for m in ["gla", "gka"] {
        let (ck, _) = gka_mqar::checkpoint::load_checkpoint(&dir.path().join("checkpoints").join(m)).unwrap();
        assert!(ck.num_params() > 0);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("mqar_summary.json")).unwrap()).unwrap();
    assert!(summary["mixers"]["gka"]["best_per_seed"][0].is_number());
}
