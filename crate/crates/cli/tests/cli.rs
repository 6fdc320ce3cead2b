use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_keepalive"));
    c.env_remove("KEEPALIVE_OUTPUT_DIR").env_remove("KEEPALIVE_THREADS").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
[trace]
split = [0.6, 0.2, 0.2]

[trace.synthetic]
n_functions = 1
n_pods_per_function = 5
duration_s = 600

[trace.synthetic.arrival]
model = "poisson"
rate_hz = 0.1

[sim]
seed = 3

[train]
episodes = 2
hidden = [8, 8]
batch = 8

[output]
dir = "out"
verbosity = "info"
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn tiny() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY).display().to_string();
    (dir, cfg)
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn gen_trace_deterministic_rows() {
    let o = run(&["gen-trace", "--model", "deterministic", "--interval", "10", "--duration", "60", "--pods", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "ts_ms,function_id,pod_id,cpu_cores,mem_mb,exec_ms,runtime_tag,trigger_tag");
    let ts: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ts, ["0", "10000", "20000", "30000", "40000", "50000"]);
}

#[test]
fn gen_trace_without_duration_is_a_usage_error() {
    let o = run(&["gen-trace", "--model", "deterministic", "--interval", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--duration"));
}

#[test]
fn gen_trace_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let o = run(&[
            "gen-trace", "--model", "bimodal", "--burst-rate", "0.2", "--lull-rate", "0.01", "--period", "120",
            "--duration", "900", "--functions", "3", "--pods", "2", "--seed", "9", "--out", p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(fs::read(&a).unwrap().len() > 100);
}

#[test]
fn simulate_fixed_writes_report_and_resolved_config() {
    let (dir, cfg) = tiny();
    let o = run(&["simulate", "-c", &cfg, "--policy", "fixed", "--k", "60"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["policy"], "fixed-60s");
    let resolved = fs::read_to_string(dir.path().join("out/resolved_config.toml")).unwrap();
    assert!(resolved.contains("[train]") && resolved.contains("seed"));
    assert!(stdout(&o).starts_with("fixed-60s:"));
}

#[test]
fn simulate_outputs_are_byte_identical() {
    let (dir, cfg) = tiny();
    let mut seen = Vec::new();
    for _ in 0..2 {
        let o = run(&["simulate", "-c", &cfg, "--policy", "pso", "--outcomes", "--profile"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let files: Vec<Vec<u8>> = ["report.json", "outcomes.csv", "profile.csv", "resolved_config.toml"]
            .iter()
            .map(|f| fs::read(dir.path().join("out").join(f)).unwrap())
            .collect();
        seen.push(files);
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn oracle_on_a_single_invocation_has_one_cold_start() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("one.csv"),
        "ts_ms,function_id,pod_id,cpu_cores,mem_mb,exec_ms,runtime_tag,trigger_tag\n0,f,p,1,128,100,python,http\n",
    )
    .unwrap();
    let cfg = write_config(dir.path(), "[trace]\npath = \"one.csv\"\n[output]\ndir = \"o\"\n");
    let o = run(&["simulate", "-c", cfg.to_str().unwrap(), "--policy", "oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(report["cold_start_count"], 1);
}

#[test]
fn rl_without_the_model_file_is_a_data_error() {
    let (dir, cfg) = tiny();
    let missing = dir.path().join("m.bin");
    let o = run(&["simulate", "-c", &cfg, "--policy", "rl", "--model", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("m.bin"));
    let o = run(&["simulate", "-c", &cfg, "--policy", "rl"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_smoke_and_rerun_is_identical() {
    let (dir, cfg) = tiny();
    let o = run(&["train", "-c", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let rows = csv_rows(&out.join("training_log.csv"));
    assert_eq!(rows.len(), 2);
    let first = fs::read(out.join("model.json")).unwrap();
    let o = run(&["train", "-c", &cfg]);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("model.json")).unwrap(), first);

    // a trained model drives the rl policy and the oracle-gap table
    let model = out.join("model.json").display().to_string();
    let o = run(&["simulate", "-c", &cfg, "--policy", "rl", "--model", &model]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["oracle-gap", "-c", &cfg, "--model", &model, "--slice", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("cold_start_count") && table.contains("keep_alive_carbon_g"));
    assert_eq!(csv_rows(&out.join("oracle_gap.csv")).len(), 5);
}

#[test]
fn training_log_losses_are_finite() {
    let (dir, cfg) = tiny();
    let o = run(&["train", "-c", &cfg]);
    assert!(o.status.success());
    for row in csv_rows(&dir.path().join("out/training_log.csv")) {
        let loss: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!(loss.is_finite());
    }
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("episodes = 2", "episodes = 2\nlr = 1e12"));
    let o = run(&["train", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(!dir.path().join("out/training_log.csv").exists());
}

#[test]
fn compare_five_policies() {
    let (dir, cfg) = tiny();
    let o = run(&["compare", "-c", &cfg, "--policies", "fixed:60,latency_min,carbon_min,pso,oracle"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("out/compare.csv")).len(), 5);
    assert!(stdout(&o).contains("oracle dominance: holds"));
}

#[test]
fn compare_rejects_unknown_policy_before_simulating() {
    let (dir, cfg) = tiny();
    let o = run(&["compare", "-c", &cfg, "--policies", "oracle,lru"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lru"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn sweep_grid_rows_and_dedup() {
    let (dir, cfg) = tiny();
    let o = run(&["sweep", "-c", &cfg, "--policy", "oracle", "--lambda-grid", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("out/sweep.csv")).len(), 9);

    let o = run(&["sweep", "-c", &cfg, "--policy", "oracle", "--lambda-grid", "0.5,0.1,0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("out/sweep.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0.1,"));
    assert!(stderr(&o).to_lowercase().contains("duplicate"));
}

#[test]
fn sweep_without_grid_is_a_usage_error() {
    let (_dir, cfg) = tiny();
    assert_eq!(run(&["sweep", "-c", &cfg]).status.code(), Some(1));
    assert_eq!(run(&["sweep", "-c", &cfg, "--lambda-grid", ""]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("seed = 3", "seed = 3\nlambda = 0.2"));
    let o = run(&["simulate", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lambda"));
}

#[test]
fn output_dir_from_environment() {
    let (dir, cfg) = tiny();
    let target = dir.path().join("elsewhere");
    let o = bin()
        .args(["simulate", "-c", &cfg])
        .env("KEEPALIVE_OUTPUT_DIR", &target)
        .env("KEEPALIVE_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("report.json").exists());
    assert!(!dir.path().join("out").exists());
    assert!(stderr(&o).contains("override output.dir"));
}

#[test]
fn example_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["example-config"]);
    assert!(o.status.success());
    let text = stdout(&o).replace("duration_s = 7200", "duration_s = 300");
    let cfg = write_config(dir.path(), &text);
    let o = run(&["simulate", "-c", cfg.to_str().unwrap(), "--policy", "latency_min"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
