use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aggflock::nn::{init_params, save_model, Architecture};
use aggflock::rng::{stream, Purpose};
use tempfile::TempDir;

const TINY: &str = r#"
[sim]
n_agents = 5
comm_radius = 1.5
rng_seed = 3

[train]
n_train_trajectories = 3
traj_len = 20
n_test_trajectories = 4
history_depth = 2
hidden = [8]

[eval]
traj_len = 30
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aggflock"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: TempDir::new().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn without_column(rows: &[Vec<String>], name: &str) -> Vec<Vec<String>> {
    let idx = rows[0].iter().position(|h| h == name).unwrap();
    rows.iter()
        .map(|r| r.iter().enumerate().filter(|(i, _)| *i != idx).map(|(_, v)| v.clone()).collect())
        .collect()
}

fn train_tiny(sb: &Sandbox) -> String {
    sb.write("tiny.toml", TINY);
    let o = run(&["train", "--config", &sb.s("tiny.toml"), "--out", &sb.s("m.swnn")]);
    assert!(o.status.success(), "{}", stderr(&o));
    sb.s("m.swnn")
}

#[test]
fn train_writes_model_report_and_manifest() {
    let sb = Sandbox::new();
    let model = train_tiny(&sb);
    let params = aggflock::nn::load_model(Path::new(&model)).unwrap();
    assert_eq!(params.architecture().history_depth, 2);
    let report = csv_rows(&sb.path("m.swnn.report.csv"));
    assert_eq!(report.len(), 4);
    let manifest = fs::read_to_string(sb.path("m.swnn.manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"train\""), "{manifest}");
    assert!(manifest.contains("finished_unix_s"), "{manifest}");
    assert!(manifest.contains("n_agents = 5"), "{manifest}");
}

#[test]
fn training_is_reproducible() {
    let a = Sandbox::new();
    let b = Sandbox::new();
    assert_eq!(fs::read(train_tiny(&a)).unwrap(), fs::read(train_tiny(&b)).unwrap());
}

#[test]
fn missing_config_is_a_usage_error() {
    let sb = Sandbox::new();
    let missing = sb.s("nope.toml");
    let o = run(&["train", "--config", &missing, "--out", &sb.s("m.swnn")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&missing), "{}", stderr(&o));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let sb = Sandbox::new();
    sb.write("bad.toml", "[train]\nhistory_depth = 0\n");
    let o = run(&["train", "--config", &sb.s("bad.toml"), "--out", &sb.s("m.swnn")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("history depth"), "{}", stderr(&o));
    assert!(!sb.path("m.swnn").exists());
}

#[test]
fn eval_baselines_without_model() {
    let sb = Sandbox::new();
    sb.write("tiny.toml", TINY);
    let o = run(&["eval", "--config", &sb.s("tiny.toml"), "--controllers", "global,local", "--out", &sb.s("e.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&sb.path("e.csv"));
    assert_eq!(
        rows[0].join(","),
        "controller,K,episode,seed,cost,disconnect_rate,mean_min_dist,min_dist_growth,runtime_s"
    );
    assert_eq!(rows.iter().filter(|r| r[0] == "global").count(), 4);
    assert_eq!(rows.iter().filter(|r| r[0] == "local").count(), 4);
    assert!(stdout(&o).contains("global"));
}

#[test]
fn eval_with_model_and_verification() {
    let sb = Sandbox::new();
    let model = train_tiny(&sb);
    let out = sb.s("e.csv");
    let o = run(&["eval", "--config", &sb.s("tiny.toml"), "--model", &model, "--verify-distributed", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&sb.path("e.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "gnn" && r[1] == "2").count(), 4);

    let again = sb.s("e2.csv");
    let o = run(&["eval", "--config", &sb.s("tiny.toml"), "--model", &model, "--out", &again, "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        without_column(&rows, "runtime_s"),
        without_column(&csv_rows(&sb.path("e2.csv")), "runtime_s")
    );
}

#[test]
fn eval_rejects_model_with_other_history_depth() {
    let sb = Sandbox::new();
    let model = train_tiny(&sb);
    sb.write("k3.toml", &TINY.replace("history_depth = 2", "history_depth = 3"));
    let o = run(&["eval", "--config", &sb.s("k3.toml"), "--model", &model, "--out", &sb.s("e.csv")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("K=2"), "{}", stderr(&o));
}

#[test]
fn gnn_without_model_is_a_usage_error() {
    let sb = Sandbox::new();
    sb.write("tiny.toml", TINY);
    let o = run(&["eval", "--config", &sb.s("tiny.toml"), "--controllers", "gnn", "--out", &sb.s("e.csv")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--model"));
}

#[test]
fn radius_sweep_writes_one_row_per_point_controller_seed() {
    let sb = Sandbox::new();
    let model = train_tiny(&sb);
    sb.write("sweep.toml", &format!("{TINY}\n[sweep]\nn_seeds = 2\n"));
    let o = run(&[
        "sweep", "--config", &sb.s("sweep.toml"), "--experiment", "radius", "--values", "1,2,4", "--model", &model,
        "--out", &sb.s("s.csv"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&sb.path("s.csv"));
    assert_eq!(rows[0].join(","), "experiment,param_value,controller,K,seed,cost,disconnect_rate,mean_min_dist,runtime_s");
    assert_eq!(rows.len(), 1 + 3 * 3 * 2);
    assert!(rows[1..].iter().all(|r| r[0] == "radius"));
    assert_eq!(rows[1..].iter().filter(|r| r[2] == "gnn").count(), 6);
}

#[test]
fn unknown_experiment_lists_valid_names() {
    let sb = Sandbox::new();
    sb.write("tiny.toml", TINY);
    let o = run(&["sweep", "--config", &sb.s("tiny.toml"), "--experiment", "wind", "--values", "1", "--out", &sb.s("s.csv")]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["v_init", "radius", "n_agents", "architecture"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn sweep_without_models_runs_baselines_only() {
    let sb = Sandbox::new();
    sb.write("tiny.toml", TINY);
    let o = run(&["sweep", "--config", &sb.s("tiny.toml"), "--experiment", "v_init", "--values", "1,2", "--out", &sb.s("s.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&sb.path("s.csv"));
    assert!(rows[1..].iter().all(|r| r[2] != "gnn"));
}

#[test]
fn architecture_sweep_trains_one_model_per_width() {
    let sb = Sandbox::new();
    sb.write("arch.toml", &format!("{TINY}\n[sweep]\nn_seeds = 1\ninclude_global = false\ninclude_local = false\n"));
    let o = run(&[
        "sweep", "--config", &sb.s("arch.toml"), "--experiment", "architecture", "--values", "2,4,8", "--out", &sb.s("a.csv"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&sb.path("a.csv"));
    assert_eq!(rows.len(), 4);
    let widths: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(widths, ["2.0", "4.0", "8.0"]);
    assert_eq!(stderr(&o).matches("training hidden width").count(), 3);
}

const DEMO: &str = r#"
[sim]
n_agents = 10
comm_radius = 1.5
rng_seed = 9

[eval]
traj_len = 200
"#;

#[test]
fn demo_trace_has_one_row_per_agent_step_and_is_deterministic() {
    let sb = Sandbox::new();
    sb.write("demo.toml", DEMO);
    for out in ["d1.csv", "d2.csv"] {
        let o = run(&["demo", "--config", &sb.s("demo.toml"), "--out", &sb.s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(sb.path("d1.csv")).unwrap();
    assert_eq!(text.lines().count(), 2001);
    assert_eq!(text.lines().next().unwrap(), "step,agent,x,y,vx,vy,is_leader");
    assert_eq!(text, fs::read_to_string(sb.path("d2.csv")).unwrap());
}

#[test]
fn leader_demo_flags_two_agents_per_step() {
    let sb = Sandbox::new();
    sb.write("lead.toml", &format!("{DEMO}\n[eval.scenario]\nkind = \"leaders\"\n"));
    let o = run(&["demo", "--config", &sb.s("lead.toml"), "--controllers", "local", "--out", &sb.s("d.csv")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&sb.path("d.csv"));
    for step in 1..=200 {
        let s = step.to_string();
        assert_eq!(rows[1..].iter().filter(|r| r[0] == s && r[6] == "1").count(), 2, "step {step}");
    }
}

#[test]
fn inspect_reports_architecture() {
    let sb = Sandbox::new();
    let arch = Architecture::flocking(3, vec![32, 32]).unwrap();
    let params = init_params(&arch, &mut stream(0, Purpose::ParamInit, 0)).unwrap();
    save_model(&params, &sb.path("k3.swnn")).unwrap();
    let o = run(&["inspect", "--model", &sb.s("k3.swnn")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for line in ["version: 1", "K: 3", "p: 6", "hidden: [32, 32]", "q: 2", "parameters: 1730"] {
        assert!(text.contains(line), "{text}");
    }
}

#[test]
fn inspect_rejects_truncated_files() {
    let sb = Sandbox::new();
    let arch = Architecture::flocking(3, vec![32, 32]).unwrap();
    let params = init_params(&arch, &mut stream(0, Purpose::ParamInit, 0)).unwrap();
    save_model(&params, &sb.path("k3.swnn")).unwrap();
    let bytes = fs::read(sb.path("k3.swnn")).unwrap();
    for cut in [10, 40, bytes.len() - 8] {
        fs::write(sb.path("cut.swnn"), &bytes[..cut]).unwrap();
        let o = run(&["inspect", "--model", &sb.s("cut.swnn")]);
        assert_eq!(o.status.code(), Some(1), "cut at {cut}");
        let err = stderr(&o);
        assert!(err.starts_with("error: model format"), "{err}");
        assert!(!err.contains("panicked"), "{err}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["eval", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}
