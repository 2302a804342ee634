use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semformer(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semformer"))
        .args(args)
        .env("SEMFORMER_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--layers", "1", "--heads", "2", "--d-model", "16", "--d-ff", "32", "--dz", "4", "--dec-layers", "1",
    "--batch-size", "4", "--max-epochs", "1",
];

fn tiny_data(root: &Path) -> String {
    let dir = root.join("data");
    let o = semformer(root, &["gen-data", "--d", "2", "--l", "3", "--n-train", "12", "--n-test", "4", "--seed", "5", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.to_str().unwrap().to_string()
}

#[test]
fn infeasible_task_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let o = semformer(root, &["gen-data", "--d", "2", "--l", "5", "--n", "3", "--out", root.join("bad").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("distinct node values"));
    assert!(!root.join("bad").exists());
}

#[test]
fn gen_data_twice_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    for name in ["x", "y"] {
        let out = root.join(name);
        let o = semformer(root, &["gen-data", "--preset", "g2-5", "--n-train", "200", "--n-test", "20", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["train.jsonl", "test.jsonl", "vocab.json", "manifest.json"] {
        assert_eq!(fs::read(root.join("x").join(f)).unwrap(), fs::read(root.join("y").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn default_dataset_location_uses_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = semformer(tmp.path(), &["gen-data", "--d", "2", "--l", "3", "--n-train", "5", "--n-test", "2", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("data/g2-3-s1/manifest.json").exists());
}

#[test]
fn train_eval_and_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);
    let run_dir = root.join("run");
    let mut args = vec!["train", "--objective", "semformer", "--k", "2", "--data", &data, "--run-dir", run_dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = semformer(root, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "metrics.jsonl", "summary.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert!(!run_dir.join("run.lock").exists());

    // A second fresh run into the same directory is refused.
    let o = semformer(root, &args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--resume"));

    let o = semformer(root, &["export-curves", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "step,epoch,split,lm,ae,rp,total,exact_match,first_node_acc,continuation_acc,wall_time"
    );
    assert!(csv.lines().count() >= 3);
    let o = semformer(root, &["export-curves", "--run-dir", root.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nothing to export"));

    let ckpt = fs::read_dir(run_dir.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    let test = Path::new(&data).join("test.jsonl");
    let report = root.join("report.json");
    let o = semformer(root, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--test", test.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("exact_match") && text.contains("per-position"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["report"]["evaluated"], 4);
    assert!(json["config_hash"].is_string());

    let other = root.join("other");
    let o = semformer(root, &["gen-data", "--d", "3", "--l", "3", "--n-train", "4", "--n-test", "3", "--out", other.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let other_test = other.join("test.jsonl");
    let o = semformer(root, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--test", other_test.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("out-of-distribution"));
    let o = semformer(root, &["eval", "--ood", "--checkpoint", ckpt.to_str().unwrap(), "--test", other_test.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("out of distribution"));

    let o = semformer(root, &["export-attention", "--checkpoint", ckpt.to_str().unwrap(), "--test", test.to_str().unwrap(), "--index", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<serde_json::Value> =
        String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["layer"], 0);
    let n = lines[0]["tokens"].as_array().unwrap().len();
    assert_eq!(lines[0]["matrix"].as_array().unwrap().len(), n);
    assert!(lines[0]["tokens"].as_array().unwrap().iter().any(|t| t.as_str().unwrap().starts_with("<plan")));
}

#[test]
fn resume_continues_the_latest_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);
    let run_dir = root.join("r");
    let base = ["train", "--objective", "standard", "--data", &data, "--run-dir", run_dir.to_str().unwrap(), "--eval-every", "1"];
    let mut first: Vec<&str> = base.to_vec();
    first.extend_from_slice(TINY);
    first.extend_from_slice(&["--max-steps", "2"]);
    assert_eq!(code(&semformer(root, &first)), 0);
    let mut second: Vec<&str> = base.to_vec();
    second.extend_from_slice(TINY);
    second.push("--resume");
    let o = semformer(root, &second);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("resumed"));
    let steps: Vec<u64> = fs::read_to_string(run_dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 1, 2, 2, 3, 3]);
}

#[test]
fn config_file_mirrors_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);
    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "batch_size = 4\nmax_epochs = 1\nseed = 9\n\n[objective]\nkind = \"bow\"\nk = 2\n\n[model]\nn_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\n\n[data]\ndir = {data:?}\n"
        ),
    )
    .unwrap();
    let run_dir = root.join("cfg-run");
    let o = semformer(root, &["train", "--config", cfg.to_str().unwrap(), "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["config"]["objective"]["kind"], "bow");
    assert_eq!(saved["config"]["seed"], 9);
    assert_eq!(saved["config"]["task"]["degree"], 2);

    fs::write(root.join("bad.toml"), "batch_size = \"many\"\n").unwrap();
    let o = semformer(root, &["train", "--config", root.join("bad.toml").to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sweep_writes_one_curve_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);
    let out = root.join("sw");
    let mut args = vec!["sweep", "--objective", "semformer", "--data", &data, "--param", "k", "--values", "1,2", "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--max-steps", "1"]);
    let o = semformer(root, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(csv.starts_with("k,step,epoch,split"));
    assert!(out.join("k-1").is_dir() && out.join("k-2").is_dir());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&semformer(tmp.path(), &["no-such-command"])), 1);
    assert_eq!(code(&semformer(tmp.path(), &["train", "--objective", "nonsense"])), 1);
    assert_eq!(code(&semformer(tmp.path(), &["gen-data", "--preset", "g9-9"])), 1);
    assert_eq!(code(&semformer(tmp.path(), &["--help"])), 0);
}
