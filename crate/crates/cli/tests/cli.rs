use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_train = 24\nn_test = 8\niterations = 2\n[env]\nkind = \"minishop\"\n";

fn coevo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coevo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("unparseable error line `{line}`: {e}"))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    dir
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let dir = setup();
    let out = coevo(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn eval_with_missing_checkpoint_names_the_path() {
    let dir = setup();
    ok(&coevo(
        &["gen-env", "--config", "c.toml", "--seed", "1", "--out", "r"],
        dir.path(),
    ));
    let out = coevo(
        &[
            "eval",
            "--config",
            "c.toml",
            "--seed",
            "1",
            "--out",
            "r",
            "--policy",
            "r/absent.policy.json",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    let e = error_json(&out);
    assert_eq!(e["error"], "io");
    assert_eq!(e["path"], "r/absent.policy.json");
    assert!(e["message"]
        .as_str()
        .unwrap()
        .contains("r/absent.policy.json"));
}

#[test]
fn invalid_config_lists_violations() {
    let dir = setup();
    fs::write(
        dir.path().join("bad.toml"),
        "hard_negative_threshold = 1.5\n[dpo]\nbeta = 0.0\n",
    )
    .unwrap();
    let out = coevo(
        &["coevolve", "--config", "bad.toml", "--out", "r"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert_eq!(e["error"], "validation");
    let msg = e["message"].as_str().unwrap();
    assert!(
        msg.contains("hard_negative_threshold") && msg.contains("beta"),
        "{msg}"
    );
}

#[test]
fn coevolve_writes_manifest_and_resumes_by_verifying() {
    let dir = setup();
    let args = [
        "coevolve", "--config", "c.toml", "--seed", "2", "--out", "run",
    ];
    ok(&coevo(&args, dir.path()));
    let run = dir.path().join("run");
    for f in [
        "manifest.json",
        "metrics.csv",
        "report.json",
        "seed-2/base.policy.json",
        "seed-2/iter-1/failure.policy.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("coevo-manifest-v1") && manifest.contains("\"coevolve\""));

    let again = ok(&coevo(&args, dir.path()));
    assert!(again.contains("verified"), "{again}");

    fs::write(run.join("seed-2/iter-0/target.pairs.jsonl"), "tampered\n").unwrap();
    let out = coevo(&args, dir.path());
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"], "corruption");
}

#[test]
fn run_directory_rejects_a_different_config() {
    let dir = setup();
    ok(&coevo(
        &["gen-env", "--config", "c.toml", "--seed", "1", "--out", "r"],
        dir.path(),
    ));
    let out = coevo(
        &["gen-env", "--config", "c.toml", "--seed", "2", "--out", "r"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"], "config");
}

#[test]
fn staged_commands_reproduce_the_pipeline() {
    let dir = setup();
    let common = ["--config", "c.toml", "--seed", "5", "--out", "staged"];
    let stage = |extra: &[&str]| {
        let mut a: Vec<&str> = extra.to_vec();
        a.extend(common);
        ok(&coevo(&a, dir.path()));
    };
    stage(&["gen-env"]);
    stage(&["gen-experts"]);
    stage(&["sft"]);
    stage(&["rollout", "--agent", "target"]);
    stage(&["rollout", "--agent", "failure"]);
    stage(&["build-pairs", "--kind", "failure"]);
    stage(&["build-pairs", "--kind", "target"]);
    stage(&["train-dpo", "--agent", "failure"]);
    stage(&["train-dpo", "--agent", "target"]);
    ok(&coevo(
        &[
            "coevolve", "--config", "c.toml", "--seed", "5", "--out", "full",
        ],
        dir.path(),
    ));

    let d = dir.path();
    for f in [
        "instances.json",
        "experts.jsonl",
        "base.policy.json",
        "iter-0/target.rollouts.jsonl",
        "iter-0/failure.rollouts.jsonl",
        "iter-0/failure.pairs.jsonl",
        "iter-0/target.pairs.jsonl",
        "iter-0/failure.policy.json",
        "iter-0/target.policy.json",
    ] {
        let a = fs::read(d.join("staged").join(f)).unwrap();
        let b = fs::read(d.join("full/seed-5").join(f)).unwrap();
        assert!(a == b, "{f} differs between staged and full runs");
    }

    let conflict = coevo(
        &[
            "build-pairs",
            "--kind",
            "eto",
            "--config",
            "c.toml",
            "--seed",
            "5",
            "--out",
            "staged",
        ],
        d,
    );
    assert!(!conflict.status.success());

    let e = ok(&coevo(
        &[
            "eval",
            "--config",
            "c.toml",
            "--seed",
            "5",
            "--out",
            "staged",
            "--policy",
            "staged/iter-0/target.policy.json",
        ],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(e.trim()).unwrap();
    assert!((0.0..=1.0).contains(&v["test"].as_f64().unwrap()));
}

#[test]
fn analyze_compares_two_runs() {
    let dir = setup();
    let d = dir.path();
    ok(&coevo(
        &[
            "coevolve", "--config", "c.toml", "--seed", "4", "--out", "co",
        ],
        d,
    ));
    ok(&coevo(
        &["eto", "--config", "c.toml", "--seed", "4", "--out", "eto"],
        d,
    ));
    let table = ok(&coevo(&["analyze", "co", "eto", "--out", "cmp"], d));
    assert!(table.contains("coevolve/failure") && table.contains("eto/target"));
    let stats = fs::read_to_string(d.join("cmp/stats.csv")).unwrap();
    assert!(stats.starts_with("label,total,success_frac,failure_frac,hard_negative_frac\n"));
    let labels: Vec<&str> = stats
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "coevolve/base",
            "coevolve/target",
            "coevolve/failure",
            "eto/base",
            "eto/target"
        ]
    );
    let div = fs::read_to_string(d.join("cmp/diversity.csv")).unwrap();
    assert!(div.starts_with("label,instructions,mean_distance,min,q1,median,q3,max\n"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("cmp/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 5);
}
