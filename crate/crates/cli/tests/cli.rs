use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use poisonbench_cli::config::{hash_bytes, RunConfig};
use poisonbench_cli::plot::{render, PlotKind};
use poisonbench_cli::protocol::{eval_checkpoint, run_protocol};
use poisonbench_cli::sweep::{parse_grid, points};
use poisonbench_cli::RunManifest;

const TINY: &str = include_str!("../configs/tiny-gaussian.toml");

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_poisonbench"));
    c.env_remove(poisonbench_cli::OUT_ENV);
    c
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny() -> RunConfig {
    RunConfig::parse(TINY).unwrap()
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/configs")).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn unknown_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let typo = TINY.replace("learning_rate = 0.05\nbatch_size = 16\nepochs = 20", "learning_rte = 0.05\nbatch_size = 16\nepochs = 20");
    let cfg = write(dir.path(), "typo.toml", &typo);
    let o = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rte"), "{}", stderr(&o));

    let extra = TINY.replace("[model]", "[model]\ndropout = 0.5");
    assert!(RunConfig::parse(&extra).is_err());
    let method = TINY.replace("sigma = 0.001", "sigma = 0.001\nsteps = 3");
    assert!(RunConfig::parse(&method).is_err());
    let missing_seed = TINY.replace("seed = 7\n", "");
    assert!(RunConfig::parse(&missing_seed).is_err());
}

#[test]
fn invalid_values_are_config_errors() {
    for bad in [
        TINY.replace("budget_fraction = 0.1", "budget_fraction = 0.0"),
        TINY.replace("budget_fraction = 0.1", "budget_fraction = 1.5"),
        TINY.replace("fpr_level = 0.05", "fpr_level = 1.0"),
        TINY.replace("sigma = 0.001", "sigma = -1.0"),
        TINY.replace("kind = \"mlp\"", "kind = \"linear\""),
        TINY.replace("method = \"gd\"", "method = \"forget-everything\""),
    ] {
        assert!(matches!(RunConfig::parse(&bad), Err(poisonbench_cli::CliError::Config(_))), "{bad}");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.toml", &TINY.replace("budget_fraction = 0.1", "budget_fraction = 0.0"));
    let o = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn run_writes_a_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("runs");
    let o = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let parsed = tiny();
    let run_dir = out.join(&parsed.hash()[..16]);
    let m = RunManifest::read(&run_dir.join("manifest.json")).unwrap();
    let stored = fs::read(m.artifact("config").unwrap()).unwrap();
    assert_eq!(hash_bytes(&stored), m.config_hash);
    assert_eq!(m.config_hash, parsed.hash());
    assert!(m.artifacts.values().all(|p| p.exists()));

    let labels: Vec<&str> = m.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(labels, ["no-unlearning", "retrain", "gd", "ngd", "ssd"]);
    let names = ["budget-steps", "grad-evals", "mu-initial", "mu-updated", "steps", "targeted-post", "targeted-pre", "test-accuracy", "tpr-post", "tpr-pre"];
    for r in &m.rows {
        assert_eq!(r.metrics.keys().map(String::as_str).collect::<Vec<_>>(), names);
        assert!(r.get("mu-updated").is_some() && r.get("targeted-post").is_none());
    }
    let none = m.row("no-unlearning").unwrap();
    assert_eq!(none.get("mu-initial"), none.get("mu-updated"));
    assert_eq!(none.get("steps"), Some(0.0));

    // Budget audit against an independent recount.
    let budget = (0.1 * m.training_steps as f64).floor();
    for r in m.rows.iter().filter(|r| !["no-unlearning", "retrain"].contains(&r.method.as_str())) {
        assert_eq!(r.get("budget-steps"), Some(budget));
        assert!(r.get("grad-evals").unwrap() <= budget, "{}", r.method);
    }
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("no-unlearning") && text.contains("manifest:"));
}

#[test]
fn reruns_reproduce_the_metrics_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let a = run_protocol(&cfg, &dir.path().join("a")).unwrap();
    let b = run_protocol(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.attack_summary, b.attack_summary);
    assert_eq!(a.config_hash, b.config_hash);
    let csv = |m: &RunManifest| fs::read(m.artifact("metrics").unwrap()).unwrap();
    assert_eq!(csv(&a), csv(&b));
    let ckpt = |m: &RunManifest| fs::read(m.artifact("model:gd").unwrap()).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));

    let reseeded = RunConfig { seed: 8, ..cfg };
    let c = run_protocol(&reseeded, &dir.path().join("a")).unwrap();
    assert_ne!(c.config_hash, a.config_hash);
    assert_ne!(c.rows, a.rows);
}

#[test]
fn retrain_only_gives_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.unlearn.methods = vec![poisonbench::unlearn::Method::Retrain];
    let m = run_protocol(&cfg, dir.path()).unwrap();
    let labels: Vec<&str> = m.rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(labels, ["no-unlearning", "retrain", "retrain-2"]);
    assert_eq!(m.rows[1].metrics, m.rows[2].metrics);
}

#[test]
fn metric_selection_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("score_seed = 11", "score_seed = 11\nmetrics = [\"tpr-post\", \"grad-evals\"]");
    let cfg = write(dir.path(), "m.toml", &text);
    let o = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--method", "gd", "--seed", "3"])
        .env(poisonbench_cli::OUT_ENV, dir.path().join("env-root"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut parsed = RunConfig::parse(&text).unwrap();
    parsed.seed = 3;
    parsed.unlearn.methods.truncate(1);
    let m = RunManifest::read(&dir.path().join("env-root").join(&parsed.hash()[..16]).join("manifest.json")).unwrap();
    assert_eq!(m.rows.len(), 3);
    for r in &m.rows {
        assert_eq!(r.metrics.keys().collect::<Vec<_>>(), ["grad-evals", "tpr-post"]);
    }
    let o = bin().args(["run", "--config"]).arg(&cfg).args(["--method", "scrub"]).output().unwrap();
    assert_eq!(code(&o), 2);
    let dup = TINY.replace("score_seed = 11", "score_seed = 11\nmetrics = [\"steps\", \"steps\"]");
    assert!(RunConfig::parse(&dup).is_err());
}

#[test]
fn eval_reproduces_a_stored_row() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_protocol(&tiny(), dir.path()).unwrap();
    let row = eval_checkpoint(&m, m.artifact("model:gd").unwrap()).unwrap();
    let stored = m.row("gd").unwrap();
    for k in ["test-accuracy", "mu-initial", "mu-updated", "tpr-pre", "tpr-post"] {
        assert_eq!(row.get(k), stored.get(k), "{k}");
    }
    let o = bin()
        .arg("eval")
        .arg(&m.run_dir)
        .arg("--checkpoint")
        .arg(m.artifact("poisoned-model").unwrap())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: poisonbench_cli::MetricsRow = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed.get("mu-updated"), m.row("no-unlearning").unwrap().get("mu-updated"));
}

#[test]
fn step_failures_exit_3_and_keep_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    // 60 samples per class cannot supply 72 poisons of one class.
    let text = TINY.replace(
        "kind = \"gaussian\"\nbudget_fraction = 0.05\neps_p = 0.5",
        "kind = \"gradient-matching\"\nbudget_fraction = 0.4\ntarget_index = 0\ny_adv = 1\nrestarts = 1\nsteps = 2\nstep_size = 0.1\nbound = { norm_kind = \"l2\", radius = 1.0 }",
    );
    let cfg = write(dir.path(), "gm.toml", &text);
    let o = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("step attack failed"), "{}", stderr(&o));
    let hash = RunConfig::parse(&text).unwrap().hash();
    let run_dir = dir.path().join(&hash[..16]);
    assert!(run_dir.join("config.toml").exists());
    assert!(run_dir.join("models/clean.ckpt").exists());
    assert!(!run_dir.join("manifest.json").exists());
}

#[test]
fn targeted_and_indiscriminate_runs() {
    let dir = tempfile::tempdir().unwrap();
    let gm = TINY.replace(
        "kind = \"gaussian\"\nbudget_fraction = 0.05\neps_p = 0.5",
        "kind = \"gradient-matching\"\nbudget_fraction = 0.05\ntarget_index = 0\ny_adv = 2\nrestarts = 2\nsteps = 5\nstep_size = 0.1\nbound = { norm_kind = \"inf\", radius = 1.0 }",
    );
    let gm = gm.replace("y_adv = 2", if tiny_target_class() == 2 { "y_adv = 1" } else { "y_adv = 2" });
    let m = run_protocol(&RunConfig::parse(&gm).unwrap(), dir.path()).unwrap();
    for r in &m.rows {
        let t = r.get("targeted-post").unwrap();
        assert!(t == 0.0 || t == 1.0);
        assert!(r.get("mu-updated").is_none());
    }
    assert!(m.attack_summary.contains_key("phi"));

    let bd = TINY.replace(
        "kind = \"gaussian\"\nbudget_fraction = 0.05\neps_p = 0.5",
        "kind = \"backdoor\"\nbudget_fraction = 0.1\ny_adv = 0\ntrigger = { coords = [0, 1], values = [6.0, -6.0] }",
    );
    let m = run_protocol(&RunConfig::parse(&bd).unwrap(), dir.path()).unwrap();
    let success = m.row("no-unlearning").unwrap().get("targeted-post").unwrap();
    assert!((0.0..=1.0).contains(&success));

    let gc = TINY
        .replace(
            "kind = \"gaussian\"\nbudget_fraction = 0.05\neps_p = 0.5",
            "kind = \"gradient-canceling\"\nbudget_fraction = 0.1\neps_w = 2.0\ncorrupt_steps = 20\neta = 1.0\nepochs = 20\nweighting = \"mass\"",
        )
        .replace("kind = \"mlp\"\nhidden = [8]\nactivation = \"tanh\"", "kind = \"logistic\"")
        .replace("[evaluation]", "[shift]\nbetas = [0.5, 1.0]\nlambda = 0.01\ntol = 1e-6\nmax_iters = 500\n\n[evaluation]");
    let m = run_protocol(&RunConfig::parse(&gc).unwrap(), dir.path()).unwrap();
    assert!(m.attack_summary["gc-final-objective"] <= m.attack_summary["gc-initial-objective"]);
    assert!(m.artifact("shift").unwrap().exists());
    assert!(m.artifact("curves").is_none());
    let svg = render(PlotKind::Shift, &[m]).unwrap();
    assert!(svg.contains("<!-- data poison") && svg.contains("<!-- data random"));
}

fn tiny_target_class() -> usize {
    let (_, test) = poisonbench_cli::protocol::load_data(&tiny()).unwrap();
    test.class(0).unwrap()
}

#[test]
fn plots_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_protocol(&tiny(), dir.path()).unwrap();
    let mpath = m.run_dir.join("manifest.json");
    let plot = |kind: &str, name: &str| {
        let out = dir.path().join(name);
        let o = bin().args(["plot", "--kind", kind, "--out"]).arg(&out).arg(&mpath).output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let a = plot("tradeoff", "a.svg");
    assert_eq!(a, plot("tradeoff", "b.svg"));
    assert!(a.starts_with("<svg") && a.contains("<!-- data diagonal 0,0;1,1 -->"));
    assert!(a.contains("<!-- data no-unlearning"));

    let g = plot("gus", "g.svg");
    assert_eq!(g, plot("gus", "g2.svg"));
    let retrain = m.row("retrain").unwrap().get("mu-updated").unwrap();
    assert!(g.contains(&format!("<!-- data baseline retrain {retrain} -->")));
    assert!(g.contains("stroke-dasharray"));

    let o = bin().args(["plot", "--kind", "pie", "--out"]).arg(dir.path().join("x.svg")).arg(&mpath).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(render(PlotKind::Shift, &[m]).is_err());
}

#[test]
fn sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t.toml", TINY);
    let empty = write(dir.path(), "empty.toml", "");
    let o = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--grid")
        .arg(&empty)
        .arg("--out")
        .arg(dir.path().join("e"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("0 points"));

    let grid = write(dir.path(), "g.toml", "\"attack.budget_fraction\" = [0.05, 0.1]\n\"training.epochs\" = [5]\n");
    let root = dir.path().join("s");
    let sweep = || {
        bin()
            .args(["sweep", "--config"])
            .arg(&cfg)
            .arg("--grid")
            .arg(&grid)
            .arg("--out")
            .arg(&root)
            .args(["--jobs", "2", "--method", "gd"])
            .output()
            .unwrap()
    };
    let o = sweep();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(root.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert!(lines[0].starts_with("point,config_hash,status,attack.budget_fraction,training.epochs,method,"));
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1..].iter().all(|l| l.contains(",ok,")));

    // A second pass reuses the stored manifests.
    let manifests: Vec<PathBuf> = fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().path().join("manifest.json"))
        .filter(|p| p.exists())
        .collect();
    assert_eq!(manifests.len(), 2);
    let before: Vec<String> = manifests.iter().map(|p| fs::read_to_string(p).unwrap()).collect();
    assert_eq!(code(&sweep()), 0);
    assert_eq!(fs::read_to_string(root.join("summary.csv")).unwrap(), summary);
    let after: Vec<String> = manifests.iter().map(|p| fs::read_to_string(p).unwrap()).collect();
    assert_eq!(before, after);

    let bad = write(dir.path(), "bad.toml", "\"nosuch.key\" = [1]\n");
    let o = bin().args(["sweep", "--config"]).arg(&cfg).arg("--grid").arg(&bad).arg("--out").arg(&root).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn failed_sweep_points_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace(
        "kind = \"gaussian\"\nbudget_fraction = 0.05\neps_p = 0.5",
        "kind = \"gradient-matching\"\nbudget_fraction = 0.05\ntarget_index = 0\ny_adv = 1\nrestarts = 1\nsteps = 2\nstep_size = 0.1\nbound = { norm_kind = \"l2\", radius = 1.0 }",
    );
    let cfg = write(dir.path(), "gm.toml", &text);
    let grid = write(dir.path(), "g.toml", "\"attack.budget_fraction\" = [0.01, 0.5]\n");
    let root = dir.path().join("s");
    let o = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--grid")
        .arg(&grid)
        .arg("--out")
        .arg(&root)
        .args(["--method", "gd"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let summary = fs::read_to_string(root.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.contains(",ok,")).count(), 3);
    assert_eq!(summary.lines().filter(|l| l.contains("failed: step attack failed")).count(), 1);
}

#[test]
fn grid_expansion() {
    let g = parse_grid("b = [1, 2]\na = [\"x\", \"y\", \"z\"]\n").unwrap();
    let p = points(&g);
    assert_eq!(p.len(), 6);
    assert_eq!(p[0][0].0, "a");
    assert_eq!(p[1][1].1, toml::Value::Integer(2));
    assert!(parse_grid("a = 3\n").is_err());
    assert!(parse_grid("a = []\n").is_err());
    assert!(points(&parse_grid("").unwrap()).is_empty());
}

#[test]
fn inspect_prints_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_protocol(&tiny(), dir.path()).unwrap();
    let o = bin().arg("inspect").arg(m.run_dir.join("manifest.json")).output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains(&m.config_hash) && text.lines().any(|l| l.starts_with("ssd")));
    let o = bin().args(["inspect", "--json"]).arg(&m.run_dir).output().unwrap();
    let back: RunManifest = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(back, m);
    let o = bin().arg("inspect").arg(dir.path().join("missing.json")).output().unwrap();
    assert_eq!(code(&o), 2);
}
