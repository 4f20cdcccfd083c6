//! The four-step protocol: attack, train, unlearn per method, evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use poisonbench::attacks::{
    backdoor_trigger, gaussian_poison, grad_cancel, grad_match_poison, param_corrupt, CorruptionRadius, TargetSpec,
};
use poisonbench::datakit::fileio::{read_cache, write_cache};
use poisonbench::datakit::{
    ingest_csv, make_blobs_with, make_synth_regression, partition_forget, BlobSpec, CsvSchema, Dataset, DatasetView,
    FeatureMap, Labels, NoiseLedger, SynthRegressionSpec,
};
use poisonbench::diffcore::io::{read_checkpoint, write_checkpoint};
use poisonbench::diffcore::{train, LossKind, ModelCheckpoint, ModelSpec};
use poisonbench::evaluate::{score_set_curve, score_sets, targeted_success, test_accuracy, tpr_at_fpr, Orientation};
use poisonbench::hypotheses::{alignment_experiment, model_shift_experiment};
use poisonbench::rng::{self, Stream};
use poisonbench::unlearn::{unlearn, BudgetPolicy, Method, UnlearnRequest};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{AttackConfig, DatasetConfig, Metric, ModelChoice, RunConfig};
use crate::manifest::{MetricsRow, RunManifest};
use crate::CliError;

pub const NO_UNLEARNING: &str = "no-unlearning";
pub const RETRAIN: &str = "retrain";

/// Tradeoff curves per row, stored for the plotter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub fpr_level: f64,
    pub curves: Vec<(String, Vec<(f64, f64)>)>,
}

fn step<T, E: std::fmt::Display>(name: &str, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::step(name, e))
}

/// Build the train and test splits described by the dataset section.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let seed = cfg.seeds().data;
    let (train, test, feature_dim) = match &cfg.dataset {
        DatasetConfig::Blobs {
            classes,
            dim,
            per_class,
            test_per_class,
            separation,
            feature_dim,
        } => {
            let split = step(
                "data",
                make_blobs_with(&BlobSpec {
                    classes: *classes,
                    dim: *dim,
                    per_class: *per_class,
                    test_per_class: test_per_class.unwrap_or((per_class / 4).max(1)),
                    separation: *separation,
                    seed,
                }),
            )?;
            (split.train, split.test, *feature_dim)
        }
        DatasetConfig::SynthRegression {
            n,
            d,
            informative_dims,
            signal_var,
            tail_var,
            label_noise_var,
            test_fraction,
        } => {
            let s = step(
                "data",
                make_synth_regression(&SynthRegressionSpec {
                    n: *n,
                    d: *d,
                    informative_dims: *informative_dims,
                    signal_var: *signal_var,
                    tail_var: *tail_var,
                    label_noise_var: *label_noise_var,
                    seed,
                }),
            )?;
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(CliError::Config("test_fraction must lie in (0, 1)".into()));
            }
            let mut order: Vec<usize> = (0..s.data.len()).collect();
            order.shuffle(&mut rng::stream(seed, Stream::Subset));
            let n_test = ((*test_fraction * s.data.len() as f64).round() as usize).clamp(1, s.data.len() - 1);
            let (te, tr) = order.split_at(n_test);
            let (mut tr, mut te) = (tr.to_vec(), te.to_vec());
            tr.sort_unstable();
            te.sort_unstable();
            (s.data.subset(&tr), s.data.subset(&te), None)
        }
        DatasetConfig::Csv {
            train,
            test,
            label_column,
            classes,
            feature_dim,
        } => {
            let schema = if *classes {
                CsvSchema::classes(label_column)
            } else {
                CsvSchema::real(label_column)
            };
            let tr = step("data", ingest_csv(train, &schema))?;
            let te = step("data", ingest_csv(test, &schema))?;
            (tr, te, *feature_dim)
        }
    };
    match feature_dim {
        None => Ok((train, test)),
        Some(k) => {
            let fm = step("data", FeatureMap::random(train.dim(), k, child_of(seed)))?;
            Ok((step("data", fm.apply(&train))?, step("data", fm.apply(&test))?))
        }
    }
}

fn child_of(seed: u64) -> u64 {
    rng::child_seed(seed, 0)
}

pub fn model_spec(cfg: &RunConfig, train: &Dataset) -> Result<ModelSpec, CliError> {
    let d = train.dim();
    let spec = match cfg.model.kind {
        ModelChoice::Linear => ModelSpec::linear(d),
        ModelChoice::Logistic | ModelChoice::Mlp => {
            let classes = train
                .classes()
                .ok_or_else(|| CliError::Config("classifier on real-valued labels".into()))?;
            if cfg.model.kind == ModelChoice::Logistic {
                ModelSpec::logistic(d, classes)
            } else {
                ModelSpec::mlp(d, &cfg.model.hidden, classes, cfg.model.activation)
            }
        }
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

/// Targets whose flip the attack aims for, if the attack is targeted.
pub fn attack_targets(cfg: &RunConfig, test: &Dataset) -> Result<Option<Vec<TargetSpec>>, CliError> {
    match &cfg.attack {
        AttackConfig::GradientMatching {
            target_index, y_adv, ..
        } => {
            if *target_index >= test.len() {
                return Err(CliError::Config(format!(
                    "target_index {target_index} outside the test split of {}",
                    test.len()
                )));
            }
            let y_target = test.class(*target_index).expect("targeted attacks need classes");
            Ok(Some(vec![TargetSpec {
                x_target: test.row(*target_index).to_vec(),
                y_target,
                y_adv: *y_adv,
            }]))
        }
        AttackConfig::Backdoor { y_adv, trigger, .. } => {
            let stamped = step("attack", trigger.stamp_all(test))?;
            let targets: Vec<TargetSpec> = (0..stamped.len())
                .filter(|&i| stamped.class(i) != Some(*y_adv))
                .map(|i| TargetSpec {
                    x_target: stamped.row(i).to_vec(),
                    y_target: stamped.class(i).unwrap(),
                    y_adv: *y_adv,
                })
                .collect();
            Ok(Some(targets))
        }
        _ => Ok(None),
    }
}

/// What the evaluator needs besides the model.
pub struct EvalContext {
    pub train: DatasetView,
    pub test: Dataset,
    pub ledger: Option<NoiseLedger>,
    pub targets: Option<Vec<TargetSpec>>,
    pub fpr_level: f64,
    pub orientation: Orientation,
    pub score_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelStats {
    pub accuracy: Option<f64>,
    pub mu: Option<f64>,
    pub tpr: Option<f64>,
    pub targeted: Option<f64>,
    pub curve: Option<Vec<(f64, f64)>>,
}

pub fn model_stats(ctx: &EvalContext, model: &ModelCheckpoint) -> Result<ModelStats, CliError> {
    let mut s = ModelStats::default();
    if matches!(ctx.test.labels(), Labels::Classes { .. }) {
        s.accuracy = Some(step("evaluate", test_accuracy(model, &ctx.test))?);
    }
    if let Some(ledger) = &ctx.ledger {
        let scores = step("evaluate", score_sets(model, &ctx.train.data, ledger, ctx.score_seed))?;
        let curve = score_set_curve(&scores, ctx.orientation);
        s.mu = Some(scores.mean_pois());
        s.tpr = Some(tpr_at_fpr(&curve, ctx.fpr_level));
        s.curve = Some(curve.points);
    }
    if let Some(t) = &ctx.targets {
        if !t.is_empty() {
            s.targeted = Some(step("evaluate", targeted_success(model, t))?);
        }
    }
    Ok(s)
}

/// Step accounting for a row: (steps, gradient evaluations, budget).
pub type Accounting = (usize, usize, usize);

pub fn metrics_row(
    label: &str,
    metrics: &[Metric],
    pre: &ModelStats,
    post: &ModelStats,
    acct: Option<Accounting>,
) -> MetricsRow {
    let value = |m: Metric| match m {
        Metric::TestAccuracy => post.accuracy,
        Metric::MuInitial => pre.mu,
        Metric::MuUpdated => post.mu,
        Metric::TprPre => pre.tpr,
        Metric::TprPost => post.tpr,
        Metric::TargetedPre => pre.targeted,
        Metric::TargetedPost => post.targeted,
        Metric::Steps => Some(acct.map_or(0.0, |a| a.0 as f64)),
        Metric::GradEvals => Some(acct.map_or(0.0, |a| a.1 as f64)),
        Metric::BudgetSteps => acct.map(|a| a.2 as f64),
    };
    MetricsRow {
        method: label.to_string(),
        metrics: metrics.iter().map(|&m| (m.name().to_string(), value(m))).collect(),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Output root: the flag, then the environment variable, then the config,
/// then `runs`.
pub fn output_root(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(crate::OUT_ENV) {
        return PathBuf::from(p);
    }
    cfg.and_then(|c| c.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Directory holding the artifacts of `cfg` under `root`.
pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(&cfg.hash()[..16])
}

struct Artifacts {
    dir: PathBuf,
    paths: BTreeMap<String, PathBuf>,
}

impl Artifacts {
    fn path(&mut self, name: &str, file: &str) -> PathBuf {
        let p = self.dir.join(file);
        self.paths.insert(name.to_string(), p.clone());
        p
    }
}

/// Run every step and write the artifacts and the manifest into
/// `run_dir(root, cfg)`. On failure the partial artifacts stay on disk.
pub fn run_protocol(cfg: &RunConfig, root: &Path) -> Result<RunManifest, CliError> {
    cfg.validate()?;
    let started = now();
    let mut wall = BTreeMap::new();
    let clock = Instant::now();
    let seeds = cfg.seeds();
    let dir = run_dir(root, cfg);
    step("setup", fs::create_dir_all(dir.join("models")))?;
    let mut art = Artifacts {
        dir: dir.clone(),
        paths: BTreeMap::new(),
    };
    let canonical = cfg.canonical();
    step("setup", fs::write(art.path("config", "config.toml"), &canonical))?;

    let (train_clean, test) = load_data(cfg)?;
    let spec = model_spec(cfg, &train_clean)?;
    let loss = LossKind::for_spec(&spec);
    let optim = cfg.training.optim(seeds.train);
    let poison = cfg.attack.poison_spec(seeds.attack);
    let targets = attack_targets(cfg, &test)?;
    let mut summary = BTreeMap::new();
    wall.insert("step:data".to_string(), clock.elapsed().as_secs_f64());

    // Step 1: the attack.
    let t = Instant::now();
    let mut ledger = None;
    let view = match &cfg.attack {
        AttackConfig::Gaussian { .. } => {
            let (view, l) = step("attack", gaussian_poison(&train_clean, &poison))?;
            step("attack", l.write(&art.path("ledger", "ledger.bin")))?;
            ledger = Some(l);
            view
        }
        AttackConfig::Backdoor { y_adv, trigger, .. } => {
            step("attack", backdoor_trigger(&train_clean, trigger, *y_adv, &poison))?
        }
        AttackConfig::GradientMatching { .. } => {
            let (clean, _) = step("attack", train(&spec, &train_clean, &optim, loss))?;
            step("attack", write_checkpoint(&art.path("clean-model", "models/clean.ckpt"), &clean))?;
            let target = &targets.as_ref().expect("gradient matching has a target")[0];
            let gm = cfg.attack.grad_match().expect("gradient matching config");
            let out = step("attack", grad_match_poison(&clean, &train_clean, target, &poison, &gm))?;
            summary.insert("phi".to_string(), out.phi);
            summary.insert(
                "clean-targeted".to_string(),
                step("attack", targeted_success(&clean, std::slice::from_ref(target)))?,
            );
            out.view
        }
        AttackConfig::GradientCanceling {
            eps_w,
            corrupt_steps,
            eta,
            epochs,
            weighting,
            bound,
            ..
        } => {
            let (clean, _) = step("attack", train(&spec, &train_clean, &optim, loss))?;
            step("attack", write_checkpoint(&art.path("clean-model", "models/clean.ckpt"), &clean))?;
            let corrupt = step(
                "attack",
                param_corrupt(&clean, &train_clean, &test, CorruptionRadius(*eps_w), *corrupt_steps),
            )?;
            step("attack", write_checkpoint(&art.path("corrupt-model", "models/corrupt.ckpt"), &corrupt.model))?;
            summary.insert("clean-score".to_string(), corrupt.clean_score);
            summary.insert("corrupt-score".to_string(), corrupt.corrupt_score);
            let gc = step("attack", grad_cancel(&corrupt.model, &train_clean, &poison, *eta, *epochs, bound, *weighting))?;
            summary.insert("gc-initial-objective".to_string(), gc.objective_trace.first().copied().unwrap_or(0.0));
            summary.insert("gc-final-objective".to_string(), gc.final_objective);
            gc.view
        }
    };
    summary.insert("poisons".to_string(), view.poison.len() as f64);
    let view = match &ledger {
        Some(l) => step("attack", partition_forget(&view, l))?,
        None => {
            let ids = view.poison.clone();
            step("attack", view.with_forget(ids))?
        }
    };
    step("attack", write_cache(&view.data, &art.path("train", "train.pbd")))?;
    step("attack", write_cache(&test, &art.path("test", "test.pbd")))?;
    step("attack", fs::write(art.path("forget", "forget.json"), ids_json(&view)))?;
    wall.insert("step:attack".to_string(), t.elapsed().as_secs_f64());

    // Step 2: train on the poisoned set.
    let t = Instant::now();
    let (model, training_steps) = step("train", train(&spec, &view.data, &optim, loss))?;
    step("train", write_checkpoint(&art.path("poisoned-model", "models/poisoned.ckpt"), &model))?;
    wall.insert(NO_UNLEARNING.to_string(), t.elapsed().as_secs_f64());

    let ctx = EvalContext {
        train: view,
        test,
        ledger,
        targets,
        fpr_level: cfg.evaluation.fpr_level,
        orientation: cfg.evaluation.orientation,
        score_seed: cfg.evaluation.score_seed,
    };
    let metrics = &cfg.evaluation.metrics;
    let pre = model_stats(&ctx, &model)?;
    let mut rows = vec![metrics_row(NO_UNLEARNING, metrics, &pre, &pre, None)];
    let mut curves = Vec::new();
    if let Some(c) = &pre.curve {
        curves.push((NO_UNLEARNING.to_string(), c.clone()));
    }

    // Steps 3 and 4: unlearn with each method and evaluate.
    let uoptim = cfg.unlearn.optimizer.optim(seeds.unlearn);
    let budget = step("unlearn", BudgetPolicy::new(cfg.unlearn.budget_fraction, training_steps))?;
    let req = UnlearnRequest {
        model: &model,
        view: &ctx.train,
        train_optim: &optim,
        optim: &uoptim,
        budget,
    };
    let mut jobs = vec![(RETRAIN.to_string(), Method::Retrain)];
    jobs.extend(cfg.method_labels().into_iter().zip(cfg.unlearn.methods.iter().cloned()));
    for (label, method) in jobs {
        let t = Instant::now();
        let out = step(&format!("unlearn:{label}"), unlearn(&req, &method))?;
        step(
            &format!("unlearn:{label}"),
            write_checkpoint(&art.path(&format!("model:{label}"), &format!("models/{label}.ckpt")), &out.model),
        )?;
        let post = model_stats(&ctx, &out.model)?;
        rows.push(metrics_row(
            &label,
            metrics,
            &pre,
            &post,
            Some((out.steps, out.grad_evals, out.budget_steps)),
        ));
        if let Some(c) = post.curve {
            curves.push((label.clone(), c));
        }
        wall.insert(label, t.elapsed().as_secs_f64());
    }
    if !curves.is_empty() {
        let set = CurveSet {
            fpr_level: cfg.evaluation.fpr_level,
            curves,
        };
        step("evaluate", fs::write(art.path("curves", "curves.json"), to_json(&set)?))?;
    }

    if let Some(scfg) = cfg.shift_config() {
        let t = Instant::now();
        let r = step("shift", model_shift_experiment(&spec, &ctx.train, &scfg))?;
        let mut csv = String::from("beta,poison_removed,poison_distance,random_removed,random_distance\n");
        for i in 0..r.poison.betas.len() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.poison.betas[i], r.poison.removed[i], r.poison.distances[i], r.random.removed[i], r.random.distances[i]
            ));
        }
        step("shift", fs::write(art.path("shift", "shift.csv"), csv))?;
        wall.insert("step:shift".to_string(), t.elapsed().as_secs_f64());
    }
    if let (Some(acfg), DatasetConfig::SynthRegression {
        n,
        d,
        informative_dims,
        signal_var,
        tail_var,
        label_noise_var,
        ..
    }) = (cfg.alignment_config(), &cfg.dataset)
    {
        let t = Instant::now();
        let sspec = SynthRegressionSpec {
            n: *n,
            d: *d,
            informative_dims: *informative_dims,
            signal_var: *signal_var,
            tail_var: *tail_var,
            label_noise_var: *label_noise_var,
            seed: seeds.data,
        };
        let r = step("alignment", alignment_experiment(&sspec, &acfg))?;
        let mut csv = String::from("step,cos_poison,cos_random\n");
        for (i, (b, r)) in r.mean_cos_blue.iter().zip(&r.mean_cos_red).enumerate() {
            csv.push_str(&format!("{i},{b},{r}\n"));
        }
        summary.insert("alignment-mean-abs-poison".to_string(), r.mean_abs_blue);
        summary.insert("alignment-mean-abs-random".to_string(), r.mean_abs_red);
        step("alignment", fs::write(art.path("alignment", "alignment.csv"), csv))?;
        wall.insert("step:alignment".to_string(), t.elapsed().as_secs_f64());
    }

    let mut table = String::from("method");
    for m in metrics {
        table.push(',');
        table.push_str(m.name());
    }
    table.push('\n');
    for r in &rows {
        table.push_str(&r.method);
        for m in metrics {
            table.push(',');
            if let Some(v) = r.get(m.name()) {
                table.push_str(&v.to_string());
            }
        }
        table.push('\n');
    }
    step("evaluate", fs::write(art.path("metrics", "metrics.csv"), table))?;

    let manifest = RunManifest {
        config_hash: crate::config::hash_bytes(canonical.as_bytes()),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_dir: dir.clone(),
        artifacts: art.paths,
        training_steps,
        attack_summary: summary,
        rows,
        started,
        finished: now(),
        wall_seconds: wall,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

fn ids_json(view: &DatasetView) -> String {
    serde_json::to_string(&view.forget).expect("id sets serialize")
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::step("write", e))
}

/// Re-evaluate a checkpoint against the data of an existing run, taking the
/// run's poisoned model as the pre-unlearning reference.
pub fn eval_checkpoint(manifest: &RunManifest, checkpoint: &Path) -> Result<MetricsRow, CliError> {
    let need = |name: &str| {
        manifest
            .artifact(name)
            .ok_or_else(|| CliError::Config(format!("manifest has no {name} artifact")))
    };
    let cfg = RunConfig::load(need("config")?)?;
    let train_data = step("eval", read_cache(need("train")?))?;
    let test = step("eval", read_cache(need("test")?))?;
    let forget: std::collections::BTreeSet<u64> =
        step("eval", serde_json::from_str(&step("eval", fs::read_to_string(need("forget")?))?))?;
    let ledger = match manifest.artifact("ledger") {
        Some(p) => Some(step("eval", NoiseLedger::read(p))?),
        None => None,
    };
    let view = step("eval", DatasetView::clean(train_data).with_forget(forget))?;
    let ctx = EvalContext {
        train: view,
        targets: attack_targets(&cfg, &test)?,
        test,
        ledger,
        fpr_level: cfg.evaluation.fpr_level,
        orientation: cfg.evaluation.orientation,
        score_seed: cfg.evaluation.score_seed,
    };
    let pre_model = step("eval", read_checkpoint(need("poisoned-model")?))?;
    let model = step("eval", read_checkpoint(checkpoint))?;
    let pre = model_stats(&ctx, &pre_model)?;
    let post = model_stats(&ctx, &model)?;
    let label = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    Ok(metrics_row(&label, &cfg.evaluation.metrics, &pre, &post, None))
}
