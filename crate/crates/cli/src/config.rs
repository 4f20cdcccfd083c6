//! Run configuration. Every section rejects unknown keys.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use poisonbench::attacks::{CancelWeighting, GradMatchConfig, PerturbationBound, Trigger};
use poisonbench::datakit::{AttackKind, PoisonSpec};
use poisonbench::diffcore::{Activation, OptimConfig, OptimizerKind};
use poisonbench::evaluate::Orientation;
use poisonbench::hypotheses::{AlignmentConfig, ShiftConfig};
use poisonbench::rng::child_seed;
use poisonbench::unlearn::Method;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every derived seed.
    pub seed: u64,
    /// Output root; the flag and the environment variable take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub training: TrainingConfig,
    pub unlearn: UnlearnConfig,
    pub evaluation: EvaluationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_per_class: Option<usize>,
        separation: f64,
        /// Random ReLU feature map applied to both splits.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_dim: Option<usize>,
    },
    SynthRegression {
        n: usize,
        d: usize,
        informative_dims: usize,
        #[serde(default = "one")]
        signal_var: f64,
        #[serde(default = "tail_var")]
        tail_var: f64,
        #[serde(default = "label_noise_var")]
        label_noise_var: f64,
        /// Fraction of samples held out for testing.
        #[serde(default = "test_fraction")]
        test_fraction: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        label_column: String,
        /// Class labels when true, real targets otherwise.
        #[serde(default = "yes")]
        classes: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature_dim: Option<usize>,
    },
}

fn one() -> f64 {
    1.0
}
fn tail_var() -> f64 {
    1e-4
}
fn label_noise_var() -> f64 {
    1e-2
}
fn test_fraction() -> f64 {
    0.2
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackConfig {
    Gaussian {
        budget_fraction: f64,
        /// Noise standard deviation per coordinate.
        eps_p: f64,
    },
    GradientMatching {
        budget_fraction: f64,
        /// Index of the target in the test split.
        target_index: usize,
        y_adv: usize,
        restarts: usize,
        steps: usize,
        step_size: f64,
        bound: PerturbationBound,
    },
    GradientCanceling {
        budget_fraction: f64,
        eps_w: f64,
        corrupt_steps: usize,
        eta: f64,
        epochs: usize,
        #[serde(default)]
        weighting: CancelWeighting,
        #[serde(default = "PerturbationBound::unbounded")]
        bound: PerturbationBound,
    },
    Backdoor {
        budget_fraction: f64,
        y_adv: usize,
        trigger: Trigger,
    },
}

impl AttackConfig {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackConfig::Gaussian { .. } => AttackKind::Gaussian,
            AttackConfig::GradientMatching { .. } => AttackKind::GradientMatching,
            AttackConfig::GradientCanceling { .. } => AttackKind::GradientCanceling,
            AttackConfig::Backdoor { .. } => AttackKind::Backdoor,
        }
    }

    pub fn budget_fraction(&self) -> f64 {
        match *self {
            AttackConfig::Gaussian { budget_fraction, .. }
            | AttackConfig::GradientMatching { budget_fraction, .. }
            | AttackConfig::GradientCanceling { budget_fraction, .. }
            | AttackConfig::Backdoor { budget_fraction, .. } => budget_fraction,
        }
    }

    pub fn poison_spec(&self, seed: u64) -> PoisonSpec {
        PoisonSpec {
            budget_fraction: self.budget_fraction(),
            eps_p: match *self {
                AttackConfig::Gaussian { eps_p, .. } => eps_p,
                _ => 0.0,
            },
            attack_kind: self.kind(),
            seed,
        }
    }

    pub fn grad_match(&self) -> Option<GradMatchConfig> {
        match self {
            AttackConfig::GradientMatching {
                restarts,
                steps,
                step_size,
                bound,
                ..
            } => Some(GradMatchConfig {
                restarts: *restarts,
                steps: *steps,
                step_size: *step_size,
                bound: bound.clone(),
            }),
            _ => None,
        }
    }
}

/// Optimizer settings without a seed; seeds are derived from the global one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default = "weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

fn momentum() -> f64 {
    0.9
}
fn weight_decay() -> f64 {
    5e-4
}

impl TrainingConfig {
    pub fn optim(&self, seed: u64) -> OptimConfig {
        OptimConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: if self.optimizer == OptimizerKind::SgdMomentum {
                self.momentum
            } else {
                0.0
            },
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    /// Fraction of the training steps each approximate method may spend.
    pub budget_fraction: f64,
    pub optimizer: TrainingConfig,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    TestAccuracy,
    MuInitial,
    MuUpdated,
    TprPre,
    TprPost,
    TargetedPre,
    TargetedPost,
    Steps,
    GradEvals,
    BudgetSteps,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::TestAccuracy,
        Metric::MuInitial,
        Metric::MuUpdated,
        Metric::TprPre,
        Metric::TprPost,
        Metric::TargetedPre,
        Metric::TargetedPost,
        Metric::Steps,
        Metric::GradEvals,
        Metric::BudgetSteps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::TestAccuracy => "test-accuracy",
            Metric::MuInitial => "mu-initial",
            Metric::MuUpdated => "mu-updated",
            Metric::TprPre => "tpr-pre",
            Metric::TprPost => "tpr-post",
            Metric::TargetedPre => "targeted-pre",
            Metric::TargetedPost => "targeted-post",
            Metric::Steps => "steps",
            Metric::GradEvals => "grad-evals",
            Metric::BudgetSteps => "budget-steps",
        }
    }
}

fn all_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub fpr_level: f64,
    /// Seed of the fresh noise behind the independent scores.
    pub score_seed: u64,
    #[serde(default)]
    pub orientation: Orientation,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
}

/// Model-shift curves on the corrupted training set (convex models only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    pub betas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_count: Option<usize>,
    pub lambda: f64,
    pub tol: f64,
    pub max_iters: u64,
}

/// Gradient-alignment experiment on the synthetic regression dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSection {
    pub poisons: usize,
    pub eps_w: f64,
    pub corrupt_steps: usize,
    pub gc_eta: f64,
    pub gc_epochs: usize,
    #[serde(default)]
    pub gc_weighting: CancelWeighting,
    pub lambda: f64,
    pub random_start: usize,
    pub match_tolerance: f64,
    pub gd_learning_rate: f64,
    pub gd_batch_size: usize,
    pub gd_steps: usize,
    pub replicates: usize,
}

/// Seeds for the individual steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub attack: u64,
    pub train: u64,
    pub unlearn: u64,
    pub hypotheses: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            data: child_seed(self.seed, 0),
            attack: child_seed(self.seed, 1),
            train: child_seed(self.seed, 2),
            unlearn: child_seed(self.seed, 3),
            hypotheses: child_seed(self.seed, 4),
        }
    }

    /// The bytes written next to the artifacts; the hash covers exactly these.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn hash(&self) -> String {
        hash_bytes(self.canonical().as_bytes())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let b = self.unlearn.budget_fraction;
        if !(b > 0.0 && b <= 1.0) {
            return bad(format!("unlearn.budget_fraction must lie in (0, 1], got {b}"));
        }
        let bp = self.attack.budget_fraction();
        if !(bp > 0.0 && bp < 1.0) {
            return bad(format!("attack.budget_fraction must lie in (0, 1), got {bp}"));
        }
        for (name, t) in [("training", &self.training), ("unlearn.optimizer", &self.unlearn.optimizer)] {
            if let Err(e) = t.optim(0).validate() {
                return bad(format!("{name}: {e}"));
            }
            if t.epochs == 0 {
                return bad(format!("{name}.epochs must be at least 1"));
            }
        }
        for m in &self.unlearn.methods {
            if let Err(e) = m.validate() {
                return bad(format!("unlearn method {}: {e}", m.name()));
            }
        }
        let l = self.evaluation.fpr_level;
        if !(l > 0.0 && l < 1.0) {
            return bad(format!("evaluation.fpr_level must lie in (0, 1), got {l}"));
        }
        let distinct: BTreeSet<_> = self.evaluation.metrics.iter().collect();
        if distinct.len() != self.evaluation.metrics.len() {
            return bad("evaluation.metrics lists a metric twice".into());
        }
        let regression = matches!(self.dataset, DatasetConfig::SynthRegression { .. })
            || matches!(self.dataset, DatasetConfig::Csv { classes: false, .. });
        match (self.model.kind, regression) {
            (ModelChoice::Linear, false) => return bad("a linear model needs real-valued labels".into()),
            (ModelChoice::Logistic | ModelChoice::Mlp, true) => {
                return bad("classifiers need class labels".into())
            }
            _ => {}
        }
        if self.model.kind == ModelChoice::Mlp && self.model.hidden.is_empty() {
            return bad("an mlp needs at least one hidden layer".into());
        }
        if self.model.kind != ModelChoice::Mlp && !self.model.hidden.is_empty() {
            return bad("only an mlp takes hidden layers".into());
        }
        if regression && matches!(self.attack, AttackConfig::GradientMatching { .. } | AttackConfig::Backdoor { .. }) {
            return bad("targeted attacks need class labels".into());
        }
        if let Some(g) = self.attack.grad_match() {
            if let Err(e) = g.validate() {
                return bad(format!("attack: {e}"));
            }
        }
        if self.shift.is_some() && self.model.kind == ModelChoice::Mlp {
            return bad("the shift experiment needs a linear or logistic model".into());
        }
        if self.alignment.is_some() && !matches!(self.dataset, DatasetConfig::SynthRegression { .. }) {
            return bad("the alignment experiment needs the synth-regression dataset".into());
        }
        Ok(())
    }

    pub fn shift_config(&self) -> Option<ShiftConfig> {
        self.shift.as_ref().map(|s| ShiftConfig {
            betas: s.betas.clone(),
            random_count: s.random_count,
            lambda: s.lambda,
            tol: s.tol,
            max_iters: s.max_iters,
            seed: self.seeds().hypotheses,
        })
    }

    pub fn alignment_config(&self) -> Option<AlignmentConfig> {
        self.alignment.as_ref().map(|a| AlignmentConfig {
            poisons: a.poisons,
            eps_w: a.eps_w,
            corrupt_steps: a.corrupt_steps,
            gc_eta: a.gc_eta,
            gc_epochs: a.gc_epochs,
            gc_weighting: a.gc_weighting,
            lambda: a.lambda,
            random_start: a.random_start,
            match_tolerance: a.match_tolerance,
            gd_learning_rate: a.gd_learning_rate,
            gd_batch_size: a.gd_batch_size,
            gd_steps: a.gd_steps,
            replicates: a.replicates,
            seed: self.seeds().hypotheses,
        })
    }

    /// Row labels for the requested methods. Repeated methods get a suffix;
    /// the always-present retrain baseline counts as the first retrain.
    pub fn method_labels(&self) -> Vec<String> {
        let mut labels = Vec::new();
        for (i, m) in self.unlearn.methods.iter().enumerate() {
            let mut count = self.unlearn.methods[..i].iter().filter(|o| o.name() == m.name()).count();
            if *m == Method::Retrain {
                count += 1;
            }
            labels.push(if count == 0 {
                m.name().to_string()
            } else {
                format!("{}-{}", m.name(), count + 1)
            });
        }
        labels
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
