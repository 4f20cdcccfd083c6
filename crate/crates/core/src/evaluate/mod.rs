//! Residual-influence statistics: the Gaussian Unlearning Score, score-set
//! and loss-threshold membership inference, the analytic Gaussian tradeoff,
//! targeted success and test accuracy.

mod normal;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::TargetSpec;
use crate::datakit::{Dataset, NoiseLedger};
use crate::diffcore::{self, input_grads, LossKind, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub use normal::{norm_cdf, norm_quantile};

/// `<g, xi> / (eps_p ||g||)`, or `None` when `g` vanishes.
pub fn normalized_score(g: &[f64], xi: &[f64], eps_p: f64) -> Option<f64> {
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gn == 0.0 || !gn.is_finite() {
        return None;
    }
    let dot: f64 = g.iter().zip(xi).map(|(a, b)| a * b).sum();
    Some(dot / (eps_p * gn))
}

/// Paired poison / independent scores over the ledger entries (in id order).
/// Entries with a zero input gradient are dropped from both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub ids: Vec<u64>,
    pub pois: Vec<f64>,
    pub indep: Vec<f64>,
    pub dim: usize,
    /// Ledger entries skipped for a zero gradient.
    pub skipped: usize,
}

impl ScoreSet {
    pub fn mean_pois(&self) -> f64 {
        mean(&self.pois)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Input gradients at each ledger entry's clean base sample, labelled with the
/// label stored in `data` for that id. Rows follow the ledger's id order.
fn base_gradients(model: &ModelCheckpoint, data: &Dataset, ledger: &NoiseLedger) -> Result<(Vec<u64>, DMatrix<f64>)> {
    if ledger.dim != model.spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.spec.input_dim,
            got: ledger.dim,
        });
    }
    let ids: Vec<u64> = ledger.entries.keys().copied().collect();
    let idx = ids.iter().map(|&id| data.index_of(id)).collect::<Result<Vec<_>>>()?;
    let mut x = DMatrix::zeros(ids.len(), ledger.dim);
    for (r, e) in ledger.entries.values().enumerate() {
        x.row_mut(r).iter_mut().zip(&e.base_x).for_each(|(o, v)| *o = *v);
    }
    if ids.is_empty() {
        return Ok((ids, x));
    }
    let loss = LossKind::for_spec(&model.spec);
    let g = input_grads(model, &x, &data.targets(&idx), loss)?;
    Ok((ids, g))
}

/// Gaussian Unlearning Score: mean of `I_z` over the ledger, with `g_z` taken
/// at the clean base sample. Returns the mean and the number of skipped
/// zero-gradient entries.
pub fn gus(model: &ModelCheckpoint, data: &Dataset, ledger: &NoiseLedger) -> Result<(f64, usize)> {
    let (_, g) = base_gradients(model, data, ledger)?;
    let mut scores = Vec::with_capacity(ledger.len());
    for (r, e) in ledger.entries.values().enumerate() {
        let gr: Vec<f64> = g.row(r).iter().copied().collect();
        if let Some(s) = normalized_score(&gr, &e.xi, ledger.eps_p) {
            scores.push(s);
        }
    }
    if scores.is_empty() {
        return Err(Error::Degenerate("every ledger entry has a zero input gradient".into()));
    }
    Ok((mean(&scores), ledger.len() - scores.len()))
}

/// `I_pois` from the stored noise and `I_indep` from fresh noise of the same
/// scale, on the same base samples and gradients. The fresh noise is drawn for
/// every entry in id order, so skipping an entry never shifts the others.
pub fn score_sets(model: &ModelCheckpoint, data: &Dataset, ledger: &NoiseLedger, seed: u64) -> Result<ScoreSet> {
    let (ids, g) = base_gradients(model, data, ledger)?;
    let mut fresh = rng::stream(seed, Stream::FreshNoise);
    let mut out = ScoreSet {
        ids: Vec::with_capacity(ids.len()),
        pois: Vec::with_capacity(ids.len()),
        indep: Vec::with_capacity(ids.len()),
        dim: ledger.dim,
        skipped: 0,
    };
    for (r, (id, e)) in ledger.entries.iter().enumerate() {
        let xi_tilde: Vec<f64> = (0..ledger.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut fresh);
                ledger.eps_p * z
            })
            .collect();
        let gr: Vec<f64> = g.row(r).iter().copied().collect();
        match (normalized_score(&gr, &e.xi, ledger.eps_p), normalized_score(&gr, &xi_tilde, ledger.eps_p)) {
            (Some(p), Some(q)) => {
                out.ids.push(*id);
                out.pois.push(p);
                out.indep.push(q);
            }
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GusReport {
    pub mu_initial: f64,
    pub mu_updated: f64,
    /// Mean and variance of `I_indep` under the updated model.
    pub null_mean: f64,
    pub null_var: f64,
}

impl GusReport {
    pub fn new(initial: &ScoreSet, updated: &ScoreSet) -> Self {
        GusReport {
            mu_initial: initial.mean_pois(),
            mu_updated: updated.mean_pois(),
            null_mean: mean(&updated.indep),
            null_var: variance(&updated.indep),
        }
    }
}

/// Which tail of the score the attacker bets on.
///
/// Training on `x + xi` lowers the loss along `xi`, so a model that still
/// remembers the noise gives `I_z < 0`; `Descent` flags low scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    Descent,
    Ascent,
}

/// Empirical ROC points `(fpr, tpr)`, from `(0, 0)` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweep `tau` over every pooled score plus `+inf` and `-inf`, guessing
/// "member" when `score >= tau` on both sets.
pub fn tradeoff_curve(members: &[f64], nonmembers: &[f64]) -> TradeoffCurve {
    let mut pos = members.to_vec();
    let mut neg = nonmembers.to_vec();
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));
    let mut taus: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let rate = |count: usize, total: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let mut points = vec![(0.0, 0.0)];
    let (mut i, mut j) = (0, 0);
    for tau in taus {
        while i < pos.len() && pos[i] >= tau {
            i += 1;
        }
        while j < neg.len() && neg[j] >= tau {
            j += 1;
        }
        points.push((rate(j, neg.len()), rate(i, pos.len())));
    }
    points.push((1.0, 1.0));
    TradeoffCurve { points }
}

/// Curve for a score set under the given orientation.
pub fn score_set_curve(scores: &ScoreSet, orientation: Orientation) -> TradeoffCurve {
    match orientation {
        Orientation::Ascent => tradeoff_curve(&scores.pois, &scores.indep),
        Orientation::Descent => {
            let flip = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
            tradeoff_curve(&flip(&scores.pois), &flip(&scores.indep))
        }
    }
}

/// Largest TPR among points with `fpr <= level`.
pub fn tpr_at_fpr(curve: &TradeoffCurve, level: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|(f, _)| *f <= level)
        .map(|&(_, t)| t)
        .fold(0.0, f64::max)
}

/// `1 - Phi(Phi^-1(1 - fpr) - mu)`, evaluated as `Phi(mu + Phi^-1(fpr))` to
/// keep precision at small `fpr`.
pub fn gaussian_tradeoff(mu: f64, fpr: f64) -> Result<f64> {
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::invalid("fpr must lie in (0, 1)"));
    }
    Ok(norm_cdf(mu + norm_quantile(fpr)))
}

/// Sup-norm distance between the empirical curve, read as the step function
/// `fpr -> tpr_at_fpr(curve, fpr)`, and the analytic Gaussian curve for `mu`.
/// The step function is constant between vertices and the analytic curve is
/// monotone, so checking both ends of each step gives the exact supremum.
pub fn tradeoff_gap(curve: &TradeoffCurve, mu: f64) -> f64 {
    let analytic = |f: f64| {
        if f <= 0.0 {
            0.0
        } else if f >= 1.0 {
            1.0
        } else {
            norm_cdf(mu + norm_quantile(f))
        }
    };
    let mut steps: Vec<(f64, f64)> = Vec::new();
    for &(f, t) in &curve.points {
        match steps.last_mut() {
            Some(last) if last.0 == f => last.1 = last.1.max(t),
            _ => steps.push((f, t)),
        }
    }
    let mut gap: f64 = 0.0;
    for (k, &(f, t)) in steps.iter().enumerate() {
        gap = gap.max((t - analytic(f)).abs());
        if let Some(&(next, _)) = steps.get(k + 1) {
            gap = gap.max((t - analytic(next)).abs());
        }
    }
    gap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaConfig {
    /// Fixed decision threshold `tau_L`: member when `loss <= tau_L`.
    #[serde(default)]
    pub threshold: Option<f64>,
    pub fpr_level: f64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        MiaConfig {
            threshold: None,
            fpr_level: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiaResult {
    pub curve: TradeoffCurve,
    pub tpr_at_level: f64,
    /// `(tpr, fpr)` at the fixed threshold, when one is configured.
    pub at_threshold: Option<(f64, f64)>,
}

/// Loss-threshold membership inference: lower loss means "member".
pub fn loss_mia(member_losses: &[f64], nonmember_losses: &[f64], cfg: &MiaConfig) -> Result<MiaResult> {
    if !(cfg.fpr_level > 0.0 && cfg.fpr_level < 1.0) {
        return Err(Error::invalid("fpr level must lie in (0, 1)"));
    }
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let curve = tradeoff_curve(&neg(member_losses), &neg(nonmember_losses));
    let tpr_at_level = tpr_at_fpr(&curve, cfg.fpr_level);
    let at_threshold = cfg.threshold.map(|tau| {
        let frac = |v: &[f64]| v.iter().filter(|&&l| l <= tau).count() as f64 / v.len().max(1) as f64;
        (frac(member_losses), frac(nonmember_losses))
    });
    Ok(MiaResult {
        curve,
        tpr_at_level,
        at_threshold,
    })
}

/// Fraction of targets classified as their adversarial label.
pub fn targeted_success(model: &ModelCheckpoint, targets: &[TargetSpec]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = model.spec.input_dim;
    let mut x = DMatrix::zeros(targets.len(), d);
    for (r, t) in targets.iter().enumerate() {
        if t.x_target.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: t.x_target.len(),
            });
        }
        x.row_mut(r).iter_mut().zip(&t.x_target).for_each(|(o, v)| *o = *v);
    }
    let pred = diffcore::predict_classes(model, &x)?;
    let hits = pred.iter().zip(targets).filter(|(p, t)| **p == t.y_adv).count();
    Ok(hits as f64 / targets.len() as f64)
}

pub fn test_accuracy(model: &ModelCheckpoint, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let labels = match test.labels() {
        crate::datakit::Labels::Classes { labels, .. } => labels,
        crate::datakit::Labels::Values(_) => return Err(Error::invalid("accuracy needs class labels")),
    };
    let pred = diffcore::predict_classes(model, &test.full_matrix())?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// `Q_KS(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
