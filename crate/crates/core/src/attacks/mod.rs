//! Poisoning attacks. Each attack touches at most `round(b_p * n)` samples and
//! leaves every other sample bit-identical.

mod bound;
mod cancel;
mod gradmatch;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, DatasetView, LedgerEntry, NoiseLedger, PoisonSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub use bound::{NormKind, PerturbationBound, Projector};
pub use cancel::{grad_cancel, gc_objective, param_corrupt, CancelOutcome, CancelWeighting, CorruptionOutcome, CorruptionRadius};
pub use gradmatch::{grad_match_poison, matching_loss, GradMatchConfig, GradMatchOutcome, TargetSpec};

/// Pick `p` distinct rows out of `n` with a seeded partial Fisher-Yates shuffle.
/// The result is in draw order.
pub fn select_uniform(n: usize, p: usize, seed: u64) -> Result<Vec<usize>> {
    select_from((0..n).collect(), p, seed)
}

pub(crate) fn select_from(mut pool: Vec<usize>, p: usize, seed: u64) -> Result<Vec<usize>> {
    if p > pool.len() {
        return Err(Error::invalid(format!("cannot draw {p} samples from {}", pool.len())));
    }
    let mut rng = rng::stream(seed, Stream::PoisonSelect);
    let (chosen, _) = pool.partial_shuffle(&mut rng, p);
    Ok(chosen.to_vec())
}

fn ids_of(data: &Dataset, idx: &[usize]) -> BTreeSet<u64> {
    idx.iter().map(|&i| data.ids()[i]).collect()
}

/// Clean-label Gaussian poisoning: add `xi ~ N(0, eps_p^2 I)` to `P` uniformly
/// chosen samples and store every `xi` in the ledger.
pub fn gaussian_poison(data: &Dataset, spec: &PoisonSpec) -> Result<(DatasetView, NoiseLedger)> {
    let p = spec.poison_count(data.len())?;
    let chosen = select_uniform(data.len(), p, spec.seed)?;
    let mut noise = rng::stream(spec.seed, Stream::PoisonNoise);
    let mut out = data.clone();
    let mut ledger = NoiseLedger::new(spec.eps_p, data.dim());
    for &i in &chosen {
        let base_x = data.row(i).to_vec();
        let xi: Vec<f64> = (0..data.dim())
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut noise);
                spec.eps_p * e
            })
            .collect();
        for ((o, b), e) in out.row_mut(i).iter_mut().zip(&base_x).zip(&xi) {
            *o = b + e;
        }
        ledger.insert(data.ids()[i], LedgerEntry { xi, base_x })?;
    }
    let view = DatasetView::with_poison(out, ids_of(data, &chosen))?;
    Ok((view, ledger))
}

/// Feature-space trigger: fixed values written into a set of coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
}

impl Trigger {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.coords.len() != self.values.len() {
            return Err(Error::invalid("trigger needs one value per coordinate"));
        }
        if let Some(&c) = self.coords.iter().find(|&&c| c >= dim) {
            return Err(Error::invalid(format!("trigger coordinate {c} outside 0..{dim}")));
        }
        Ok(())
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (&c, &v) in self.coords.iter().zip(&self.values) {
            x[c] = v;
        }
    }

    /// Copy of `data` with the trigger stamped on every sample, labels unchanged.
    pub fn stamp_all(&self, data: &Dataset) -> Result<Dataset> {
        self.validate(data.dim())?;
        let mut out = data.clone();
        for i in 0..out.len() {
            self.apply(out.row_mut(i));
        }
        Ok(out)
    }
}

/// Dirty-label backdoor: stamp the trigger on `P` uniformly chosen samples and
/// relabel them `y_adv`. An empty trigger is plain label flipping.
pub fn backdoor_trigger(data: &Dataset, trigger: &Trigger, y_adv: usize, spec: &PoisonSpec) -> Result<DatasetView> {
    trigger.validate(data.dim())?;
    let classes = data
        .classes()
        .ok_or_else(|| Error::invalid("backdoor needs a classification dataset"))?;
    if y_adv >= classes {
        return Err(Error::invalid(format!("y_adv {y_adv} outside 0..{classes}")));
    }
    let p = spec.poison_count(data.len())?;
    let chosen = select_uniform(data.len(), p, spec.seed)?;
    let mut out = data.clone();
    for &i in &chosen {
        trigger.apply(out.row_mut(i));
        out.set_class(i, y_adv)?;
    }
    DatasetView::with_poison(out, ids_of(data, &chosen))
}
