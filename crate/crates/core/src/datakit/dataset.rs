use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;

use crate::diffcore::{Target, Targets};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { labels, .. } => labels.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major sample matrix with labels and stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    labels: Labels,
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, labels: Labels, ids: Vec<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dataset dimension must be positive"));
        }
        let n = labels.len();
        if x.len() != n * dim {
            return Err(Error::DimensionMismatch {
                expected: n * dim,
                got: x.len(),
            });
        }
        if ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: ids.len(),
            });
        }
        if let Labels::Classes { labels, classes } = &labels {
            if let Some(&bad) = labels.iter().find(|&&c| c >= *classes) {
                return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
            }
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::invalid(format!("duplicate sample id {id}")));
            }
        }
        Ok(Dataset {
            dim,
            x,
            labels,
            ids,
            index,
        })
    }

    /// Ids default to `0..n`.
    pub fn with_sequential_ids(dim: usize, x: Vec<f64>, labels: Labels) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::new(dim, x, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn raw(&self) -> &[f64] {
        &self.x
    }

    pub fn classes(&self) -> Option<usize> {
        match self.labels {
            Labels::Classes { classes, .. } => Some(classes),
            Labels::Values(_) => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: u64) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    pub fn target(&self, i: usize) -> Target {
        match &self.labels {
            Labels::Classes { labels, .. } => Target::Class(labels[i]),
            Labels::Values(v) => Target::Value(v[i]),
        }
    }

    pub fn class(&self, i: usize) -> Option<usize> {
        match &self.labels {
            Labels::Classes { labels, .. } => Some(labels[i]),
            Labels::Values(_) => None,
        }
    }

    pub fn set_class(&mut self, i: usize, c: usize) -> Result<()> {
        match &mut self.labels {
            Labels::Classes { labels, classes } if c < *classes => {
                labels[i] = c;
                Ok(())
            }
            Labels::Classes { classes, .. } => Err(Error::invalid(format!("label {c} outside 0..{classes}"))),
            Labels::Values(_) => Err(Error::invalid("cannot assign a class label in a regression dataset")),
        }
    }

    /// Sample matrix for the rows in `idx`.
    pub fn matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.dim, |r, c| self.x[idx[r] * self.dim + c])
    }

    pub fn full_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.x)
    }

    pub fn targets(&self, idx: &[usize]) -> Targets {
        match &self.labels {
            Labels::Classes { labels, .. } => Targets::Classes(idx.iter().map(|&i| labels[i]).collect()),
            Labels::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn all_targets(&self) -> Targets {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.targets(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Classes { labels, classes } => Labels::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Labels::Values(v) => Labels::Values(idx.iter().map(|&i| v[i]).collect()),
        };
        let ids = idx.iter().map(|&i| self.ids[i]).collect();
        Dataset::new(self.dim, x, labels, ids).expect("subset of a valid dataset")
    }

    /// Rows whose id is not in `exclude`, in dataset order.
    pub fn indices_excluding(&self, exclude: &BTreeSet<u64>) -> Vec<usize> {
        (0..self.len()).filter(|&i| !exclude.contains(&self.ids[i])).collect()
    }

    pub fn indices_of(&self, ids: &BTreeSet<u64>) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = ids.iter().map(|&id| self.index_of(id)).collect::<Result<_>>()?;
        out.sort_unstable();
        Ok(out)
    }

    /// Per-coordinate population standard deviation.
    pub fn coordinate_std(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for i in 0..self.len() {
            for ((s, v), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.into_iter().map(|s| (s / n).sqrt()).collect()
    }
}

/// A training set with its clean/poison and retain/forget partitions.
///
/// Partitions are id sets: the clean part is the complement of `poison`, the
/// retain part the complement of `forget`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetView {
    pub data: Dataset,
    pub poison: BTreeSet<u64>,
    pub forget: BTreeSet<u64>,
}

impl DatasetView {
    pub fn clean(data: Dataset) -> Self {
        DatasetView {
            data,
            poison: BTreeSet::new(),
            forget: BTreeSet::new(),
        }
    }

    pub fn with_poison(data: Dataset, poison: BTreeSet<u64>) -> Result<Self> {
        for &id in &poison {
            data.index_of(id)?;
        }
        Ok(DatasetView {
            data,
            poison,
            forget: BTreeSet::new(),
        })
    }

    pub fn with_forget(mut self, forget: BTreeSet<u64>) -> Result<Self> {
        for &id in &forget {
            self.data.index_of(id)?;
        }
        self.forget = forget;
        Ok(self)
    }

    pub fn clean_indices(&self) -> Vec<usize> {
        self.data.indices_excluding(&self.poison)
    }

    pub fn poison_indices(&self) -> Vec<usize> {
        self.data.indices_of(&self.poison).expect("validated at construction")
    }

    pub fn retain_indices(&self) -> Vec<usize> {
        self.data.indices_excluding(&self.forget)
    }

    pub fn forget_indices(&self) -> Vec<usize> {
        self.data.indices_of(&self.forget).expect("validated at construction")
    }

    pub fn retain_set(&self) -> Dataset {
        self.data.subset(&self.retain_indices())
    }

    pub fn forget_set(&self) -> Dataset {
        self.data.subset(&self.forget_indices())
    }

    pub fn clean_set(&self) -> Dataset {
        self.data.subset(&self.clean_indices())
    }
}

/// Train/test pair produced by the generators.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}
