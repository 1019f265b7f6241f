//! Datasets, synthetic generation, non-IID partitioning, and label poisoning.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::rng_from;

/// Labeled samples: `features` is `N × input_dim`, one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset labels",
                expected_rows: features.rows(),
                expected_cols: 1,
                rows: labels.len(),
                cols: 1,
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Random IID split: the first `n` shuffled samples and the remainder.
    pub fn split_holdout(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::invalid(alloc::format!(
                "holdout size {n} must be in 1..{}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from(seed));
        let (held, rest) = order.split_at(n);
        let mut held = held.to_vec();
        let mut rest = rest.to_vec();
        held.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&held)?, self.subset(&rest)?))
    }
}

/// Gaussian clusters, one per class. Cluster means are standard normal in
/// every coordinate; samples add isotropic noise with standard deviation
/// `spread`. Samples are laid out class by class.
pub fn synth_blobs(
    seed: u64,
    classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if per_class == 0 || input_dim == 0 {
        return Err(Error::invalid("per_class and input_dim must be positive"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread must be positive"));
    }
    let mut rng = rng_from(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let means: Vec<f64> = (0..classes * input_dim).map(|_| unit.sample(&mut rng)).collect();
    let mut data = Vec::with_capacity(classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mean = &means[c * input_dim..(c + 1) * input_dim];
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + spread * unit.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Matrix::new(labels.len(), input_dim, data)?, labels, classes)
}

/// Per-client index lists over a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Mean over clients of the largest single-class share of the shard.
    pub fn heterogeneity(&self, parent: &Dataset) -> f64 {
        let mut total = 0.0;
        for shard in &self.shards {
            if shard.is_empty() {
                continue;
            }
            let mut h = vec![0usize; parent.num_classes()];
            for &i in shard {
                h[parent.labels()[i]] += 1;
            }
            total += *h.iter().max().unwrap() as f64 / shard.len() as f64;
        }
        total / self.shards.len() as f64
    }
}

fn dirichlet<R: Rng + ?Sized>(gamma: &Gamma<f64>, k: usize, rng: &mut R) -> Option<Vec<f64>> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    (sum > 0.0 && sum.is_finite()).then(|| draws.into_iter().map(|g| g / sum).collect())
}

/// Splits each class across `clients` with proportions drawn from
/// `Dirichlet(alpha · 1)`, redrawing the whole plan until every client holds
/// at least `min_per_client` samples.
pub fn dirichlet_partition(
    ds: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
    min_per_client: usize,
    max_attempts: usize,
) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("dirichlet alpha must be positive"));
    }
    if clients * min_per_client > ds.len() {
        return Err(Error::InfeasiblePartition {
            clients,
            min_per_client,
            samples: ds.len(),
        });
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| Error::invalid("bad gamma shape"))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = rng_from(seed);
    for _ in 0..max_attempts.max(1) {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        let mut ok = true;
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let Some(props) = dirichlet(&gamma, clients, &mut rng) else {
                ok = false;
                break;
            };
            let n = members.len();
            let mut start = 0usize;
            let mut cum = 0.0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == clients {
                    n
                } else {
                    (libm::round(cum * n as f64) as usize).clamp(start, n)
                };
                shards[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if ok && shards.iter().all(|s| s.len() >= min_per_client) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(PartitionPlan { shards });
        }
    }
    Err(Error::PartitionRetriesExhausted {
        attempts: max_attempts.max(1),
        min_per_client,
    })
}

/// Relabels `⌊fraction · N⌋` uniformly chosen samples with a uniformly
/// chosen different class.
pub fn flip_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("flip fraction must be in [0, 1]"));
    }
    let n = ds.len();
    let count = libm::floor(fraction * n as f64) as usize;
    let mut labels = ds.labels.clone();
    let mut rng = rng_from(seed);
    let classes = ds.num_classes;
    for i in index::sample(&mut rng, n, count.min(n)) {
        let original = labels[i];
        let mut other = rng.random_range(0..classes - 1);
        if other >= original {
            other += 1;
        }
        labels[i] = other;
    }
    Ok(Dataset {
        features: ds.features.clone(),
        labels,
        num_classes: classes,
    })
}

/// A stale server-side validation set: only samples whose label is in
/// `keep_classes`, in seeded random order. It may overlap client data.
pub fn drifted_validation_split(
    ds: &Dataset,
    keep_classes: &BTreeSet<usize>,
    seed: u64,
) -> Result<Dataset> {
    if keep_classes.is_empty() {
        return Err(Error::invalid("keep_classes must be nonempty"));
    }
    if let Some(&label) = keep_classes.iter().find(|&&c| c >= ds.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: ds.num_classes,
        });
    }
    let mut idx: Vec<usize> = (0..ds.len())
        .filter(|&i| keep_classes.contains(&ds.labels[i]))
        .collect();
    idx.shuffle(&mut rng_from(seed));
    ds.subset(&idx)
}
