//! Synthetic datasets and client partitioning.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, matmul, DenseMatrix, RngStream};
use crate::model::Targets;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetTargets<T> {
    /// `d_out x n`
    Regression(DenseMatrix<T>),
    Classes {
        labels: Vec<usize>,
        classes: usize,
    },
}

/// Samples stored column-wise: `inputs` is `k x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: DenseMatrix<T>,
    pub targets: DatasetTargets<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: DenseMatrix<T>, targets: DatasetTargets<T>) -> Result<Self> {
        let n = inputs.cols();
        match &targets {
            DatasetTargets::Regression(y) if y.cols() != n => {
                return Err(Error::shape(
                    "dataset",
                    format!("{n} inputs, {} targets", y.cols()),
                ))
            }
            DatasetTargets::Classes { labels, classes } => {
                if labels.len() != n {
                    return Err(Error::shape(
                        "dataset",
                        format!("{n} inputs, {} labels", labels.len()),
                    ));
                }
                if let Some(&bad) = labels.iter().find(|&&c| c >= *classes) {
                    return Err(Error::InvalidLabel {
                        label: bad,
                        classes: *classes,
                    });
                }
            }
            _ => {}
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            DatasetTargets::Classes { labels, .. } => Some(labels),
            DatasetTargets::Regression(_) => None,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.targets {
            DatasetTargets::Classes { classes, .. } => Some(*classes),
            DatasetTargets::Regression(_) => None,
        }
    }

    /// Inputs (`k x b`) and targets of the listed samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(DenseMatrix<T>, Targets<T>)> {
        let x = self.inputs.select_columns(indices)?;
        let t = match &self.targets {
            DatasetTargets::Regression(y) => Targets::Regression(y.select_columns(indices)?),
            DatasetTargets::Classes { labels, .. } => {
                Targets::Classes(indices.iter().map(|&i| labels[i]).collect())
            }
        };
        Ok((x, t))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.select_columns(indices)?;
        let targets = match &self.targets {
            DatasetTargets::Regression(y) => DatasetTargets::Regression(y.select_columns(indices)?),
            DatasetTargets::Classes { labels, classes } => DatasetTargets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        };
        Ok(Self { inputs, targets })
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::shape(
                "split_at",
                format!("cannot split {} at {n}", self.len()),
            ));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }
}

/// `y = W* x + noise` with `x ~ N(0, I_k)` and `W*` entries `N(0, 1/k)`.
///
/// Draw order on `rng`: teacher, inputs, noise.
pub fn make_regression<T: Scalar>(
    n_samples: usize,
    k: usize,
    d_out: usize,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<Dataset<T>> {
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::config("noise_std", "must be non-negative"));
    }
    let teacher: DenseMatrix<T> = gaussian_matrix(d_out, k, 1.0 / (k as f64).sqrt(), rng);
    let inputs = gaussian_matrix(k, n_samples, 1.0, rng);
    let mut y = matmul(&teacher, &inputs)?;
    let noise = gaussian_matrix(d_out, n_samples, noise_std, rng);
    y.add_scaled(T::one(), &noise)?;
    Dataset::new(inputs, DatasetTargets::Regression(y))
}

/// Gaussian clusters: class means have entries `N(0, separation^2 / k)`,
/// samples add `N(0, I_k)` noise, labels are uniform.
///
/// Draw order on `rng`: means, then per sample a label and its noise.
pub fn make_classification<T: Scalar>(
    n_samples: usize,
    k: usize,
    classes: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset<T>> {
    if classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    let means: DenseMatrix<f64> = gaussian_matrix(classes, k, separation / (k as f64).sqrt(), rng);
    let mut inputs = DenseMatrix::zeros(k, n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for j in 0..n_samples {
        let c = ((rng.uniform() * classes as f64) as usize).min(classes - 1);
        labels.push(c);
        for i in 0..k {
            inputs.set(i, j, T::of(means.get(c, i) + rng.standard_normal()));
        }
    }
    Dataset::new(inputs, DatasetTargets::Classes { labels, classes })
}

/// Disjoint, exhaustive, non-empty index shards, one per client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Checks the partition invariants against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::shape("partition", format!("shard {c} is empty")));
            }
            for &i in shard {
                if i >= n || seen[i] {
                    return Err(Error::shape(
                        "partition",
                        format!("index {i} repeated or out of range"),
                    ));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::shape("partition", "not every sample is assigned"));
        }
        Ok(())
    }
}

pub fn partition_iid(n_samples: usize, n_clients: usize, rng: &mut RngStream) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be at least 1"));
    }
    if n_clients > n_samples {
        return Err(Error::config(
            "n_clients",
            format!("{n_clients} clients but only {n_samples} samples"),
        ));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(rng);
    let base = n_samples / n_clients;
    let extra = n_samples % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let len = base + usize::from(c < extra);
        let mut shard = order[start..start + len].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        start += len;
    }
    Ok(Partition { shards })
}

/// Label-skewed split: for every class, client proportions are drawn from a
/// symmetric Dirichlet with concentration `beta`.
///
/// Empty shards are repaired by moving one sample from the currently largest
/// shard (lowest client id on ties).
pub fn partition_dirichlet<T: Scalar>(
    dataset: &Dataset<T>,
    n_clients: usize,
    beta: f64,
    rng: &mut RngStream,
) -> Result<Partition> {
    let (labels, classes) = match &dataset.targets {
        DatasetTargets::Classes { labels, classes } => (labels, *classes),
        DatasetTargets::Regression(_) => return Err(Error::Unlabeled),
    };
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config(
            "beta",
            format!("must be positive, got {beta}"),
        ));
    }
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be at least 1"));
    }
    if n_clients > labels.len() {
        return Err(Error::config(
            "n_clients",
            format!("{n_clients} clients but only {} samples", labels.len()),
        ));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::config("beta", e.to_string()))?;
    let mut shards = vec![Vec::new(); n_clients];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        let mut weights: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            weights.iter_mut().for_each(|w| *w /= total);
        } else {
            // Every draw underflowed: give the whole class to one client.
            let winner = (rng.uniform() * n_clients as f64) as usize % n_clients;
            weights = (0..n_clients)
                .map(|i| f64::from(u8::from(i == winner)))
                .collect();
        }
        let n_c = members.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (client, w) in weights.iter().enumerate() {
            cumulative += w;
            let end = if client + 1 == n_clients {
                n_c
            } else {
                ((cumulative * n_c as f64).round() as usize).clamp(start, n_c)
            };
            shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for empty in 0..n_clients {
        if !shards[empty].is_empty() {
            continue;
        }
        let donor = (0..n_clients)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = shards[donor].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(Partition { shards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::EntityKind;

    fn rng(i: u64) -> RngStream {
        RngStream::new(31, EntityKind::Test, i, 0)
    }

    #[test]
    fn noiseless_scalar_regression_is_proportional() {
        let ds: Dataset<f64> = make_regression(50, 1, 1, 0.0, &mut rng(1)).unwrap();
        let DatasetTargets::Regression(y) = &ds.targets else {
            panic!()
        };
        let slope = y.get(0, 0) / ds.inputs.get(0, 0);
        for j in 0..50 {
            assert!((y.get(0, j) - slope * ds.inputs.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_inputs_have_unit_variance() {
        let ds: Dataset<f64> = make_regression(4096, 8, 2, 0.1, &mut rng(2)).unwrap();
        for i in 0..8 {
            let row = ds.inputs.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!((0.9..=1.1).contains(&var), "coordinate {i}: {var}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a: Dataset<f64> = make_regression(20, 3, 2, 0.5, &mut rng(3)).unwrap();
        let b: Dataset<f64> = make_regression(20, 3, 2, 0.5, &mut rng(3)).unwrap();
        assert_eq!(a, b);
        let c: Dataset<f64> = make_classification(20, 3, 4, 2.0, &mut rng(4)).unwrap();
        let d: Dataset<f64> = make_classification(20, 3, 4, 2.0, &mut rng(4)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn class_histogram_is_balanced() {
        let ds: Dataset<f64> = make_classification(2000, 4, 2, 3.0, &mut rng(5)).unwrap();
        let ones = ds.labels().unwrap().iter().filter(|&&c| c == 1).count() as f64;
        assert!((ones / 1000.0 - 1.0).abs() < 0.1, "{ones}");
        assert!(make_classification::<f64>(10, 4, 1, 3.0, &mut rng(5)).is_err());
    }

    /// Least-squares linear probe on one-hot targets, scored on fresh samples.
    #[test]
    fn separated_clusters_are_linearly_separable() {
        let k = 8;
        let all: Dataset<f64> = make_classification(3000, k, 2, 6.0, &mut rng(6)).unwrap();
        let (train, test) = all.split_at(2000).unwrap();
        let labels = train.labels().unwrap();
        // Augmented normal equations for w in R^{k+1}, target +-1.
        let dim = k + 1;
        let mut gram = vec![0.0; dim * dim];
        let mut rhs = vec![0.0; dim];
        for j in 0..train.len() {
            let mut f: Vec<f64> = (0..k).map(|i| train.inputs.get(i, j)).collect();
            f.push(1.0);
            let t = if labels[j] == 1 { 1.0 } else { -1.0 };
            for a in 0..dim {
                rhs[a] += f[a] * t;
                for b in 0..dim {
                    gram[a * dim + b] += f[a] * f[b];
                }
            }
        }
        // Gaussian elimination.
        for col in 0..dim {
            let pivot = gram[col * dim + col];
            for row in col + 1..dim {
                let factor = gram[row * dim + col] / pivot;
                for c in col..dim {
                    gram[row * dim + c] -= factor * gram[col * dim + c];
                }
                rhs[row] -= factor * rhs[col];
            }
        }
        let mut w = vec![0.0; dim];
        for row in (0..dim).rev() {
            let s: f64 = (row + 1..dim).map(|c| gram[row * dim + c] * w[c]).sum();
            w[row] = (rhs[row] - s) / gram[row * dim + row];
        }
        let test_labels = test.labels().unwrap();
        let correct = (0..test.len())
            .filter(|&j| {
                let score: f64 = (0..k).map(|i| w[i] * test.inputs.get(i, j)).sum::<f64>() + w[k];
                (score > 0.0) == (test_labels[j] == 1)
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn iid_shard_sizes() {
        let p = partition_iid(100, 3, &mut rng(7)).unwrap();
        assert_eq!(p.sizes(), vec![34, 33, 33]);
        p.validate(100).unwrap();
        let one = partition_iid(17, 1, &mut rng(8)).unwrap();
        assert_eq!(one.shards[0], (0..17).collect::<Vec<_>>());
        assert!(partition_iid(3, 4, &mut rng(9)).is_err());
    }

    #[test]
    fn dirichlet_single_client_takes_everything() {
        let ds: Dataset<f64> = make_classification(60, 2, 3, 2.0, &mut rng(10)).unwrap();
        let p = partition_dirichlet(&ds, 1, 0.5, &mut rng(11)).unwrap();
        assert_eq!(p.shards[0], (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn dirichlet_invariants_hold() {
        for seed in 0..50 {
            let ds: Dataset<f64> =
                make_classification(40, 2, 2, 2.0, &mut rng(100 + seed)).unwrap();
            let p = partition_dirichlet(&ds, 3, 0.5, &mut rng(200 + seed)).unwrap();
            p.validate(40).unwrap();
            let tiny = partition_dirichlet(&ds, 5, 0.01, &mut rng(300 + seed)).unwrap();
            tiny.validate(40).unwrap();
        }
    }

    #[test]
    fn dirichlet_rejects_bad_inputs() {
        let reg: Dataset<f64> = make_regression(10, 2, 1, 0.0, &mut rng(12)).unwrap();
        assert_eq!(
            partition_dirichlet(&reg, 2, 0.5, &mut rng(13)),
            Err(Error::Unlabeled)
        );
        let cls: Dataset<f64> = make_classification(10, 2, 2, 2.0, &mut rng(14)).unwrap();
        assert!(partition_dirichlet(&cls, 2, 0.0, &mut rng(15)).is_err());
        assert!(partition_dirichlet(&cls, 11, 0.5, &mut rng(15)).is_err());
    }

    /// Imbalance of class-0 share across clients, `(max + 1) / (min + 1)` on
    /// counts, averaged over seeds, must fall as the concentration grows.
    #[test]
    fn dirichlet_imbalance_decreases_with_beta() {
        let ds: Dataset<f64> = make_classification(600, 2, 2, 2.0, &mut rng(16)).unwrap();
        let labels = ds.labels().unwrap();
        let mut means = Vec::new();
        for beta in [0.1, 0.5, 2.0, 10.0, 100.0] {
            let mut total = 0.0;
            for seed in 0..200 {
                let p = partition_dirichlet(
                    &ds,
                    3,
                    beta,
                    &mut RngStream::new(seed, EntityKind::Partition, 0, 0),
                )
                .unwrap();
                let counts: Vec<f64> = p
                    .shards
                    .iter()
                    .map(|s| s.iter().filter(|&&i| labels[i] == 0).count() as f64)
                    .collect();
                let max = counts.iter().cloned().fold(f64::MIN, f64::max);
                let min = counts.iter().cloned().fold(f64::MAX, f64::min);
                total += (max + 1.0) / (min + 1.0);
            }
            means.push(total / 200.0);
        }
        for w in means.windows(2) {
            assert!(w[1] < w[0], "imbalance not decreasing: {means:?}");
        }
    }
}
