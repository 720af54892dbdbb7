//! Synthetic Gaussian-blob datasets and IID / Dirichlet non-IID client
//! partitions. Everything is seed-deterministic.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled dataset in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class label counts.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Deterministic, well-separated class means: class `n` sits at
/// `separation·(1 + n div d)` along coordinate `n mod d`.
fn class_mean(class: usize, dims: usize, separation: f64) -> Array1<f64> {
    let mut mean = Array1::zeros(dims);
    mean[class % dims] = separation * (1.0 + (class / dims) as f64);
    mean
}

/// Gaussian blobs around distinct class means. Samples are laid out
/// class-major: all of class 0, then class 1, and so on.
pub fn synth_dataset(
    num_classes: usize,
    dims: usize,
    samples_per_class: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dims == 0 || samples_per_class == 0 {
        return Err(Error::Config("dataset dimensions must be positive".into()));
    }
    if !(separation > 0.0) || noise_sigma < 0.0 {
        return Err(Error::Config(
            "separation must be positive and noise nonnegative".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let total = num_classes * samples_per_class;
    let mut inputs = Array2::zeros((total, dims));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for class in 0..num_classes {
        let mean = class_mean(class, dims, separation);
        for _ in 0..samples_per_class {
            for d in 0..dims {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs[[row, d]] = mean[d] + noise_sigma * noise;
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        num_classes,
    })
}

/// A client assignment of sample indices: disjoint lists covering the
/// dataset exactly once, plus the per-client class counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<Vec<usize>>,
    pub class_counts: Vec<Vec<u64>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignment.iter().map(|v| v.len()).collect()
    }

    /// Verifies disjointness and exact coverage against a dataset size.
    pub fn validate(&self, total_samples: usize) -> Result<()> {
        let mut seen = vec![false; total_samples];
        for (client, indices) in self.assignment.iter().enumerate() {
            for &idx in indices {
                if idx >= total_samples {
                    return Err(Error::Internal(format!(
                        "client {client} holds out-of-range index {idx}"
                    )));
                }
                if seen[idx] {
                    return Err(Error::Internal(format!(
                        "sample {idx} assigned to more than one client"
                    )));
                }
                seen[idx] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Internal(format!("sample {missing} left unassigned")));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn count_classes(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

fn class_counts_for(
    assignment: &[Vec<usize>],
    labels: &[usize],
    num_classes: usize,
) -> Vec<Vec<u64>> {
    assignment
        .iter()
        .map(|indices| {
            let mut counts = vec![0u64; num_classes];
            for &idx in indices {
                counts[labels[idx]] += 1;
            }
            counts
        })
        .collect()
}

/// Non-IID partition: for each class, client proportions are drawn from a
/// symmetric Dirichlet with concentration `kappa` (small values produce
/// strong skew), counts are floored, and the remainder goes to the clients
/// with the largest fractional parts so every sample is assigned.
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    kappa: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!(
            "dirichlet concentration must be positive, got {kappa}"
        )));
    }
    let num_classes = count_classes(labels);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let gamma = Gamma::new(kappa, 1.0)
        .map_err(|e| Error::Domain(format!("invalid gamma shape {kappa}: {e}")))?;
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..num_classes {
        let mut indices: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        indices.shuffle(&mut rng);
        let total = indices.len();
        if total == 0 {
            continue;
        }
        // Dirichlet draw via normalized gamma variates
        let mut draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let draw_sum: f64 = draws.iter().sum();
        if draw_sum <= 0.0 || !draw_sum.is_finite() {
            draws = vec![1.0; num_clients];
        }
        let norm: f64 = draws.iter().sum();
        let shares: Vec<f64> = draws.iter().map(|d| d / norm * total as f64).collect();
        let mut counts: Vec<usize> = shares.iter().map(|&s| s.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut residual = total - assigned;
        // largest fractional part first; ties favor the lower client id
        let mut order: Vec<usize> = (0..num_clients).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &client in &order {
            if residual == 0 {
                break;
            }
            counts[client] += 1;
            residual -= 1;
        }
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    let class_counts = class_counts_for(&assignment, labels, num_classes);
    let partition = Partition {
        assignment,
        class_counts,
    };
    partition.validate(labels.len())?;
    Ok(partition)
}

/// IID partition: global shuffle, equal split, remainder to the lowest
/// client ids. Sizes differ by at most one.
pub fn iid_partition(labels: &[usize], num_clients: usize, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let num_classes = count_classes(labels);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..labels.len()).collect();
    indices.shuffle(&mut rng);
    let base = labels.len() / num_clients;
    let remainder = labels.len() % num_clients;
    let mut assignment = Vec::with_capacity(num_clients);
    let mut cursor = 0;
    for client in 0..num_clients {
        let size = base + usize::from(client < remainder);
        assignment.push(indices[cursor..cursor + size].to_vec());
        cursor += size;
    }
    let class_counts = class_counts_for(&assignment, labels, num_classes);
    let partition = Partition {
        assignment,
        class_counts,
    };
    partition.validate(labels.len())?;
    Ok(partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_noise_collapses_to_class_means() {
        let ds = synth_dataset(3, 4, 5, 2.5, 0.0, 7).unwrap();
        for (row, &label) in ds.labels.iter().enumerate() {
            let mean = class_mean(label, 4, 2.5);
            for d in 0..4 {
                assert_eq!(ds.inputs[[row, d]], mean[d]);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_dataset(2, 3, 10, 4.0, 1.0, 99).unwrap();
        let b = synth_dataset(2, 3, 10, 4.0, 1.0, 99).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
        let c = synth_dataset(2, 3, 10, 4.0, 1.0, 100).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn nearest_mean_classifier_wins_at_wide_separation() {
        let sigma = 1.0;
        let ds = synth_dataset(2, 4, 500, 10.0 * sigma, sigma, 5).unwrap();
        let means = [class_mean(0, 4, 10.0), class_mean(1, 4, 10.0)];
        let mut correct = 0;
        for (row, &label) in ds.labels.iter().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for (c, mean) in means.iter().enumerate() {
                let d: f64 = ds
                    .inputs
                    .row(row)
                    .iter()
                    .zip(mean.iter())
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.99, "nearest-mean accuracy {acc}");
    }

    #[test]
    fn more_classes_than_dims_still_distinct_means() {
        let ds = synth_dataset(7, 3, 2, 3.0, 0.0, 1).unwrap();
        let mut means: Vec<Vec<u64>> = Vec::new();
        for class in 0..7 {
            let m = class_mean(class, 3, 3.0);
            let bits: Vec<u64> = m.iter().map(|v| v.to_bits()).collect();
            assert!(!means.contains(&bits), "class {class} mean collides");
            means.push(bits);
        }
        assert_eq!(ds.len(), 14);
    }

    #[test]
    fn dirichlet_counts_conserve_every_class() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        for seed in [0, 1, 42, 1234] {
            let p = dirichlet_partition(&labels, 5, 0.5, seed).unwrap();
            for class in 0..3 {
                let total: u64 = p.class_counts.iter().map(|c| c[class]).sum();
                assert_eq!(total, 100);
            }
        }
    }

    #[test]
    fn huge_kappa_approaches_even_split() {
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let p = dirichlet_partition(&labels, 4, 1e6, 7).unwrap();
        for class in 0..2 {
            for client in 0..4 {
                let share = p.class_counts[client][class] as f64 / 200.0;
                assert!(
                    (share - 0.25).abs() < 0.05 * 0.25 + 0.02,
                    "client {client} class {class} share {share}"
                );
            }
        }
    }

    #[test]
    fn tiny_kappa_produces_specialist_clients() {
        // seeded golden run: at least one client nearly owns one class
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let p = dirichlet_partition(&labels, 4, 0.1, 11).unwrap();
        let mut max_share = 0.0_f64;
        for client in 0..4 {
            let total: u64 = p.class_counts[client].iter().sum();
            if total == 0 {
                continue;
            }
            for class in 0..2 {
                max_share = max_share.max(p.class_counts[client][class] as f64 / total as f64);
            }
        }
        assert!(max_share > 0.9, "max specialist share {max_share}");
    }

    #[test]
    fn nonpositive_kappa_is_domain_error() {
        let labels = vec![0, 1, 0, 1];
        assert!(matches!(
            dirichlet_partition(&labels, 2, 0.0, 0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            dirichlet_partition(&labels, 2, -1.0, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn partitions_are_disjoint_and_cover_randomized() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(10..200);
            let classes = rng.random_range(2..5);
            let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            let k = rng.random_range(1..8);
            let kappa = 10f64.powf(rng.random_range(-1.5..3.0));
            let seed = rng.random_range(0..u64::MAX);
            let p = dirichlet_partition(&labels, k, kappa, seed).unwrap();
            p.validate(n).unwrap();
            let q = iid_partition(&labels, k, seed).unwrap();
            q.validate(n).unwrap();
        }
    }

    #[test]
    fn global_distribution_is_exactly_reconstructed() {
        let labels: Vec<usize> = (0..350).map(|i| i % 7).collect();
        let p = dirichlet_partition(&labels, 6, 0.3, 17).unwrap();
        let mut totals = vec![0u64; 7];
        for counts in &p.class_counts {
            for (c, &v) in counts.iter().enumerate() {
                totals[c] += v;
            }
        }
        assert_eq!(totals, vec![50; 7]);
    }

    #[test]
    fn iid_single_client_takes_all() {
        let labels = vec![0, 1, 2, 0, 1];
        let p = iid_partition(&labels, 1, 0).unwrap();
        assert_eq!(p.assignment[0].len(), 5);
    }

    #[test]
    fn iid_sizes_differ_by_at_most_one() {
        let labels: Vec<usize> = (0..103).map(|i| i % 3).collect();
        let p = iid_partition(&labels, 4, 9).unwrap();
        let sizes = p.client_sizes();
        assert_eq!(sizes, vec![26, 26, 26, 25]);
    }

    #[test]
    fn iid_is_seed_deterministic() {
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let a = iid_partition(&labels, 3, 21).unwrap();
        let b = iid_partition(&labels, 3, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_json_roundtrip() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = dirichlet_partition(&labels, 3, 1.0, 5).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: Partition = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }
}
