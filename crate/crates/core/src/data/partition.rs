//! Dirichlet non-IID partitioning: for each class, a Dirichlet(eta) draw
//! allocates that class's samples across clients with largest-remainder
//! rounding; a gamma fraction of every shard keeps its labels.

use super::{DataError, Dataset, PartitionSpec, Result};
use crate::numkit::{streams, Rng, Tensor};
use serde::{Deserialize, Serialize};

const MAX_REDRAWS: usize = 1000;

/// One client's private shard.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub labeled: Vec<(Tensor, usize)>,
    pub unlabeled: Vec<Tensor>,
}

impl ClientShard {
    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-client manifest record for the distribution plot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifest {
    pub client: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub class_counts: Vec<usize>,
}

/// The per-class allocation actually drawn, kept so other pools (a test set)
/// can be split with the same client proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRecord {
    /// `class_proportions[c][k]` is class c's share on client k.
    pub class_proportions: Vec<Vec<f64>>,
    pub manifest: Vec<ShardManifest>,
}

impl PartitionRecord {
    /// Split another dataset's indices across clients using the recorded
    /// per-class proportions (deterministic, shuffled per class by `seed`).
    pub fn apportion(&self, ds: &Dataset, seed: u64) -> Vec<Vec<usize>> {
        let clients = self.manifest.len();
        let mut out = vec![Vec::new(); clients];
        for class in 0..ds.classes {
            let mut indices: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
            let mut rng = Rng::new(seed, streams::partition_shuffle(class ^ 0xA11C));
            rng.shuffle(&mut indices);
            let uniform = vec![1.0 / clients as f64; clients];
            let props = self.class_proportions.get(class).unwrap_or(&uniform);
            let counts = largest_remainder(indices.len(), props);
            let mut cursor = 0;
            for (k, &c) in counts.iter().enumerate() {
                out[k].extend_from_slice(&indices[cursor..cursor + c]);
                cursor += c;
            }
        }
        out
    }
}

/// Full partition result.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    pub record: PartitionRecord,
}

/// Allocate `total` items proportionally with exact integer totals.
fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let k = proportions.len();
    let mut base = vec![0usize; k];
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(k);
    let mut assigned = 0usize;
    for (i, &p) in proportions.iter().enumerate() {
        let target = total as f64 * p;
        let b = target.floor() as usize;
        base[i] = b;
        assigned += b;
        fracs.push((target - b as f64, i));
    }
    // ties resolved toward lower client index
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in fracs.iter().take(total - assigned) {
        base[i] += 1;
    }
    base
}

/// Dirichlet(eta) proportions for one class, one stream per (class, client) so
/// concentration sweeps share the underlying randomness.
fn draw_proportions(rngs: &mut [Rng], eta: f64) -> Vec<f64> {
    let mut draws: Vec<f64> = rngs.iter_mut().map(|r| r.gamma(eta)).collect();
    let sum: f64 = draws.iter().sum();
    if sum < 1e-200 {
        let k = draws.len() as f64;
        draws.iter_mut().for_each(|v| *v = 1.0 / k);
    } else {
        draws.iter_mut().for_each(|v| *v /= sum);
    }
    draws
}

/// Partition a dataset into non-IID client shards and split each shard into
/// labeled and unlabeled parts. The allocation is redrawn if any client would
/// end up with an empty shard.
pub fn partition_dirichlet(ds: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(DataError::Invalid("cannot partition an empty dataset".into()));
    }
    let k = spec.clients;
    let mut class_indices: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &label) in ds.labels.iter().enumerate() {
        class_indices[label].push(i);
    }
    for (class, indices) in class_indices.iter_mut().enumerate() {
        let mut rng = Rng::new(spec.seed, streams::partition_shuffle(class));
        rng.shuffle(indices);
    }

    let mut draw_rngs: Vec<Vec<Rng>> = (0..ds.classes)
        .map(|c| {
            (0..k)
                .map(|client| Rng::new(spec.seed, streams::partition_draw(c, client)))
                .collect()
        })
        .collect();

    let mut proportions: Vec<Vec<f64>> = Vec::new();
    let mut allocation: Vec<Vec<usize>> = Vec::new();
    let mut ok = false;
    for _ in 0..MAX_REDRAWS {
        proportions = draw_rngs
            .iter_mut()
            .map(|rngs| draw_proportions(rngs, spec.eta))
            .collect();
        allocation = class_indices
            .iter()
            .zip(&proportions)
            .map(|(indices, props)| largest_remainder(indices.len(), props))
            .collect();
        let mut totals = vec![0usize; k];
        for counts in &allocation {
            for (client, &c) in counts.iter().enumerate() {
                totals[client] += c;
            }
        }
        if totals.iter().all(|&t| t > 0) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(DataError::PartitionFailed(format!(
            "could not give every one of {k} clients a nonempty shard after {MAX_REDRAWS} draws"
        )));
    }

    let mut client_samples: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, counts) in allocation.iter().enumerate() {
        let indices = &class_indices[class];
        let mut cursor = 0;
        for (client, &c) in counts.iter().enumerate() {
            client_samples[client].extend_from_slice(&indices[cursor..cursor + c]);
            cursor += c;
        }
    }

    let mut shards = Vec::with_capacity(k);
    let mut manifest = Vec::with_capacity(k);
    for (client, samples) in client_samples.iter_mut().enumerate() {
        let mut rng = Rng::new(spec.seed, streams::label_pick(client));
        rng.shuffle(samples);
        let d_k = samples.len();
        let n_labeled = ((spec.gamma * d_k as f64).floor() as usize).max(1).min(d_k);
        let mut labeled = Vec::with_capacity(n_labeled);
        let mut unlabeled = Vec::with_capacity(d_k - n_labeled);
        let mut class_counts = vec![0usize; ds.classes];
        for (pos, &i) in samples.iter().enumerate() {
            class_counts[ds.labels[i]] += 1;
            if pos < n_labeled {
                labeled.push((ds.images[i].clone(), ds.labels[i]));
            } else {
                unlabeled.push(ds.images[i].clone());
            }
        }
        manifest.push(ShardManifest {
            client,
            labeled: labeled.len(),
            unlabeled: unlabeled.len(),
            class_counts,
        });
        shards.push(ClientShard { client_id: client, labeled, unlabeled });
    }

    Ok(Partition {
        shards,
        record: PartitionRecord {
            class_proportions: proportions,
            manifest,
        },
    })
}
