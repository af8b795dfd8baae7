//! Label-skewed splits of a dataset across clients.
//!
//! Two protocols are supported:
//!
//! * **Dirichlet**: for every class, client shares are drawn from
//!   `Dir(β·1_N)` (normalised `Gamma(β, 1)` draws) and the class's shuffled
//!   indices are cut at the cumulative shares. Smaller `β` means more skew.
//!   A draw that leaves any client without samples is discarded and redrawn
//!   from the next sub-seed, up to [`MAX_REDRAWS`] times.
//! * **Quantity shards**: `N·s` label-pure shards are cut from the data and
//!   dealt `s` per client, so no client sees more than `s` labels.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SimRng, Stream};

pub const MAX_REDRAWS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet { beta: f64 },
    QuantityShards { shards_per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub kind: PartitionKind,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn apply(&self, labels: &[usize], num_classes: usize) -> Result<Partition> {
        match self.kind {
            PartitionKind::Dirichlet { beta } => {
                dirichlet_partition(labels, num_classes, self.num_clients, beta, self.seed)
            }
            PartitionKind::QuantityShards { shards_per_client } => quantity_shard_partition(
                labels,
                num_classes,
                self.num_clients,
                shards_per_client,
                self.seed,
            ),
        }
    }
}

/// Disjoint assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    clients: Vec<Vec<usize>>,
    counts: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates disjointness, coverage of `0..labels.len()` and non-empty
    /// clients, and derives the count matrix.
    pub fn new(clients: Vec<Vec<usize>>, labels: &[usize], num_classes: usize) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Partition("a partition needs at least one client".into()));
        }
        let mut seen = vec![false; labels.len()];
        let mut counts = vec![vec![0usize; num_classes]; clients.len()];
        for (k, idx) in clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Partition(format!("client {k} holds no samples")));
            }
            for &i in idx {
                let y = *labels
                    .get(i)
                    .ok_or_else(|| Error::Partition(format!("client {k} holds out-of-range index {i}")))?;
                if y >= num_classes {
                    return Err(Error::Partition(format!("label {y} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
                counts[k][y] += 1;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {i} assigned to no client")));
        }
        Ok(Self { clients, counts })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts[0].len()
    }

    pub fn client_indices(&self, client: usize) -> &[usize] {
        &self.clients[client]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    /// `N × C` per-client class counts.
    pub fn count_matrix(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Parses the export format and re-validates it against `labels`.
    pub fn from_json(json: &str, labels: &[usize], num_classes: usize) -> Result<Self> {
        let raw: Partition = serde_json::from_str(json).map_err(|e| Error::Serialization(e.to_string()))?;
        let checked = Self::new(raw.clients, labels, num_classes)?;
        if checked.counts != raw.counts {
            return Err(Error::Partition(
                "stored counts disagree with the assignments".into(),
            ));
        }
        Ok(checked)
    }
}

fn indices_by_class(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::Partition(format!("label {y} out of range for {num_classes} classes")))?
            .push(i);
    }
    Ok(by_class)
}

pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<Partition> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Partition(format!(
            "Dirichlet β must be positive, got {beta}"
        )));
    }
    if num_clients == 0 {
        return Err(Error::Partition("num_clients must be positive".into()));
    }
    if labels.len() < num_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot give {num_clients} clients one sample each",
            labels.len()
        )));
    }
    let by_class = indices_by_class(labels, num_classes)?;
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!("class {c} has no samples")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Partition(e.to_string()))?;

    for attempt in 0..=MAX_REDRAWS {
        let mut rng = stream_rng(Stream::Partition, &[seed, attempt]);
        if let Some(clients) = dirichlet_draw(&by_class, num_clients, &gamma, &mut rng) {
            return Partition::new(clients, labels, num_classes);
        }
    }
    Err(Error::Partition(format!(
        "every client non-empty not reached after {MAX_REDRAWS} redraws (N = {num_clients}, β = {beta})"
    )))
}

fn dirichlet_draw(
    by_class: &[Vec<usize>],
    num_clients: usize,
    gamma: &Gamma<f64>,
    rng: &mut SimRng,
) -> Option<Vec<Vec<usize>>> {
    let mut clients = vec![Vec::new(); num_clients];
    for members in by_class {
        let mut members = members.clone();
        members.shuffle(rng);
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return None;
        }
        let n = members.len();
        let mut start = 0;
        let mut cumulative = 0.0;
        for (k, d) in draws.iter().enumerate() {
            cumulative += d / total;
            let end = if k + 1 == num_clients {
                n
            } else {
                ((cumulative * n as f64).floor() as usize).clamp(start, n)
            };
            clients[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    clients.iter().all(|c| !c.is_empty()).then_some(clients)
}

/// Shard counts per class: one each, then the remaining shards go one at a
/// time to the class with the most samples per shard (lowest index on ties).
fn shards_per_class(sizes: &[usize], total_shards: usize) -> Vec<usize> {
    let mut shards: Vec<usize> = sizes.iter().map(|&n| usize::from(n > 0)).collect();
    let mut remaining = total_shards - shards.iter().sum::<usize>();
    while remaining > 0 {
        let best = (0..sizes.len())
            .filter(|&c| shards[c] > 0 && shards[c] < sizes[c])
            .max_by(|&a, &b| {
                // sizes[a]/shards[a] vs sizes[b]/shards[b], exact in integers;
                // reversed index keeps the lowest index on ties.
                (sizes[a] * shards[b])
                    .cmp(&(sizes[b] * shards[a]))
                    .then(b.cmp(&a))
            })
            .expect("total shards never exceed the sample count");
        shards[best] += 1;
        remaining -= 1;
    }
    shards
}

pub fn quantity_shard_partition(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 || shards_per_client == 0 {
        return Err(Error::Partition(
            "num_clients and shards_per_client must be positive".into(),
        ));
    }
    let total_shards = num_clients * shards_per_client;
    if total_shards > labels.len() {
        return Err(Error::Partition(format!(
            "{total_shards} shards requested from {} samples",
            labels.len()
        )));
    }
    let by_class = indices_by_class(labels, num_classes)?;
    let present = by_class.iter().filter(|m| !m.is_empty()).count();
    if total_shards < present {
        return Err(Error::Partition(format!(
            "{total_shards} label-pure shards cannot cover {present} classes"
        )));
    }

    let mut rng = stream_rng(Stream::Partition, &[seed]);
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = shards_per_class(&sizes, total_shards);
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(total_shards);
    for (members, &k) in by_class.iter().zip(&counts) {
        if k == 0 {
            continue;
        }
        let mut members = members.clone();
        members.shuffle(&mut rng);
        // Remainder goes to the tail shards of the class.
        let (base, extra) = (members.len() / k, members.len() % k);
        let mut start = 0;
        for j in 0..k {
            let len = base + usize::from(j >= k - extra);
            shards.push(members[start..start + len].to_vec());
            start += len;
        }
    }
    shards.shuffle(&mut rng);
    let clients = shards.chunks(shards_per_client).map(|c| c.concat()).collect();
    Partition::new(clients, labels, num_classes)
}

/// Per-client summary for audits and heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub samples_per_client: Vec<usize>,
    pub empty_classes_per_client: Vec<usize>,
    pub distinct_labels_per_client: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

pub fn partition_stats(partition: &Partition) -> PartitionStats {
    let counts = partition.count_matrix().to_vec();
    let distinct: Vec<usize> = counts
        .iter()
        .map(|row| row.iter().filter(|&&n| n > 0).count())
        .collect();
    PartitionStats {
        samples_per_client: counts.iter().map(|row| row.iter().sum()).collect(),
        empty_classes_per_client: distinct.iter().map(|d| partition.num_classes() - d).collect(),
        distinct_labels_per_client: distinct,
        counts,
    }
}

/// Labels present among `indices`.
pub fn distinct_labels(labels: &[usize], indices: &[usize]) -> BTreeSet<usize> {
    indices.iter().map(|&i| labels[i]).collect()
}
