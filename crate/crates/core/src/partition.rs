//! Base/new class splitting and disjoint few-shot client shards.
//!
//! Base classes of each dataset are shuffled and cut into shards of exactly
//! `n` classes. Chunking happens within a dataset; the `B mod n` leftovers of
//! every dataset are either left unassigned or, with `allow_mixed_shards`,
//! pooled in dataset order and cut into further (cross-dataset) shards.
//! Unassigned classes never train but still count towards base accuracy.

use log::info;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::encoders::{ClassId, EmbeddingStore, Split};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Matrix;

/// Number of base classes out of `num_classes`: the first ⌈C/2⌉.
pub fn base_count(num_classes: usize) -> usize {
    num_classes.div_ceil(2)
}

/// Re-flags each dataset's classes: the first ⌈C/2⌉ in stored order become
/// base, the rest new.
pub fn split_base_new(mut store: EmbeddingStore) -> Result<EmbeddingStore> {
    for d in &mut store.datasets {
        if d.classes.len() < 2 {
            return Err(Error::Config(format!(
                "dataset {} has {} classes; a base/new split needs at least 2",
                d.name,
                d.classes.len()
            )));
        }
        let nb = base_count(d.classes.len());
        for (i, c) in d.classes.iter_mut().enumerate() {
            c.split = if i < nb { Split::Base } else { Split::New };
        }
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Classes per client (`n`).
    pub classes_per_client: usize,
    /// Training examples per class drawn from each class's train pool.
    pub shots: usize,
    pub allow_mixed_shards: bool,
    /// Datasets whose classes never go to any client.
    pub exclude_datasets: Vec<String>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            classes_per_client: 20,
            shots: 8,
            allow_mixed_shards: false,
            exclude_datasets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Source dataset name, or names joined with `+` for a mixed shard.
    pub dataset: String,
    /// Global class ids; the position in this list is the local label.
    pub class_ids: Vec<ClassId>,
    /// `n × d` class token embeddings, row `j` for local label `j`.
    pub tokens: Matrix,
    /// `(n · shots) × d` training image embeddings.
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub shots: usize,
}

impl ClientShard {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn num_examples(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    /// Base classes not owned by any client.
    pub unassigned: Vec<ClassId>,
}

pub fn build_shards(store: &EmbeddingStore, cfg: &PartitionConfig, seed: u64) -> Result<Partition> {
    let n = cfg.classes_per_client;
    if n == 0 || cfg.shots == 0 {
        return Err(Error::Config("partition.classes_per_client and partition.shots must be >= 1".into()));
    }
    for name in &cfg.exclude_datasets {
        if !store.datasets.iter().any(|d| &d.name == name) {
            return Err(Error::Config(format!("excluded dataset {name} is not in the store")));
        }
    }
    let mut rng = rng::prng(rng::child_seed(&[seed, stream::PARTITION]));
    let mut groups: Vec<Vec<ClassId>> = Vec::new();
    let mut leftover: Vec<ClassId> = Vec::new();
    let mut total_base = 0;
    for (di, d) in store.datasets.iter().enumerate() {
        if cfg.exclude_datasets.contains(&d.name) {
            continue;
        }
        let mut ids = store.dataset_class_ids(di, Some(Split::Base));
        total_base += ids.len();
        ids.shuffle(&mut rng);
        let full = ids.len() / n * n;
        groups.extend(ids[..full].chunks(n).map(<[ClassId]>::to_vec));
        leftover.extend_from_slice(&ids[full..]);
    }
    if total_base < n {
        return Err(Error::Config(format!(
            "{total_base} base classes cannot fill a client with {n} classes"
        )));
    }
    let unassigned = if cfg.allow_mixed_shards {
        let full = leftover.len() / n * n;
        groups.extend(leftover[..full].chunks(n).map(<[ClassId]>::to_vec));
        leftover[full..].to_vec()
    } else {
        leftover
    };
    if groups.is_empty() {
        return Err(Error::Config(format!(
            "no dataset has {n} base classes; enable partition.allow_mixed_shards"
        )));
    }
    if !unassigned.is_empty() {
        info!("{} base classes left unassigned (n = {n})", unassigned.len());
    }
    let shards = groups
        .into_iter()
        .enumerate()
        .map(|(client_id, ids)| make_shard(store, client_id, ids, cfg.shots, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition { shards, unassigned })
}

fn make_shard(
    store: &EmbeddingStore,
    client_id: usize,
    class_ids: Vec<ClassId>,
    shots: usize,
    rng: &mut rng::Prng,
) -> Result<ClientShard> {
    let mut rows: Vec<&[f64]> = Vec::with_capacity(class_ids.len() * shots);
    let mut labels = Vec::with_capacity(class_ids.len() * shots);
    let mut names: Vec<&str> = Vec::new();
    for (local, &id) in class_ids.iter().enumerate() {
        let (di, ci) = store.locate(id).ok_or_else(|| Error::Data(format!("unknown class id {id}")))?;
        let name = store.datasets[di].name.as_str();
        if !names.contains(&name) {
            names.push(name);
        }
        let class = &store.datasets[di].classes[ci];
        if shots > class.train.len() {
            return Err(Error::Data(format!(
                "class {} has {} train images, {shots} shots requested",
                class.name,
                class.train.len()
            )));
        }
        for i in index::sample(rng, class.train.len(), shots) {
            rows.push(&class.train[i]);
            labels.push(local);
        }
    }
    Ok(ClientShard {
        client_id,
        dataset: names.join("+"),
        tokens: store.token_matrix(&class_ids)?,
        images: Matrix::from_rows(&rows)?,
        class_ids,
        labels,
        shots,
    })
}
