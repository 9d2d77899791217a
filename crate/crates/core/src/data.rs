//! Datasets: IDX ingestion, synthetic Gaussian blobs, the even
//! victim/query-pool split and IID client sharding.
//!
//! Every dataset remembers where its rows came from (`origin` plus the row
//! indices within that origin). Disjointness checks between splits compare
//! those provenance records rather than input values.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Affine map applied to raw values at load time: `x' = x·scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Normalization {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        offset: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    pub normalization: Normalization,
    origin: String,
    indices: Vec<usize>,
}

impl LabeledDataset {
    /// Builds a dataset whose provenance is its own row numbering.
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let name = name.into();
        if inputs.rank() < 2 || inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} inputs {:?} do not align with {} labels",
                name,
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        let indices = (0..labels.len()).collect();
        Ok(Self {
            origin: name.clone(),
            name,
            inputs,
            labels,
            class_count,
            normalization,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-sample input shape.
    pub fn item_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    /// Row indices within `origin`.
    pub fn provenance(&self) -> &[usize] {
        &self.indices
    }

    /// Widens the label space, e.g. so train and test files agree.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if self.labels.iter().any(|&y| y >= class_count) {
            return Err(Error::Domain(format!(
                "labels exceed requested class count {class_count}"
            )));
        }
        self.class_count = class_count;
        Ok(self)
    }

    /// Rows at the given local positions, keeping provenance.
    pub fn subset(&self, positions: &[usize], name: impl Into<String>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            inputs: self.inputs.select_rows(positions)?,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            class_count: self.class_count,
            normalization: self.normalization,
            origin: self.origin.clone(),
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
        })
    }

    /// The first `n` rows.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>(), self.name.clone())
    }

    /// True when no row of `self` shares provenance with a row of `other`.
    pub fn disjoint_from(&self, other: &LabeledDataset) -> bool {
        if self.origin != other.origin {
            return true;
        }
        let mine: HashSet<usize> = self.indices.iter().copied().collect();
        !other.indices.iter().any(|i| mine.contains(i))
    }

    /// Hex SHA-256 of inputs and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.inputs.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Attacker-facing view: inputs and provenance, no labels.
    pub fn unlabeled(&self) -> UnlabeledPool<'_> {
        UnlabeledPool { dataset: self }
    }
}

/// Read-only view of a dataset that exposes inputs but never labels.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledPool<'a> {
    dataset: &'a LabeledDataset,
}

impl<'a> UnlabeledPool<'a> {
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn inputs(&self) -> &'a Tensor {
        &self.dataset.inputs
    }

    pub fn item_shape(&self) -> &'a [usize] {
        self.dataset.item_shape()
    }

    pub(crate) fn origin(&self) -> &'a str {
        &self.dataset.origin
    }

    pub(crate) fn provenance(&self) -> &'a [usize] {
        &self.dataset.indices
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

/// Parses IDX image (`0x00000803`) and label (`0x00000801`) payloads.
/// Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8], name: &str) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "images: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let pixels = n * rows * cols;
    let payload = &images[16..];
    if payload.len() != pixels {
        return Err(Error::format(format!(
            "images: header promises {pixels} pixel bytes, found {}",
            payload.len()
        )));
    }

    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "labels: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let m = be_u32(labels, 4, "labels")? as usize;
    if m != n {
        return Err(Error::format(format!(
            "count mismatch: {n} images but {m} labels"
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != m {
        return Err(Error::format(format!(
            "labels: header promises {m} labels, found {}",
            label_bytes.len()
        )));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format("empty IDX payload"));
    }

    let norm = Normalization {
        scale: 1.0 / 255.0,
        offset: 0.0,
    };
    let data = payload.iter().map(|&b| f64::from(b) * norm.scale).collect();
    let ys: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(
        name,
        Tensor::new(vec![n, 1, rows, cols], data)?,
        ys,
        classes,
        norm,
    )
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path.as_ref())?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    parse_idx(&images, &labels, &name)
}

/// Encodes a dataset of `[n,1,H,W]` images in `[0,1]` as IDX byte streams.
pub fn encode_idx(dataset: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = dataset.item_shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim(format!("IDX needs [1,H,W] items, got {s:?}")));
    }
    let mut images = Vec::with_capacity(16 + dataset.inputs.len());
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [dataset.len(), s[1], s[2]] {
        images.extend((d as u32).to_be_bytes());
    }
    images.extend(
        dataset
            .inputs
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend((dataset.len() as u32).to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

/// Unit-variance Gaussian clusters. Class `k` is centred at
/// `(separation/√2)·e_k`, so every pair of centres is exactly `separation`
/// apart; centres do not depend on `seed`.
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if per_class < 1 {
        return Err(Error::config("per_class must be at least 1"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if class_count < 2 || class_count > dim {
        return Err(Error::config(format!(
            "need 2 <= class_count <= dim, got {class_count} classes in {dim} dims"
        )));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let mut rng = seed::rng(seed, &[0xb10b]);
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..class_count {
        for _ in 0..per_class {
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(z + if d == k { offset } else { 0.0 });
            }
            labels.push(k);
        }
    }
    let name = format!("blobs-k{class_count}-d{dim}-sep{separation}-seed{seed}");
    LabeledDataset::new(
        name,
        Tensor::new(vec![n, dim], data)?,
        labels,
        class_count,
        Normalization::IDENTITY,
    )
}

/// Centres used by [`synth_blobs`].
pub fn blob_centers(class_count: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let offset = separation / std::f64::consts::SQRT_2;
    (0..class_count)
        .map(|k| {
            (0..dim)
                .map(|d| if d == k { offset } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Victim-train half, attacker query-pool half and the fixed test set.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub victim_train: LabeledDataset,
    /// Labels are kept for diagnostics only; attack code sees `unlabeled()`.
    pub query_pool: LabeledDataset,
    pub test: LabeledDataset,
    pub split_seed: u64,
}

/// Seeded permutation followed by an even halving; on odd sizes the victim
/// half receives the extra row. `test` is passed through untouched.
pub fn split(
    dataset: &LabeledDataset,
    test: LabeledDataset,
    split_seed: u64,
) -> Result<DatasetBundle> {
    if dataset.len() < 2 {
        return Err(Error::config(format!(
            "cannot split {} rows into two halves",
            dataset.len()
        )));
    }
    if !dataset.disjoint_from(&test) {
        return Err(Error::config("test set overlaps the training data"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(split_seed, &[0x5917]));
    let half = dataset.len().div_ceil(2);
    Ok(DatasetBundle {
        victim_train: dataset.subset(&order[..half], format!("{}/victim", dataset.name))?,
        query_pool: dataset.subset(&order[half..], format!("{}/pool", dataset.name))?,
        test,
        split_seed,
    })
}

/// Holds `count` seeded rows out of `dataset`, returning `(rest, held_out)`.
pub fn carve(
    dataset: &LabeledDataset,
    count: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if count == 0 || count >= dataset.len() {
        return Err(Error::config(format!(
            "cannot hold out {count} of {} rows",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[0xca5e]));
    let (held, rest) = order.split_at(count);
    let mut rest = rest.to_vec();
    let mut held = held.to_vec();
    rest.sort_unstable();
    held.sort_unstable();
    Ok((
        dataset.subset(&rest, dataset.name.clone())?,
        dataset.subset(&held, format!("{}/aux", dataset.name))?,
    ))
}

#[derive(Debug, Clone)]
pub struct ClientShards {
    pub shards: Vec<LabeledDataset>,
}

impl ClientShards {
    pub fn client_count(&self) -> usize {
        self.shards.len()
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.shards.iter().map(LabeledDataset::len).collect()
    }
}

/// IID partition: seeded shuffle, round-robin assignment. Rows keep their
/// original relative order inside each shard, so a single shard is exactly
/// `victim_train`.
pub fn shard(
    victim_train: &LabeledDataset,
    client_count: usize,
    seed: u64,
) -> Result<ClientShards> {
    let n = victim_train.len();
    if client_count == 0 || client_count > n {
        return Err(Error::config(format!(
            "cannot shard {n} rows across {client_count} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[0x54a2]));
    let mut buckets = vec![Vec::with_capacity(n / client_count + 1); client_count];
    for (pos, &row) in order.iter().enumerate() {
        buckets[pos % client_count].push(row);
    }
    let shards = buckets
        .into_iter()
        .enumerate()
        .map(|(k, mut rows)| {
            rows.sort_unstable();
            victim_train.subset(&rows, format!("{}/client{k}", victim_train.name))
        })
        .collect::<Result<_>>()?;
    Ok(ClientShards { shards })
}
