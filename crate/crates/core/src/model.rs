//! The model zoo: architecture descriptors, seeded initialisation, inference,
//! mini-batch SGD training and the `FXL1` parameter file format.
//!
//! Desk-scale architectures:
//!
//! * `mlp`: flatten → (dense → relu)* → dense(K)
//! * `basic_cnn`: conv(f₁, 3×3) → relu → maxpool2 → conv(f₂, 3×3) → relu →
//!   maxpool2 → flatten → dense(d) → relu → dense(K); defaults f = 8, 16 and
//!   d = 64
//! * `mini_resnet`: stem conv(c, 3×3) → relu → residual blocks → global
//!   average pool → dense(K); defaults c = 8 with 2 blocks
//!
//! Weights are drawn from `U(−b, b)` with `b = √(6 / fan_in)`; biases start at
//! zero.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{
    AnyLayer, Conv2d, Dense, Flatten, GlobalAvgPool, Layer, MaxPool2, Relu, ResidualBlock,
};
use crate::seed;
use crate::tensor::{self, Tensor};

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    Mlp { hidden: Vec<usize> },
    BasicCnn { filters: [usize; 2], dense: usize },
    MiniResnet { channels: usize, blocks: usize },
}

/// Architecture descriptor. Its `Display` form is the canonical descriptor
/// string stored in parameter files and accepted by `FromStr`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Per-sample input shape: `[d]` or `[C,H,W]`.
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

impl ArchitectureSpec {
    pub fn mlp(input_shape: &[usize], hidden: &[usize], class_count: usize) -> Self {
        Self {
            kind: ArchKind::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: input_shape.to_vec(),
            class_count,
        }
    }

    pub fn basic_cnn(input_shape: &[usize], class_count: usize) -> Self {
        Self {
            kind: ArchKind::BasicCnn {
                filters: [8, 16],
                dense: 64,
            },
            input_shape: input_shape.to_vec(),
            class_count,
        }
    }

    pub fn mini_resnet(input_shape: &[usize], class_count: usize) -> Self {
        Self {
            kind: ArchKind::MiniResnet {
                channels: 8,
                blocks: 2,
            },
            input_shape: input_shape.to_vec(),
            class_count,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ArchKind::Mlp { .. } => "mlp",
            ArchKind::BasicCnn { .. } => "basic_cnn",
            ArchKind::MiniResnet { .. } => "mini_resnet",
        }
    }

    fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Checks the descriptor and every layer-to-layer shape hand-off.
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Spec(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        match &self.kind {
            ArchKind::Mlp { hidden } if hidden.contains(&0) => {
                return Err(Error::Spec("mlp hidden widths must be positive".into()))
            }
            ArchKind::BasicCnn { filters, dense } if filters.contains(&0) || *dense == 0 => {
                return Err(Error::Spec("cnn widths must be positive".into()))
            }
            ArchKind::MiniResnet { channels: 0, .. } => {
                return Err(Error::Spec("resnet channels must be positive".into()))
            }
            ArchKind::BasicCnn { .. } | ArchKind::MiniResnet { .. }
                if self.input_shape.len() != 3 =>
            {
                return Err(Error::Spec(format!(
                    "{} needs a [C,H,W] input, got {:?}",
                    self.name(),
                    self.input_shape
                )))
            }
            _ => {}
        }
        let net = Network::build(self, Tensor::zeros, Tensor::zeros)?;
        let mut probe = vec![1];
        probe.extend(&self.input_shape);
        let out = net
            .forward(&Tensor::zeros(&probe))
            .map_err(|e| Error::Spec(format!("{self}: {e}")))?;
        if out.shape() != [1, self.class_count] {
            return Err(Error::Spec(format!(
                "{self}: output shape {:?}",
                out.shape()
            )));
        }
        Ok(())
    }
}

fn join(dims: &[usize], sep: &str) -> String {
    dims.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} input={}", self.name(), join(&self.input_shape, "x"))?;
        match &self.kind {
            ArchKind::Mlp { hidden } => write!(f, " hidden={}", join(hidden, ","))?,
            ArchKind::BasicCnn { filters, dense } => {
                write!(f, " filters={} dense={dense}", join(filters, ","))?
            }
            ArchKind::MiniResnet { channels, blocks } => {
                write!(f, " channels={channels} blocks={blocks}")?
            }
        }
        write!(f, " classes={}", self.class_count)
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts
            .next()
            .ok_or_else(|| Error::Spec("empty descriptor".into()))?;
        let mut fields = std::collections::BTreeMap::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("bad descriptor field `{part}`")))?;
            fields.insert(k, v);
        }
        let list = |key: &str, sep: char| -> Result<Vec<usize>> {
            let raw = fields
                .get(key)
                .ok_or_else(|| Error::Spec(format!("descriptor missing `{key}`")))?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(sep)
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::Spec(format!("bad `{key}` value `{raw}`")))
                })
                .collect()
        };
        let one = |key: &str| -> Result<usize> {
            match list(key, ',')?.as_slice() {
                [v] => Ok(*v),
                _ => Err(Error::Spec(format!("`{key}` needs one value"))),
            }
        };
        let input_shape = list("input", 'x')?;
        let class_count = one("classes")?;
        let kind = match kind {
            "mlp" => ArchKind::Mlp {
                hidden: list("hidden", ',')?,
            },
            "basic_cnn" => {
                let f = list("filters", ',')?;
                if f.len() != 2 {
                    return Err(Error::Spec("basic_cnn needs two filter counts".into()));
                }
                ArchKind::BasicCnn {
                    filters: [f[0], f[1]],
                    dense: one("dense")?,
                }
            }
            "mini_resnet" => ArchKind::MiniResnet {
                channels: one("channels")?,
                blocks: one("blocks")?,
            },
            other => return Err(Error::Spec(format!("unknown architecture `{other}`"))),
        };
        Ok(Self {
            kind,
            input_shape,
            class_count,
        })
    }
}

/// Where a model's parameters came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RandomInit,
    FederatedTrained,
    CentralizedTrained,
    Pretrained,
    FineTuned,
}

impl Provenance {
    fn code(self) -> u8 {
        match self {
            Provenance::RandomInit => 0,
            Provenance::FederatedTrained => 1,
            Provenance::CentralizedTrained => 2,
            Provenance::Pretrained => 3,
            Provenance::FineTuned => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Provenance::RandomInit,
            1 => Provenance::FederatedTrained,
            2 => Provenance::CentralizedTrained,
            3 => Provenance::Pretrained,
            4 => Provenance::FineTuned,
            other => return Err(Error::format(format!("unknown provenance code {other}"))),
        })
    }

    pub fn can_become(self, next: Provenance) -> bool {
        use Provenance::*;
        matches!(
            (self, next),
            (
                RandomInit,
                CentralizedTrained | FederatedTrained | Pretrained
            ) | (Pretrained, FineTuned)
        )
    }
}

/// Anything that maps a batch of inputs to class-probability rows.
pub trait Classifier {
    fn input_shape(&self) -> &[usize];
    fn class_count(&self) -> usize;
    /// `[n, class_count]` probability matrix for a `[n, input_shape…]` batch.
    fn predict(&self, batch: &Tensor) -> Result<Tensor>;
}

pub(crate) fn check_batch(batch: &Tensor, item: &[usize]) -> Result<()> {
    if batch.rank() != item.len() + 1 || &batch.shape()[1..] != item {
        return Err(Error::dim(format!(
            "batch shape {:?} does not match input shape {item:?}",
            batch.shape()
        )));
    }
    Ok(())
}

fn chw(spec: &ArchitectureSpec) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(spec.input_shape.as_slice())
        .map_err(|_| Error::Spec(format!("{} needs a [C,H,W] input", spec.name())))
}

/// Sequential stack of layers.
#[derive(Debug, Clone)]
pub(crate) struct Network {
    layers: Vec<AnyLayer>,
}

/// Source of fresh parameter tensors while a network is assembled.
struct ParamSource<'a> {
    weight: &'a mut dyn FnMut(&[usize]) -> Tensor,
    bias: &'a mut dyn FnMut(&[usize]) -> Tensor,
}

impl ParamSource<'_> {
    fn dense(&mut self, inputs: usize, outputs: usize) -> Result<AnyLayer> {
        Ok(AnyLayer::Dense(Dense::new(
            (self.weight)(&[inputs, outputs]),
            (self.bias)(&[outputs]),
        )?))
    }

    fn conv3(&mut self, filters: usize, channels: usize, padding: usize) -> Result<Conv2d> {
        Conv2d::new(
            (self.weight)(&[filters, channels, 3, 3]),
            (self.bias)(&[filters]),
            1,
            padding,
        )
    }
}

impl Network {
    fn build(
        spec: &ArchitectureSpec,
        mut weight: impl FnMut(&[usize]) -> Tensor,
        mut bias: impl FnMut(&[usize]) -> Tensor,
    ) -> Result<Self> {
        let mut src = ParamSource {
            weight: &mut weight,
            bias: &mut bias,
        };
        let mut layers = Vec::new();
        let too_small = || {
            Error::Spec(format!(
                "input {:?} too small for {}",
                spec.input_shape,
                spec.name()
            ))
        };
        match &spec.kind {
            ArchKind::Mlp { hidden } => {
                layers.push(AnyLayer::Flatten(Flatten::default()));
                let mut width = spec.input_len();
                for &h in hidden {
                    layers.push(src.dense(width, h)?);
                    layers.push(AnyLayer::Relu(Relu::default()));
                    width = h;
                }
                layers.push(src.dense(width, spec.class_count)?);
            }
            ArchKind::BasicCnn { filters, dense } => {
                let [c, h, w] = chw(spec)?;
                let after = |x: usize| x.checked_sub(2).map(|v| v / 2).filter(|&v| v > 0);
                let h2 = after(h).and_then(after).ok_or_else(too_small)?;
                let w2 = after(w).and_then(after).ok_or_else(too_small)?;
                layers.push(AnyLayer::Conv2d(src.conv3(filters[0], c, 0)?));
                layers.push(AnyLayer::Relu(Relu::default()));
                layers.push(AnyLayer::MaxPool2(MaxPool2::default()));
                layers.push(AnyLayer::Conv2d(src.conv3(filters[1], filters[0], 0)?));
                layers.push(AnyLayer::Relu(Relu::default()));
                layers.push(AnyLayer::MaxPool2(MaxPool2::default()));
                layers.push(AnyLayer::Flatten(Flatten::default()));
                layers.push(src.dense(filters[1] * h2 * w2, *dense)?);
                layers.push(AnyLayer::Relu(Relu::default()));
                layers.push(src.dense(*dense, spec.class_count)?);
            }
            ArchKind::MiniResnet { channels, blocks } => {
                let [c, h, w] = chw(spec)?;
                if h < 3 || w < 3 {
                    return Err(too_small());
                }
                layers.push(AnyLayer::Conv2d(src.conv3(*channels, c, 0)?));
                layers.push(AnyLayer::Relu(Relu::default()));
                for _ in 0..*blocks {
                    let a = src.conv3(*channels, *channels, 1)?;
                    let b = src.conv3(*channels, *channels, 1)?;
                    layers.push(AnyLayer::Residual(ResidualBlock::new(a, b)?));
                }
                layers.push(AnyLayer::GlobalAvgPool(GlobalAvgPool::default()));
                layers.push(src.dense(*channels, spec.class_count)?);
            }
        }
        Ok(Self { layers })
    }

    pub(crate) fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.layers[0].forward_train(input)?;
        for layer in &mut self.layers[1..] {
            x = layer.forward_train(&x)?;
        }
        Ok(x)
    }

    /// Parameter gradients in `params()` order.
    fn backward(&self, upstream: Tensor) -> Result<Vec<Tensor>> {
        let mut grads_rev: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = upstream;
        for layer in self.layers.iter().rev() {
            let back = layer.backward(&g)?;
            grads_rev.push(back.param_grads);
            g = back.input_grad;
        }
        Ok(grads_rev.into_iter().rev().flatten().collect())
    }

    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    fn names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = l.kind();
                l.param_names()
                    .iter()
                    .map(move |n| format!("{i}.{kind}.{n}"))
            })
            .collect()
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }
}

/// An architecture together with a concrete parameter set.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    spec: ArchitectureSpec,
    network: Network,
    provenance: Provenance,
}

impl ModelInstance {
    /// Seeded initialisation; see the module docs for the distribution.
    pub fn initialize(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed, &[0x1417]);
        let network = Network::build(
            spec,
            |shape| {
                // dense weights are [in, out]; conv kernels are [K, C, kh, kw]
                let fan_in: usize = if shape.len() == 2 {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::from_parts(
                    shape.to_vec(),
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                )
            },
            Tensor::zeros,
        )?;
        Ok(Self {
            spec: spec.clone(),
            network,
            provenance: Provenance::RandomInit,
        })
    }

    /// Builds a model from explicit parameter tensors (in `parameters()` order).
    pub fn from_parameters(
        spec: &ArchitectureSpec,
        params: Vec<Tensor>,
        provenance: Provenance,
    ) -> Result<Self> {
        spec.validate()?;
        let mut model = Self {
            spec: spec.clone(),
            network: Network::build(spec, Tensor::zeros, Tensor::zeros)?,
            provenance,
        };
        let slots = model.network.params_mut();
        if slots.len() != params.len() {
            return Err(Error::Spec(format!(
                "{spec} has {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Spec(format!(
                    "parameter shape {:?} expected, got {:?}",
                    slot.shape(),
                    p.shape()
                )));
            }
            if !p.all_finite() {
                return Err(Error::Domain("non-finite parameter".into()));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Moves to a new provenance along an allowed transition.
    pub fn with_provenance(mut self, next: Provenance) -> Result<Self> {
        if !self.provenance.can_become(next) {
            return Err(Error::State(format!(
                "provenance {:?} cannot become {next:?}",
                self.provenance
            )));
        }
        self.provenance = next;
        Ok(self)
    }

    pub(crate) fn set_provenance(&mut self, p: Provenance) {
        self.provenance = p;
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.network
            .names()
            .into_iter()
            .zip(self.network.params())
            .collect()
    }

    pub fn parameter_tensors(&self) -> Vec<&Tensor> {
        self.network.params()
    }

    pub fn parameter_count(&self) -> usize {
        self.network.params().iter().map(|t| t.len()).sum()
    }

    /// Mutable parameter access for aggregation and test fixtures.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.network.params_mut()
    }

    /// Hex SHA-256 prefix over the serialised parameters.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.save_parameters());
        hex::encode(&digest[..8])
    }

    /// Raw logits for a batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(batch, &self.spec.input_shape)?;
        self.network.forward(batch)
    }

    /// Serialises to the `FXL1` format:
    ///
    /// ```text
    /// "FXL1" | u32 descriptor_len | descriptor (UTF-8) | u8 provenance
    ///        | u32 tensor_count | per tensor:
    ///          u32 name_len | name | u32 rank | rank × u64 dim | f64 values
    /// ```
    ///
    /// All integers and floats are little-endian.
    pub fn save_parameters(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FXL1");
        let descriptor = self.spec.to_string();
        out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(descriptor.as_bytes());
        out.push(self.provenance.code());
        let params = self.parameters();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses an `FXL1` stream whose descriptor must equal `spec`.
    pub fn load_parameters(spec: &ArchitectureSpec, bytes: &[u8]) -> Result<Self> {
        let (found, model) = Self::decode(bytes)?;
        if &found != spec {
            return Err(Error::format(format!(
                "spec mismatch: expected `{spec}`, found `{found}`"
            )));
        }
        Ok(model)
    }

    /// Parses an `FXL1` stream using its embedded descriptor.
    pub fn load_any(bytes: &[u8]) -> Result<Self> {
        Ok(Self::decode(bytes)?.1)
    }

    fn decode(bytes: &[u8]) -> Result<(ArchitectureSpec, Self)> {
        let mut r = ByteReader { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != b"FXL1" {
            return Err(Error::format(format!(
                "bad magic {magic:?}, expected \"FXL1\""
            )));
        }
        let len = r.u32()? as usize;
        let descriptor = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("descriptor is not UTF-8"))?;
        let spec: ArchitectureSpec = descriptor
            .parse()
            .map_err(|e| Error::format(format!("bad descriptor: {e}")))?;
        let provenance = Provenance::from_code(r.take(1)?[0])?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            r.take(name_len)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("tensor extent overflow"))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::format("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?);
        }
        if r.at != bytes.len() {
            return Err(Error::format("trailing bytes after last tensor"));
        }
        let model = Self::from_parameters(&spec, params, provenance)
            .map_err(|e| Error::format(e.to_string()))?;
        Ok((spec, model))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated stream at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Classifier for ModelInstance {
    fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        check_batch(batch, &self.spec.input_shape)?;
        let n = batch.rows();
        let mut out = Vec::with_capacity(n * self.spec.class_count);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = if start == 0 && end == n {
                batch.clone()
            } else {
                batch.select_rows(&idx)?
            };
            let logits = self.network.forward(&chunk)?;
            out.extend(tensor::softmax_rows(&logits)?.into_data());
            start = end;
        }
        Ok(Tensor::from_parts(vec![n, self.spec.class_count], out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "learning rate must be a non-negative number, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.batch_size > dataset_size {
            return Err(Error::config(format!(
                "batch size {} invalid for {dataset_size} samples",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Mini-batch SGD with momentum over one network; the velocity buffers
/// persist across calls to `run_epochs`.
///
/// Epoch `e` shuffles with a seed derived from `(config.seed, e)`, so running
/// `a` epochs then `b` epochs on one trainer is bitwise identical to running
/// `a + b` epochs at once.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: ModelInstance,
    velocity: Vec<Tensor>,
    config: TrainConfig,
    epochs_done: u64,
}

impl Trainer {
    pub fn new(model: &ModelInstance, config: &TrainConfig) -> Self {
        let velocity = model
            .network
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            model: model.clone(),
            velocity,
            config: config.clone(),
            epochs_done: 0,
        }
    }

    /// Replaces the parameters while keeping optimiser state.
    pub fn load_parameters_from(&mut self, model: &ModelInstance) -> Result<()> {
        if model.spec != self.model.spec {
            return Err(Error::Spec(format!(
                "trainer holds `{}`, got `{}`",
                self.model.spec, model.spec
            )));
        }
        self.model = model.clone();
        Ok(())
    }

    pub fn model(&self) -> &ModelInstance {
        &self.model
    }

    pub fn into_model(mut self) -> ModelInstance {
        self.model.network.clear_cache();
        self.model
    }

    /// Trains for `epochs` epochs and returns the mean per-sample loss of each.
    pub fn run_epochs(
        &mut self,
        inputs: &Tensor,
        targets: &Tensor,
        epochs: usize,
    ) -> Result<Vec<f64>> {
        let n = check_training_data(&self.model, inputs, targets)?;
        self.config.validate(n)?;
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng(self.config.seed, &[self.epochs_done]));
            let mut total = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                total += self.step(inputs, targets, batch)?;
            }
            self.epochs_done += 1;
            losses.push(total / n as f64);
        }
        self.model.network.clear_cache();
        Ok(losses)
    }

    /// One SGD step; returns the summed loss over the batch.
    fn step(&mut self, inputs: &Tensor, targets: &Tensor, batch: &[usize]) -> Result<f64> {
        let x = inputs.select_rows(batch)?;
        let t = targets.select_rows(batch)?;
        let logits = self.model.network.forward_train(&x)?;
        let probs = tensor::softmax_rows(&logits)?;
        let k = probs.row_len();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(probs.len());
        for i in 0..batch.len() {
            loss += tensor::cross_entropy(probs.row(i), t.row(i))?;
            grad.extend(
                probs
                    .row(i)
                    .iter()
                    .zip(t.row(i))
                    .map(|(p, y)| (p - y) * scale),
            );
        }
        let grads = self
            .model
            .network
            .backward(Tensor::from_parts(vec![batch.len(), k], grad))?;
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        for ((param, vel), g) in self
            .model
            .network
            .params_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(&grads)
        {
            for ((p, v), &gv) in param
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(g.data())
            {
                *v = mu * *v + gv;
                *p -= lr * *v;
            }
        }
        Ok(loss)
    }
}

fn check_training_data(model: &ModelInstance, inputs: &Tensor, targets: &Tensor) -> Result<usize> {
    check_batch(inputs, &model.spec.input_shape)?;
    let n = inputs.rows();
    if targets.shape() != [n, model.spec.class_count] {
        return Err(Error::dim(format!(
            "targets {:?} do not align with {n} inputs of {} classes",
            targets.shape(),
            model.spec.class_count
        )));
    }
    for i in 0..n {
        let s: f64 = targets.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 || targets.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!(
                "target row {i} is not a probability vector"
            )));
        }
    }
    Ok(n)
}

/// Trains a copy of `model`; provenance is left for the caller to set.
pub fn train(
    model: &ModelInstance,
    inputs: &Tensor,
    targets: &Tensor,
    config: &TrainConfig,
) -> Result<ModelInstance> {
    Ok(train_with_losses(model, inputs, targets, config)?.0)
}

/// Like [`train`], also returning the per-epoch mean loss.
pub fn train_with_losses(
    model: &ModelInstance,
    inputs: &Tensor,
    targets: &Tensor,
    config: &TrainConfig,
) -> Result<(ModelInstance, Vec<f64>)> {
    let n = check_training_data(model, inputs, targets)?;
    config.validate(n)?;
    let mut trainer = Trainer::new(model, config);
    let losses = trainer.run_epochs(inputs, targets, config.epochs)?;
    Ok((trainer.into_model(), losses))
}

/// Mean cross-entropy of the model's predictions against target rows.
pub fn mean_loss(model: &impl Classifier, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
    let probs = model.predict(inputs)?;
    let mut total = 0.0;
    for i in 0..probs.rows() {
        total += tensor::cross_entropy(probs.row(i), targets.row(i))?;
    }
    Ok(total / probs.rows() as f64)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * class_count];
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_count {
            return Err(Error::Domain(format!(
                "label {y} out of range for {class_count} classes"
            )));
        }
        data[i * class_count + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), class_count], data)
}
