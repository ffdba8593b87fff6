use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::spec::{BackboneSpec, BlockKind, STEM};
use crate::error::{Error, Result};
use crate::rng::{tag, SeededRng};
use crate::tensor::{Scalar, Tensor};

/// Reserved namespace for SSL and classification heads.
pub const HEAD: &str = "head";

/// A named parameter and whether optimizers may touch it.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered map of parameters. Iteration order is insertion order, which is
/// stable for every network built from the same spec.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Param<T>>,
}

/// True when `name` is `prefix` itself or lives under `prefix.`.
pub fn in_namespace(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn remove_namespace(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !in_namespace(k, prefix));
    }

    /// Register every parameter as a graph leaf; frozen ones do not track gradients.
    pub fn bind(&self, g: &mut crate::Graph<T>, bound: &mut Bound) -> Result<()> {
        for (name, p) in &self.entries {
            let v = g.leaf(p.value.clone(), p.trainable)?;
            bound.vars.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Graph variables for a bound set of parameters.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub(crate) vars: HashMap<String, crate::Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<crate::Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, crate::Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Projection,
    Predictor,
    Classifier,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Projection => "projection",
            HeadKind::Predictor => "predictor",
            HeadKind::Classifier => "classifier",
        }
    }

    pub fn prefix(self) -> String {
        format!("{HEAD}.{}", self.name())
    }
}

/// An MLP (or single linear layer) appended after the pooled features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

impl HeadSpec {
    /// Two-layer MLP `in → in → out`.
    pub fn projection(in_dim: usize, out_dim: usize) -> Self {
        HeadSpec {
            kind: HeadKind::Projection,
            in_dim,
            hidden: vec![in_dim],
            out_dim,
        }
    }

    /// Same shape as the projection, applied to projection outputs.
    pub fn predictor(dim: usize, hidden: usize) -> Self {
        HeadSpec {
            kind: HeadKind::Predictor,
            in_dim: dim,
            hidden: vec![hidden],
            out_dim: dim,
        }
    }

    pub fn classifier(in_dim: usize, classes: usize) -> Self {
        HeadSpec {
            kind: HeadKind::Classifier,
            in_dim,
            hidden: vec![],
            out_dim: classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != HeadKind::Classifier && self.hidden.is_empty() {
            return Err(Error::config(
                format!("head.{}", self.kind.name()),
                "projection and predictor heads need at least one hidden layer",
            ));
        }
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config(
                format!("head.{}", self.kind.name()),
                "layer widths must be positive",
            ));
        }
        Ok(())
    }

    /// `(in, out)` for each linear layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.in_dim];
        dims.extend(&self.hidden);
        dims.push(self.out_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub(crate) fn init_into<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &SeededRng) {
        let prefix = self.kind.prefix();
        let layers = self.layers();
        for (i, (din, dout)) in layers.iter().copied().enumerate() {
            let base = if self.kind == HeadKind::Classifier {
                prefix.clone()
            } else {
                format!("{prefix}.{i}")
            };
            let bound = 1.0 / (din as f64).sqrt();
            let w_name = format!("{base}.weight");
            let b_name = format!("{base}.bias");
            let mut r = param_rng(rng, &w_name);
            let w = (0..din * dout).map(|_| T::of(r.uniform_in(-bound, bound))).collect();
            store.insert(&w_name, Tensor::new(vec![dout, din], w).expect("shape"));
            let mut r = param_rng(rng, &b_name);
            let b = (0..dout).map(|_| T::of(r.uniform_in(-bound, bound))).collect();
            store.insert(&b_name, Tensor::new(vec![dout], b).expect("shape"));
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Each parameter draws from its own stream, so re-initializing one stage
/// never shifts the values of any other.
fn param_rng(rng: &SeededRng, name: &str) -> SeededRng {
    rng.derive(&[tag::INIT, name_hash(name)])
}

/// A backbone plus optional heads, with BN running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    spec: BackboneSpec,
    pub params: ParamStore<T>,
    pub buffers: IndexMap<String, Tensor<T>>,
    heads: Vec<HeadSpec>,
}

/// Layer-level description used by the initializer and the forward pass.
pub(crate) enum Layer {
    Conv {
        name: String,
        out_c: usize,
        in_c: usize,
        k: usize,
    },
    Bn {
        name: String,
        c: usize,
        zero_gamma: bool,
    },
}

pub(crate) fn block_prefix(stage: &str, b: usize) -> String {
    format!("{stage}.{b}")
}

/// Every conv/BN of the backbone in construction order.
pub(crate) fn layers(spec: &BackboneSpec) -> Vec<Layer> {
    let conv = |name: String, out_c, in_c, k| Layer::Conv { name, out_c, in_c, k };
    let bn = |name: String, c, zero_gamma| Layer::Bn { name, c, zero_gamma };
    let mut out = vec![
        conv(format!("{STEM}.conv"), spec.stem.channels, spec.in_channels, spec.stem.kernel),
        bn(format!("{STEM}.bn"), spec.stem.channels, false),
    ];
    let mut in_c = spec.stem.channels;
    for stage in &spec.stages {
        let w = stage.width();
        for b in 0..stage.blocks {
            let p = block_prefix(&stage.name, b);
            let stride = if b == 0 { stage.stride } else { 1 };
            match stage.kind {
                BlockKind::Basic => {
                    out.push(conv(format!("{p}.conv1"), w, in_c, 3));
                    out.push(bn(format!("{p}.bn1"), w, false));
                    out.push(conv(format!("{p}.conv2"), w, w, 3));
                    out.push(bn(format!("{p}.bn2"), w, true));
                }
                BlockKind::Bottleneck => {
                    out.push(conv(format!("{p}.conv1"), w, in_c, 1));
                    out.push(bn(format!("{p}.bn1"), w, false));
                    out.push(conv(format!("{p}.conv2"), w, w, 3));
                    out.push(bn(format!("{p}.bn2"), w, false));
                    out.push(conv(format!("{p}.conv3"), stage.channels, w, 1));
                    out.push(bn(format!("{p}.bn3"), stage.channels, true));
                }
            }
            if stride != 1 || in_c != stage.channels {
                out.push(conv(format!("{p}.down.conv"), stage.channels, in_c, 1));
                out.push(bn(format!("{p}.down.bn"), stage.channels, false));
            }
            in_c = stage.channels;
        }
    }
    out
}

fn init_layer<T: Scalar>(
    layer: &Layer,
    rng: &SeededRng,
    params: &mut ParamStore<T>,
    buffers: &mut IndexMap<String, Tensor<T>>,
) {
    match layer {
        Layer::Conv { name, out_c, in_c, k } => {
            let w_name = format!("{name}.weight");
            // He-normal, fan-out mode.
            let std = (2.0 / (out_c * k * k) as f64).sqrt();
            let mut r = param_rng(rng, &w_name);
            let n = out_c * in_c * k * k;
            let w = (0..n).map(|_| T::of(std * r.normal())).collect();
            params.insert(w_name, Tensor::new(vec![*out_c, *in_c, *k, *k], w).expect("shape"));
        }
        Layer::Bn { name, c, zero_gamma } => {
            let gamma = if *zero_gamma { T::zero() } else { T::one() };
            params.insert(format!("{name}.gamma"), Tensor::full(vec![*c], gamma));
            params.insert(format!("{name}.beta"), Tensor::zeros(vec![*c]));
            buffers.insert(format!("{name}.running_mean"), Tensor::zeros(vec![*c]));
            buffers.insert(format!("{name}.running_var"), Tensor::ones(vec![*c]));
        }
    }
}

fn layer_name(layer: &Layer) -> &str {
    match layer {
        Layer::Conv { name, .. } | Layer::Bn { name, .. } => name,
    }
}

/// Build a freshly initialized network.
pub fn build_backbone<T: Scalar>(spec: &BackboneSpec, rng: &SeededRng) -> Result<Network<T>> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let mut buffers = IndexMap::new();
    for layer in layers(spec) {
        init_layer(&layer, rng, &mut params, &mut buffers);
    }
    Ok(Network {
        spec: spec.clone(),
        params,
        buffers,
        heads: Vec::new(),
    })
}

/// Redraw every parameter of `stage` (and reset its BN statistics).
pub fn reinit_stage<T: Scalar>(net: &Network<T>, stage: &str, rng: &SeededRng) -> Result<Network<T>> {
    if !net.spec.has_namespace(stage) {
        return Err(Error::UnknownStage(stage.to_string()));
    }
    let mut fresh_params = ParamStore::new();
    let mut fresh_buffers = IndexMap::new();
    for layer in layers(&net.spec) {
        if in_namespace(layer_name(&layer), stage) {
            init_layer(&layer, rng, &mut fresh_params, &mut fresh_buffers);
        }
    }
    let mut out = net.clone();
    for (name, p) in fresh_params.iter() {
        let slot = out.params.get_mut(name).expect("same spec");
        slot.value = p.value.clone();
    }
    for (name, b) in fresh_buffers {
        out.buffers.insert(name, b);
    }
    Ok(out)
}

pub fn attach_head<T: Scalar>(net: &Network<T>, head: HeadSpec, rng: &SeededRng) -> Result<Network<T>> {
    head.validate()?;
    if net.heads.iter().any(|h| h.kind == head.kind) {
        return Err(Error::invalid(format!(
            "head `{}` is already attached",
            head.kind.name()
        )));
    }
    let mut out = net.clone();
    head.init_into(&mut out.params, &rng.derive(&[tag::HEAD]));
    out.heads.push(head);
    Ok(out)
}

pub fn detach_heads<T: Scalar>(net: &Network<T>) -> Network<T> {
    let mut out = net.clone();
    out.params.remove_namespace(HEAD);
    out.heads.clear();
    out
}

/// Trainable and frozen parameter names after freezing `frozen` prefixes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

/// Freeze every parameter under one of `frozen`; unfreeze the rest.
pub fn param_groups<T: Scalar>(net: &mut Network<T>, frozen: &[&str]) -> ParamGroups {
    let mut groups = ParamGroups {
        trainable: BTreeSet::new(),
        frozen: BTreeSet::new(),
    };
    for (name, p) in net.params.iter_mut() {
        let freeze = frozen.iter().any(|f| !f.is_empty() && in_namespace(name, f));
        p.trainable = !freeze;
        if freeze {
            groups.frozen.insert(name.to_string());
        } else {
            groups.trainable.insert(name.to_string());
        }
    }
    groups
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn head(&self, kind: HeadKind) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.kind == kind)
    }

    /// Freeze everything except the listed namespaces.
    pub fn freeze_all_except(&mut self, keep: &[&str]) -> ParamGroups {
        let mut groups = ParamGroups {
            trainable: BTreeSet::new(),
            frozen: BTreeSet::new(),
        };
        for (name, p) in self.params.iter_mut() {
            p.trainable = keep.iter().any(|k| in_namespace(name, k));
            if p.trainable {
                groups.trainable.insert(name.to_string());
            } else {
                groups.frozen.insert(name.to_string());
            }
        }
        groups
    }

    pub fn unfreeze_all(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.trainable = true;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|(_, p)| p.trainable).count()
    }

    /// Copy every parameter and buffer of `src` whose name and shape exist here.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, src: &Network<T>) -> usize {
        let mut copied = 0;
        for (name, p) in src.params.iter() {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.value.shape() == p.value.shape() {
                    dst.value = p.value.clone();
                    copied += 1;
                }
            }
        }
        for (name, b) in &src.buffers {
            if let Some(dst) = self.buffers.get_mut(name) {
                if dst.shape() == b.shape() {
                    *dst = b.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Reset every BN running estimate to mean 0, variance 1.
    pub fn reset_bn_stats(&mut self) {
        for (name, b) in self.buffers.iter_mut() {
            let fill = if name.ends_with("running_var") { T::one() } else { T::zero() };
            *b = Tensor::full(b.shape().to_vec(), fill);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            heads: self.heads.clone(),
        }
    }

    /// Reassemble a network from stored tensors (e.g. a checkpoint).
    pub fn from_parts(
        spec: BackboneSpec,
        heads: Vec<HeadSpec>,
        tensors: &IndexMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let rng = SeededRng::new(0, &[]);
        let mut net = build_backbone::<T>(&spec, &rng)?;
        for h in heads {
            net = attach_head(&net, h, &rng)?;
        }
        for (name, p) in net.params.iter_mut() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for (name, b) in net.buffers.iter_mut() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("buffer `{name}` shape mismatch")));
            }
            *b = t.clone();
        }
        Ok(net)
    }

    /// All parameters then all buffers, in stable order.
    pub fn tensors(&self) -> IndexMap<String, Tensor<T>> {
        let mut out = IndexMap::new();
        for (name, p) in self.params.iter() {
            out.insert(name.to_string(), p.value.clone());
        }
        for (name, b) in &self.buffers {
            out.insert(name.clone(), b.clone());
        }
        out
    }
}
