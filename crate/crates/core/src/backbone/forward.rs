use super::network::{block_prefix, Bound, HeadKind, Network};
use super::spec::{BlockKind, STEM};
use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Variance floor for every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the new batch in running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Which statistics batch-norm layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics everywhere.
    Batch,
    /// Running statistics everywhere (evaluation).
    Running,
    /// Batch statistics where gamma is trainable, running statistics where it is frozen.
    Auto,
}

/// Result of a backbone forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T: Scalar = f32> {
    /// Globally pooled features, `[N, D]`.
    pub features: Var,
    /// Output of the last stage before pooling, `[N, D, h, w]`.
    pub feature_map: Var,
    /// Batch statistics per BN layer that normalized with them.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

struct Ctx<'a, T: Scalar> {
    net: &'a Network<T>,
    bound: &'a Bound,
    mode: BnMode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bound.get(&format!("{name}.weight"))?;
        g.conv2d(x, w, stride, pad)
    }

    fn bn(&mut self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let gamma_name = format!("{name}.gamma");
        let gamma = self.bound.get(&gamma_name)?;
        let beta = self.bound.get(&format!("{name}.beta"))?;
        let batch = match self.mode {
            BnMode::Batch => true,
            BnMode::Running => false,
            BnMode::Auto => self.net.params.get(&gamma_name).is_some_and(|p| p.trainable),
        };
        if batch {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            self.stats.push((name.to_string(), stats));
            Ok(y)
        } else {
            let mean = self.buffer(&format!("{name}.running_mean"))?;
            let var = self.buffer(&format!("{name}.running_var"))?;
            g.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
        }
    }

    fn buffer(&self, name: &str) -> Result<&'_ Tensor<T>> {
        self.net
            .buffers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing buffer `{name}`")))
    }
}

impl<T: Scalar> Network<T> {
    /// Register all parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        let mut bound = Bound::default();
        self.params.bind(g, &mut bound)?;
        Ok(bound)
    }

    /// Backbone forward for an `[N, C, H, W]` batch.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var, mode: BnMode) -> Result<Forward<T>> {
        let spec = self.spec();
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1] != spec.in_channels {
            return Err(Error::shape(
                "backbone",
                format!("expected [N, {}, H, W], got {xs:?}", spec.in_channels),
            ));
        }
        let mut cx = Ctx {
            net: self,
            bound,
            mode,
            stats: Vec::new(),
        };
        let stem = &spec.stem;
        let mut h = cx.conv(g, x, &format!("{STEM}.conv"), stem.stride, stem.padding())?;
        h = cx.bn(g, h, &format!("{STEM}.bn"))?;
        h = g.relu(h)?;
        if stem.pool {
            h = g.max_pool2d(h, 3, 2, 1)?;
        }
        let mut in_c = stem.channels;
        for stage in &spec.stages {
            for b in 0..stage.blocks {
                let p = block_prefix(&stage.name, b);
                let stride = if b == 0 { stage.stride } else { 1 };
                let shortcut = if stride != 1 || in_c != stage.channels {
                    let s = cx.conv(g, h, &format!("{p}.down.conv"), stride, 0)?;
                    cx.bn(g, s, &format!("{p}.down.bn"))?
                } else {
                    h
                };
                let mut y;
                match stage.kind {
                    BlockKind::Basic => {
                        y = cx.conv(g, h, &format!("{p}.conv1"), stride, 1)?;
                        y = cx.bn(g, y, &format!("{p}.bn1"))?;
                        y = g.relu(y)?;
                        y = cx.conv(g, y, &format!("{p}.conv2"), 1, 1)?;
                        y = cx.bn(g, y, &format!("{p}.bn2"))?;
                    }
                    BlockKind::Bottleneck => {
                        y = cx.conv(g, h, &format!("{p}.conv1"), 1, 0)?;
                        y = cx.bn(g, y, &format!("{p}.bn1"))?;
                        y = g.relu(y)?;
                        y = cx.conv(g, y, &format!("{p}.conv2"), stride, 1)?;
                        y = cx.bn(g, y, &format!("{p}.bn2"))?;
                        y = g.relu(y)?;
                        y = cx.conv(g, y, &format!("{p}.conv3"), 1, 0)?;
                        y = cx.bn(g, y, &format!("{p}.bn3"))?;
                    }
                }
                let sum = g.add(y, shortcut)?;
                h = g.relu(sum)?;
                in_c = stage.channels;
            }
        }
        let features = g.global_avg_pool(h)?;
        Ok(Forward {
            features,
            feature_map: h,
            bn_stats: cx.stats,
        })
    }

    /// Apply an attached head to `[N, in_dim]` inputs. Hidden layers use ReLU.
    pub fn head_forward(&self, g: &mut Graph<T>, bound: &Bound, kind: HeadKind, x: Var) -> Result<Var> {
        let head = self
            .head(kind)
            .ok_or_else(|| Error::invalid(format!("no `{}` head attached", kind.name())))?;
        head_forward(g, bound, head, x)
    }

    /// Blend batch statistics into the running estimates.
    pub fn update_bn_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (name, s) in stats {
            if let Some(rm) = self.buffers.get_mut(&format!("{name}.running_mean")) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = keep * *r + m * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{name}.running_var")) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

/// Forward through a head whose parameters are bound in `bound`.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    head: &super::network::HeadSpec,
    x: Var,
) -> Result<Var> {
    let prefix = head.kind.prefix();
    let n = head.layers().len();
    let mut h = x;
    for i in 0..n {
        let base = if head.kind == HeadKind::Classifier {
            prefix.clone()
        } else {
            format!("{prefix}.{i}")
        };
        let w = bound.get(&format!("{base}.weight"))?;
        let b = bound.get(&format!("{base}.bias"))?;
        h = g.linear(h, w, Some(b))?;
        if i + 1 < n {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}
