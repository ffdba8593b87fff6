//! Self-supervised objectives and their auxiliary state.

mod byol;
mod ema;
mod loss;
mod moco;

pub use byol::ByolState;
pub use ema::ema_update;
pub use loss::{byol_loss, byol_symmetric, halves_pairing, info_nce, nt_xent_batch, UNIT_TOL};
pub use moco::MocoState;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{attach_head, BnMode, HeadKind, HeadSpec, Network};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslMethod {
    Moco,
    Simclr,
    Byol,
}

impl SslMethod {
    pub fn name(self) -> &'static str {
        match self {
            SslMethod::Moco => "moco",
            SslMethod::Simclr => "simclr",
            SslMethod::Byol => "byol",
        }
    }
}

impl std::fmt::Display for SslMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_QUEUE: usize = 4096;
pub const DEFAULT_MOCO_MOMENTUM: f64 = 0.999;
pub const DEFAULT_BYOL_MOMENTUM: f64 = 0.996;
pub const DEFAULT_PROJ_DIM: usize = 128;

fn default_moco_momentum() -> f64 {
    DEFAULT_MOCO_MOMENTUM
}

fn default_byol_momentum() -> f64 {
    DEFAULT_BYOL_MOMENTUM
}

fn default_proj_dim() -> usize {
    DEFAULT_PROJ_DIM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub method: SslMethod,
    /// Defaults to 0.2 for MoCo and 0.1 for SimCLR; unused by BYOL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<usize>,
    #[serde(default = "default_moco_momentum")]
    pub moco_momentum: f64,
    #[serde(default = "default_byol_momentum")]
    pub byol_momentum: f64,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
}

impl SslConfig {
    pub fn new(method: SslMethod) -> Self {
        SslConfig {
            method,
            temperature: None,
            queue: None,
            moco_momentum: DEFAULT_MOCO_MOMENTUM,
            byol_momentum: DEFAULT_BYOL_MOMENTUM,
            proj_dim: DEFAULT_PROJ_DIM,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(match self.method {
            SslMethod::Moco => 0.2,
            _ => 0.1,
        })
    }

    pub fn queue(&self) -> usize {
        self.queue.unwrap_or(DEFAULT_QUEUE)
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        let t = self.temperature();
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::config("ssl.temperature", format!("must be positive, got {t}")));
        }
        for (field, m) in [("ssl.moco_momentum", self.moco_momentum), ("ssl.byol_momentum", self.byol_momentum)] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {m}")));
            }
        }
        if self.proj_dim == 0 {
            return Err(Error::config("ssl.proj_dim", "must be positive"));
        }
        if self.method == SslMethod::Moco {
            let k = self.queue();
            if batch_size == 0 || k < batch_size || !k.is_multiple_of(batch_size) {
                return Err(Error::config(
                    "ssl.queue",
                    format!("capacity {k} must be a positive multiple of the batch size {batch_size}"),
                ));
            }
        }
        if self.method == SslMethod::Simclr && batch_size < 2 {
            return Err(Error::config("batch_size", "SimCLR needs at least 2 images per batch"));
        }
        Ok(())
    }
}

/// Loss of one step and the number of momentum-side tensors that received
/// a gradient (always zero unless something is wired wrong).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub leaked: usize,
}

/// Per-method training state.
#[derive(Clone, Debug, PartialEq)]
pub enum SslState<T: Scalar = f32> {
    Simclr,
    Moco(MocoState<T>),
    Byol(ByolState<T>),
}

/// Attach the projection head an SSL method trains through.
pub fn with_projection<T: Scalar>(net: &Network<T>, cfg: &SslConfig, rng: &SeededRng) -> Result<Network<T>> {
    if net.head(HeadKind::Projection).is_some() {
        return Ok(net.clone());
    }
    let d = net.spec().feature_dim();
    attach_head(net, HeadSpec::projection(d, cfg.proj_dim), rng)
}

impl<T: Scalar> SslState<T> {
    /// `online` must already carry a projection head.
    pub fn new(cfg: &SslConfig, online: &Network<T>, rng: &SeededRng) -> Result<Self> {
        Ok(match cfg.method {
            SslMethod::Simclr => SslState::Simclr,
            SslMethod::Moco => SslState::Moco(MocoState::new(online, cfg.queue(), cfg.moco_momentum, rng)?),
            SslMethod::Byol => SslState::Byol(ByolState::new(online, cfg.byol_momentum, rng)?),
        })
    }

    /// One optimization step on a batch of view pairs `a[i] ↔ b[i]`.
    pub fn step(
        &mut self,
        cfg: &SslConfig,
        online: &mut Network<T>,
        opt: &mut Sgd<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        lr: f64,
    ) -> Result<StepStats> {
        if a.shape() != b.shape() {
            return Err(Error::shape("ssl_step", "views differ in shape"));
        }
        match self {
            SslState::Simclr => simclr_step(online, opt, a, b, cfg.temperature(), lr),
            SslState::Moco(m) => m.step(online, opt, a, b, cfg.temperature(), lr),
            SslState::Byol(s) => s.step(online, opt, a, b, lr),
        }
    }
}

fn simclr_step<T: Scalar>(
    online: &mut Network<T>,
    opt: &mut Sgd<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    tau: f64,
    lr: f64,
) -> Result<StepStats> {
    let n = a.shape()[0];
    let mut g = Graph::new();
    let bound = online.bind(&mut g)?;
    let mut zs = Vec::with_capacity(2);
    let mut stats = Vec::new();
    for x in [a, b] {
        let xv = g.constant(x.clone())?;
        let f = online.forward(&mut g, &bound, xv, BnMode::Auto)?;
        let z = online.head_forward(&mut g, &bound, HeadKind::Projection, f.features)?;
        zs.push(g.l2_normalize(z, 1)?);
        stats.push(f.bn_stats);
    }
    let z = g.concat(&zs, 0)?;
    let loss = nt_xent_batch(&mut g, z, &halves_pairing(n), tau)?;
    let grads = g.backward(loss)?;
    opt.step(&mut online.params, &bound, &grads, lr)?;
    for s in &stats {
        online.update_bn_stats(s);
    }
    Ok(StepStats {
        loss: g.value(loss).item().f64(),
        leaked: 0,
    })
}

/// One row of the pretraining hyperparameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslPreset {
    pub method: SslMethod,
    pub backbone: String,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: Option<f64>,
    pub queue: Option<usize>,
}

/// Pretraining settings per method and backbone (all use cosine decay).
pub fn ssl_preset(method: SslMethod, backbone: &str) -> Result<SslPreset> {
    let r50 = match backbone {
        "resnet18" => false,
        "resnet50" => true,
        other => return Err(Error::UnknownPreset(format!("{method}/{other}"))),
    };
    let (batch_size, lr, temperature, queue) = match (method, r50) {
        (SslMethod::Moco, _) => (128, 0.03, Some(0.2), Some(4096)),
        (SslMethod::Simclr, false) => (512, 0.5, Some(0.1), None),
        (SslMethod::Simclr, true) => (128, 0.125, Some(0.1), None),
        (SslMethod::Byol, false) => (512, 0.5, None, None),
        (SslMethod::Byol, true) => (128, 0.125, None, None),
    };
    Ok(SslPreset {
        method,
        backbone: backbone.to_string(),
        batch_size,
        lr,
        temperature,
        queue,
    })
}

/// Linear scaling rule: the learning rate is proportional to batch size.
pub fn scaled_lr(lr: f64, from_batch: usize, to_batch: usize) -> f64 {
    lr * to_batch as f64 / from_batch as f64
}
