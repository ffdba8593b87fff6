use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::loader::{batches, epoch_order, ssl_batch};
use super::metrics::{EpochRecord, RunState};
use crate::augment::AugPolicy;
use crate::backbone::{build_backbone, BackboneSpec, HeadSpec, Network, ParamStore};
use crate::checkpoint::Checkpoint;
use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::rng::{tag, SeededRng};
use crate::schedule::{validate_plan, InitSource, LrPolicy, StagePlan};
use crate::ssl::{with_projection, ByolState, MocoState, SslConfig, SslState};
use crate::tensor::Tensor;

/// Everything that shapes a pretraining run except the data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub backbone: BackboneSpec,
    pub ssl: SslConfig,
    pub stages: Vec<StagePlan>,
    pub batch_size: usize,
    /// Base rate of the per-stage cosine schedule unless a stage overrides it.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugPolicy,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<Vec<String>> {
        self.backbone.validate()?;
        let plan = validate_plan(&self.stages)?;
        for (i, s) in plan.stages.iter().enumerate() {
            let b = s.batch_size.unwrap_or(self.batch_size);
            if b == 0 {
                return Err(Error::config("pretrain.batch_size", "must be positive"));
            }
            self.ssl.validate(b).map_err(|e| match e {
                Error::Config { field, reason } => Error::config(field, format!("{reason} (stage {i})")),
                other => other,
            })?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("pretrain.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("pretrain.weight_decay", "must be non-negative"));
        }
        self.augment.validate()?;
        Ok(plan.warnings)
    }

    fn stage_batch(&self, s: usize) -> usize {
        self.stages[s].batch_size.unwrap_or(self.batch_size)
    }

    fn stage_lr(&self, s: usize) -> LrPolicy {
        self.stages[s]
            .lr
            .clone()
            .unwrap_or_else(|| LrPolicy::cosine(self.lr, self.stages[s].epochs))
    }
}

/// Something that happened during [`PretrainSession::run`].
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Epoch { stage: usize, record: EpochRecord },
    StageDone { stage: usize },
}

/// Per-stage summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub resolution: usize,
    pub epochs: usize,
    pub losses: Vec<f64>,
    pub wall_seconds: f64,
}

/// Resumable multi-stage SSL pretraining.
#[derive(Clone, Debug)]
pub struct PretrainSession<'a> {
    cfg: PretrainConfig,
    data: &'a ImageSet,
    /// Online network with its projection head.
    pub online: Network,
    pub ssl: SslState,
    pub opt: Sgd,
    pub run: RunState,
    /// Epochs completed in the current stage.
    stage_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: PretrainConfig,
    heads: Vec<HeadSpec>,
    run: RunState,
    moco: Option<(usize, u64)>,
    predictor: Option<HeadSpec>,
}

pub const PRETRAIN_KIND: &str = "pretrain";

impl<'a> PretrainSession<'a> {
    pub fn new(cfg: PretrainConfig, data: &'a ImageSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg;
        cfg.stages = validate_plan(&cfg.stages)?.stages;
        if data.is_empty() {
            return Err(Error::invalid("pretraining needs a non-empty dataset"));
        }
        let (online, ssl) = fresh_state(&cfg, seed, 0)?;
        Ok(PretrainSession {
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            cfg,
            data,
            online,
            ssl,
            run: RunState::new(seed),
            stage_epoch: 0,
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn stage(&self) -> usize {
        self.run.stage
    }

    pub fn stage_epoch(&self) -> usize {
        self.stage_epoch
    }

    pub fn finished(&self) -> bool {
        let last = self.cfg.stages.len() - 1;
        self.run.stage == last && self.stage_epoch >= self.cfg.stages[last].epochs
    }

    pub fn stage_done(&self) -> bool {
        self.stage_epoch >= self.cfg.stages[self.run.stage].epochs
    }

    /// Enter the next stage once the current one is complete: weights carry
    /// over, velocities restart at zero.
    pub fn next_stage(&mut self) -> Result<()> {
        if !self.stage_done() || self.run.stage + 1 >= self.cfg.stages.len() {
            return Err(Error::invalid("no further stage to enter"));
        }
        self.run.stage += 1;
        self.stage_epoch = 0;
        self.opt.reset();
        if self.cfg.stages[self.run.stage].init == InitSource::Fresh {
            let (online, ssl) = fresh_state(&self.cfg, self.run.seed, self.run.stage)?;
            self.online = online;
            self.ssl = ssl;
        }
        Ok(())
    }

    /// One epoch of the current stage (advancing first if it is complete).
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.finished() {
            return Err(Error::invalid("pretraining already finished"));
        }
        if self.stage_done() {
            self.next_stage()?;
        }
        let s = self.run.stage;
        let stage = &self.cfg.stages[s];
        let policy = self.cfg.augment.with_resolution(stage.resolution);
        let batch = self.cfg.stage_batch(s);
        let lr = self.cfg.stage_lr(s).at(self.stage_epoch as f64)?;
        let seed = self.run.seed;
        let words = [s as u64, self.stage_epoch as u64];
        let order = epoch_order(self.data.len(), seed, &words);
        let aug = SeededRng::new(seed, &[tag::AUGMENT, words[0], words[1]]);
        let start = Instant::now();
        let mut total = 0.0;
        let mut steps = 0usize;
        for idx in batches(&order, batch, true) {
            let (a, b) = ssl_batch(self.data, idx, &policy, &aug)?;
            let stats = self.ssl.step(&self.cfg.ssl, &mut self.online, &mut self.opt, &a, &b, lr)?;
            if stats.leaked > 0 {
                return Err(Error::invalid(format!("{} momentum-side tensors received gradients", stats.leaked)));
            }
            if !stats.loss.is_finite() {
                return Err(Error::NonFinite(format!("SSL loss at stage {s} epoch {}", self.stage_epoch)));
            }
            total += stats.loss;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::config(
                "pretrain.batch_size",
                format!("batch {batch} exceeds the {} training images", self.data.len()),
            ));
        }
        self.stage_epoch += 1;
        let rec = EpochRecord {
            epoch: 0,
            split: "ssl".into(),
            loss: total / steps as f64,
            accuracy: None,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.run.push_train(rec);
        Ok(self.run.history.last().expect("just pushed").clone())
    }

    /// Train to the end, reporting each epoch and each finished stage.
    pub fn run(&mut self, observer: &mut dyn FnMut(&Event, &Self) -> Result<()>) -> Result<Vec<StageSummary>> {
        while !self.finished() {
            let record = self.run_epoch()?;
            let stage = self.run.stage;
            observer(&Event::Epoch { stage, record }, self)?;
            if self.stage_done() {
                observer(&Event::StageDone { stage }, self)?;
            }
        }
        Ok(self.summaries())
    }

    pub fn summaries(&self) -> Vec<StageSummary> {
        let mut out = Vec::new();
        let mut hist = self.run.history.iter().filter(|r| r.split == "ssl");
        for (i, s) in self.cfg.stages.iter().enumerate() {
            let done = if i < self.run.stage {
                s.epochs
            } else if i == self.run.stage {
                self.stage_epoch
            } else {
                0
            };
            let recs: Vec<&EpochRecord> = hist.by_ref().take(done).collect();
            out.push(StageSummary {
                resolution: s.resolution,
                epochs: done,
                losses: recs.iter().map(|r| r.loss).collect(),
                wall_seconds: recs.iter().map(|r| r.wall_seconds).sum(),
            });
        }
        out
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            spec_digest: self.cfg.backbone.digest(),
            seed: self.run.seed,
            epoch: self.stage_epoch as u64,
            stage: self.run.stage as u64,
            meta: String::new(),
            tensors: IndexMap::new(),
        };
        ck.insert_group("online", self.online.tensors());
        ck.insert_group("opt", self.opt.velocities().clone());
        let (mut moco, mut predictor) = (None, None);
        match &self.ssl {
            SslState::Simclr => {}
            SslState::Moco(m) => {
                ck.insert_group("key", m.key.tensors());
                ck.tensors.insert("queue".to_string(), m.queue().clone());
                moco = Some((m.ptr(), m.enqueued()));
            }
            SslState::Byol(b) => {
                ck.insert_group("target", b.target.tensors());
                let p: IndexMap<String, Tensor> =
                    b.predictor.iter().map(|(k, v)| (k.to_string(), v.value.clone())).collect();
                ck.insert_group("predictor", p);
                predictor = Some(b.predictor_spec.clone());
            }
        }
        ck.meta = serde_json::to_string(&Meta {
            kind: PRETRAIN_KIND.into(),
            config: self.cfg.clone(),
            heads: self.online.heads().to_vec(),
            run: self.run.clone(),
            moco,
            predictor,
        })?;
        Ok(ck)
    }

    /// Continue a run from `ck`. `cfg` must describe the same backbone.
    pub fn resume(cfg: PretrainConfig, data: &'a ImageSet, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ck.expect_digest(&cfg.backbone.digest())?;
        let meta: Meta = serde_json::from_str(&ck.meta)?;
        if meta.kind != PRETRAIN_KIND {
            return Err(Error::Checkpoint(format!("expected a pretraining checkpoint, found `{}`", meta.kind)));
        }
        let mut cfg = cfg;
        cfg.stages = validate_plan(&cfg.stages)?.stages;
        let stage = ck.stage as usize;
        if stage >= cfg.stages.len() || ck.epoch as usize > cfg.stages[stage].epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint at stage {stage} epoch {} does not fit the plan",
                ck.epoch
            )));
        }
        if meta.run.stage != stage || meta.run.seed != ck.seed {
            return Err(Error::Checkpoint("header and metadata disagree".into()));
        }
        let online = Network::from_parts(cfg.backbone.clone(), meta.heads.clone(), &ck.group("online"))?;
        let ssl = match (cfg.ssl.method, meta.moco, meta.predictor) {
            (crate::ssl::SslMethod::Simclr, None, None) => SslState::Simclr,
            (crate::ssl::SslMethod::Moco, Some((ptr, enq)), None) => {
                let key = Network::from_parts(cfg.backbone.clone(), meta.heads.clone(), &ck.group("key"))?;
                let queue = ck
                    .tensors
                    .get("queue")
                    .ok_or_else(|| Error::Checkpoint("missing MoCo queue".into()))?
                    .clone();
                SslState::Moco(MocoState::from_parts(key, queue, ptr, enq, cfg.ssl.moco_momentum)?)
            }
            (crate::ssl::SslMethod::Byol, None, Some(pspec)) => {
                let target = Network::from_parts(cfg.backbone.clone(), meta.heads.clone(), &ck.group("target"))?;
                let mut pred = ParamStore::new();
                for (k, v) in ck.group("predictor") {
                    pred.insert(k, v);
                }
                SslState::Byol(ByolState::from_parts(target, pred, pspec, cfg.ssl.byol_momentum))
            }
            _ => return Err(Error::Checkpoint("SSL state does not match the configured method".into())),
        };
        let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        opt.set_velocities(ck.group("opt"));
        Ok(PretrainSession {
            cfg,
            data,
            online,
            ssl,
            opt,
            run: meta.run,
            stage_epoch: ck.epoch as usize,
        })
    }
}

fn fresh_state(cfg: &PretrainConfig, seed: u64, stage: usize) -> Result<(Network, SslState)> {
    let rng = SeededRng::new(seed, &[tag::INIT, stage as u64]);
    let net = build_backbone(&cfg.backbone, &rng)?;
    let online = with_projection(&net, &cfg.ssl, &rng)?;
    let ssl = SslState::new(&cfg.ssl, &online, &rng)?;
    Ok((online, ssl))
}

/// Configuration and run history stored in a pretraining checkpoint.
pub fn pretrain_info(ck: &Checkpoint) -> Result<(PretrainConfig, RunState)> {
    let meta: Meta = serde_json::from_str(&ck.meta)?;
    if meta.kind != PRETRAIN_KIND {
        return Err(Error::Checkpoint(format!("expected a pretraining checkpoint, found `{}`", meta.kind)));
    }
    Ok((meta.config, meta.run))
}

/// The online backbone (with projection head) stored in a pretraining checkpoint.
pub fn pretrained_network(ck: &Checkpoint) -> Result<Network> {
    let meta: Meta = serde_json::from_str(&ck.meta)?;
    if meta.kind != PRETRAIN_KIND {
        return Err(Error::Checkpoint(format!("expected a pretraining checkpoint, found `{}`", meta.kind)));
    }
    ck.expect_digest(&meta.config.backbone.digest())?;
    Network::from_parts(meta.config.backbone, meta.heads, &ck.group("online"))
}
