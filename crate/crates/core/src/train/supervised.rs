use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loader::{batches, epoch_order, supervised_batch};
use super::metrics::{EpochRecord, RunState};
use crate::augment::{mixup_batch, AugPolicy};
use crate::autograd::{Graph, Target};
use crate::backbone::{BnMode, HeadKind, Network};
use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::eval::top1_accuracy;
use crate::optim::Sgd;
use crate::rng::{tag, SeededRng};
use crate::schedule::LrPolicy;
use crate::tensor::Tensor;

const WARMUP: u64 = 1 << 32;
const FINETUNE: u64 = 2 << 32;
const LINEVAL: u64 = 3 << 32;

/// Fine-tuning learning-rate protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Cosine decay from 0.1.
    #[serde(rename = "cosine-0.1")]
    Cosine,
    /// 0.01, divided by 10 every 40 epochs.
    #[serde(rename = "step-0.01")]
    Step,
}

impl Protocol {
    pub fn policy(self, epochs: usize) -> LrPolicy {
        match self {
            Protocol::Cosine => LrPolicy::cosine(0.1, epochs),
            Protocol::Step => LrPolicy::step(0.01, 40, 0.1),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine-0.1" => Ok(Protocol::Cosine),
            "step-0.01" => Ok(Protocol::Step),
            other => Err(Error::config("finetune.protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_alpha() -> f64 {
    1.0
}

fn default_warmup_epochs() -> usize {
    10
}

fn default_warmup_lr() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub protocol: Protocol,
    #[serde(default)]
    pub mixup: bool,
    #[serde(default = "default_alpha")]
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub resolution: usize,
    /// Replaces the protocol's base rate (its decay shape is kept).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_warmup_lr")]
    pub warmup_lr: f64,
    /// Restart BN running statistics instead of keeping the pretrained ones.
    #[serde(default)]
    pub reset_bn: bool,
}

impl FinetuneConfig {
    pub fn new(epochs: usize, protocol: Protocol, batch_size: usize, resolution: usize) -> Self {
        FinetuneConfig {
            epochs,
            protocol,
            mixup: false,
            mixup_alpha: default_alpha(),
            batch_size,
            resolution,
            lr: None,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            warmup_epochs: default_warmup_epochs(),
            warmup_lr: default_warmup_lr(),
            reset_bn: false,
        }
    }

    pub fn policy(&self) -> LrPolicy {
        let mut p = self.protocol.policy(self.epochs.max(1));
        if let Some(lr) = self.lr {
            p.base = lr;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be positive"));
        }
        if self.resolution == 0 {
            return Err(Error::config("finetune.resolution", "must be positive"));
        }
        if self.mixup && !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::config("finetune.mixup_alpha", "must be positive"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("finetune.lr", format!("must be positive, got {lr}")));
            }
        }
        if !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return Err(Error::config("finetune.warmup_lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("finetune.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("finetune.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

fn default_linear_lr() -> f64 {
    10.0
}

fn default_period() -> usize {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub epochs: usize,
    #[serde(default = "default_linear_lr")]
    pub lr: f64,
    #[serde(default = "default_period")]
    pub period: usize,
    pub batch_size: usize,
    pub resolution: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl LinearConfig {
    pub fn new(epochs: usize, batch_size: usize, resolution: usize) -> Self {
        LinearConfig {
            epochs,
            lr: default_linear_lr(),
            period: default_period(),
            batch_size,
            resolution,
            momentum: default_momentum(),
            weight_decay: 0.0,
        }
    }

    pub fn policy(&self) -> LrPolicy {
        LrPolicy::step(self.lr, self.period, 0.1)
    }
}

/// Accuracies of a supervised run. `best_accuracy` is what gets reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub accuracies: Vec<f64>,
    pub best_accuracy: f64,
    pub last_accuracy: f64,
    /// `None` when no epoch ran and the initial network was scored.
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Replace any SSL heads by a freshly initialized linear classifier.
pub fn with_classifier(net: &Network, classes: usize, seed: u64) -> Result<Network> {
    let bare = crate::backbone::detach_heads(net);
    let head = crate::backbone::HeadSpec::classifier(bare.spec().feature_dim(), classes);
    crate::backbone::attach_head(&bare, head, &SeededRng::new(seed, &[tag::HEAD, tag::FINETUNE]))
}

fn check_classifier(net: &Network, classes: usize) -> Result<()> {
    let head = net
        .head(HeadKind::Classifier)
        .ok_or_else(|| Error::invalid("no classifier head attached"))?;
    if head.out_dim != classes {
        return Err(Error::invalid(format!(
            "classifier has {} outputs but the dataset has {classes} classes",
            head.out_dim
        )));
    }
    Ok(())
}

fn logits(net: &Network, g: &mut Graph<f32>, x: Tensor, mode: BnMode) -> Result<(crate::Var, crate::backbone::Forward)> {
    let bound = net.bind(g)?;
    let xv = g.constant(x)?;
    let fwd = net.forward(g, &bound, xv, mode)?;
    let out = net.head_forward(g, &bound, HeadKind::Classifier, fwd.features)?;
    Ok((out, fwd))
}

/// Top-1 accuracy and mean cross-entropy with running BN statistics.
pub fn evaluate(net: &Network, set: &ImageSet, resolution: usize, batch: usize) -> Result<EvalResult> {
    check_classifier(net, set.classes)?;
    if set.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let policy = AugPolicy::identity(resolution);
    let order: Vec<usize> = (0..set.len()).collect();
    let rng = SeededRng::new(0, &[]);
    let (mut loss, mut hits) = (0.0, 0.0);
    for idx in batches(&order, batch, false) {
        let x = supervised_batch(set, idx, false, resolution, &policy, &rng)?;
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let mut g = Graph::new();
        let (out, _) = logits(net, &mut g, x, BnMode::Running)?;
        let l = g.softmax_cross_entropy(out, Target::Hard(&labels))?;
        loss += g.value(l).data()[0] as f64 * idx.len() as f64;
        hits += top1_accuracy(g.value(out), &labels)? * idx.len() as f64;
    }
    let n = set.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        accuracy: hits / n,
    })
}

struct EpochParams {
    resolution: usize,
    batch: usize,
    lr: f64,
    mixup: Option<f64>,
    mode: BnMode,
    seed: u64,
    words: [u64; 2],
}

/// One pass over `set`; returns the mean training loss.
fn train_epoch(net: &mut Network, opt: &mut Sgd, set: &ImageSet, p: &EpochParams) -> Result<f64> {
    let policy = AugPolicy::identity(p.resolution);
    let order = epoch_order(set.len(), p.seed, &p.words);
    let aug = SeededRng::new(p.seed, &[tag::AUGMENT, p.words[0], p.words[1]]);
    let mut mix_rng = SeededRng::new(p.seed, &[tag::MIXUP, p.words[0], p.words[1]]);
    let (mut total, mut count) = (0.0, 0usize);
    for idx in batches(&order, p.batch, false) {
        let x = supervised_batch(set, idx, true, p.resolution, &policy, &aug)?;
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let mut g = Graph::new();
        let (loss, bn_stats, bound) = match p.mixup {
            Some(alpha) => {
                let c = set.classes;
                let mut onehot = vec![0.0f32; labels.len() * c];
                for (i, &l) in labels.iter().enumerate() {
                    onehot[i * c + l] = 1.0;
                }
                let y = Tensor::new(vec![labels.len(), c], onehot)?;
                let m = mixup_batch(&x, &y, alpha, &mut mix_rng)?;
                let bound = net.bind(&mut g)?;
                let xv = g.constant(m.x)?;
                let fwd = net.forward(&mut g, &bound, xv, p.mode)?;
                let out = net.head_forward(&mut g, &bound, HeadKind::Classifier, fwd.features)?;
                (g.softmax_cross_entropy(out, Target::Soft(&m.y))?, fwd.bn_stats, bound)
            }
            None => {
                let bound = net.bind(&mut g)?;
                let xv = g.constant(x)?;
                let fwd = net.forward(&mut g, &bound, xv, p.mode)?;
                let out = net.head_forward(&mut g, &bound, HeadKind::Classifier, fwd.features)?;
                (g.softmax_cross_entropy(out, Target::Hard(&labels))?, fwd.bn_stats, bound)
            }
        };
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        opt.step(&mut net.params, &bound, &grads, p.lr)?;
        net.update_bn_stats(&bn_stats);
        total += value * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count.max(1) as f64)
}

fn record(split: &str, loss: f64, accuracy: Option<f64>, lr: f64, start: Instant) -> EpochRecord {
    EpochRecord {
        epoch: 0,
        split: split.into(),
        loss,
        accuracy,
        lr,
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Train only `stage` and the classifier at a constant rate, with every
/// other parameter (and its BN statistics) frozen. Returns seconds spent.
pub fn warmup_new_block(
    net: &mut Network,
    train: &ImageSet,
    stage: &str,
    cfg: &FinetuneConfig,
    run: &mut RunState,
) -> Result<f64> {
    check_classifier(net, train.classes)?;
    if !net.spec().has_namespace(stage) {
        return Err(Error::UnknownStage(stage.to_string()));
    }
    let classifier = HeadKind::Classifier.prefix();
    net.freeze_all_except(&[stage, &classifier]);
    if net.trainable_count() == 0 {
        net.unfreeze_all();
        return Err(Error::invalid("warmup has no trainable parameters"));
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut seconds = 0.0;
    for e in 0..cfg.warmup_epochs {
        let start = Instant::now();
        let p = EpochParams {
            resolution: cfg.resolution,
            batch: cfg.batch_size,
            lr: cfg.warmup_lr,
            mixup: None,
            mode: BnMode::Auto,
            seed: run.seed,
            words: [WARMUP, e as u64],
        };
        let loss = train_epoch(net, &mut opt, train, &p)?;
        let rec = record("warmup", loss, None, cfg.warmup_lr, start);
        seconds += rec.wall_seconds;
        run.push_train(rec);
    }
    net.unfreeze_all();
    Ok(seconds)
}

/// Train every parameter; score the test split after each epoch.
pub fn finetune(
    net: &mut Network,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &FinetuneConfig,
    run: &mut RunState,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    check_classifier(net, train.classes)?;
    check_classifier(net, test.classes)?;
    net.unfreeze_all();
    if cfg.reset_bn {
        net.reset_bn_stats();
    }
    let policy = cfg.policy();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut accuracies = Vec::with_capacity(cfg.epochs);
    let mut seconds = 0.0;
    for e in 0..cfg.epochs {
        let start = Instant::now();
        let lr = policy.at(e as f64)?;
        let p = EpochParams {
            resolution: cfg.resolution,
            batch: cfg.batch_size,
            lr,
            mixup: cfg.mixup.then_some(cfg.mixup_alpha),
            mode: BnMode::Batch,
            seed: run.seed,
            words: [FINETUNE, e as u64],
        };
        let loss = train_epoch(net, &mut opt, train, &p)?;
        let rec = record("train", loss, None, lr, start);
        seconds += rec.wall_seconds;
        run.push_train(rec);
        let start = Instant::now();
        let ev = evaluate(net, test, cfg.resolution, cfg.batch_size)?;
        let rec = record("test", ev.loss, Some(ev.accuracy), lr, start);
        seconds += rec.wall_seconds;
        run.push_eval(rec);
        accuracies.push(ev.accuracy);
    }
    summarize(net, test, cfg.resolution, cfg.batch_size, accuracies, seconds)
}

fn summarize(
    net: &Network,
    test: &ImageSet,
    resolution: usize,
    batch: usize,
    accuracies: Vec<f64>,
    wall_seconds: f64,
) -> Result<FinetuneReport> {
    if accuracies.is_empty() {
        let acc = evaluate(net, test, resolution, batch)?.accuracy;
        return Ok(FinetuneReport {
            accuracies,
            best_accuracy: acc,
            last_accuracy: acc,
            best_epoch: None,
            wall_seconds,
        });
    }
    // First epoch wins ties.
    let (best_epoch, best) = accuracies
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &a)| if a > b.1 { (i, a) } else { b });
    Ok(FinetuneReport {
        best_accuracy: best,
        last_accuracy: *accuracies.last().expect("non-empty"),
        best_epoch: Some(best_epoch),
        accuracies,
        wall_seconds,
    })
}

/// Train only the classifier on frozen features (BN in evaluation mode).
pub fn linear_eval(
    net: &mut Network,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &LinearConfig,
    run: &mut RunState,
) -> Result<FinetuneReport> {
    check_classifier(net, train.classes)?;
    let classifier = HeadKind::Classifier.prefix();
    net.freeze_all_except(&[&classifier]);
    if net.trainable_count() == 0 {
        net.unfreeze_all();
        return Err(Error::invalid("linear evaluation has nothing to train"));
    }
    let policy = cfg.policy();
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut accuracies = Vec::with_capacity(cfg.epochs);
    let mut seconds = 0.0;
    let result = (|| {
        for e in 0..cfg.epochs {
            let start = Instant::now();
            let lr = policy.at(e as f64)?;
            let p = EpochParams {
                resolution: cfg.resolution,
                batch: cfg.batch_size,
                lr,
                mixup: None,
                mode: BnMode::Running,
                seed: run.seed,
                words: [LINEVAL, e as u64],
            };
            let loss = train_epoch(net, &mut opt, train, &p)?;
            let rec = record("lineval", loss, None, lr, start);
            seconds += rec.wall_seconds;
            run.push_train(rec);
            let start = Instant::now();
            let ev = evaluate(net, test, cfg.resolution, cfg.batch_size)?;
            let rec = record("test", ev.loss, Some(ev.accuracy), lr, start);
            seconds += rec.wall_seconds;
            run.push_eval(rec);
            accuracies.push(ev.accuracy);
        }
        Ok::<_, Error>(())
    })();
    net.unfreeze_all();
    result?;
    summarize(net, test, cfg.resolution, cfg.batch_size, accuracies, seconds)
}
