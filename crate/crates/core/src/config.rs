//! Experiment configuration files (JSON, strict schema).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::backbone::{truncate_last_stage, BackboneSpec};
use crate::dataset::{load_manifest, subsample, Manifest, SyntheticSpec};
use crate::error::{Error, Result};
use crate::schedule::{validate_plan, PlanString, StagePlan};
use crate::ssl::{ssl_preset, SslConfig, SslMethod};
use crate::train::{FinetuneConfig, LinearConfig, PretrainConfig, Protocol};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "S3L_SEED";

/// Exactly one of `manifest`, `root` (with `manifest.csv` inside) or `synthetic`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Keep this many training images (seeded, uniform).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let sources = [self.manifest.is_some(), self.root.is_some(), self.synthetic.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::config(
                "dataset",
                "set exactly one of `manifest`, `root` or `synthetic`",
            ));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.subsample == Some(0) {
            return Err(Error::config("dataset.subsample", "must be positive"));
        }
        Ok(())
    }

    /// Resolve to a manifest. Synthetic data is generated under `cache`
    /// (skipped when an identical set is already there).
    pub fn materialize(&self, cache: &Path, seed: u64) -> Result<Manifest> {
        self.validate()?;
        let m = if let Some(p) = &self.manifest {
            load_manifest(p)?
        } else if let Some(r) = &self.root {
            load_manifest(&r.join("manifest.csv"))?
        } else {
            let spec = self.synthetic.as_ref().expect("validated");
            let stamp = cache.join("spec.json");
            let want = serde_json::to_string(spec)?;
            let fresh = std::fs::read_to_string(&stamp).ok().as_deref() == Some(want.as_str());
            if fresh {
                load_manifest(&cache.join("manifest.csv"))?
            } else {
                std::fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
                let m = crate::dataset::generate_synthetic(spec, cache)?;
                std::fs::write(&stamp, want).map_err(|e| Error::io(&stamp, e))?;
                m
            }
        };
        match self.subsample {
            Some(n) => subsample(&m, n, seed),
            None => Ok(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub preset: String,
    /// Pretrain without the last stage ("remove conv5").
    #[serde(default)]
    pub truncate: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: AugPolicy,
    /// Also write a checkpoint every this many epochs (0: stage ends only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_threshold() -> f64 {
    crate::eval::DEFAULT_CAM_THRESHOLD
}

fn default_eval_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_threshold")]
    pub cam_threshold: f64,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cam_threshold: default_threshold(),
            batch_size: default_eval_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free text; ImageNet presets use it to flag settings beyond desk scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub ssl: SslConfig,
    pub pretrain: PretrainSection,
    pub plan: Vec<StagePlan>,
    pub finetune: FinetuneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineval: Option<LinearConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(json_field(&e), e.to_string()))
    }

    /// Parse, apply the seed override and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Backbone used for fine-tuning.
    pub fn full_backbone(&self) -> Result<BackboneSpec> {
        BackboneSpec::preset(&self.backbone.preset)
    }

    /// Backbone used for pretraining (truncated when configured).
    pub fn pretrain_backbone(&self) -> Result<BackboneSpec> {
        let full = self.full_backbone()?;
        if self.backbone.truncate {
            truncate_last_stage(&full)
        } else {
            Ok(full)
        }
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            backbone: self.pretrain_backbone()?,
            ssl: self.ssl.clone(),
            stages: self.plan.clone(),
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            momentum: self.pretrain.momentum,
            weight_decay: self.pretrain.weight_decay,
            augment: self.pretrain.augment.clone(),
        })
    }

    /// Check everything before any work starts; errors name the field.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.dataset.validate()?;
        self.full_backbone()?;
        let warnings = self.pretrain_config()?.validate()?;
        self.finetune.validate()?;
        if let Some(l) = &self.lineval {
            if l.batch_size == 0 || l.resolution == 0 {
                return Err(Error::config("lineval", "batch_size and resolution must be positive"));
            }
            if !(l.lr > 0.0 && l.lr.is_finite()) {
                return Err(Error::config("lineval.lr", "must be positive"));
            }
        }
        let t = self.eval.cam_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::config("eval.cam_threshold", format!("must lie in (0, 1], got {t}")));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        validate_plan(&self.plan)?;
        Ok(warnings)
    }

    /// The synthetic desk-scale experiment: SimCLR on mini18 at 16×16,
    /// fine-tuned at 32×32 on 10 classes with 20 images each per split.
    pub fn desk() -> Self {
        let mut ssl = SslConfig::new(SslMethod::Simclr);
        ssl.temperature = Some(0.2);
        let mut augment = AugPolicy::simclr(16);
        augment.scale = (0.2, 1.0);
        let mut finetune = FinetuneConfig::new(30, Protocol::Cosine, 32, 32);
        finetune.lr = Some(0.1);
        ExperimentConfig {
            note: None,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            dataset: DatasetConfig {
                synthetic: Some(SyntheticSpec::new(10, 20, 32, 7)),
                ..Default::default()
            },
            backbone: BackboneConfig {
                preset: "mini18".into(),
                truncate: false,
            },
            ssl,
            pretrain: PretrainSection {
                batch_size: 32,
                lr: 0.3,
                momentum: 0.9,
                weight_decay: 5e-4,
                augment,
                checkpoint_every: 0,
            },
            plan: vec![StagePlan::new(16, 100)],
            finetune,
            lineval: Some(LinearConfig::new(50, 32, 32)),
            eval: EvalConfig::default(),
        }
    }

    /// A pretraining row of the CUB-200 comparison: per-method settings,
    /// 120 fine-tuning epochs at 224 with batch 64.
    pub fn imagenet(method: SslMethod, backbone: &str, plan: &str) -> Result<Self> {
        let p = ssl_preset(method, backbone)?;
        let mut ssl = SslConfig::new(method);
        ssl.temperature = p.temperature;
        ssl.queue = p.queue;
        let stages = plan.parse::<PlanString>()?.stages();
        let tag = plan.replace([':', ','], "_");
        Ok(ExperimentConfig {
            note: Some("ImageNet-scale protocol; not runnable at desk scale".into()),
            seed: 0,
            out_dir: PathBuf::from(format!("runs/imagenet/{backbone}-{method}-{tag}")),
            dataset: DatasetConfig {
                root: Some(PathBuf::from("data/cub200")),
                ..Default::default()
            },
            backbone: BackboneConfig {
                preset: backbone.into(),
                truncate: false,
            },
            ssl,
            pretrain: PretrainSection {
                batch_size: p.batch_size,
                lr: p.lr,
                momentum: 0.9,
                // The originals' values; the comparison table does not list them.
                weight_decay: match method {
                    SslMethod::Moco => 1e-4,
                    SslMethod::Simclr => 1e-6,
                    SslMethod::Byol => 1.5e-6,
                },
                augment: AugPolicy::simclr(224),
                checkpoint_every: 0,
            },
            plan: stages,
            finetune: FinetuneConfig::new(120, Protocol::Cosine, 64, 224),
            lineval: None,
            eval: EvalConfig::default(),
        })
    }
}

/// Pretraining rows of the CUB-200 table as (backbone, method, plan).
pub fn imagenet_rows() -> Vec<(&'static str, SslMethod, &'static str)> {
    let mut rows = Vec::new();
    let moco18 = ["224:200", "224:800", "112:200", "112:800", "112:800,224:200", "56:200", "56:800", "56:800,112:200", "56:800,112:200,224:100"];
    let moco50 = ["224:800", "224:1200", "112:800", "112:1200", "112:800,224:200", "56:800", "56:1200", "56:800,112:200", "56:800,112:200,224:100"];
    let single = ["224:200", "224:800", "112:200", "112:800", "56:200", "56:800"];
    for (backbone, moco) in [("resnet18", moco18), ("resnet50", moco50)] {
        rows.extend(moco.iter().map(|p| (backbone, SslMethod::Moco, *p)));
        for m in [SslMethod::Simclr, SslMethod::Byol] {
            rows.extend(single.iter().map(|p| (backbone, m, *p)));
        }
    }
    rows
}

/// Best-effort dotted path of the field a serde error refers to.
fn json_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for key in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(key).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "config".into()
}
