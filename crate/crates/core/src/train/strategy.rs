use serde::{Deserialize, Serialize};

use super::metrics::RunState;
use super::supervised::{finetune, warmup_new_block, with_classifier, FinetuneConfig, FinetuneReport};
use crate::backbone::{build_backbone, detach_heads, reinit_stage, truncate_last_stage, BackboneSpec, Network};
use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::rng::{tag, SeededRng};

/// Where fine-tuning weights come from.
#[derive(Clone, Debug)]
pub enum Init<'a> {
    Random,
    /// Load every weight.
    Pretrained(&'a Network),
    /// Load every weight, then redraw one stage.
    DropStage(&'a Network, String),
    /// The source lacks the final stage; append a fresh one.
    RemovedStage(&'a Network),
}

/// A classifier network ready for fine-tuning.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub net: Network,
    /// Stage that needs a warmup before full fine-tuning.
    pub fresh_stage: Option<String>,
}

pub fn prepare(full: &BackboneSpec, init: Init<'_>, classes: usize, seed: u64) -> Result<Prepared> {
    let rng = SeededRng::new(seed, &[tag::INIT, tag::FINETUNE]);
    let same_spec = |src: &Network| -> Result<()> {
        if src.spec().digest() != full.digest() {
            return Err(Error::Checkpoint(format!(
                "checkpoint backbone `{}` does not match `{}`",
                src.spec().name,
                full.name
            )));
        }
        Ok(())
    };
    let (net, fresh_stage) = match init {
        Init::Random => (build_backbone(full, &rng)?, None),
        Init::Pretrained(src) => {
            same_spec(src)?;
            (detach_heads(src), None)
        }
        Init::DropStage(src, stage) => {
            same_spec(src)?;
            let net = reinit_stage(&detach_heads(src), &stage, &rng)?;
            (net, Some(stage))
        }
        Init::RemovedStage(src) => {
            let truncated = truncate_last_stage(full)?;
            if src.spec().digest() != truncated.digest() {
                return Err(Error::Checkpoint(format!(
                    "removed-stage fine-tuning needs a checkpoint of `{}` without its last stage",
                    full.name
                )));
            }
            let src = detach_heads(src);
            let mut net = build_backbone(full, &rng)?;
            let loaded = net.load_matching(&src);
            if loaded != src.params.len() + src.buffers.len() {
                return Err(Error::Checkpoint(format!(
                    "loaded {loaded} of {} tensors",
                    src.params.len() + src.buffers.len()
                )));
            }
            let last = full.stages.last().expect("validated spec has stages").name.clone();
            (net, Some(last))
        }
    };
    Ok(Prepared {
        net: with_classifier(&net, classes, seed)?,
        fresh_stage,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub warmup_seconds: f64,
    pub finetune: FinetuneReport,
    /// Warmup plus fine-tuning.
    pub total_seconds: f64,
}

/// Warm up the fresh stage (if any), then fine-tune everything.
pub fn finetune_pipeline(
    prepared: &mut Prepared,
    train: &ImageSet,
    test: &ImageSet,
    cfg: &FinetuneConfig,
    run: &mut RunState,
) -> Result<PipelineReport> {
    let warmup_seconds = match &prepared.fresh_stage {
        Some(stage) => warmup_new_block(&mut prepared.net, train, stage, cfg, run)?,
        None => 0.0,
    };
    let ft = finetune(&mut prepared.net, train, test, cfg, run)?;
    Ok(PipelineReport {
        warmup_seconds,
        total_seconds: warmup_seconds + ft.wall_seconds,
        finetune: ft,
    })
}
