//! Pretraining, warmup, fine-tuning and linear evaluation loops.

mod loader;
mod metrics;
mod pretrain;
mod strategy;
mod supervised;

pub use loader::{batches, epoch_order, ssl_batch, stack, supervised_batch};
pub use metrics::{read_metrics, without_timing, write_metrics, EpochRecord, RunState, METRICS_HEADER};
pub use pretrain::{pretrain_info, pretrained_network, Event, PretrainConfig, PretrainSession, StageSummary, PRETRAIN_KIND};
pub use strategy::{finetune_pipeline, prepare, Init, PipelineReport, Prepared};
pub use supervised::{
    evaluate, finetune, linear_eval, warmup_new_block, with_classifier, EvalResult, FinetuneConfig, FinetuneReport,
    LinearConfig, Protocol,
};

#[cfg(test)]
mod tests;
