use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde_json::json;

use s3l_core::backbone::{detach_heads, BackboneSpec, HeadSpec, Network};
use s3l_core::checkpoint::{hex, load_checkpoint, save_checkpoint, Checkpoint};
use s3l_core::config::ExperimentConfig;
use s3l_core::cost::{count_ops, CostReport, CountModel};
use s3l_core::dataset::{ImageSet, Manifest, Split};
use s3l_core::eval::localize_set;
use s3l_core::report::{emit_report, RunReport};
use s3l_core::schedule::{validate_plan, PlanString, StagePlan};
use s3l_core::train::{
    finetune_pipeline, linear_eval, prepare, pretrain_info, pretrained_network, with_classifier, Init,
    PretrainSession, RunState,
};

use crate::lock::DirLock;
use crate::{FinetuneArgs, FlopsArgs, LinevalArgs, PretrainArgs, ReportArgs};

/// Bad arguments detected by the CLI itself (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<s3l_core::Error>() {
            if err.is_config() || matches!(err, s3l_core::Error::Manifest(_)) {
                return 2;
            }
        }
    }
    3
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(usage(format!("config file {} not found", path.display())));
    }
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    for w in cfg.validate()? {
        warn!("{w}");
    }
    Ok(cfg)
}

fn base_dir(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| cfg.out_dir.clone())
}

fn dataset(cfg: &ExperimentConfig, base: &Path) -> Result<Manifest> {
    let m = cfg
        .dataset
        .materialize(&base.join("data"), cfg.seed)
        .context("preparing the dataset")?;
    info!(
        "dataset: {} train / {} test images",
        m.len(Split::Train),
        m.len(Split::Test)
    );
    Ok(m)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn ssl_seconds(run: &RunState) -> f64 {
    run.history.iter().filter(|r| r.split == "ssl").map(|r| r.wall_seconds).sum()
}

/// Plan-weighted per-image cost of the pretraining backbone (heads excluded).
fn plan_cost(spec: &BackboneSpec, plan: &[StagePlan]) -> Result<CostReport> {
    Ok(CostReport::new(spec, &[], plan, CountModel::LayerOps)?)
}

/// SHA-256 of the backbone tensors (heads excluded) in checkpoint encoding.
pub fn backbone_digest(net: &Network) -> Result<String> {
    let ck = Checkpoint {
        spec_digest: net.spec().digest(),
        seed: 0,
        epoch: 0,
        stage: 0,
        meta: String::new(),
        tensors: detach_heads(net).tensors(),
    };
    let bytes = ck.to_bytes()?;
    Ok(hex(&bytes[bytes.len() - 32..]))
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let base = base_dir(&cfg, &args.out);
    let _lock = DirLock::acquire(&base)?;
    std::fs::write(base.join("config.json"), cfg.to_json())?;
    let manifest = dataset(&cfg, &base)?;
    let train = ImageSet::load(&manifest, Split::Train)?;
    let pcfg = cfg.pretrain_config()?;
    let mut session = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
            let s = PretrainSession::resume(pcfg, &train, &ck)?;
            info!("resuming at stage {} epoch {}", s.stage(), s.stage_epoch());
            s
        }
        None => PretrainSession::new(pcfg, &train, cfg.seed)?,
    };
    let metrics = base.join("metrics.csv");
    let every = cfg.pretrain.checkpoint_every;
    let mut budget = args.max_epochs.unwrap_or(usize::MAX);
    while !session.finished() && budget > 0 {
        let rec = session.run_epoch()?;
        budget -= 1;
        let stage = session.stage();
        info!(
            "stage {stage} epoch {}: loss {:.4} lr {:.4} ({:.1}s)",
            session.stage_epoch(),
            rec.loss,
            rec.lr,
            rec.wall_seconds
        );
        session.run.write_metrics(&metrics)?;
        if session.stage_done() {
            let path = base.join(format!("stage{stage}.s3l"));
            save_checkpoint(&session.checkpoint()?, &path)?;
            info!("wrote {}", path.display());
        } else if every > 0 && session.stage_epoch() % every == 0 {
            save_checkpoint(&session.checkpoint()?, &base.join("latest.s3l"))?;
        }
    }
    if !session.finished() {
        let path = base.join("latest.s3l");
        save_checkpoint(&session.checkpoint()?, &path)?;
        info!("stopped early; resume with --resume {}", path.display());
    }
    let pc = session.config();
    let cost = plan_cost(&pc.backbone, &pc.stages)?;
    write_json(
        &base.join("summary.json"),
        &json!({
            "method": pc.ssl.method.name(),
            "backbone": pc.backbone.name,
            "plan": PlanString::from_stages(&pc.stages).to_string(),
            "finished": session.finished(),
            "stages": session.summaries(),
            "weighted_macs": cost.weighted_mean,
            "wall_seconds": ssl_seconds(&session.run),
        }),
    )?;
    Ok(())
}

fn strategy_name(args: &FinetuneArgs) -> String {
    let mut name = if args.random_init {
        "random".to_string()
    } else if let Some(s) = &args.drop_stage {
        format!("drop-{s}")
    } else if args.removed_stage {
        "removed-stage".to_string()
    } else {
        "baseline".to_string()
    };
    if args.mixup {
        name.push_str("-mixup");
    }
    name
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let base = base_dir(&cfg, &args.out);
    let strategy = strategy_name(args);
    let out = base.join(format!("finetune-{strategy}"));
    let _lock = DirLock::acquire(&out)?;
    let manifest = dataset(&cfg, &base)?;
    let train = ImageSet::load(&manifest, Split::Train)?;
    let test = ImageSet::load(&manifest, Split::Test)?;

    let source = match &args.from {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
            let (pcfg, prun) = pretrain_info(&ck)?;
            Some((pretrained_network(&ck)?, pcfg, prun))
        }
        None => None,
    };
    let init = match (&source, &args.drop_stage) {
        (None, _) => Init::Random,
        (Some((net, ..)), Some(stage)) => Init::DropStage(net, stage.clone()),
        (Some((net, ..)), None) if args.removed_stage => Init::RemovedStage(net),
        (Some((net, ..)), None) => Init::Pretrained(net),
    };
    let mut ft = cfg.finetune.clone();
    ft.mixup |= args.mixup;
    let mut prepared = prepare(&cfg.full_backbone()?, init, train.classes, cfg.seed)?;
    let mut run = RunState::new(cfg.seed);
    let pipeline = finetune_pipeline(&mut prepared, &train, &test, &ft, &mut run)?;
    run.write_metrics(&out.join("metrics.csv"))?;
    info!(
        "best accuracy {:.4} (epoch {:?}), warmup {:.1}s, fine-tune {:.1}s",
        pipeline.finetune.best_accuracy,
        pipeline.finetune.best_epoch,
        pipeline.warmup_seconds,
        pipeline.finetune.wall_seconds
    );

    let localization = if test.boxes.iter().any(Option::is_some) {
        Some(localize_set(
            &prepared.net,
            &test.images,
            &test.labels,
            &test.boxes,
            ft.resolution,
            cfg.eval.cam_threshold,
        )?)
    } else {
        None
    };

    let (method, plan, macs, pretrain_seconds) = match &source {
        Some((_, pcfg, prun)) => (
            pcfg.ssl.method.name().to_string(),
            PlanString::from_stages(&pcfg.stages).to_string(),
            plan_cost(&pcfg.backbone, &pcfg.stages)?.weighted_mean,
            ssl_seconds(prun),
        ),
        None => ("random".to_string(), String::new(), 0.0, 0.0),
    };
    let acc = Some(pipeline.finetune.best_accuracy);
    let report = RunReport {
        method,
        plan,
        macs,
        wall_seconds: pretrain_seconds + pipeline.total_seconds,
        acc_normal: if ft.mixup { None } else { acc },
        acc_mixup: if ft.mixup { acc } else { None },
    };
    write_json(&out.join("report.json"), &serde_json::to_value(&report)?)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "strategy": strategy,
            "fresh_stage": prepared.fresh_stage,
            "pretrain_seconds": pretrain_seconds,
            "pipeline": pipeline,
            "localization": localization,
        }),
    )?;
    Ok(())
}

pub fn lineval(args: &LinevalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let lc = cfg
        .lineval
        .clone()
        .ok_or_else(|| usage("the config has no `lineval` section"))?;
    let base = base_dir(&cfg, &args.out);
    let out = base.join("lineval");
    let _lock = DirLock::acquire(&out)?;
    let manifest = dataset(&cfg, &base)?;
    let train = ImageSet::load(&manifest, Split::Train)?;
    let test = ImageSet::load(&manifest, Split::Test)?;
    let ck = load_checkpoint(&args.from).with_context(|| format!("reading {}", args.from.display()))?;
    let src = pretrained_network(&ck)?;
    let before = backbone_digest(&src)?;
    let mut net = with_classifier(&src, train.classes, cfg.seed)?;
    let mut run = RunState::new(cfg.seed);
    let rep = linear_eval(&mut net, &train, &test, &lc, &mut run)?;
    let after = backbone_digest(&net)?;
    run.write_metrics(&out.join("metrics.csv"))?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "report": rep,
            "backbone_digest_before": before,
            "backbone_digest_after": after,
        }),
    )?;
    anyhow::ensure!(before == after, "linear evaluation modified the backbone");
    info!("linear evaluation accuracy {:.4}", rep.best_accuracy);
    Ok(())
}

pub fn flops(args: &FlopsArgs) -> Result<()> {
    let model: CountModel = args.count.parse()?;
    let spec = BackboneSpec::preset(&args.backbone)?;
    let plan = match &args.plan {
        Some(p) => {
            let valid = validate_plan(&p.parse::<PlanString>()?.stages())?;
            for w in &valid.warnings {
                warn!("{w}");
            }
            Some(valid.stages)
        }
        None => None,
    };
    if args.res.is_empty() && plan.is_none() {
        return Err(usage("give --res, --plan or both"));
    }
    if args.classes == 0 {
        return Err(usage("--classes must be positive"));
    }
    let heads = [HeadSpec::classifier(spec.feature_dim(), args.classes)];
    let count = |r: usize| count_ops(&spec, &heads, r, model).map_err(|e| usage(e.to_string()));
    println!("row,resolution,epochs,macs,millions");
    for &r in &args.res {
        let m = count(r)?;
        println!("res,{r},,{m},{:.2}", m as f64 / 1e6);
    }
    if let Some(stages) = plan {
        for s in &stages {
            count(s.resolution)?;
        }
        let cost = CostReport::new(&spec, &heads, &stages, model)?;
        for s in &cost.stages {
            println!("stage,{},{},{},{:.2}", s.resolution, s.epochs, s.macs, s.macs as f64 / 1e6);
        }
        let epochs: usize = stages.iter().map(|s| s.epochs).sum();
        println!(
            "weighted_mean,,{epochs},{:.1},{:.2}",
            cost.weighted_mean,
            cost.weighted_mean / 1e6
        );
    }
    Ok(())
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            found.push(p);
        }
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    if !args.dir.is_dir() {
        return Err(usage(format!("{} is not a directory", args.dir.display())));
    }
    let mut paths = Vec::new();
    find_reports(&args.dir, &mut paths)?;
    if paths.is_empty() {
        return Err(usage(format!("no report.json under {}", args.dir.display())));
    }
    let runs = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<RunReport>(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = args.out.clone().unwrap_or_else(|| args.dir.clone());
    std::fs::create_dir_all(&out)?;
    let (csv, svg) = emit_report(&runs, &out)?;
    println!("{}", csv.display());
    println!("{}", svg.display());
    Ok(())
}
