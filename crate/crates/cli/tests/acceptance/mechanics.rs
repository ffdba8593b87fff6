use s3l_core::backbone::{build_backbone, in_namespace, truncate_last_stage, BackboneSpec, Network, HEAD};
use s3l_core::dataset::SyntheticSpec;
use s3l_core::train::{finetune, finetune_pipeline, prepare, warmup_new_block, FinetuneConfig, Init, Protocol, RunState};
use s3l_core::SeededRng;

use crate::common::{check, sets};
use crate::Outcome;

const FRESH: &str = "conv5";

fn frozen(name: &str) -> bool {
    !in_namespace(name, FRESH) && !in_namespace(name, HEAD)
}

fn bits(net: &Network, name: &str) -> Vec<u32> {
    let t = net.params.value(name).map(|t| t.data()).or_else(|_| net.buffers.get(name).map(|t| t.data()).ok_or(()));
    t.expect("tensor").iter().map(|v| v.to_bits()).collect()
}

fn names(net: &Network) -> Vec<String> {
    net.params.names().chain(net.buffers.keys().map(String::as_str)).map(str::to_string).collect()
}

pub fn run() -> Outcome {
    let full = BackboneSpec::preset("mini18").unwrap();
    let short = truncate_last_stage(&full).unwrap();
    let mut cfg = FinetuneConfig::new(2, Protocol::Cosine, 8, 16);
    cfg.warmup_epochs = 10;
    let mut cases = 0;
    let mut frozen_checked = 0;
    for seed in 0..3u64 {
        let (train, test) = sets(&SyntheticSpec::new(4, 8, 16, 100 + seed));
        let rng = SeededRng::new(seed, &[42]);
        let src_short: Network = build_backbone(&short, &rng).unwrap();
        let src_full: Network = build_backbone(&full, &rng).unwrap();
        for strategy in ["removed-stage", "drop-stage"] {
            let init = match strategy {
                "removed-stage" => Init::RemovedStage(&src_short),
                _ => Init::DropStage(&src_full, FRESH.into()),
            };
            let mut p = prepare(&full, init, train.classes, seed).map_err(|e| e.to_string())?;
            check(p.fresh_stage.as_deref() == Some(FRESH), || format!("{strategy}: fresh stage {:?}", p.fresh_stage))?;
            let start = p.net.clone();
            let mut run = RunState::new(seed);
            warmup_new_block(&mut p.net, &train, FRESH, &cfg, &mut run).map_err(|e| e.to_string())?;
            let warm = run.history.iter().filter(|r| r.split == "warmup").count();
            check(warm == 10, || format!("{strategy}: {warm} warmup epochs"))?;
            let all = names(&start);
            for n in all.iter().filter(|n| frozen(n)) {
                check(bits(&start, n) == bits(&p.net, n), || format!("{strategy} seed {seed}: `{n}` changed during warmup"))?;
                frozen_checked += 1;
            }
            for n in all.iter().filter(|n| !frozen(n) && p.net.params.contains(n)) {
                check(bits(&start, n) != bits(&p.net, n), || format!("{strategy}: `{n}` not trained by warmup"))?;
            }
            let after_warmup = p.net.clone();
            finetune(&mut p.net, &train, &test, &cfg, &mut run).map_err(|e| e.to_string())?;
            for n in after_warmup.params.names().filter(|n| frozen(n)) {
                check(bits(&after_warmup, n) != bits(&p.net, n), || format!("{strategy}: `{n}` not updated by fine-tuning"))?;
            }
            cases += 1;
        }
    }

    // Reported time covers the warmup epochs.
    let (train, test) = sets(&SyntheticSpec::new(4, 8, 16, 100));
    let src: Network = build_backbone(&short, &SeededRng::new(0, &[42])).unwrap();
    let mut p = prepare(&full, Init::RemovedStage(&src), train.classes, 0).map_err(|e| e.to_string())?;
    let mut run = RunState::new(0);
    let rep = finetune_pipeline(&mut p, &train, &test, &cfg, &mut run).map_err(|e| e.to_string())?;
    let warm: f64 = run.history.iter().filter(|r| r.split == "warmup").map(|r| r.wall_seconds).sum();
    check(rep.warmup_seconds > 0.0 && (rep.warmup_seconds - warm).abs() < 1e-9, || {
        format!("warmup seconds {} vs recorded {warm}", rep.warmup_seconds)
    })?;
    check(rep.total_seconds == rep.warmup_seconds + rep.finetune.wall_seconds, || {
        format!("total {} excludes warmup {}", rep.total_seconds, rep.warmup_seconds)
    })?;
    Ok(format!(
        "{cases} cases, {frozen_checked} frozen tensors byte-identical over 10 warmup epochs then all updated; total {:.2}s includes warmup {:.2}s",
        rep.total_seconds, rep.warmup_seconds
    ))
}
