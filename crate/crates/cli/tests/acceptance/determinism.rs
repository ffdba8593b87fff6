use std::path::Path;

use s3l_core::augment::AugPolicy;
use s3l_core::backbone::BackboneSpec;
use s3l_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use s3l_core::dataset::{ImageSet, SyntheticSpec};
use s3l_core::schedule::StagePlan;
use s3l_core::ssl::{SslConfig, SslMethod};
use s3l_core::train::{
    finetune_pipeline, prepare, without_timing, write_metrics, FinetuneConfig, Init, PretrainConfig, PretrainSession,
    Protocol, RunState,
};

use crate::common::{check, sets};
use crate::Outcome;

fn config(method: SslMethod) -> PretrainConfig {
    let mut ssl = SslConfig::new(method);
    ssl.queue = Some(32);
    ssl.proj_dim = 16;
    PretrainConfig {
        backbone: BackboneSpec::preset("mini18").unwrap(),
        ssl,
        stages: vec![StagePlan::new(8, 2), StagePlan::new(16, 2)],
        batch_size: 8,
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        augment: AugPolicy::simclr(16),
    }
}

/// metrics.csv without the timing column, as bytes.
fn metrics_bytes(run: &RunState, path: &Path) -> Vec<u8> {
    write_metrics(path, &without_timing(&run.history)).unwrap();
    std::fs::read(path).unwrap()
}

fn tensor_bits(ck: &Checkpoint) -> Vec<(String, Vec<u32>)> {
    ck.tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn straight(method: SslMethod, data: &ImageSet, seed: u64) -> Result<(RunState, Checkpoint), String> {
    let mut s = PretrainSession::new(config(method), data, seed).map_err(|e| e.to_string())?;
    s.run(&mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    Ok((s.run.clone(), s.checkpoint().map_err(|e| e.to_string())?))
}

pub fn run() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (train, test) = sets(&SyntheticSpec::new(4, 8, 16, 9));
    let mut resumes = 0;
    for method in [SslMethod::Simclr, SslMethod::Moco, SslMethod::Byol] {
        let (run_a, ck_a) = straight(method, &train, 11)?;
        let (run_b, ck_b) = straight(method, &train, 11)?;
        let ma = metrics_bytes(&run_a, &dir.path().join("a.csv"));
        check(ma == metrics_bytes(&run_b, &dir.path().join("b.csv")), || format!("{method}: metrics differ between runs"))?;
        check(tensor_bits(&ck_a) == tensor_bits(&ck_b), || format!("{method}: weights differ between runs"))?;

        for stop in [1, 2, 3] {
            let mut s = PretrainSession::new(config(method), &train, 11).map_err(|e| e.to_string())?;
            for _ in 0..stop {
                s.run_epoch().map_err(|e| e.to_string())?;
            }
            let path = dir.path().join(format!("{method}-{stop}.s3l"));
            save_checkpoint(&s.checkpoint().map_err(|e| e.to_string())?, &path).map_err(|e| e.to_string())?;
            drop(s);
            let ck = load_checkpoint(&path).map_err(|e| e.to_string())?;
            let mut s = PretrainSession::resume(config(method), &train, &ck).map_err(|e| e.to_string())?;
            s.run(&mut |_, _| Ok(())).map_err(|e| e.to_string())?;
            let mc = metrics_bytes(&s.run, &dir.path().join("c.csv"));
            check(mc == ma, || {
                let (a, c) = (String::from_utf8_lossy(&ma), String::from_utf8_lossy(&mc));
                let diff = a.lines().zip(c.lines()).find(|(x, y)| x != y);
                format!("{method}: resume after epoch {stop} changes metrics {diff:?}")
            })?;
            check(tensor_bits(&s.checkpoint().unwrap()) == tensor_bits(&ck_a), || {
                format!("{method}: resume after epoch {stop} changes weights or optimizer state")
            })?;
            resumes += 1;
        }
    }

    let mut ft = Vec::new();
    for _ in 0..2 {
        let mut p = prepare(&BackboneSpec::preset("mini18").unwrap(), Init::Random, 4, 3).map_err(|e| e.to_string())?;
        let mut run = RunState::new(3);
        let mut cfg = FinetuneConfig::new(2, Protocol::Cosine, 8, 16);
        cfg.mixup = true;
        finetune_pipeline(&mut p, &train, &test, &cfg, &mut run).map_err(|e| e.to_string())?;
        ft.push(metrics_bytes(&run, &dir.path().join("ft.csv")));
    }
    check(ft[0] == ft[1], || "fine-tuning metrics differ between runs".into())?;
    Ok(format!(
        "3 methods byte-identical across runs; {resumes} resumed runs bit-exact (weights, optimizer, queue/target); fine-tuning with mixup repeatable"
    ))
}
