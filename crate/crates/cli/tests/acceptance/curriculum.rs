use std::process::Command;

use s3l_core::augment::AugPolicy;
use s3l_core::backbone::{BackboneSpec, HeadSpec};
use s3l_core::cost::{count_ops, CostReport, CountModel};
use s3l_core::dataset::SyntheticSpec;
use s3l_core::schedule::StagePlan;
use s3l_core::ssl::{SslConfig, SslMethod};
use s3l_core::train::{PretrainConfig, PretrainSession};
use s3l_core::{SeededRng, Tensor};

use crate::common::{check, rel, sets};
use crate::Outcome;

fn bits<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Vec<(String, Vec<u32>)> {
    tensors
        .into_iter()
        .map(|(k, v)| (k.clone(), v.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn handoff(method: SslMethod) -> Result<(), String> {
    let (train, _) = sets(&SyntheticSpec::new(4, 8, 32, 5));
    let mut ssl = SslConfig::new(method);
    ssl.queue = Some(32);
    ssl.proj_dim = 16;
    let cfg = PretrainConfig {
        backbone: BackboneSpec::preset("mini18").unwrap(),
        ssl,
        stages: vec![StagePlan::new(16, 2), StagePlan::new(32, 2)],
        batch_size: 8,
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        augment: AugPolicy::simclr(16),
    };
    let mut s = PretrainSession::new(cfg, &train, 2).map_err(|e| e.to_string())?;
    while !s.stage_done() {
        s.run_epoch().map_err(|e| e.to_string())?;
    }
    check(s.stage() == 0, || format!("{method}: stage {} after first stage", s.stage()))?;
    let weights = bits(&s.online.tensors());
    check(!s.opt.velocities().is_empty(), || format!("{method}: no velocity after stage 0"))?;
    s.next_stage().map_err(|e| e.to_string())?;
    check(s.stage() == 1 && s.stage_epoch() == 0, || format!("{method}: did not enter stage 1"))?;
    check(bits(&s.online.tensors()) == weights, || format!("{method}: weights changed at handoff"))?;
    check(s.opt.velocities().is_empty(), || format!("{method}: optimizer velocity survived the handoff"))?;
    let rec = s.run_epoch().map_err(|e| e.to_string())?;
    check(rec.loss.is_finite(), || format!("{method}: stage-1 loss {}", rec.loss))?;
    Ok(())
}

pub fn run() -> Outcome {
    handoff(SslMethod::Simclr)?;
    handoff(SslMethod::Moco)?;

    let mut worst: f64 = 0.0;
    let mut r = SeededRng::new(8, &[]);
    for (name, lo, hi) in [("mini18", 16, 32), ("resnet18", 16, 32), ("resnet50", 112, 224)] {
        let spec = BackboneSpec::preset(name).unwrap();
        let heads = [HeadSpec::classifier(spec.feature_dim(), 1000)];
        for model in [CountModel::Macs, CountModel::LayerOps] {
            let m1 = count_ops(&spec, &heads, lo, model).unwrap() as f64;
            let m2 = count_ops(&spec, &heads, hi, model).unwrap() as f64;
            for _ in 0..50 {
                let (e1, e2) = (1 + r.below(1200), 1 + r.below(1200));
                let plan = [StagePlan::new(lo, e1), StagePlan::new(hi, e2)];
                let got = CostReport::new(&spec, &heads, &plan, model).unwrap().weighted_mean;
                let w = e1 as f64 / (e1 + e2) as f64;
                worst = worst.max(rel(got, w * m1 + (1.0 - w) * m2));
            }
        }
    }
    let out = Command::new(env!("CARGO_BIN_EXE_s3l"))
        .args(["flops", "--backbone", "resnet18", "--plan", "16:300,32:100"])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let col = |row: &str| -> Vec<f64> {
        text.lines()
            .filter(|l| l.starts_with(row))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect()
    };
    let (stages, mean) = (col("stage,"), col("weighted_mean,"));
    check(stages.len() == 2 && mean.len() == 1, || format!("unexpected flops output:\n{text}"))?;
    worst = worst.max(rel(mean[0], 0.75 * stages[0] + 0.25 * stages[1]));
    check(worst < 1e-9, || format!("weighted mean off by {worst:.2e} relative"))?;
    Ok(format!(
        "16->32 handoff bit-exact with zero velocity (SimCLR, MoCo); weighted cost within {worst:.1e} of the convex combination"
    ))
}
