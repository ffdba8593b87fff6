use std::sync::OnceLock;
use std::time::Instant;

use s3l_core::config::ExperimentConfig;
use s3l_core::dataset::ImageSet;
use s3l_core::eval::{gt_known_loc, iou, localize_set, BBox, Localization};
use s3l_core::schedule::StagePlan;
use s3l_core::train::{finetune_pipeline, prepare, Init, PretrainConfig, PretrainSession, RunState};

use crate::common::{check, sets};
use crate::Outcome;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Epochs used to compare pretraining speed at the two resolutions.
const TIMING_EPOCHS: usize = 10;

struct SeedResult {
    ssl_acc: f64,
    random_acc: f64,
    t16: f64,
    t32: f64,
    loc: Localization,
}

struct Desk {
    seeds: Vec<SeedResult>,
    seconds: f64,
}

fn timed_pretrain(cfg: &PretrainConfig, resolution: usize, train: &ImageSet, seed: u64) -> Result<f64, String> {
    let mut cfg = cfg.clone();
    cfg.stages = vec![StagePlan::new(resolution, TIMING_EPOCHS)];
    let mut s = PretrainSession::new(cfg, train, seed).map_err(|e| e.to_string())?;
    let summary = s.run(&mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    Ok(summary[0].wall_seconds)
}

fn one_seed(seed: u64, train: &ImageSet, test: &ImageSet) -> Result<SeedResult, String> {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = seed;
    let pcfg = cfg.pretrain_config().map_err(|e| e.to_string())?;
    let full = cfg.full_backbone().map_err(|e| e.to_string())?;

    let mut session = PretrainSession::new(pcfg.clone(), train, seed).map_err(|e| e.to_string())?;
    session.run(&mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    let mut ssl = prepare(&full, Init::Pretrained(&session.online), train.classes, seed).map_err(|e| e.to_string())?;
    let ssl_rep = finetune_pipeline(&mut ssl, train, test, &cfg.finetune, &mut RunState::new(seed)).map_err(|e| e.to_string())?;

    let mut random = prepare(&full, Init::Random, train.classes, seed).map_err(|e| e.to_string())?;
    let random_rep =
        finetune_pipeline(&mut random, train, test, &cfg.finetune, &mut RunState::new(seed)).map_err(|e| e.to_string())?;

    let loc = localize_set(
        &ssl.net,
        &test.images,
        &test.labels,
        &test.boxes,
        cfg.finetune.resolution,
        cfg.eval.cam_threshold,
    )
    .map_err(|e| e.to_string())?;

    let t16 = timed_pretrain(&pcfg, 16, train, seed)?;
    let t32 = timed_pretrain(&pcfg, 32, train, seed)?;
    let r = SeedResult {
        ssl_acc: ssl_rep.finetune.best_accuracy,
        random_acc: random_rep.finetune.best_accuracy,
        t16,
        t32,
        loc,
    };
    println!(
        "  seed {seed}: pretrained {:.3} vs random {:.3}; {TIMING_EPOCHS} epochs at 16 {:.1}s, at 32 {:.1}s; CAM quadrant mass {:.3}",
        r.ssl_acc, r.random_acc, r.t16, r.t32, r.loc.quadrant_mass
    );
    Ok(r)
}

fn desk() -> &'static Result<Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let spec = ExperimentConfig::desk().dataset.synthetic.expect("synthetic desk data");
        let (train, test) = sets(&spec);
        let seeds = SEEDS
            .iter()
            .map(|&s| one_seed(s, &train, &test))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Desk {
            seeds,
            seconds: start.elapsed().as_secs_f64(),
        })
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn run() -> Outcome {
    let d = desk().as_ref().map_err(Clone::clone)?;
    let ssl = mean(d.seeds.iter().map(|s| s.ssl_acc));
    let random = mean(d.seeds.iter().map(|s| s.random_acc));
    let ratio = mean(d.seeds.iter().map(|s| s.t16)) / mean(d.seeds.iter().map(|s| s.t32));
    let margin = 100.0 * (ssl - random);
    let detail = format!(
        "mean accuracy pretrained {:.1}% vs random {:.1}% (margin {margin:.1} points); time ratio 16/32 {ratio:.2}; {:.0}s",
        100.0 * ssl,
        100.0 * random,
        d.seconds
    );
    if margin >= 2.0 && ratio <= 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn unit_values() -> Result<(), String> {
    let b = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1).unwrap();
    let cases = [
        (iou(&b(2, 3, 9, 7), &b(2, 3, 9, 7)), 1.0),
        (iou(&b(0, 0, 2, 2), &b(2, 2, 4, 4)), 0.0),
        (iou(&b(0, 0, 2, 2), &b(1, 1, 3, 3)), 1.0 / 7.0),
        (iou(&b(0, 0, 4, 2), &b(0, 0, 2, 2)), 0.5),
    ];
    for (i, (got, want)) in cases.iter().enumerate() {
        check(got == want, || format!("iou case {i}: {got} vs {want}"))?;
    }
    // Exactly 0.5 counts as a hit, anything below does not.
    let hit = gt_known_loc(&[b(0, 0, 4, 2)], &[b(0, 0, 2, 2)]).unwrap();
    let miss = gt_known_loc(&[b(0, 0, 5, 2)], &[b(0, 0, 2, 2)]).unwrap();
    let half = gt_known_loc(&[b(0, 0, 2, 2), b(0, 0, 1, 1)], &[b(0, 0, 2, 2), b(5, 5, 6, 6)]).unwrap();
    check(hit == 1.0 && miss == 0.0 && half == 0.5, || format!("gt-known {hit} {miss} {half}"))
}

pub fn localization() -> Outcome {
    unit_values()?;
    let d = desk().as_ref().map_err(Clone::clone)?;
    let mass = mean(d.seeds.iter().map(|s| s.loc.quadrant_mass));
    let gt = mean(d.seeds.iter().map(|s| s.loc.gt_known));
    let detail = format!(
        "iou/gt-known unit values exact; mean CAM mass in the true quadrant {:.1}% (gt-known {:.1}%) over {} seeds",
        100.0 * mass,
        100.0 * gt,
        d.seeds.len()
    );
    if mass >= 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
