use super::*;
use crate::augment::AugPolicy;
use crate::backbone::{BackboneSpec, Network};
use crate::checkpoint::Checkpoint;
use crate::dataset::{render_all, ImageSet, Split, SyntheticSpec};
use crate::schedule::StagePlan;
use crate::ssl::{SslConfig, SslMethod};

fn data(classes: usize, per_class: usize, size: usize) -> (ImageSet, ImageSet) {
    let spec = SyntheticSpec::new(classes, per_class, size, 1);
    let all = render_all(&spec).unwrap();
    (
        ImageSet::from_rendered(&all, Split::Train, size, classes).unwrap(),
        ImageSet::from_rendered(&all, Split::Test, size, classes).unwrap(),
    )
}

fn pre_cfg(method: SslMethod, stages: &[(usize, usize)], batch: usize) -> PretrainConfig {
    let mut ssl = SslConfig::new(method);
    ssl.queue = Some(64);
    ssl.proj_dim = 32;
    PretrainConfig {
        backbone: BackboneSpec::preset("mini18").unwrap(),
        ssl,
        stages: stages.iter().map(|&(r, e)| StagePlan::new(r, e)).collect(),
        batch_size: batch,
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        augment: AugPolicy::simclr(16),
    }
}

fn params_equal(a: &Network, b: &Network, prefix: &str) -> bool {
    a.params
        .iter()
        .filter(|(k, _)| crate::backbone::in_namespace(k, prefix))
        .all(|(k, p)| b.params.get(k).is_some_and(|q| q.value == p.value))
}

#[test]
fn pretrain_smoke_and_uniform_baseline() {
    let (train, _) = data(4, 16, 16);
    let mut s = PretrainSession::new(pre_cfg(SslMethod::Simclr, &[(16, 2)], 16), &train, 3).unwrap();
    let mut events = Vec::new();
    let summary = s
        .run(&mut |e, _| {
            events.push(e.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(events.len(), 3);
    assert!(matches!(events[2], Event::StageDone { stage: 0 }));
    assert_eq!(summary[0].losses.len(), 2);
    let first = summary[0].losses[0];
    assert!(first.is_finite());
    let uniform = (2.0 * 16.0 - 1.0f64).ln();
    assert!((first - uniform).abs() < 0.5, "epoch-0 loss {first} vs ln(2N-1) {uniform}");
    let ck = s.checkpoint().unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(pretrained_network(&back).unwrap(), s.online);
}

#[test]
fn same_seed_same_parameters() {
    let (train, _) = data(4, 8, 16);
    let run = |seed| {
        let mut s = PretrainSession::new(pre_cfg(SslMethod::Simclr, &[(8, 2)], 8), &train, seed).unwrap();
        s.run(&mut |_, _| Ok(())).unwrap();
        (s.online.clone(), without_timing(&s.run.history))
    };
    let (a, ha) = run(5);
    let (b, hb) = run(5);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_ne!(run(6).0, a);
}

#[test]
fn stage_handoff_keeps_weights_and_zeroes_velocity() {
    let (train, _) = data(4, 8, 16);
    let mut s = PretrainSession::new(pre_cfg(SslMethod::Simclr, &[(8, 2), (16, 1)], 8), &train, 1).unwrap();
    s.run_epoch().unwrap();
    assert!(s.next_stage().is_err());
    s.run_epoch().unwrap();
    assert!(s.stage_done());
    assert!(!s.opt.velocities().is_empty());
    let before = s.online.clone();
    s.next_stage().unwrap();
    assert_eq!(s.stage(), 1);
    assert_eq!(s.online, before);
    assert!(s.opt.velocities().is_empty());
    s.run_epoch().unwrap();
    assert!(s.finished());
    assert!(s.run_epoch().is_err());
    assert_eq!(s.summaries().iter().map(|x| x.epochs).collect::<Vec<_>>(), vec![2, 1]);
}

#[test]
fn resume_matches_straight_run_for_every_method() {
    let (train, _) = data(4, 8, 16);
    for method in [SslMethod::Simclr, SslMethod::Moco, SslMethod::Byol] {
        let cfg = pre_cfg(method, &[(8, 2), (16, 1)], 8);
        let mut straight = PretrainSession::new(cfg.clone(), &train, 9).unwrap();
        straight.run(&mut |_, _| Ok(())).unwrap();

        let mut first = PretrainSession::new(cfg.clone(), &train, 9).unwrap();
        first.run_epoch().unwrap();
        let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
        drop(first);
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = PretrainSession::resume(cfg.clone(), &train, &ck).unwrap();
        resumed.run(&mut |_, _| Ok(())).unwrap();

        assert_eq!(resumed.online, straight.online, "{method}");
        assert_eq!(resumed.ssl, straight.ssl, "{method}");
        assert_eq!(without_timing(&resumed.run.history), without_timing(&straight.run.history));

        let mut other = cfg.clone();
        other.backbone = crate::backbone::truncate_last_stage(&other.backbone).unwrap();
        assert!(PretrainSession::resume(other, &train, &ck).is_err());
    }
}

fn ft_cfg(epochs: usize, r: usize) -> FinetuneConfig {
    let mut c = FinetuneConfig::new(epochs, Protocol::Cosine, 16, r);
    c.warmup_epochs = 2;
    c
}

#[test]
fn warmup_touches_only_the_fresh_stage() {
    let (train, _) = data(4, 8, 16);
    let spec = BackboneSpec::preset("mini18").unwrap();
    let src: Network = crate::backbone::build_backbone(&spec, &crate::SeededRng::new(2, &[])).unwrap();
    for init in [Init::DropStage(&src, "conv5".into()), Init::Pretrained(&src)] {
        let mut p = prepare(&spec, init, 4, 1).unwrap();
        let stage = p.fresh_stage.clone().unwrap_or_else(|| "conv5".into());
        let before = p.net.clone();
        let mut run = RunState::new(1);
        warmup_new_block(&mut p.net, &train, &stage, &ft_cfg(1, 16), &mut run).unwrap();
        for name in ["conv1", "conv2", "conv3", "conv4"] {
            assert!(params_equal(&before, &p.net, name), "{name} moved");
        }
        for (k, v) in &before.buffers {
            if !k.starts_with("conv5") {
                assert_eq!(&p.net.buffers[k], v, "{k}");
            }
        }
        assert!(!params_equal(&before, &p.net, "conv5"));
        assert!(!params_equal(&before, &p.net, "head"));
        assert_eq!(run.history.len(), 2);
        assert!(run.history.iter().all(|r| r.lr == 0.1 && r.split == "warmup"));
        assert_eq!(p.net.trainable_count(), p.net.params.len());
    }
    let mut p = prepare(&spec, Init::Random, 4, 1).unwrap();
    let before = p.net.clone();
    let mut cfg = ft_cfg(1, 16);
    cfg.warmup_epochs = 0;
    warmup_new_block(&mut p.net, &train, "conv5", &cfg, &mut RunState::new(0)).unwrap();
    assert_eq!(p.net, before);
    assert!(warmup_new_block(&mut p.net, &train, "conv9", &cfg, &mut RunState::new(0)).is_err());
}

#[test]
fn removed_stage_pipeline_counts_warmup_and_then_updates_everything() {
    let (train, test) = data(4, 8, 16);
    let full = BackboneSpec::preset("mini18").unwrap();
    let short = crate::backbone::truncate_last_stage(&full).unwrap();
    let src: Network = crate::backbone::build_backbone(&short, &crate::SeededRng::new(4, &[])).unwrap();
    assert!(prepare(&full, Init::Pretrained(&src), 4, 1).is_err());
    let mut p = prepare(&full, Init::RemovedStage(&src), 4, 1).unwrap();
    assert_eq!(p.fresh_stage.as_deref(), Some("conv5"));
    assert!(params_equal(&src, &p.net, "conv4"));
    let start = p.net.clone();
    let mut run = RunState::new(1);
    let rep = finetune_pipeline(&mut p, &train, &test, &ft_cfg(1, 16), &mut run).unwrap();
    assert!(rep.warmup_seconds > 0.0);
    assert_eq!(rep.total_seconds, rep.warmup_seconds + rep.finetune.wall_seconds);
    for name in ["conv1", "conv2", "conv3", "conv4", "conv5"] {
        assert!(!params_equal(&start, &p.net, name), "{name} never trained");
    }
    assert_eq!(run.epoch, 3);
}

#[test]
fn finetune_protocols_and_contracts() {
    let step = FinetuneConfig::new(120, Protocol::Step, 16, 16).policy();
    let lrs: Vec<f64> = [0, 39, 40, 79, 80].iter().map(|&e| step.at(e as f64).unwrap()).collect();
    assert_eq!(lrs[0], 0.01);
    assert_eq!(lrs[1], 0.01);
    assert!((lrs[2] - 0.001).abs() < 1e-15 && (lrs[3] - 0.001).abs() < 1e-15);
    assert!((lrs[4] - 1e-4).abs() < 1e-16);
    assert_eq!("step-0.01".parse::<Protocol>().unwrap(), Protocol::Step);
    assert!("step".parse::<Protocol>().is_err());

    let (train, test) = data(4, 4, 16);
    let mut p = prepare(&BackboneSpec::preset("mini18").unwrap(), Init::Random, 4, 1).unwrap();
    let initial = evaluate(&p.net, &test, 16, 16).unwrap().accuracy;
    let before = p.net.clone();
    let rep = finetune(&mut p.net, &train, &test, &ft_cfg(0, 16), &mut RunState::new(0)).unwrap();
    assert_eq!(rep.best_accuracy, initial);
    assert_eq!(rep.best_epoch, None);
    assert_eq!(p.net, before);

    let mut wrong = prepare(&BackboneSpec::preset("mini18").unwrap(), Init::Random, 5, 1).unwrap();
    assert!(finetune(&mut wrong.net, &train, &test, &ft_cfg(1, 16), &mut RunState::new(0)).is_err());

    let mut cfg = ft_cfg(2, 16);
    cfg.mixup = true;
    let mut run = RunState::new(0);
    let rep = finetune(&mut p.net, &train, &test, &cfg, &mut run).unwrap();
    assert_eq!(rep.accuracies.len(), 2);
    assert_eq!(rep.best_accuracy, rep.accuracies.iter().cloned().fold(0.0, f64::max));
    assert_eq!(run.history.iter().filter(|r| r.split == "test").count(), 2);
    assert_eq!(run.epoch, 2);
}

#[test]
fn linear_eval_freezes_the_backbone() {
    // Two classes that differ only in overall brightness.
    let img = |v: f32| crate::Tensor::full(vec![3, 16, 16], v);
    let set = ImageSet {
        images: (0..16).map(|i| img(if i % 2 == 0 { 0.1 } else { 0.9 } + 0.01 * (i / 2) as f32)).collect(),
        labels: (0..16).map(|i| i % 2).collect(),
        boxes: vec![None; 16],
        classes: 2,
    };
    let spec = BackboneSpec::preset("mini18").unwrap();
    let mut p = prepare(&spec, Init::Random, 2, 3).unwrap();
    let before = p.net.clone();
    let mut cfg = LinearConfig::new(45, 8, 16);
    cfg.lr = 1.0;
    let mut run = RunState::new(0);
    let rep = linear_eval(&mut p.net, &set, &set, &cfg, &mut run).unwrap();
    assert_eq!(rep.best_accuracy, 1.0);
    assert_eq!(p.net.buffers, before.buffers);
    for (k, v) in before.params.iter() {
        if !k.starts_with("head") {
            assert_eq!(p.net.params.get(k).unwrap().value, v.value, "{k}");
        }
    }
    let lrs: Vec<f64> = run.history.iter().filter(|r| r.split == "lineval").map(|r| r.lr).collect();
    assert_eq!(lrs[39], 1.0);
    assert!((lrs[40] - 0.1).abs() < 1e-15);
    let lp = LinearConfig::new(80, 8, 16).policy();
    assert_eq!(lp.at(0.0).unwrap(), 10.0);
    assert!((lp.at(40.0).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn overfits_sixteen_images() {
    let (train, _) = data(4, 4, 16);
    let mut p = prepare(&BackboneSpec::preset("mini18").unwrap(), Init::Random, 4, 1).unwrap();
    let mut cfg = FinetuneConfig::new(500, Protocol::Step, 16, 16);
    cfg.lr = Some(0.05);
    cfg.weight_decay = 0.0;
    let mut run = RunState::new(0);
    let mut last = f64::INFINITY;
    // Plain epochs without evaluation: call the pipeline one epoch at a time.
    for _ in 0..500 {
        let one = FinetuneConfig { epochs: 1, ..cfg.clone() };
        finetune(&mut p.net, &train, &train, &one, &mut run).unwrap();
        last = run.history.iter().rev().find(|r| r.split == "train").unwrap().loss;
        if last < 0.05 {
            break;
        }
    }
    assert!(last < 0.05, "loss {last}");
}
