use std::collections::VecDeque;

use s3l_core::backbone::{build_backbone, BackboneSpec, Network, ParamStore};
use s3l_core::optim::Sgd;
use s3l_core::ssl::{ema_update, with_projection, MocoState, SslConfig, SslMethod, SslState};
use s3l_core::{SeededRng, Tensor};

use crate::common::check;
use crate::Outcome;

fn online(seed: u64, cfg: &SslConfig) -> Network {
    let rng = SeededRng::new(seed, &[]);
    let net = build_backbone(&BackboneSpec::preset("mini18").unwrap(), &rng).unwrap();
    with_projection(&net, cfg, &rng).unwrap()
}

fn unit_keys(r: &mut SeededRng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| r.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| (x / norm) as f32));
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn queue_fifo() -> Result<String, String> {
    let mut cfg = SslConfig::new(SslMethod::Moco);
    cfg.proj_dim = 8;
    let cap = 64;
    let mut m = MocoState::new(&online(1, &cfg), cap, 0.999, &SeededRng::new(2, &[])).unwrap();
    let mut model: VecDeque<Vec<u32>> = m.rows_fifo().iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    let mut r = SeededRng::new(3, &[]);
    let sizes = [1, 2, 4, 8, 16, 32];
    let steps = 10_000;
    for step in 0..steps {
        let b = sizes[r.below(sizes.len())];
        let keys = unit_keys(&mut r, b, 8);
        m.enqueue(&keys).map_err(|e| e.to_string())?;
        for row in keys.data().chunks(8) {
            model.pop_front();
            model.push_back(row.iter().map(|v| v.to_bits()).collect());
        }
        check(m.len() == cap && m.capacity() == cap, || format!("step {step}: length {}", m.len()))?;
        let got: Vec<Vec<u32>> = m.rows_fifo().iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        check(got.iter().eq(model.iter()), || format!("step {step}: queue order differs from FIFO"))?;
    }
    Ok(format!("queue {cap}/{cap} and FIFO over {steps} steps"))
}

fn ema_hull() -> Result<String, String> {
    let mut r = SeededRng::new(4, &[]);
    let mut checked = 0usize;
    for trial in 0..500 {
        let mut target = ParamStore::<f64>::new();
        let mut source = ParamStore::<f64>::new();
        for (i, n) in [3usize, 7, 16].into_iter().enumerate() {
            let scale = 10f64.powi(r.below(7) as i32 - 3);
            target.insert(format!("p{i}"), Tensor::new(vec![n], (0..n).map(|_| r.normal() * scale).collect()).unwrap());
            source.insert(format!("p{i}"), Tensor::new(vec![n], (0..n).map(|_| r.normal() * scale).collect()).unwrap());
        }
        let m = match trial {
            0 => 0.0,
            1 => 1.0,
            _ => r.uniform(),
        };
        let before = target.clone();
        ema_update(&mut target, &source, m).map_err(|e| e.to_string())?;
        for (name, p) in target.iter() {
            let (t0, s) = (before.value(name).unwrap(), source.value(name).unwrap());
            for ((&t, &a), &b) in p.value.data().iter().zip(t0.data()).zip(s.data()) {
                check(a.min(b) <= t && t <= a.max(b), || format!("m={m}: {t} outside [{a}, {b}]"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("EMA hull bound on {checked} elements"))
}

fn no_leaks() -> Result<String, String> {
    let mut steps = 0;
    for method in [SslMethod::Moco, SslMethod::Byol, SslMethod::Simclr] {
        let mut cfg = SslConfig::new(method);
        cfg.proj_dim = 16;
        cfg.queue = Some(16);
        let mut net = online(5, &cfg);
        let mut state = SslState::new(&cfg, &net, &SeededRng::new(6, &[])).unwrap();
        let mut opt = Sgd::new(0.9, 1e-4);
        let mut r = SeededRng::new(7, &[method as u64]);
        for step in 0..25 {
            let mut view = || Tensor::new(vec![4, 3, 8, 8], (0..768).map(|_| r.normal() as f32).collect()).unwrap();
            let (a, b) = (view(), view());
            let momentum_side = match &state {
                SslState::Moco(m) => Some((m.key.params.clone(), cfg.moco_momentum)),
                SslState::Byol(b) => Some((b.target.params.clone(), cfg.byol_momentum)),
                SslState::Simclr => None,
            };
            let stats = state.step(&cfg, &mut net, &mut opt, &a, &b, 0.05).map_err(|e| e.to_string())?;
            check(stats.leaked == 0, || format!("{method} step {step}: {} tensors got gradients", stats.leaked))?;
            // The momentum side changes only through the EMA of the updated online weights.
            if let Some((mut want, m)) = momentum_side {
                ema_update(&mut want, &net.params, m).unwrap();
                let got = match &state {
                    SslState::Moco(s) => &s.key.params,
                    SslState::Byol(s) => &s.target.params,
                    SslState::Simclr => unreachable!(),
                };
                check(*got == want, || format!("{method} step {step}: momentum weights moved beyond EMA"))?;
            }
            steps += 1;
        }
    }
    Ok(format!("no momentum-side gradients over {steps} steps"))
}

pub fn run() -> Outcome {
    Ok([queue_fifo()?, ema_hull()?, no_leaks()?].join("; "))
}
