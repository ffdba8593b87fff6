use s3l_core::gradcheck::check_gradients;
use s3l_core::ssl::{byol_loss, halves_pairing, info_nce, nt_xent_batch};
use s3l_core::{Graph, Result, SeededRng, Target, Tensor, Var};

use crate::Outcome;

const SHAPES: usize = 20;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Program = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn dim(r: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + r.below(hi - lo + 1)
}

fn randn_in(r: &mut SeededRng, ranges: &[(usize, usize)]) -> Tensor<f64> {
    let shape: Vec<usize> = ranges.iter().map(|&(lo, hi)| dim(r, lo, hi)).collect();
    randn(r, &shape)
}

fn randn(r: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal()).collect()).unwrap()
}

/// Contract a tensor output to a scalar with fixed random weights.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    if g.value(y).is_scalar() {
        return Ok(y);
    }
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut r = SeededRng::new(99, &[n as u64]);
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| r.normal()).collect())?)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn matrix(r: &mut SeededRng) -> Vec<usize> {
    vec![dim(r, 1, 5), dim(r, 1, 5)]
}

/// One randomized instance of `op`: inputs and the scalar program.
fn case(op: &str, r: &mut SeededRng, i: usize) -> (Vec<Tensor<f64>>, Program) {
    match op {
        "conv2d" => {
            let (n, c, oc) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
            let k = dim(r, 1, 3);
            let (s, p) = (dim(r, 1, 2), r.below(k));
            let (h, w) = (dim(r, k, 6), dim(r, k, 6));
            let x = randn(r, &[n, c, h, w]);
            let wt = randn(r, &[oc, c, k, k]);
            (vec![x, wt], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], s, p)?;
                project(g, y)
            }))
        }
        "batch_norm_train" => {
            let c = dim(r, 1, 3);
            let (n, h, w) = loop {
                let t = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
                if t.0 * t.1 * t.2 >= 3 {
                    break t;
                }
            };
            let x = randn(r, &[n, c, h, w]);
            (vec![x, randn(r, &[c]), randn(r, &[c])], Box::new(|g, v| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(g, y)
            }))
        }
        "batch_norm_eval" => {
            let (n, c, h, w) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let mean: Vec<f64> = (0..c).map(|_| r.normal()).collect();
            let var: Vec<f64> = (0..c).map(|_| r.uniform_in(0.5, 2.0)).collect();
            let x = randn(r, &[n, c, h, w]);
            (vec![x, randn(r, &[c]), randn(r, &[c])], Box::new(move |g, v| {
                let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                project(g, y)
            }))
        }
        "relu" => (vec![randn_in(r, &[(1, 4), (1, 4), (1, 3)])], Box::new(|g, v| {
            let y = g.relu(v[0])?;
            project(g, y)
        })),
        "max_pool2d" => {
            let k = dim(r, 2, 3);
            let (s, p) = (dim(r, 1, 2), r.below(k / 2 + 1));
            let x = randn_in(r, &[(1, 2), (1, 2), (k, 6), (k, 6)]);
            (vec![x], Box::new(move |g, v| {
                let y = g.max_pool2d(v[0], k, s, p)?;
                project(g, y)
            }))
        }
        "global_avg_pool" => {
            let x = randn_in(r, &[(1, 3), (1, 3), (1, 4), (1, 4)]);
            (vec![x], Box::new(|g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y)
            }))
        }
        "linear" => {
            let (n, din, dout) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
            let mut inputs = vec![randn(r, &[n, din]), randn(r, &[dout, din])];
            let bias = i.is_multiple_of(2);
            if bias {
                inputs.push(randn(r, &[dout]));
            }
            (inputs, Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], bias.then(|| v[2]))?;
                project(g, y)
            }))
        }
        "add" | "sub" | "mul" => {
            let s = matrix(r);
            let op = op.to_string();
            (vec![randn(r, &s), randn(r, &s)], Box::new(move |g, v| {
                let y = match op.as_str() {
                    "add" => g.add(v[0], v[1])?,
                    "sub" => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                project(g, y)
            }))
        }
        "scale" | "add_scalar" => {
            let c = r.normal() * 3.0;
            let scale = op == "scale";
            (vec![{ let m = matrix(r); randn(r, &m) }], Box::new(move |g, v| {
                let y = if scale { g.scale(v[0], c)? } else { g.add_scalar(v[0], c)? };
                project(g, y)
            }))
        }
        "reshape" => {
            let (a, b, c) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            (vec![randn(r, &[a, b, c])], Box::new(move |g, v| {
                let y = g.reshape(v[0], &[a * b, c])?;
                project(g, y)
            }))
        }
        "matmul" => {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            let trans = i % 2 == 1;
            let b = if trans { randn(r, &[n, k]) } else { randn(r, &[k, n]) };
            (vec![randn(r, &[m, k]), b], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1], trans)?;
                project(g, y)
            }))
        }
        "concat" => {
            let axis = i % 2;
            let base = matrix(r);
            let parts = dim(r, 2, 3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = dim(r, 1, 3);
                    randn(r, &s)
                })
                .collect();
            (inputs, Box::new(move |g, v| {
                let y = g.concat(v, axis)?;
                project(g, y)
            }))
        }
        "drop_diagonal" => {
            let m = dim(r, 2, 6);
            (vec![randn(r, &[m, m])], Box::new(|g, v| {
                let y = g.drop_diagonal(v[0])?;
                project(g, y)
            }))
        }
        "sum" | "mean" => {
            let mean = op == "mean";
            (vec![{ let m = matrix(r); randn(r, &m) }], Box::new(move |g, v| {
                let y = if mean { g.mean(v[0])? } else { g.sum(v[0])? };
                let y = g.mul(y, y)?;
                project(g, y)
            }))
        }
        "sum_axis" => {
            let s = vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let axis = r.below(3);
            (vec![randn(r, &s)], Box::new(move |g, v| {
                let y = g.sum_axis(v[0], axis)?;
                project(g, y)
            }))
        }
        "l2_normalize" => {
            let s = vec![dim(r, 1, 4), dim(r, 2, 6)];
            (vec![randn(r, &s)], Box::new(|g, v| {
                let y = g.l2_normalize(v[0], 1)?;
                project(g, y)
            }))
        }
        "softmax_cross_entropy" => {
            let (n, c) = (dim(r, 1, 5), dim(r, 2, 6));
            let logits = randn(r, &[n, c]).map(|v| v * 2.0);
            if i.is_multiple_of(2) {
                let labels: Vec<usize> = (0..n).map(|_| r.below(c)).collect();
                (vec![logits], Box::new(move |g, v| g.softmax_cross_entropy(v[0], Target::Hard(&labels))))
            } else {
                let mut t = randn(r, &[n, c]).map(f64::exp);
                for row in t.data_mut().chunks_mut(c) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                (vec![logits], Box::new(move |g, v| g.softmax_cross_entropy(v[0], Target::Soft(&t))))
            }
        }
        "info_nce" => {
            let (n, d, k) = (dim(r, 1, 4), dim(r, 2, 6), dim(r, 1, 6));
            let tau = r.uniform_in(0.1, 1.0);
            (vec![randn(r, &[n, d]), randn(r, &[n, d]), randn(r, &[k, d])], Box::new(move |g, v| {
                let q = g.l2_normalize(v[0], 1)?;
                let kp = g.l2_normalize(v[1], 1)?;
                let neg = g.l2_normalize(v[2], 1)?;
                info_nce(g, q, kp, Some(neg), tau)
            }))
        }
        "nt_xent_batch" => {
            let (half, d) = (dim(r, 2, 4), dim(r, 2, 6));
            let tau = r.uniform_in(0.1, 1.0);
            (vec![randn(r, &[2 * half, d])], Box::new(move |g, v| {
                let z = g.l2_normalize(v[0], 1)?;
                nt_xent_batch(g, z, &halves_pairing(half), tau)
            }))
        }
        "byol_loss" => {
            let s = vec![dim(r, 1, 4), dim(r, 2, 6)];
            (vec![randn(r, &s), randn(r, &s)], Box::new(|g, v| byol_loss(g, v[0], v[1])))
        }
        other => unreachable!("{other}"),
    }
}

const OPS: &[&str] = &[
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "reshape",
    "matmul",
    "concat",
    "drop_diagonal",
    "sum",
    "mean",
    "sum_axis",
    "l2_normalize",
    "softmax_cross_entropy",
    "info_nce",
    "nt_xent_batch",
    "byol_loss",
];

/// Stem, one residual block, pooling, projection and InfoNCE between two views.
fn composite(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let embed = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let y = g.conv2d(x, v[2], 1, 1)?;
        let (y, _) = g.batch_norm_train(y, v[3], v[4], 1e-5)?;
        let stem = g.relu(y)?;
        let y = g.conv2d(stem, v[5], 1, 1)?;
        let (y, _) = g.batch_norm_train(y, v[6], v[7], 1e-5)?;
        let y = g.relu(y)?;
        let y = g.conv2d(y, v[8], 1, 1)?;
        let (y, _) = g.batch_norm_train(y, v[9], v[10], 1e-5)?;
        let y = g.add(y, stem)?;
        let y = g.relu(y)?;
        let y = g.global_avg_pool(y)?;
        let z = g.linear(y, v[11], None)?;
        g.l2_normalize(z, 1)
    };
    let q = embed(g, v[0])?;
    let k = embed(g, v[1])?;
    let mut r = SeededRng::new(5, &[]);
    let bank = g.constant(randn(&mut r, &[6, 5]))?;
    let bank = g.l2_normalize(bank, 1)?;
    info_nce(g, q, k, Some(bank), 0.5)
}

pub fn run() -> Outcome {
    let mut worst_overall: f64 = 0.0;
    let mut failures = Vec::new();
    let mut instances = 0;
    for op in OPS {
        let mut r = SeededRng::new(2, &[op.len() as u64, op.as_bytes()[0] as u64]);
        for i in 0..SHAPES {
            let (inputs, program) = case(op, &mut r, i);
            let report = check_gradients(|g, v| program(g, v), &inputs, STEP, TOL)
                .map_err(|e| format!("{op} #{i}: {e}"))?;
            instances += 1;
            worst_overall = worst_overall.max(report.worst());
            if !report.passed() {
                failures.push(format!("{op} #{i} rel err {:.2e}", report.worst()));
            }
        }
    }
    let mut r = SeededRng::new(3, &[]);
    let mut inputs = vec![randn(&mut r, &[3, 3, 6, 6]), randn(&mut r, &[3, 3, 6, 6])];
    for shape in [
        &[4, 3, 3, 3][..],
        &[4],
        &[4],
        &[4, 4, 3, 3],
        &[4],
        &[4],
        &[4, 4, 3, 3],
        &[4],
        &[4],
        &[5, 4],
    ] {
        inputs.push(randn(&mut r, shape).map(|v| v * 0.5 + if shape.len() == 1 { 1.0 } else { 0.0 }));
    }
    let report = check_gradients(composite, &inputs, STEP, TOL).map_err(|e| format!("composite: {e}"))?;
    worst_overall = worst_overall.max(report.worst());
    if !report.passed() {
        failures.push(format!("composite rel err {:.2e}", report.worst()));
    }
    let detail = format!(
        "{} ops x {SHAPES} shapes + composite backbone/InfoNCE, {instances} instances, worst rel err {:.2e}",
        OPS.len(),
        worst_overall
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}
