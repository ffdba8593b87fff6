use s3l_core::ssl::{halves_pairing, info_nce, nt_xent_batch};
use s3l_core::{Graph, SeededRng, Tensor};

use crate::common::check;
use crate::Outcome;

type Rows = Vec<Vec<f64>>;

fn unit_rows(r: &mut SeededRng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| r.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn one_hot(i: usize, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log softmax(logits)[pos]` by direct summation of shifted exponentials.
fn nll(logits: &[f64], pos: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    -((logits[pos] - m).exp() / z).ln()
}

fn info_nce_oracle(q: &Rows, k: &Rows, neg: &Rows, tau: f64) -> f64 {
    let per: Vec<f64> = q
        .iter()
        .zip(k)
        .map(|(qi, ki)| {
            let logits: Vec<f64> = std::iter::once(dot(qi, ki))
                .chain(neg.iter().map(|n| dot(qi, n)))
                .map(|s| s / tau)
                .collect();
            nll(&logits, 0)
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn nt_xent_oracle(z: &Rows, half: usize, tau: f64) -> f64 {
    let m = z.len();
    let mut total = 0.0;
    for i in 0..m {
        let partner = (i + half) % m;
        let others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        let logits: Vec<f64> = others.iter().map(|&j| dot(&z[i], &z[j]) / tau).collect();
        let pos = others.iter().position(|&j| j == partner).expect("partner");
        total += nll(&logits, pos);
    }
    total / m as f64
}

fn mat(rows: &Rows) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn eval_info_nce(q: &Rows, k: &Rows, neg: &Rows, tau: f64) -> f64 {
    let mut g = Graph::new();
    let qv = g.constant(mat(q)).unwrap();
    let kv = g.constant(mat(k)).unwrap();
    let nv = (!neg.is_empty()).then(|| g.constant(mat(neg)).unwrap());
    let l = info_nce(&mut g, qv, kv, nv, tau).unwrap();
    g.value(l).item()
}

fn eval_nt_xent(z: &Rows, half: usize, tau: f64) -> f64 {
    let mut g = Graph::new();
    let zv = g.constant(mat(z)).unwrap();
    let l = nt_xent_batch(&mut g, zv, &halves_pairing(half), tau).unwrap();
    g.value(l).item()
}

pub fn run() -> Outcome {
    let mut r = SeededRng::new(31, &[]);
    let (mut worst_info, mut worst_nt): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let d = 1 + r.below(16);
        let tau = r.uniform_in(0.05, 1.0);
        let n = 1 + r.below(64);
        let k = 1 + r.below(64);
        let q = unit_rows(&mut r, n, d);
        let kp = unit_rows(&mut r, n, d);
        let neg = unit_rows(&mut r, k, d);
        worst_info = worst_info.max((eval_info_nce(&q, &kp, &neg, tau) - info_nce_oracle(&q, &kp, &neg, tau)).abs());

        let half = 2 + r.below(31);
        let z = unit_rows(&mut r, 2 * half, d);
        worst_nt = worst_nt.max((eval_nt_xent(&z, half, tau) - nt_xent_oracle(&z, half, tau)).abs());
    }
    check(worst_info < 1e-10 && worst_nt < 1e-10, || {
        format!("oracle deviation info_nce {worst_info:.2e}, nt_xent {worst_nt:.2e}")
    })?;

    // All-zero logits: the loss is the log of the number of candidates.
    let e4: Rows = (0..4).map(|i| one_hot(i, 4)).collect();
    let ln3_nt = eval_nt_xent(&e4, 2, 0.2);
    let ln3_info = eval_info_nce(&vec![e4[0].clone()], &vec![e4[1].clone()], &vec![e4[2].clone(), e4[3].clone()], 0.2);
    let d = 4098;
    let negs: Rows = (2..d).map(|i| one_hot(i, d)).collect();
    let ln4097 = eval_info_nce(&vec![one_hot(0, d)], &vec![one_hot(1, d)], &negs, 0.07);
    let errs = [
        (ln3_nt - 3f64.ln()).abs(),
        (ln3_info - 3f64.ln()).abs(),
        (ln4097 - 4097f64.ln()).abs(),
    ];
    check(errs.iter().all(|&e| e < 1e-9), || format!("closed forms off by {errs:?}"))?;
    Ok(format!(
        "1000 instances each, worst |diff| info_nce {worst_info:.1e} nt_xent {worst_nt:.1e}; ln3 / ln4097 within {:.1e}",
        errs.iter().cloned().fold(0.0, f64::max)
    ))
}
