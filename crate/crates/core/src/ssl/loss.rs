use crate::autograd::{Graph, Target, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Allowed deviation of a row norm from 1.
pub const UNIT_TOL: f64 = 1e-4;

fn check_unit<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<(usize, usize)> {
    let s = g.shape(v);
    if s.len() != 2 {
        return Err(Error::shape("contrastive", format!("{what} must be rows × d, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    for (i, row) in g.value(v).data().chunks(d).enumerate() {
        let norm = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!(
                "{what} row {i} has norm {norm}, expected a unit vector"
            )));
        }
    }
    Ok((n, d))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Mean InfoNCE over `N` queries.
///
/// `q` and `k_pos` are `N × d`; `negatives` is a shared `K × d` bank (or
/// `None` for K = 0, where the loss is identically zero). Each row's logits are
/// `[q·k₊, q·k₋₁, …, q·k₋K] / τ` and the positive sits at index 0.
pub fn info_nce<T: Scalar>(g: &mut Graph<T>, q: Var, k_pos: Var, negatives: Option<Var>, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (n, d) = check_unit(g, q, "query")?;
    let (nk, dk) = check_unit(g, k_pos, "positive key")?;
    if (nk, dk) != (n, d) {
        return Err(Error::shape("info_nce", "query and positive key shapes differ"));
    }
    let prod = g.mul(q, k_pos)?;
    let pos = g.sum_axis(prod, 1)?;
    let pos = g.reshape(pos, &[n, 1])?;
    let Some(neg) = negatives else {
        let s = g.sum(pos)?;
        return g.scale(s, 0.0);
    };
    let (_, dn) = check_unit(g, neg, "negative")?;
    if dn != d {
        return Err(Error::shape("info_nce", "negative width differs from query width"));
    }
    let neg_logits = g.matmul(q, neg, true)?;
    let logits = g.concat(&[pos, neg_logits], 1)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let targets = vec![0usize; n];
    g.softmax_cross_entropy(logits, Target::Hard(&targets))
}

/// Partner table for `[view_a; view_b]` stacking: `i ↔ i + n`.
pub fn halves_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

/// NT-Xent over `2N` unit embeddings.
///
/// `partner[i]` is the positive of anchor `i`; it must be a fixed-point-free
/// involution. Every other embedding except the anchor itself is a negative.
pub fn nt_xent_batch<T: Scalar>(g: &mut Graph<T>, z: Var, partner: &[usize], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (m, _) = check_unit(g, z, "embedding")?;
    if m < 4 || m % 2 != 0 {
        return Err(Error::invalid(format!(
            "NT-Xent needs 2N embeddings with N ≥ 2, got {m}"
        )));
    }
    if partner.len() != m
        || partner
            .iter()
            .enumerate()
            .any(|(i, &p)| p >= m || p == i || partner[p] != i)
    {
        return Err(Error::invalid("pairing must be a fixed-point-free involution"));
    }
    let sim = g.matmul(z, z, true)?;
    let off = g.drop_diagonal(sim)?;
    let logits = g.scale(off, 1.0 / tau)?;
    let targets: Vec<usize> = partner
        .iter()
        .enumerate()
        .map(|(i, &p)| if p < i { p } else { p - 1 })
        .collect();
    g.softmax_cross_entropy(logits, Target::Hard(&targets))
}

/// Mean of `2 − 2·cos(p, z)` over rows. `z` should already be detached.
pub fn byol_loss<T: Scalar>(g: &mut Graph<T>, p: Var, z: Var) -> Result<Var> {
    if g.shape(p) != g.shape(z) || g.shape(p).len() != 2 {
        return Err(Error::shape("byol_loss", "prediction and target shapes differ"));
    }
    let n = g.shape(p)[0];
    let pn = g.l2_normalize(p, 1)?;
    let zn = g.l2_normalize(z, 1)?;
    let prod = g.mul(pn, zn)?;
    let total = g.sum(prod)?;
    let mean_cos = g.scale(total, 1.0 / n as f64)?;
    let neg = g.scale(mean_cos, -2.0)?;
    g.add_scalar(neg, 2.0)
}

/// Average of both view orderings: `½[ℓ(p₁, z₂) + ℓ(p₂, z₁)]`.
pub fn byol_symmetric<T: Scalar>(g: &mut Graph<T>, p1: Var, z2: Var, p2: Var, z1: Var) -> Result<Var> {
    let a = byol_loss(g, p1, z2)?;
    let b = byol_loss(g, p2, z1)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}
