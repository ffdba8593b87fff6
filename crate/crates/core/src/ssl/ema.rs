use crate::backbone::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `θ_t ← m·θ_t + (1−m)·θ_o` for every parameter.
///
/// Both stores must hold the same names with the same shapes. Results are
/// clamped into `[min(θ_t, θ_o), max(θ_t, θ_o)]` so rounding can never push a
/// value outside the convex hull of its inputs.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, online: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA rate {m} outside [0, 1]")));
    }
    if target.len() != online.len() {
        return Err(Error::invalid(format!(
            "EMA parameter sets differ: {} target vs {} online",
            target.len(),
            online.len()
        )));
    }
    for (name, p) in target.iter() {
        match online.get(name) {
            Some(o) if o.value.shape() == p.value.shape() => {}
            Some(_) => return Err(Error::invalid(format!("EMA shape mismatch for `{name}`"))),
            None => return Err(Error::invalid(format!("online network lacks `{name}`"))),
        }
    }
    let keep = T::of(m);
    let mix = T::of(1.0 - m);
    for (name, p) in target.iter_mut() {
        let o = online.get(name).expect("checked");
        for (t, &s) in p.value.data_mut().iter_mut().zip(o.value.data()) {
            let (lo, hi) = if *t <= s { (*t, s) } else { (s, *t) };
            *t = (keep * *t + mix * s).max(lo).min(hi);
        }
    }
    Ok(())
}
