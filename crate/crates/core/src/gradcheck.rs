//! Finite-difference verification of reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`]: the worst relative error per input.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), track))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::shape("check_gradients", "program must be scalar-valued"));
    }
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("check_gradients".into()));
    }
    Ok((g, vars, out))
}

/// Compare autodiff gradients of the scalar program `f` with central
/// differences of step `h`, for every element of every input.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = eval(&f, inputs, true)?;
    let grads = g.backward(out)?;
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape().to_vec());
        let analytic = grads.get(vars[k]).unwrap_or(&zeros).clone();
        let mut worst = 0.0f64;
        for j in 0..input.len() {
            let x0 = input.data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let (gp, _, op) = eval(&f, &probe, false)?;
            let fp = gp.value(op).item();
            probe[k].data_mut()[j] = x0 - h;
            let (gm, _, om) = eval(&f, &probe, false)?;
            let fm = gm.value(om).item();
            probe[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        max_rel_err.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
    })
}
