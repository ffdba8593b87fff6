use super::ema::ema_update;
use super::loss::byol_symmetric;
use super::StepStats;
use crate::autograd::{Graph, Var};
use crate::backbone::{head_forward, Bound, BnMode, HeadKind, HeadSpec, Network, ParamStore};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// EMA target network and the online predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ByolState<T: Scalar = f32> {
    pub target: Network<T>,
    pub predictor: ParamStore<T>,
    pub predictor_spec: HeadSpec,
    pub momentum: f64,
}

impl<T: Scalar> ByolState<T> {
    pub fn new(online: &Network<T>, momentum: f64, rng: &SeededRng) -> Result<Self> {
        let proj = online
            .head(HeadKind::Projection)
            .ok_or_else(|| Error::invalid("BYOL needs a projection head on the online network"))?;
        let spec = HeadSpec::predictor(proj.out_dim, proj.in_dim);
        let mut predictor = ParamStore::new();
        spec.init_into(&mut predictor, &rng.derive(&[0x5052_4544]));
        let mut target = online.clone();
        for (_, p) in target.params.iter_mut() {
            p.trainable = false;
        }
        Ok(ByolState {
            target,
            predictor,
            predictor_spec: spec,
            momentum,
        })
    }

    /// Rebuild from stored parts (checkpoint resume).
    pub fn from_parts(target: Network<T>, predictor: ParamStore<T>, spec: HeadSpec, momentum: f64) -> Self {
        let mut target = target;
        for (_, p) in target.params.iter_mut() {
            p.trainable = false;
        }
        ByolState {
            target,
            predictor,
            predictor_spec: spec,
            momentum,
        }
    }

    fn online_branch(
        &self,
        g: &mut Graph<T>,
        online: &Network<T>,
        bound: &Bound,
        pb: &Bound,
        x: &Tensor<T>,
    ) -> Result<(Var, Vec<(String, crate::autograd::BatchStats<T>)>)> {
        let xv = g.constant(x.clone())?;
        let f = online.forward(g, bound, xv, BnMode::Auto)?;
        let z = online.head_forward(g, bound, HeadKind::Projection, f.features)?;
        let p = head_forward(g, pb, &self.predictor_spec, z)?;
        Ok((p, f.bn_stats))
    }

    fn target_branch(&self, g: &mut Graph<T>, tb: &Bound, x: &Tensor<T>) -> Result<Var> {
        let xv = g.constant(x.clone())?;
        let f = self.target.forward(g, tb, xv, BnMode::Batch)?;
        let z = self.target.head_forward(g, tb, HeadKind::Projection, f.features)?;
        g.detach(z)
    }

    /// One BYOL step: symmetric loss, SGD on online + predictor, target EMA.
    pub fn step(&mut self, online: &mut Network<T>, opt: &mut Sgd<T>, a: &Tensor<T>, b: &Tensor<T>, lr: f64) -> Result<StepStats> {
        let mut g = Graph::new();
        let bound = online.bind(&mut g)?;
        let mut pb = Bound::default();
        self.predictor.bind(&mut g, &mut pb)?;
        let tb = self.target.bind(&mut g)?;

        let (p1, s1) = self.online_branch(&mut g, online, &bound, &pb, a)?;
        let (p2, s2) = self.online_branch(&mut g, online, &bound, &pb, b)?;
        let z1 = self.target_branch(&mut g, &tb, a)?;
        let z2 = self.target_branch(&mut g, &tb, b)?;
        let loss = byol_symmetric(&mut g, p1, z2, p2, z1)?;
        let grads = g.backward(loss)?;
        let leaked = tb.iter().filter(|(_, v)| grads.get(*v).is_some()).count();

        opt.step(&mut online.params, &bound, &grads, lr)?;
        opt.step(&mut self.predictor, &pb, &grads, lr)?;
        online.update_bn_stats(&s1);
        online.update_bn_stats(&s2);
        ema_update(&mut self.target.params, &online.params, self.momentum)?;
        Ok(StepStats {
            loss: g.value(loss).item().f64(),
            leaked,
        })
    }
}
