use super::ema::ema_update;
use super::loss::{info_nce, UNIT_TOL};
use super::StepStats;
use crate::autograd::Graph;
use crate::backbone::{BnMode, HeadKind, Network};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Momentum key encoder plus a ring buffer of past keys.
///
/// The queue starts full of random unit vectors, so it always holds exactly
/// `capacity` rows; real keys replace them oldest-first.
#[derive(Clone, Debug, PartialEq)]
pub struct MocoState<T: Scalar = f32> {
    pub key: Network<T>,
    queue: Tensor<T>,
    ptr: usize,
    enqueued: u64,
    pub momentum: f64,
}

impl<T: Scalar> MocoState<T> {
    pub fn new(online: &Network<T>, capacity: usize, momentum: f64, rng: &SeededRng) -> Result<Self> {
        let head = online
            .head(HeadKind::Projection)
            .ok_or_else(|| Error::invalid("MoCo needs a projection head on the online network"))?;
        if capacity == 0 {
            return Err(Error::config("ssl.queue", "capacity must be positive"));
        }
        let d = head.out_dim;
        let mut r = rng.derive(&[0x5155_4555]);
        let mut data = Vec::with_capacity(capacity * d);
        for _ in 0..capacity {
            let row: Vec<f64> = (0..d).map(|_| r.normal()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            data.extend(row.iter().map(|v| T::of(v / norm)));
        }
        let mut key = online.clone();
        for (_, p) in key.params.iter_mut() {
            p.trainable = false;
        }
        Ok(MocoState {
            key,
            queue: Tensor::new(vec![capacity, d], data)?,
            ptr: 0,
            enqueued: 0,
            momentum,
        })
    }

    /// Rebuild from stored parts (checkpoint resume).
    pub fn from_parts(key: Network<T>, queue: Tensor<T>, ptr: usize, enqueued: u64, momentum: f64) -> Result<Self> {
        if queue.rank() != 2 || ptr >= queue.shape()[0] {
            return Err(Error::Checkpoint("MoCo queue pointer out of range".into()));
        }
        let mut key = key;
        for (_, p) in key.params.iter_mut() {
            p.trainable = false;
        }
        Ok(MocoState {
            key,
            queue,
            ptr,
            enqueued,
            momentum,
        })
    }

    pub fn capacity(&self) -> usize {
        self.queue.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.capacity()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ptr(&self) -> usize {
        self.ptr
    }

    /// Total keys ever enqueued.
    pub fn enqueued(&self) -> u64 {
        self.enqueued
    }

    /// Raw ring storage.
    pub fn queue(&self) -> &Tensor<T> {
        &self.queue
    }

    /// Rows ordered oldest first.
    pub fn rows_fifo(&self) -> Vec<&[T]> {
        let cap = self.capacity();
        (0..cap).map(|i| self.queue.row((self.ptr + i) % cap)).collect()
    }

    /// Overwrite the oldest `B` rows with `keys` (`B × d`, unit rows).
    pub fn enqueue(&mut self, keys: &Tensor<T>) -> Result<()> {
        let cap = self.capacity();
        let d = self.queue.shape()[1];
        if keys.rank() != 2 || keys.shape()[1] != d {
            return Err(Error::shape("moco_enqueue", format!("keys {:?}, queue width {d}", keys.shape())));
        }
        let b = keys.shape()[0];
        if b == 0 || !cap.is_multiple_of(b) {
            return Err(Error::config(
                "ssl.queue",
                format!("capacity {cap} is not a multiple of batch size {b}"),
            ));
        }
        for (i, row) in keys.data().chunks(d).enumerate() {
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::invalid(format!("key {i} has norm {norm}")));
            }
        }
        for row in keys.data().chunks(d) {
            let start = self.ptr * d;
            self.queue.data_mut()[start..start + d].copy_from_slice(row);
            self.ptr = (self.ptr + 1) % cap;
        }
        self.enqueued += b as u64;
        Ok(())
    }

    /// One MoCo step: loss, SGD on the online network, key-encoder EMA, enqueue.
    pub fn step(
        &mut self,
        online: &mut Network<T>,
        opt: &mut Sgd<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        tau: f64,
        lr: f64,
    ) -> Result<StepStats> {
        let mut g = Graph::new();
        let bound = online.bind(&mut g)?;
        let xa = g.constant(a.clone())?;
        let f = online.forward(&mut g, &bound, xa, BnMode::Auto)?;
        let z = online.head_forward(&mut g, &bound, HeadKind::Projection, f.features)?;
        let q = g.l2_normalize(z, 1)?;

        let kb = self.key.bind(&mut g)?;
        let xb = g.constant(b.clone())?;
        let kf = self.key.forward(&mut g, &kb, xb, BnMode::Batch)?;
        let kz = self.key.head_forward(&mut g, &kb, HeadKind::Projection, kf.features)?;
        let k = g.l2_normalize(kz, 1)?;
        let k = g.detach(k)?;
        let bank = g.constant(self.queue.clone())?;

        let loss = info_nce(&mut g, q, k, Some(bank), tau)?;
        let grads = g.backward(loss)?;
        let leaked = kb.iter().filter(|(_, v)| grads.get(*v).is_some()).count()
            + usize::from(grads.get(bank).is_some() || grads.get(k).is_some());

        opt.step(&mut online.params, &bound, &grads, lr)?;
        online.update_bn_stats(&f.bn_stats);
        ema_update(&mut self.key.params, &online.params, self.momentum)?;
        let keys = g.value(k).clone();
        self.enqueue(&keys)?;
        Ok(StepStats {
            loss: g.value(loss).item().f64(),
            leaked,
        })
    }
}
