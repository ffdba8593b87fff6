//! Per-image compute cost of a backbone at a given input resolution.
//!
//! Two counting conventions are provided. [`CountModel::Macs`] sums the
//! multiply-accumulates of conv and linear layers only. [`CountModel::LayerOps`]
//! additionally charges two operations per batch-norm element, one per ReLU
//! and pooling input element, and one per linear bias, which is what common
//! layer profilers report as "FLOPs".

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, BlockKind, HeadSpec};
use crate::error::{Error, Result};
use crate::schedule::StagePlan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountModel {
    Macs,
    #[default]
    LayerOps,
}

impl std::str::FromStr for CountModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(CountModel::Macs),
            "layer-ops" => Ok(CountModel::LayerOps),
            other => Err(Error::config("count", format!("unknown count model `{other}`"))),
        }
    }
}

/// Output extent of a conv/pool window, or `None` if it would be empty.
fn extent(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = input + 2 * p;
    (padded >= k).then(|| (padded - k) / s + 1)
}

struct Counter {
    model: CountModel,
    total: u128,
}

impl Counter {
    fn conv(&mut self, c_in: usize, c_out: usize, k: usize, h: usize, w: usize) {
        self.total += (c_out * c_in * k * k) as u128 * (h * w) as u128;
    }

    fn bn(&mut self, elems: usize) {
        if self.model == CountModel::LayerOps {
            self.total += 2 * elems as u128;
        }
    }

    fn elementwise(&mut self, elems: usize) {
        if self.model == CountModel::LayerOps {
            self.total += elems as u128;
        }
    }

    fn linear(&mut self, din: usize, dout: usize) {
        self.total += (din * dout) as u128;
        if self.model == CountModel::LayerOps {
            self.total += dout as u128;
        }
    }
}

fn too_small(spec: &BackboneSpec, r: usize) -> Error {
    Error::invalid(format!(
        "resolution {r} leaves an empty feature map in `{}`",
        spec.name
    ))
}

/// Operations per image at square resolution `r`, backbone plus `heads`.
pub fn count_ops(spec: &BackboneSpec, heads: &[HeadSpec], r: usize, model: CountModel) -> Result<u128> {
    spec.validate()?;
    let mut c = Counter { model, total: 0 };
    let stem = &spec.stem;
    let mut h = extent(r, stem.kernel, stem.stride, stem.padding()).ok_or_else(|| too_small(spec, r))?;
    c.conv(spec.in_channels, stem.channels, stem.kernel, h, h);
    let e = stem.channels * h * h;
    c.bn(e);
    c.elementwise(e);
    if stem.pool {
        c.elementwise(e);
        h = extent(h, 3, 2, 1).ok_or_else(|| too_small(spec, r))?;
    }
    let mut in_c = stem.channels;
    for stage in &spec.stages {
        let w = stage.width();
        for b in 0..stage.blocks {
            let s = if b == 0 { stage.stride } else { 1 };
            let ho = extent(h, 3, s, 1).ok_or_else(|| too_small(spec, r))?;
            match stage.kind {
                BlockKind::Basic => {
                    c.conv(in_c, w, 3, ho, ho);
                    c.bn(w * ho * ho);
                    c.elementwise(w * ho * ho);
                    c.conv(w, w, 3, ho, ho);
                    c.bn(w * ho * ho);
                }
                BlockKind::Bottleneck => {
                    c.conv(in_c, w, 1, h, h);
                    c.bn(w * h * h);
                    c.elementwise(w * h * h);
                    c.conv(w, w, 3, ho, ho);
                    c.bn(w * ho * ho);
                    c.elementwise(w * ho * ho);
                    c.conv(w, stage.channels, 1, ho, ho);
                    c.bn(stage.channels * ho * ho);
                }
            }
            if s != 1 || in_c != stage.channels {
                c.conv(in_c, stage.channels, 1, ho, ho);
                c.bn(stage.channels * ho * ho);
            }
            // ReLU after the residual addition.
            c.elementwise(stage.channels * ho * ho);
            h = ho;
            in_c = stage.channels;
        }
    }
    // Global average pool reads every element of the last map.
    c.elementwise(in_c * h * h);
    for head in heads {
        for (din, dout) in head.layers() {
            c.linear(din, dout);
        }
    }
    Ok(c.total)
}

/// Conv + linear multiply-accumulates per image.
pub fn count_macs(spec: &BackboneSpec, heads: &[HeadSpec], r: usize) -> Result<u128> {
    count_ops(spec, heads, r, CountModel::Macs)
}

/// `Σ MᵢEᵢ / Σ Eᵢ`.
pub fn weighted_mean_macs(stages: &[(f64, usize)]) -> Result<f64> {
    let epochs: usize = stages.iter().map(|s| s.1).sum();
    if stages.is_empty() || stages.iter().any(|s| s.1 == 0) {
        return Err(Error::invalid("weighted mean needs stages with positive epochs"));
    }
    let num: f64 = stages.iter().map(|&(m, e)| m * e as f64).sum();
    Ok(num / epochs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub stage: usize,
    pub resolution: usize,
    pub epochs: usize,
    pub macs: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    pub weighted_mean: f64,
    pub total_mac_epochs: u128,
}

#[derive(Serialize)]
struct CostRow {
    stage: usize,
    resolution: usize,
    epochs: usize,
    macs: u128,
    weighted_mean: f64,
}

impl CostReport {
    pub fn new(spec: &BackboneSpec, heads: &[HeadSpec], plan: &[StagePlan], model: CountModel) -> Result<Self> {
        let mut stages = Vec::with_capacity(plan.len());
        for (i, s) in plan.iter().enumerate() {
            stages.push(StageCost {
                stage: i,
                resolution: s.resolution,
                epochs: s.epochs,
                macs: count_ops(spec, heads, s.resolution, model)?,
            });
        }
        let pairs: Vec<(f64, usize)> = stages.iter().map(|s| (s.macs as f64, s.epochs)).collect();
        Ok(CostReport {
            weighted_mean: weighted_mean_macs(&pairs)?,
            total_mac_epochs: stages.iter().map(|s| s.macs * s.epochs as u128).sum(),
            stages,
        })
    }

    /// CSV with columns stage, resolution, epochs, macs, weighted_mean.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.stages {
            w.serialize(CostRow {
                stage: s.stage,
                resolution: s.resolution,
                epochs: s.epochs,
                macs: s.macs,
                weighted_mean: self.weighted_mean,
            })?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}
