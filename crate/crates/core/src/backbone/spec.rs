use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    /// Output channels over inner width.
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// The stem (`conv1` in ResNet terms).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3×3 stride-2 max pool after the stem convolution.
    pub pool: bool,
}

impl StemSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// One residual stage (`conv2` … `conv5`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub kind: BlockKind,
    pub blocks: usize,
    /// Output channels of the stage (4× the inner width for bottlenecks).
    pub channels: usize,
    pub stride: usize,
}

impl StageSpec {
    pub fn width(&self) -> usize {
        self.channels / self.kind.expansion()
    }
}

/// Declarative residual CNN: a stem followed by ordered stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

/// Name of the stem's parameter namespace.
pub const STEM: &str = "conv1";

fn stages(kind: BlockKind, blocks: [usize; 4], channels: [usize; 4]) -> Vec<StageSpec> {
    (0..4)
        .map(|i| StageSpec {
            name: format!("conv{}", i + 2),
            kind,
            blocks: blocks[i],
            channels: channels[i],
            stride: if i == 0 { 1 } else { 2 },
        })
        .collect()
}

impl BackboneSpec {
    /// Built-in presets: `resnet18`, `resnet50`, `mini18`, `mini50`.
    pub fn preset(name: &str) -> Result<Self> {
        let imagenet_stem = StemSpec {
            channels: 64,
            kernel: 7,
            stride: 2,
            pool: true,
        };
        let mini_stem = |channels| StemSpec {
            channels,
            kernel: 3,
            stride: 1,
            pool: false,
        };
        let (stem, stages) = match name {
            "resnet18" => (
                imagenet_stem,
                stages(BlockKind::Basic, [2, 2, 2, 2], [64, 128, 256, 512]),
            ),
            "resnet50" => (
                imagenet_stem,
                stages(BlockKind::Bottleneck, [3, 4, 6, 3], [256, 512, 1024, 2048]),
            ),
            "mini18" => (
                mini_stem(16),
                stages(BlockKind::Basic, [1, 1, 1, 1], [16, 32, 64, 128]),
            ),
            "mini50" => (
                mini_stem(16),
                stages(BlockKind::Bottleneck, [1, 1, 1, 1], [64, 128, 256, 512]),
            ),
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(BackboneSpec {
            name: name.to_string(),
            in_channels: 3,
            stem,
            stages,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::config("backbone", reason));
        if self.in_channels == 0 || self.stem.channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stem.kernel == 0 || self.stem.stride == 0 {
            return bad("stem kernel and stride must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.stages {
            if s.name == STEM || !seen.insert(s.name.as_str()) {
                return bad(format!("duplicate stage name `{}`", s.name));
            }
            if s.blocks == 0 || s.stride == 0 || s.channels == 0 {
                return bad(format!("stage `{}` needs positive blocks/stride/channels", s.name));
            }
            if s.channels % s.kind.expansion() != 0 {
                return bad(format!("stage `{}` channels not divisible by expansion", s.name));
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    /// Product of all strides (stem, pool, stages).
    pub fn total_stride(&self) -> usize {
        let pool = if self.stem.pool { 2 } else { 1 };
        self.stem.stride * pool * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn has_namespace(&self, name: &str) -> bool {
        name == STEM || self.stage(name).is_some()
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }
}

/// The same network without its final stage.
pub fn truncate_last_stage(spec: &BackboneSpec) -> Result<BackboneSpec> {
    if spec.stages.len() < 2 {
        return Err(Error::invalid(format!(
            "cannot truncate `{}`: it has a single stage",
            spec.name
        )));
    }
    let mut out = spec.clone();
    out.stages.pop();
    out.name = format!("{}-{}", spec.name, spec.stages.last().map_or("", |s| &s.name));
    Ok(out)
}
