//! Residual CNN backbones, heads and parameter bookkeeping.

mod forward;
mod network;
mod spec;

pub use forward::{head_forward, BnMode, Forward, BN_EPS, BN_MOMENTUM};
pub use network::{
    attach_head, build_backbone, detach_heads, in_namespace, param_groups, reinit_stage, Bound,
    HeadKind, HeadSpec, Network, Param, ParamGroups, ParamStore, HEAD,
};
pub use spec::{truncate_last_stage, BackboneSpec, BlockKind, StageSpec, StemSpec, STEM};
