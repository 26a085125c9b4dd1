//! Parallel-stream language model: a small frozen transformer backbone,
//! P per-stream contexts (LoRA adapters + prefix tokens), and a
//! label-smoothed dynamic aggregator, all expressed as autodiff graphs
//! over named parameter tensors.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::{
    BackboneConfig, LoraTargets, ModelError, PrefixMode, StreamConfig, TargetModule, BOS_TOKEN,
    BYTE_VOCAB, EOS_TOKEN, RMS_EPS,
};
pub use forward::{
    build_lm_graph, internal_seq_len, smoothed_weights, CorruptionPlan, DropoutPlan, ForwardGraph,
    ForwardOptions, TARGETS_INPUT, TOKENS_INPUT,
};
pub use params::{
    parameter_specs, stream_parameter_count, NdModel, ParamClass, ParamSpec,
};
