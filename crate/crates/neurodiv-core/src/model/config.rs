//! Model configuration: backbone geometry, per-stream adapter/prefix
//! settings, and the adapter target selectors used by the ablation axes.

use crate::autodiff::AutodiffError;

/// First id after the 256 raw byte values.
pub const BOS_TOKEN: usize = 256;
pub const EOS_TOKEN: usize = 257;
/// Byte-level vocabulary: 256 bytes plus BOS and EOS.
pub const BYTE_VOCAB: usize = 258;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("hidden dim {dim} is not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error("{field} must be nonzero")]
    ZeroField { field: &'static str },
    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("LoRA rank {rank} exceeds hidden dim {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("need at least one stream")]
    NoStreams,
    #[error("aggregator smoothing epsilon = {0} outside [0, 1)")]
    BadEpsilon(f64),
    #[error("design layer {layer} outside [1, {layers}]")]
    BadDesignLayer { layer: usize, layers: usize },
    #[error("unknown adapter target selector {0:?} (expected all | kvq | no_mlp | no_attention)")]
    UnknownTargets(String),
    #[error("unknown prefix mode {0:?} (expected kv_per_layer | input_prepend)")]
    UnknownPrefixMode(String),
    #[error("corruption needs at least two streams")]
    CorruptionNeedsStreams,
    #[error("corruption target stream {target} outside 0..{streams}")]
    BadCorruptionTarget { target: usize, streams: usize },
    #[error("corruption mask for {what} has shape {got:?}, expected {expected:?}")]
    CorruptionMaskShape {
        what: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("dropout mask for stream {stream} has shape {got:?}, expected {expected:?}")]
    DropoutMaskShape {
        stream: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint version {got}, this build reads version {want}")]
    CheckpointVersion { got: u32, want: u32 },
    #[error("checkpoint precision {got} does not match requested {want}")]
    CheckpointPrecision { got: String, want: String },
    #[error("checkpoint backbone hash mismatch: stored {stored}, recomputed {recomputed}")]
    BackboneHashMismatch { stored: String, recomputed: String },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name}: {msg}")]
    BadTensor { name: String, msg: String },
    #[error("backbone is frozen; cannot apply updates to {0:?}")]
    FrozenBackbone(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Frozen-transformer geometry. RMS-normalized pre-attention and pre-MLP,
/// SwiGLU feed-forward, learned absolute positions, no biases anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 64,
            layers: 4,
            heads: 4,
            mlp_hidden: 256,
            vocab: BYTE_VOCAB,
            max_seq: 128,
        }
    }
}

/// Epsilon inside every RMS normalization.
pub const RMS_EPS: f64 = 1e-5;

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroField { field });
            }
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::HeadDivisibility {
                dim: self.dim,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// One adapter-targetable weight inside a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetModule {
    Query,
    Key,
    Value,
    OutProj,
    MlpGate,
    MlpUp,
    MlpDown,
}

impl TargetModule {
    /// Short name used in parameter keys ("s0.layer2.wq.a").
    pub fn key(self) -> &'static str {
        match self {
            TargetModule::Query => "wq",
            TargetModule::Key => "wk",
            TargetModule::Value => "wv",
            TargetModule::OutProj => "wo",
            TargetModule::MlpGate => "w_gate",
            TargetModule::MlpUp => "w_up",
            TargetModule::MlpDown => "w_down",
        }
    }

    /// (input dim, output dim) of the targeted weight.
    pub fn dims(self, bb: &BackboneConfig) -> (usize, usize) {
        match self {
            TargetModule::Query | TargetModule::Key | TargetModule::Value | TargetModule::OutProj => {
                (bb.dim, bb.dim)
            }
            TargetModule::MlpGate | TargetModule::MlpUp => (bb.dim, bb.mlp_hidden),
            TargetModule::MlpDown => (bb.mlp_hidden, bb.dim),
        }
    }
}

const ALL_TARGETS: [TargetModule; 7] = [
    TargetModule::Query,
    TargetModule::Key,
    TargetModule::Value,
    TargetModule::OutProj,
    TargetModule::MlpGate,
    TargetModule::MlpUp,
    TargetModule::MlpDown,
];
const KVQ_TARGETS: [TargetModule; 3] = [
    TargetModule::Query,
    TargetModule::Key,
    TargetModule::Value,
];
const NO_MLP_TARGETS: [TargetModule; 4] = [
    TargetModule::Query,
    TargetModule::Key,
    TargetModule::Value,
    TargetModule::OutProj,
];
const NO_ATTENTION_TARGETS: [TargetModule; 3] = [
    TargetModule::MlpGate,
    TargetModule::MlpUp,
    TargetModule::MlpDown,
];

/// Which weights receive LoRA adapters (the module-target ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    All,
    Kvq,
    NoMlp,
    NoAttention,
}

impl LoraTargets {
    pub fn modules(self) -> &'static [TargetModule] {
        match self {
            LoraTargets::All => &ALL_TARGETS,
            LoraTargets::Kvq => &KVQ_TARGETS,
            LoraTargets::NoMlp => &NO_MLP_TARGETS,
            LoraTargets::NoAttention => &NO_ATTENTION_TARGETS,
        }
    }
}

impl std::str::FromStr for LoraTargets {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "all" => Ok(LoraTargets::All),
            "kvq" => Ok(LoraTargets::Kvq),
            "no_mlp" => Ok(LoraTargets::NoMlp),
            "no_attention" => Ok(LoraTargets::NoAttention),
            other => Err(ModelError::UnknownTargets(other.to_string())),
        }
    }
}

impl std::fmt::Display for LoraTargets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            LoraTargets::All => "all",
            LoraTargets::Kvq => "kvq",
            LoraTargets::NoMlp => "no_mlp",
            LoraTargets::NoAttention => "no_attention",
        };
        write!(f, "{name}")
    }
}

/// How per-stream prefix tokens enter the computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// Prefix-tuning style: learned key/value rows prepended at every
    /// attention layer. The prefix never occupies output positions.
    KvPerLayer,
    /// Fallback: learned embeddings prepended to the input sequence;
    /// outputs are sliced back to the real positions.
    InputPrepend,
}

impl std::str::FromStr for PrefixMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "kv_per_layer" => Ok(PrefixMode::KvPerLayer),
            "input_prepend" => Ok(PrefixMode::InputPrepend),
            other => Err(ModelError::UnknownPrefixMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for PrefixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PrefixMode::KvPerLayer => "kv_per_layer",
            PrefixMode::InputPrepend => "input_prepend",
        };
        write!(f, "{name}")
    }
}

/// Per-stream trainable structure around the frozen backbone.
///
/// `rank = 0` means no adapters at all (bare backbone streams, distinguished
/// only by their prefixes). `shared_adapters` makes every stream read the
/// same adapter weights (the shared-LoRA ablation arm); prefixes are always
/// per-stream so streams remain distinguishable.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamConfig {
    pub streams: usize,
    pub rank: usize,
    pub targets: LoraTargets,
    pub n_prefix: usize,
    pub prefix_mode: PrefixMode,
    /// Label-smoothing floor of the aggregator weights.
    pub epsilon: f64,
    pub shared_adapters: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            streams: 4,
            rank: 8,
            targets: LoraTargets::All,
            n_prefix: 48,
            prefix_mode: PrefixMode::KvPerLayer,
            epsilon: 0.1,
            shared_adapters: false,
        }
    }
}

impl StreamConfig {
    /// A single bare stream: no adapters, no prefix, no aggregator. Used for
    /// backbone pretraining and the standard fine-tuning arm baseline.
    pub fn backbone_only() -> Self {
        StreamConfig {
            streams: 1,
            rank: 0,
            targets: LoraTargets::All,
            n_prefix: 0,
            prefix_mode: PrefixMode::KvPerLayer,
            epsilon: 0.1,
            shared_adapters: false,
        }
    }

    pub fn validate(&self, bb: &BackboneConfig) -> Result<(), ModelError> {
        if self.streams == 0 {
            return Err(ModelError::NoStreams);
        }
        if self.rank > bb.dim.min(bb.mlp_hidden) {
            return Err(ModelError::RankTooLarge {
                rank: self.rank,
                dim: bb.dim.min(bb.mlp_hidden),
            });
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(ModelError::BadEpsilon(self.epsilon));
        }
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.rank > 0
    }

    pub fn has_aggregator(&self) -> bool {
        self.streams > 1
    }

    /// Owner key of stream `i`'s adapters: "shared" collapses all streams
    /// onto one set of weights.
    pub fn adapter_owner(&self, i: usize) -> String {
        if self.shared_adapters {
            "shared".to_string()
        } else {
            format!("s{i}")
        }
    }
}
