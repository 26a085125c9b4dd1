//! Combined objective, optimizer, learning-rate schedule, synthetic corpus,
//! and the train loop that produces diverging-vs-collapsing stream
//! configurations.
//!
//! The pieces compose as: a [`Corpus`] supplies deterministic token batches,
//! [`build_lm_graph`](crate::model::build_lm_graph) plus a decorrelation term
//! forms the step objective, [`AdamW`] applies updates under the
//! [`lr_at`] schedule, and [`train`] drives the loop while recording a
//! metrics trace. [`pretrain_backbone`] produces the frozen backbone that
//! every stream configuration starts from.

mod corpus;
mod optim;
mod trainer;


pub use corpus::{Corpus, CorpusConfig, Sample, Split};
pub use optim::{apply_gradients, AdamW, AdamWConfig};
pub use trainer::{
    evaluate, pretrain_backbone, train, train_from_backbone, EvalReport, PretrainConfig,
    PretrainOutcome, TraceRow, TrainOutcome, TrainStatus,
};

use crate::autodiff::AutodiffError;
use crate::diversity::DiversityError;
use crate::model::{LoraTargets, ModelError, PrefixMode, StreamConfig};

/// Errors from corpus construction, optimization, and the train loop.
#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("warmup fraction {0} outside [0, 0.5]")]
    BadWarmup(f64),
    #[error("decorrelation weight {0} must be >= 0")]
    BadLambda(f64),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("{0} must be nonzero")]
    ZeroField(&'static str),
    #[error("corpus split {split:?} has {len} samples; index {index} out of range")]
    SampleOutOfRange {
        split: Split,
        len: usize,
        index: usize,
    },
    #[error("randk pair budget {pairs} exceeds the {available} distinct pairs of {streams} streams")]
    PairBudget {
        pairs: usize,
        available: usize,
        streams: usize,
    },
    #[error("optimizer update for {key}: value has {value_len} elements, gradient {grad_len}")]
    GradientShape {
        key: String,
        value_len: usize,
        grad_len: usize,
    },
    #[error("optimizer update before begin_step")]
    UpdateBeforeBeginStep,
    #[error("non-finite gradient for {0}; step rejected")]
    NonFiniteGradient(String),
    #[error("no gradient produced for trainable parameter {0}")]
    MissingGradient(String),
    #[error("training requires a frozen backbone; call freeze_backbone or pretrain first")]
    BackboneNotFrozen,
    #[error("model was built for {model_streams} streams but the config asks for {config_streams}")]
    StreamMismatch {
        model_streams: usize,
        config_streams: usize,
    },
    #[error("corpus sequences are {corpus} tokens but the config trains at {config}")]
    SeqMismatch { corpus: usize, config: usize },
    #[error("pretraining diverged at step {step}: non-finite loss")]
    PretrainDiverged { step: usize },
    #[error("unknown decorrelation variant {0:?} (expected full or randk:K)")]
    BadBtVariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
}

/// How the decorrelation term is assembled each step: every stream pair, or
/// a fresh uniform sample of `pairs` distinct pairs per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BtVariant {
    Full,
    RandK { pairs: usize },
}

impl std::fmt::Display for BtVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BtVariant::Full => write!(f, "full"),
            BtVariant::RandK { pairs } => write!(f, "randk:{pairs}"),
        }
    }
}

impl std::str::FromStr for BtVariant {
    type Err = TrainingError;

    fn from_str(s: &str) -> Result<Self, TrainingError> {
        if s == "full" {
            Ok(BtVariant::Full)
        } else if let Some(k) = s.strip_prefix("randk:") {
            k.parse()
                .map(|pairs| BtVariant::RandK { pairs })
                .map_err(|_| TrainingError::BadBtVariant(s.to_string()))
        } else {
            Err(TrainingError::BadBtVariant(s.to_string()))
        }
    }
}

/// Full recipe for one training run: stream layout, objective weights,
/// schedule, and batch geometry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Number of parallel streams P.
    pub streams: usize,
    /// Low-rank adapter rank; 0 disables adapters.
    pub rank: usize,
    /// Which projection matrices receive adapters.
    pub targets: LoraTargets,
    /// One adapter set shared by all streams instead of per-stream sets.
    pub shared_adapters: bool,
    /// Per-stream prefix length.
    pub n_prefix: usize,
    /// How prefixes enter the computation.
    pub prefix_mode: PrefixMode,
    /// Aggregator smoothing floor ε.
    pub epsilon: f64,
    /// 1-indexed layer whose output feeds the decorrelation term.
    pub design_layer: usize,
    /// Weight λ of the decorrelation term in the total loss.
    pub lambda_bt: f64,
    /// Pair selection for the decorrelation term.
    pub bt_variant: BtVariant,
    /// Dropout rate on adapter outputs (the dropout-only ablation arm).
    pub dropout: f64,
    /// Peak learning rate reached at the end of warmup.
    pub peak_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Total optimization steps.
    pub steps: usize,
    /// Sequences per batch.
    pub batch: usize,
    /// Tokens per sequence.
    pub seq: usize,
    /// Trace-row cadence in steps.
    pub log_every: usize,
    /// Root seed for batch order, pair sampling, dropout, and stream init.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            streams: 4,
            rank: 8,
            targets: LoraTargets::All,
            shared_adapters: false,
            n_prefix: 48,
            prefix_mode: PrefixMode::KvPerLayer,
            epsilon: 0.1,
            design_layer: 3,
            lambda_bt: 0.01,
            bt_variant: BtVariant::Full,
            dropout: 0.0,
            peak_lr: 3e-4,
            warmup_fraction: 0.02,
            steps: 2000,
            batch: 16,
            seq: 128,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(0.0..=0.5).contains(&self.warmup_fraction) {
            return Err(TrainingError::BadWarmup(self.warmup_fraction));
        }
        if !self.lambda_bt.is_finite() || self.lambda_bt < 0.0 {
            return Err(TrainingError::BadLambda(self.lambda_bt));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainingError::BadDropout(self.dropout));
        }
        for (value, name) in [
            (self.batch, "batch"),
            (self.seq, "seq"),
            (self.log_every, "log_every"),
            (self.streams, "streams"),
        ] {
            if value == 0 {
                return Err(TrainingError::ZeroField(name));
            }
        }
        if let BtVariant::RandK { pairs } = self.bt_variant {
            let available = crate::diversity::full_pair_count(self.streams);
            if pairs == 0 {
                return Err(TrainingError::ZeroField("bt_variant randk pairs"));
            }
            if pairs > available {
                return Err(TrainingError::PairBudget {
                    pairs,
                    available,
                    streams: self.streams,
                });
            }
        }
        Ok(())
    }

    /// The stream layout this recipe trains.
    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            streams: self.streams,
            rank: self.rank,
            targets: self.targets,
            n_prefix: self.n_prefix,
            prefix_mode: self.prefix_mode,
            epsilon: self.epsilon,
            shared_adapters: self.shared_adapters,
        }
    }
}

/// The ablation arms: which stream layout and regularizer a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Arm {
    /// Single adapted stream, no aggregator, no decorrelation.
    Standard,
    /// One shared adapter set across streams (prefixes still per-stream).
    ParScale,
    /// Shared adapters plus the decorrelation term.
    ParScaleBt,
    /// Independent per-stream adapters, no decorrelation.
    StreamLora,
    /// Independent per-stream adapters plus the decorrelation term.
    NdLora,
    /// Independent adapters regularized by dropout instead of decorrelation.
    StreamDropout,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Standard,
        Arm::ParScale,
        Arm::ParScaleBt,
        Arm::StreamLora,
        Arm::NdLora,
        Arm::StreamDropout,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Arm::Standard => "standard",
            Arm::ParScale => "parscale",
            Arm::ParScaleBt => "parscale_bt",
            Arm::StreamLora => "stream",
            Arm::NdLora => "ndlora",
            Arm::StreamDropout => "dropout",
        }
    }

    /// Specialize a base recipe to this arm. Stream count, rank, schedule,
    /// and batch geometry come from the base; the arm decides adapter
    /// sharing, decorrelation weight, and dropout.
    pub fn configure(&self, base: &TrainConfig) -> TrainConfig {
        let lambda = if base.lambda_bt > 0.0 {
            base.lambda_bt
        } else {
            0.01
        };
        let dropout = if base.dropout > 0.0 { base.dropout } else { 0.1 };
        let mut cfg = *base;
        cfg.shared_adapters = false;
        cfg.lambda_bt = 0.0;
        cfg.dropout = 0.0;
        match self {
            Arm::Standard => cfg.streams = 1,
            Arm::ParScale => cfg.shared_adapters = true,
            Arm::ParScaleBt => {
                cfg.shared_adapters = true;
                cfg.lambda_bt = lambda;
            }
            Arm::StreamLora => {}
            Arm::NdLora => cfg.lambda_bt = lambda,
            Arm::StreamDropout => cfg.dropout = dropout,
        }
        cfg
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Arm::Standard),
            "parscale" => Ok(Arm::ParScale),
            "parscale_bt" => Ok(Arm::ParScaleBt),
            "stream" => Ok(Arm::StreamLora),
            "ndlora" => Ok(Arm::NdLora),
            "dropout" => Ok(Arm::StreamDropout),
            other => Err(format!(
                "unknown arm {other:?}; expected one of standard, parscale, \
                 parscale_bt, stream, ndlora, dropout"
            )),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Learning rate at a 0-based step: linear warmup from 0 to `peak_lr` over
/// `warmup_fraction` of `total_steps`, then cosine decay to 0 at the end.
/// Continuous at the junction and nonnegative everywhere.
pub fn lr_at(step: usize, total_steps: usize, peak_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let total = total_steps as f64;
    let warmup = warmup_fraction * total;
    let s = (step as f64).min(total);
    if s < warmup {
        peak_lr * s / warmup
    } else {
        let t = if total > warmup {
            (s - warmup) / (total - warmup)
        } else {
            1.0
        };
        peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
