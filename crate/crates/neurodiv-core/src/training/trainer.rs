//! The train loop, backbone pretraining, and held-out evaluation.

use rand::Rng;

use crate::autodiff::{Graph, GraphBuilder, NodeId, Real, Tensor};
use crate::diversity::{
    decorrelation_loss, full_decorrelation_loss, sample_pairs, stream_diversity, FeatureSet,
    Normalization, STANDARDIZE_EPS, VARIANCE_FLOOR,
};
use crate::model::{
    build_lm_graph, internal_seq_len, BackboneConfig, DropoutPlan, ForwardGraph, ForwardOptions,
    NdModel, StreamConfig, TARGETS_INPUT, TOKENS_INPUT,
};
use crate::seeding::SeedTree;

use super::{
    apply_gradients, lr_at, AdamW, AdamWConfig, BtVariant, Corpus, Split, TrainConfig,
    TrainingError,
};

/// One logged row of the metrics trace. Columns that only exist for
/// multi-stream runs (decorrelation loss, diversity, aggregator weights)
/// are `None` for single-stream configurations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub bt: Option<f64>,
    pub total: f64,
    pub d_spec: Option<f64>,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
}

/// How a training run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// The loss went non-finite at `step`; the returned parameters are the
    /// last good snapshot, taken at `restored_step` (`None` = the initial
    /// parameters).
    AbortedNonFinite {
        step: usize,
        restored_step: Option<usize>,
    },
}

/// A finished (or aborted) training run.
#[derive(Debug)]
pub struct TrainOutcome<T: Real> {
    pub model: NdModel<T>,
    pub trace: Vec<TraceRow>,
    pub status: TrainStatus,
    /// Steps whose update was skipped because a gradient was non-finite.
    pub rejected_steps: Vec<usize>,
}

/// Held-out evaluation: mean cross-entropy and the per-sample negative
/// log-likelihood means it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ce: f64,
    pub sample_nll: Vec<f64>,
}

/// Pretraining schedule for the backbone. The learning rate may run hotter
/// than stream training since the backbone starts from scratch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch: 16,
            peak_lr: 1e-3,
            warmup_fraction: 0.02,
            log_every: 100,
        }
    }
}

/// A pretrained-and-frozen backbone plus the before/after evidence.
#[derive(Debug)]
pub struct PretrainOutcome<T: Real> {
    pub model: NdModel<T>,
    pub untrained_ce: f64,
    pub trained_ce: f64,
    pub trace: Vec<TraceRow>,
    pub rejected_steps: Vec<usize>,
}

fn scalar<T: Real>(t: &Tensor<T>) -> f64 {
    t.data()[0].to_f64()
}

/// One step's compute graph: forward, loss composition, and handles.
struct StepGraph<T: Real> {
    graph: Graph<T>,
    handles: ForwardGraph,
    total: NodeId,
    ce: NodeId,
    bt: Option<NodeId>,
}

fn build_step_graph<T: Real>(
    bb: &BackboneConfig,
    sc: &StreamConfig,
    cfg: &TrainConfig,
    dropout: Option<DropoutPlan<T>>,
    pairs: Option<&[(usize, usize)]>,
) -> Result<StepGraph<T>, TrainingError> {
    let mut gb = GraphBuilder::new();
    let mut opts = ForwardOptions::new(cfg.batch, cfg.seq, cfg.design_layer);
    opts.adapter_dropout = dropout;
    let handles = build_lm_graph(&mut gb, bb, sc, &opts)?;
    let ce = handles.ce.expect("loss requested");

    // The decorrelation term is always present in multi-stream graphs so the
    // trace can report it; it only joins the optimized objective when its
    // weight is positive, keeping lambda = 0 losses equal to CE exactly.
    let (total, bt) = if sc.streams >= 2 {
        let term = match pairs {
            Some(pairs) => {
                decorrelation_loss(&mut gb, &handles.design_features, pairs, STANDARDIZE_EPS)?
            }
            None => full_decorrelation_loss(&mut gb, &handles.design_features, STANDARDIZE_EPS)?,
        };
        let total = if cfg.lambda_bt > 0.0 {
            let scaled = gb.scale(term.loss, cfg.lambda_bt)?;
            gb.add(ce, scaled)?
        } else {
            ce
        };
        gb.output("bt", term.loss)?;
        (total, Some(term.loss))
    } else {
        (ce, None)
    };
    gb.output("total", total)?;
    Ok(StepGraph {
        graph: gb.finish(),
        handles,
        total,
        ce,
        bt,
    })
}

fn dropout_plan<T: Real>(
    streams: usize,
    batch: usize,
    tap_len: usize,
    rate: f64,
    tree: &SeedTree,
    step: usize,
) -> Result<DropoutPlan<T>, TrainingError> {
    let keep = 1.0 - rate;
    let mut masks = Vec::with_capacity(streams);
    for s in 0..streams {
        let mut rng = tree.rng_indexed("mask", (step * streams + s) as u64);
        let data: Vec<f64> = (0..batch * tap_len)
            .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        masks.push(Tensor::from_f64s(&[batch, tap_len, 1], &data)?);
    }
    Ok(DropoutPlan { masks })
}

/// Mean held-out cross-entropy over up to `max_samples` sequences (rounded
/// down to whole batches when the split is larger than one batch).
pub fn evaluate<T: Real>(
    model: &NdModel<T>,
    corpus: &Corpus,
    split: Split,
    batch: usize,
    max_samples: Option<usize>,
) -> Result<EvalReport, TrainingError> {
    if batch == 0 {
        return Err(TrainingError::ZeroField("eval batch"));
    }
    let available = corpus.len(split);
    let wanted = max_samples.unwrap_or(available).min(available);
    if wanted == 0 {
        return Err(TrainingError::ZeroField("eval samples"));
    }
    let seq = corpus.config().seq_len;
    let batch = batch.min(wanted);
    let count = (wanted / batch) * batch;

    let mut gb = GraphBuilder::new();
    let opts = ForwardOptions::<T>::new(batch, seq, 1);
    let handles = build_lm_graph(&mut gb, model.backbone_config(), model.stream_config(), &opts)?;
    let graph = gb.finish();
    let per_sample = handles.sample_nll.expect("loss requested");

    let mut sample_nll = Vec::with_capacity(count);
    for start in (0..count).step_by(batch) {
        let indices: Vec<usize> = (start..start + batch).collect();
        let (tokens, targets) = corpus.batch::<T>(split, &indices)?;
        let mut bindings = model.bindings();
        bindings.insert(TOKENS_INPUT.to_string(), &tokens);
        bindings.insert(TARGETS_INPUT.to_string(), &targets);
        let eval = graph.eval(&bindings)?;
        sample_nll.extend(eval.value(per_sample).data().iter().map(|v| v.to_f64()));
    }
    let ce = sample_nll.iter().sum::<f64>() / sample_nll.len() as f64;
    Ok(EvalReport { ce, sample_nll })
}

/// Train a fresh backbone on the corpus, then freeze it. This establishes
/// the "frozen competent backbone" regime that stream training starts from,
/// without any external checkpoint.
pub fn pretrain_backbone<T: Real>(
    bb: BackboneConfig,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome<T>, TrainingError> {
    if cfg.batch == 0 || cfg.log_every == 0 {
        return Err(TrainingError::ZeroField("pretrain batch/log_every"));
    }
    if !(0.0..=0.5).contains(&cfg.warmup_fraction) {
        return Err(TrainingError::BadWarmup(cfg.warmup_fraction));
    }
    let mut model = NdModel::<T>::build(bb, StreamConfig::backbone_only(), seed)?;
    let untrained_ce = evaluate(&model, corpus, Split::Eval, cfg.batch, None)?.ce;

    let seq = corpus.config().seq_len;
    let mut gb = GraphBuilder::new();
    let opts = ForwardOptions::<T>::new(cfg.batch, seq, 1);
    let handles = build_lm_graph(&mut gb, &bb, model.stream_config(), &opts)?;
    let graph = gb.finish();
    let ce_node = handles.ce.expect("loss requested");

    let tree = SeedTree::new(seed).child("pretrain");
    let mut optimizer = AdamW::new(AdamWConfig::default());
    let mut trace = Vec::new();
    let mut rejected = Vec::new();
    let train_len = corpus.len(Split::Train);

    for step in 0..cfg.steps {
        let mut rng = tree.rng_indexed("batch", step as u64);
        let indices: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.gen_range(0..train_len))
            .collect();
        let (tokens, targets) = corpus.batch::<T>(Split::Train, &indices)?;
        let mut bindings = model.bindings();
        bindings.insert(TOKENS_INPUT.to_string(), &tokens);
        bindings.insert(TARGETS_INPUT.to_string(), &targets);
        let eval = graph.eval(&bindings)?;
        let ce = scalar(eval.value(ce_node));
        if !ce.is_finite() {
            return Err(TrainingError::PretrainDiverged { step });
        }
        let lr = lr_at(step, cfg.steps, cfg.peak_lr, cfg.warmup_fraction);
        let grads = graph.backward(&eval, ce_node)?;
        match apply_gradients(&mut optimizer, &mut model, &grads, lr) {
            Ok(()) => {}
            Err(TrainingError::NonFiniteGradient(_)) => rejected.push(step),
            Err(e) => return Err(e),
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            trace.push(TraceRow {
                step,
                lr,
                ce,
                bt: None,
                total: ce,
                d_spec: None,
                alpha_min: None,
                alpha_max: None,
            });
        }
    }

    model.freeze_backbone();
    let trained_ce = evaluate(&model, corpus, Split::Eval, cfg.batch, None)?.ce;
    Ok(PretrainOutcome {
        model,
        untrained_ce,
        trained_ce,
        trace,
        rejected_steps: rejected,
    })
}

/// Train the stream parameters of a frozen-backbone model.
///
/// Deterministic given (config, corpus, model): batch order, pair sampling,
/// and dropout masks all derive from named substreams of `cfg.seed`. A
/// non-finite loss aborts the run and restores the last snapshot that
/// produced a finite loss; a non-finite gradient only rejects that step.
pub fn train<T: Real>(
    mut model: NdModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainingError> {
    cfg.validate()?;
    if !model.backbone_frozen() {
        return Err(TrainingError::BackboneNotFrozen);
    }
    let sc = *model.stream_config();
    if sc.streams != cfg.streams {
        return Err(TrainingError::StreamMismatch {
            model_streams: sc.streams,
            config_streams: cfg.streams,
        });
    }
    if corpus.config().seq_len != cfg.seq {
        return Err(TrainingError::SeqMismatch {
            corpus: corpus.config().seq_len,
            config: cfg.seq,
        });
    }
    let bb = *model.backbone_config();
    let tree = SeedTree::new(cfg.seed);
    let data_tree = tree.child("data");
    let randk_tree = tree.child("randk");
    let dropout_tree = tree.child("dropout");
    let mut optimizer = AdamW::new(AdamWConfig::default());
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut rejected: Vec<usize> = Vec::new();
    let train_len = corpus.len(Split::Train);
    let tap_len = internal_seq_len(&sc, cfg.seq);
    let with_dropout = cfg.dropout > 0.0 && sc.rank > 0;

    // The graph only changes across steps when it embeds step-specific
    // constants (dropout masks, sampled pairs); otherwise build it once.
    let is_static =
        !with_dropout && (sc.streams < 2 || matches!(cfg.bt_variant, BtVariant::Full));
    let cached = if is_static {
        Some(build_step_graph(&bb, &sc, cfg, None, None)?)
    } else {
        None
    };

    let initial = model.clone();
    let mut last_good: Option<(usize, NdModel<T>)> = None;

    for step in 0..cfg.steps {
        let mut rng = data_tree.rng_indexed("batch", step as u64);
        let indices: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.gen_range(0..train_len))
            .collect();
        let (tokens, targets) = corpus.batch::<T>(Split::Train, &indices)?;

        let fresh;
        let sg = match &cached {
            Some(graph) => graph,
            None => {
                let dropout = if with_dropout {
                    Some(dropout_plan(
                        sc.streams,
                        cfg.batch,
                        tap_len,
                        cfg.dropout,
                        &dropout_tree,
                        step,
                    )?)
                } else {
                    None
                };
                let pairs = match cfg.bt_variant {
                    BtVariant::Full => None,
                    BtVariant::RandK { pairs } => {
                        let mut prng = randk_tree.rng_indexed("pairs", step as u64);
                        Some(sample_pairs(sc.streams, pairs, &mut prng)?)
                    }
                };
                fresh = build_step_graph(&bb, &sc, cfg, dropout, pairs.as_deref())?;
                &fresh
            }
        };

        let mut bindings = model.bindings();
        bindings.insert(TOKENS_INPUT.to_string(), &tokens);
        bindings.insert(TARGETS_INPUT.to_string(), &targets);
        let eval = sg.graph.eval(&bindings)?;
        let ce = scalar(eval.value(sg.ce));
        let total = scalar(eval.value(sg.total));
        let bt = sg.bt.map(|id| scalar(eval.value(id)));
        if !total.is_finite() || !ce.is_finite() || bt.is_some_and(|b| !b.is_finite()) {
            let (restored_step, restored) = match last_good {
                Some((s, m)) => (Some(s), m),
                None => (None, initial),
            };
            return Ok(TrainOutcome {
                model: restored,
                trace,
                status: TrainStatus::AbortedNonFinite {
                    step,
                    restored_step,
                },
                rejected_steps: rejected,
            });
        }

        let lr = lr_at(step, cfg.steps, cfg.peak_lr, cfg.warmup_fraction);
        // Trace (and snapshot) before the update: the snapshot must hold
        // the parameters whose loss was just verified finite, not the
        // yet-unevaluated post-step state.
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let (d_spec, alpha_min, alpha_max) = if sc.streams >= 2 {
                let features: Vec<&Tensor<T>> = sg
                    .handles
                    .design_features
                    .iter()
                    .map(|&id| eval.value(id))
                    .collect();
                let set = FeatureSet::from_tensors(&features)?;
                let diversity = stream_diversity(
                    &set,
                    Normalization::Whiten,
                    VARIANCE_FLOOR,
                    tree.subseed_indexed("dspec", step as u64),
                )?;
                let alpha = eval.value(sg.handles.alpha.expect("multi-stream graph"));
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for a in alpha.data() {
                    let a = a.to_f64();
                    lo = lo.min(a);
                    hi = hi.max(a);
                }
                (Some(diversity.value), Some(lo), Some(hi))
            } else {
                (None, None, None)
            };
            trace.push(TraceRow {
                step,
                lr,
                ce,
                bt,
                total,
                d_spec,
                alpha_min,
                alpha_max,
            });
            last_good = Some((step, model.clone()));
        }

        let grads = sg.graph.backward(&eval, sg.total)?;
        match apply_gradients(&mut optimizer, &mut model, &grads, lr) {
            Ok(()) => {}
            Err(TrainingError::NonFiniteGradient(_)) => rejected.push(step),
            Err(e) => return Err(e),
        }
    }

    Ok(TrainOutcome {
        model,
        trace,
        status: TrainStatus::Completed,
        rejected_steps: rejected,
    })
}

/// Build a model around an already-trained backbone and train its stream
/// parameters. Stream initialization uses `cfg.seed`, so different seeds
/// give different stream inits over the same frozen backbone.
pub fn train_from_backbone<T: Real>(
    backbone: &NdModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainingError> {
    cfg.validate()?;
    let model = NdModel::with_backbone_from(
        *backbone.backbone_config(),
        cfg.stream_config(),
        cfg.seed,
        backbone,
    )?;
    train(model, corpus, cfg)
}
