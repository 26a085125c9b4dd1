//! Differentiable forward-graph construction for the parallel-stream
//! language model.
//!
//! The builder lays out, for a fixed batch/sequence size:
//!
//! - token + position embedding shared by all streams;
//! - P stream towers over the same frozen backbone weights, each with its
//!   own (or shared) LoRA deltas and its own prefix tokens;
//! - an optional corruption hook at the design layer that splices donor
//!   streams' activations into a target stream at chosen positions;
//! - the label-smoothed aggregator producing per-position stream weights;
//! - the LM head, per-position NLL, per-sample NLL, and mean cross-entropy.
//!
//! Every parameter is a named graph input, so evaluation binds the model's
//! tensors directly and `backward` yields gradients keyed by parameter name.

use crate::autodiff::{GraphBuilder, NodeId, Real, Tensor};

use super::config::{BackboneConfig, ModelError, PrefixMode, StreamConfig, TargetModule, RMS_EPS};
use super::params::parameter_specs;

/// Name of the token-id input tensor, shape (batch, seq).
pub const TOKENS_INPUT: &str = "tokens";
/// Name of the next-token target input tensor, shape (batch, seq).
pub const TARGETS_INPUT: &str = "targets";

/// Additive mask value for disallowed attention edges. Large enough that
/// softmax underflows to exactly zero in both precisions, small enough to
/// stay finite in f32.
const MASK_NEG: f64 = -1e9;

/// Splice plan for the corruption hook: at the design-layer tap, positions
/// where `keep` is 0 in the target stream are replaced by the same
/// positions of donor streams (selected per position by the 0/1 `donors`
/// masks). All masks have shape (batch, tap_len, 1).
#[derive(Debug, Clone)]
pub struct CorruptionPlan<T: Real> {
    pub target: usize,
    pub keep: Tensor<T>,
    pub donors: Vec<(usize, Tensor<T>)>,
}

/// Per-stream dropout masks applied to every adapter delta of that stream,
/// shape (batch, tap_len, 1), values 0 or 1/(1-rate).
#[derive(Debug, Clone)]
pub struct DropoutPlan<T: Real> {
    pub masks: Vec<Tensor<T>>,
}

/// Options for one forward-graph construction.
#[derive(Debug, Clone)]
pub struct ForwardOptions<T: Real> {
    pub batch: usize,
    pub seq: usize,
    /// Adds the `targets` input and the NLL/cross-entropy nodes.
    pub with_loss: bool,
    /// 1-indexed layer whose output is exported as the design-layer
    /// feature tap (and corruption site).
    pub design_layer: usize,
    pub corruption: Option<CorruptionPlan<T>>,
    pub adapter_dropout: Option<DropoutPlan<T>>,
}

impl<T: Real> ForwardOptions<T> {
    pub fn new(batch: usize, seq: usize, design_layer: usize) -> Self {
        ForwardOptions {
            batch,
            seq,
            with_loss: true,
            design_layer,
            corruption: None,
            adapter_dropout: None,
        }
    }
}

/// Node handles into a built forward graph.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    /// (batch, seq, vocab)
    pub logits: NodeId,
    /// Scalar mean cross-entropy, when built with loss.
    pub ce: Option<NodeId>,
    /// (batch, seq) per-position NLL, when built with loss.
    pub nll: Option<NodeId>,
    /// (batch,) per-sample mean NLL, when built with loss.
    pub sample_nll: Option<NodeId>,
    /// P nodes of shape (batch, seq, dim): design-layer features per
    /// stream, after any corruption splice, sliced to real positions.
    pub design_features: Vec<NodeId>,
    /// P nodes of shape (batch, seq, dim): final hidden states after the
    /// last normalization, the aggregator's inputs.
    pub final_hiddens: Vec<NodeId>,
    /// (batch, seq, streams) aggregation weights, when P >= 2.
    pub alpha: Option<NodeId>,
}

/// Sequence length the towers run at internally: input-prepended prefixes
/// extend the sequence, per-layer KV prefixes do not.
pub fn internal_seq_len(sc: &StreamConfig, seq: usize) -> usize {
    match sc.prefix_mode {
        PrefixMode::InputPrepend => seq + sc.n_prefix,
        PrefixMode::KvPerLayer => seq,
    }
}

struct ParamNodes {
    ids: std::collections::BTreeMap<String, NodeId>,
}

impl ParamNodes {
    fn get(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter node {name:?} not declared"))
    }
}

/// Builds the full forward graph for the given configs and options.
pub fn build_lm_graph<T: Real>(
    gb: &mut GraphBuilder<T>,
    bb: &BackboneConfig,
    sc: &StreamConfig,
    opts: &ForwardOptions<T>,
) -> Result<ForwardGraph, ModelError> {
    bb.validate()?;
    sc.validate(bb)?;
    let (batch, seq, p) = (opts.batch, opts.seq, sc.streams);
    if batch == 0 {
        return Err(ModelError::ZeroField { field: "batch" });
    }
    if seq == 0 {
        return Err(ModelError::ZeroField { field: "seq" });
    }
    let s_int = internal_seq_len(sc, seq);
    if s_int > bb.max_seq {
        return Err(ModelError::SequenceTooLong {
            got: s_int,
            max: bb.max_seq,
        });
    }
    if !(1..=bb.layers).contains(&opts.design_layer) {
        return Err(ModelError::BadDesignLayer {
            layer: opts.design_layer,
            layers: bb.layers,
        });
    }
    validate_plans(sc, opts, s_int)?;

    // Declare every parameter as a named input exactly once; shared
    // adapters are shared because all streams read the same node.
    let mut ids = std::collections::BTreeMap::new();
    for spec in parameter_specs(bb, sc) {
        let id = gb.input(&spec.name, &spec.shape)?;
        ids.insert(spec.name, id);
    }
    let params = ParamNodes { ids };

    let tokens = gb.input(TOKENS_INPUT, &[batch, seq])?;
    let targets = if opts.with_loss {
        Some(gb.input(TARGETS_INPUT, &[batch, seq])?)
    } else {
        None
    };

    // Shared token + position embedding at the real positions.
    let embed = gb.gather(params.get("bb.embed"), tokens)?; // (B, S, d)
    let dropout_masks: Option<Vec<NodeId>> = opts
        .adapter_dropout
        .as_ref()
        .map(|plan| {
            plan.masks
                .iter()
                .map(|m| gb.constant(m.clone()))
                .collect::<Vec<_>>()
        });

    // Per-stream input: prefix-prepended (InputPrepend) or the shared
    // embedding (KvPerLayer). Positions cover the internal length so the
    // prepended block has its own positions.
    let pos = gb.slice_axis(params.get("bb.pos"), 0, 0, s_int)?; // (S_int, d)
    let mut xs: Vec<NodeId> = Vec::with_capacity(p);
    for i in 0..p {
        let x0 = match sc.prefix_mode {
            PrefixMode::InputPrepend if sc.n_prefix > 0 => {
                let prefix = params.get(&format!("s{i}.prefix")); // (np, d)
                let prefix_b = gb.expand_leading(prefix, &[batch])?; // (B, np, d)
                gb.concat(&[prefix_b, embed], 1)?
            }
            _ => embed,
        };
        xs.push(gb.add(x0, pos)?);
    }

    // One causal mask for all layers and streams. Rows are query positions
    // (internal length), columns are key positions (internal length plus
    // any per-layer KV prefix block, which every query may attend to).
    let kv_prefix = match sc.prefix_mode {
        PrefixMode::KvPerLayer => sc.n_prefix,
        PrefixMode::InputPrepend => 0,
    };
    let mask = gb.constant(causal_mask::<T>(s_int, kv_prefix));

    let mut design_features: Vec<NodeId> = Vec::new();
    for l in 0..bb.layers {
        for i in 0..p {
            xs[i] = layer_forward(
                gb,
                bb,
                sc,
                &params,
                xs[i],
                l,
                i,
                batch,
                mask,
                dropout_masks.as_deref(),
            )?;
        }
        if l + 1 == opts.design_layer {
            if let Some(plan) = &opts.corruption {
                let spliced = splice_streams(gb, &xs, plan)?;
                xs[plan.target] = spliced;
            }
            design_features = xs.clone();
        }
    }

    // Final normalization per stream; slice away prepended positions so
    // everything downstream speaks in real positions.
    let rms_final = params.get("bb.rms_final");
    let mut final_hiddens = Vec::with_capacity(p);
    for &x in &xs {
        let normed = gb.rms_norm(x, RMS_EPS)?;
        let gained = gb.mul(normed, rms_final)?;
        final_hiddens.push(slice_real(gb, gained, s_int, seq)?);
    }
    design_features = design_features
        .into_iter()
        .map(|f| slice_real(gb, f, s_int, seq))
        .collect::<Result<Vec<_>, _>>()?;

    // Aggregation: label-smoothed per-position weights over streams.
    let (combined, alpha) = if sc.has_aggregator() {
        let cat = gb.concat(&final_hiddens, 2)?; // (B, S, P*d)
        let h1 = gb.matmul(cat, params.get("agg.w1"))?;
        let act = gb.silu(h1)?;
        let stream_logits = gb.matmul(act, params.get("agg.w2"))?; // (B, S, P)
        let alpha = smoothed_weights(gb, stream_logits, sc.epsilon, p)?;
        let mut combined = None;
        for (i, &h) in final_hiddens.iter().enumerate() {
            let a_i = gb.slice_axis(alpha, 2, i, 1)?; // (B, S, 1)
            let a_full = gb.broadcast_last(a_i, bb.dim)?;
            let weighted = gb.mul(a_full, h)?;
            combined = Some(match combined {
                None => weighted,
                Some(acc) => gb.add(acc, weighted)?,
            });
        }
        (combined.expect("p >= 2"), Some(alpha))
    } else {
        (final_hiddens[0], None)
    };

    let logits = gb.matmul(combined, params.get("bb.lm_head"))?; // (B, S, V)
    gb.output("logits", logits)?;
    if let Some(alpha) = alpha {
        gb.output("alpha", alpha)?;
    }
    for (i, &f) in design_features.iter().enumerate() {
        gb.output(&format!("design{i}"), f)?;
    }

    let (ce, nll, sample_nll) = if let Some(targets) = targets {
        let nll = gb.nll_rows(logits, targets)?; // (B, S)
        let sample_nll = gb.mean_axis(nll, 1)?; // (B,)
        let ce = gb.mean_all(nll)?;
        gb.output("nll", nll)?;
        gb.output("sample_nll", sample_nll)?;
        gb.output("ce", ce)?;
        (Some(ce), Some(nll), Some(sample_nll))
    } else {
        (None, None, None)
    };

    Ok(ForwardGraph {
        logits,
        ce,
        nll,
        sample_nll,
        design_features,
        final_hiddens,
        alpha,
    })
}

/// alpha = (1 - eps) * softmax(stream_logits) + eps/P over the last axis.
/// Exposed separately so the smoothing contract can be tested and
/// gradient-checked in isolation.
pub fn smoothed_weights<T: Real>(
    gb: &mut GraphBuilder<T>,
    stream_logits: NodeId,
    epsilon: f64,
    p: usize,
) -> Result<NodeId, ModelError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(ModelError::BadEpsilon(epsilon));
    }
    let sm = gb.softmax(stream_logits)?;
    let scaled = gb.scale(sm, 1.0 - epsilon)?;
    Ok(gb.add_scalar(scaled, epsilon / p as f64)?)
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Real>(
    gb: &mut GraphBuilder<T>,
    bb: &BackboneConfig,
    sc: &StreamConfig,
    params: &ParamNodes,
    x: NodeId,
    layer: usize,
    stream: usize,
    batch: usize,
    mask: NodeId,
    dropout_masks: Option<&[NodeId]>,
) -> Result<NodeId, ModelError> {
    let (d, h) = (bb.dim, bb.heads);
    let dh = bb.head_dim();
    let s_q = gb.shape(x)?[1];

    let rms1 = params.get(&format!("bb.layer{layer}.rms1"));
    let normed = gb.rms_norm(x, RMS_EPS)?;
    let xn1 = gb.mul(normed, rms1)?;

    let q = projected(gb, bb, sc, params, xn1, layer, stream, TargetModule::Query, dropout_masks)?;
    let mut k = projected(gb, bb, sc, params, xn1, layer, stream, TargetModule::Key, dropout_masks)?;
    let mut v = projected(gb, bb, sc, params, xn1, layer, stream, TargetModule::Value, dropout_masks)?;

    if sc.prefix_mode == PrefixMode::KvPerLayer && sc.n_prefix > 0 {
        let prefix = params.get(&format!("s{stream}.prefix")); // (L, 2, np, d)
        let layer_block = gb.slice_axis(prefix, 0, layer, 1)?; // (1, 2, np, d)
        let flat = gb.reshape(layer_block, &[2, sc.n_prefix, d])?;
        let pk = gb.slice_axis(flat, 0, 0, 1)?;
        let pk = gb.reshape(pk, &[sc.n_prefix, d])?;
        let pv = gb.slice_axis(flat, 0, 1, 1)?;
        let pv = gb.reshape(pv, &[sc.n_prefix, d])?;
        let pk_b = gb.expand_leading(pk, &[batch])?; // (B, np, d)
        let pv_b = gb.expand_leading(pv, &[batch])?;
        k = gb.concat(&[pk_b, k], 1)?; // (B, np + S, d)
        v = gb.concat(&[pv_b, v], 1)?;
    }

    let s_k = gb.shape(k)?[1];
    let q4 = heads_first(gb, q, batch, s_q, h, dh)?; // (B, H, S_q, dh)
    let k4 = heads_first(gb, k, batch, s_k, h, dh)?;
    let v4 = heads_first(gb, v, batch, s_k, h, dh)?;

    let raw_scores = gb.matmul_nt(q4, k4)?; // (B, H, S_q, S_k)
    let scores = gb.scale(raw_scores, 1.0 / (dh as f64).sqrt())?;
    let masked = gb.add(scores, mask)?;
    let probs = gb.softmax(masked)?;
    let ctx4 = gb.matmul(probs, v4)?; // (B, H, S_q, dh)
    let ctx = gb.swap_axes(ctx4, 1, 2)?;
    let ctx = gb.reshape(ctx, &[batch, s_q, d])?;
    let attn = projected(gb, bb, sc, params, ctx, layer, stream, TargetModule::OutProj, dropout_masks)?;
    let x = gb.add(x, attn)?;

    let rms2 = params.get(&format!("bb.layer{layer}.rms2"));
    let normed2 = gb.rms_norm(x, RMS_EPS)?;
    let xn2 = gb.mul(normed2, rms2)?;
    let gate = projected(gb, bb, sc, params, xn2, layer, stream, TargetModule::MlpGate, dropout_masks)?;
    let up = projected(gb, bb, sc, params, xn2, layer, stream, TargetModule::MlpUp, dropout_masks)?;
    let act = gb.silu(gate)?;
    let act = gb.mul(act, up)?;
    let down = projected(gb, bb, sc, params, act, layer, stream, TargetModule::MlpDown, dropout_masks)?;
    Ok(gb.add(x, down)?)
}

/// Base projection through the frozen weight, plus the stream's LoRA delta
/// (x A B / r) when the module is targeted, with optional dropout on the
/// delta.
#[allow(clippy::too_many_arguments)]
fn projected<T: Real>(
    gb: &mut GraphBuilder<T>,
    bb: &BackboneConfig,
    sc: &StreamConfig,
    params: &ParamNodes,
    x: NodeId,
    layer: usize,
    stream: usize,
    target: TargetModule,
    dropout_masks: Option<&[NodeId]>,
) -> Result<NodeId, ModelError> {
    let key = target.key();
    let base = gb.matmul(x, params.get(&format!("bb.layer{layer}.{key}")))?;
    if !sc.has_adapters() || !sc.targets.modules().contains(&target) {
        return Ok(base);
    }
    let owner = sc.adapter_owner(stream);
    let a = params.get(&format!("{owner}.layer{layer}.{key}.a"));
    let b = params.get(&format!("{owner}.layer{layer}.{key}.b"));
    let xa = gb.matmul(x, a)?;
    let xab = gb.matmul(xa, b)?;
    let mut delta = gb.scale(xab, 1.0 / sc.rank as f64)?;
    if let Some(masks) = dropout_masks {
        let (_, d_out) = target.dims(bb);
        let mask = gb.broadcast_last(masks[stream], d_out)?;
        delta = gb.mul(delta, mask)?;
    }
    Ok(gb.add(base, delta)?)
}

fn heads_first<T: Real>(
    gb: &mut GraphBuilder<T>,
    x: NodeId,
    batch: usize,
    s: usize,
    h: usize,
    dh: usize,
) -> Result<NodeId, ModelError> {
    let split = gb.reshape(x, &[batch, s, h, dh])?;
    Ok(gb.swap_axes(split, 1, 2)?)
}

/// Causal attention mask of shape (s, kv_prefix + s): every query sees the
/// whole prefix block plus itself and earlier real positions.
fn causal_mask<T: Real>(s: usize, kv_prefix: usize) -> Tensor<T> {
    let cols = kv_prefix + s;
    let mut data = vec![0.0f64; s * cols];
    for t in 0..s {
        for c in 0..cols {
            if c >= kv_prefix && c - kv_prefix > t {
                data[t * cols + c] = MASK_NEG;
            }
        }
    }
    Tensor::from_f64s(&[s, cols], &data).expect("shape matches data")
}

/// x_target' = keep .* x_target + sum_j sel_j .* x_j over donor streams.
fn splice_streams<T: Real>(
    gb: &mut GraphBuilder<T>,
    xs: &[NodeId],
    plan: &CorruptionPlan<T>,
) -> Result<NodeId, ModelError> {
    let d = *gb.shape(xs[plan.target])?.last().expect("rank 3");
    let keep = gb.constant(plan.keep.clone());
    let keep_full = gb.broadcast_last(keep, d)?;
    let mut out = gb.mul(keep_full, xs[plan.target])?;
    for (donor, sel) in &plan.donors {
        let sel = gb.constant(sel.clone());
        let sel_full = gb.broadcast_last(sel, d)?;
        let grafted = gb.mul(sel_full, xs[*donor])?;
        out = gb.add(out, grafted)?;
    }
    Ok(out)
}

fn slice_real<T: Real>(
    gb: &mut GraphBuilder<T>,
    x: NodeId,
    s_int: usize,
    seq: usize,
) -> Result<NodeId, ModelError> {
    if s_int == seq {
        Ok(x)
    } else {
        Ok(gb.slice_axis(x, 1, s_int - seq, seq)?)
    }
}

fn validate_plans<T: Real>(
    sc: &StreamConfig,
    opts: &ForwardOptions<T>,
    s_int: usize,
) -> Result<(), ModelError> {
    let expected = vec![opts.batch, s_int, 1];
    if let Some(plan) = &opts.corruption {
        if sc.streams < 2 {
            return Err(ModelError::CorruptionNeedsStreams);
        }
        if plan.target >= sc.streams {
            return Err(ModelError::BadCorruptionTarget {
                target: plan.target,
                streams: sc.streams,
            });
        }
        if plan.keep.shape() != expected.as_slice() {
            return Err(ModelError::CorruptionMaskShape {
                what: "keep".to_string(),
                got: plan.keep.shape().to_vec(),
                expected,
            });
        }
        for (donor, sel) in &plan.donors {
            if *donor >= sc.streams || *donor == plan.target {
                return Err(ModelError::BadCorruptionTarget {
                    target: *donor,
                    streams: sc.streams,
                });
            }
            if sel.shape() != expected.as_slice() {
                return Err(ModelError::CorruptionMaskShape {
                    what: format!("donor {donor}"),
                    got: sel.shape().to_vec(),
                    expected,
                });
            }
        }
    }
    if let Some(plan) = &opts.adapter_dropout {
        if plan.masks.len() != sc.streams {
            return Err(ModelError::DropoutMaskShape {
                stream: plan.masks.len(),
                got: vec![],
                expected,
            });
        }
        for (i, m) in plan.masks.iter().enumerate() {
            if m.shape() != expected.as_slice() {
                return Err(ModelError::DropoutMaskShape {
                    stream: i,
                    got: m.shape().to_vec(),
                    expected,
                });
            }
        }
    }
    Ok(())
}
