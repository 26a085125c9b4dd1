//! Training-step cost arithmetic: per-variant unit breakdowns, factors
//! relative to the single-stream baseline, and amortization of the
//! fine-tuning bill over a pretraining budget.
//!
//! Costs are expressed in units of one forward pass through the full
//! backbone. The central observation is that with a frozen backbone the
//! backward pass only has to traverse the trainable slice, so running P
//! parallel streams costs far less than P times the standard recipe.

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("stream count must be at least 1")]
    NoStreams,
    #[error("trainable fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("{0} must be finite and nonnegative, got {1}")]
    BadUnits(&'static str, f64),
    #[error("{0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
}

/// One forward plus the conventional two-units backward: the standard
/// full-model fine-tuning step every relative factor is measured against.
pub const BASELINE_TOTAL: f64 = 3.0;

/// The reference deployment behind the pinned table: a 495M-parameter
/// frozen backbone carrying 1.3M trainable adapter parameters.
pub const REFERENCE_BACKBONE_PARAMS: f64 = 495e6;
pub const REFERENCE_TRAINABLE_PARAMS: f64 = 1.3e6;

/// Extra per-step work beyond forward/backward: the decorrelation term's
/// cross-correlation pass and the prefix/aggregator bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OverheadSpec {
    pub bt: f64,
    pub other: f64,
}

impl OverheadSpec {
    pub const NONE: OverheadSpec = OverheadSpec { bt: 0.0, other: 0.0 };
}

/// Per-variant training-step cost, in forward-pass units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariantCost {
    /// P full forward passes.
    pub forward: f64,
    /// Two backward units scaled by the trainable fraction.
    pub backward: f64,
    /// Decorrelation-term overhead.
    pub bt: f64,
    /// Prefix/aggregator overhead.
    pub other: f64,
    /// Sum of the four components.
    pub total: f64,
    /// total / 3.0, the factor over the standard baseline.
    pub relative: f64,
}

/// Cost of one training step for a variant running `streams` parallel
/// forward passes where only `trainable_fraction` of the parameters
/// receive gradients.
pub fn variant_cost(
    streams: usize,
    trainable_fraction: f64,
    overhead: OverheadSpec,
) -> Result<VariantCost, CostError> {
    if streams == 0 {
        return Err(CostError::NoStreams);
    }
    if !trainable_fraction.is_finite() || !(0.0..=1.0).contains(&trainable_fraction)
        || trainable_fraction == 0.0
    {
        return Err(CostError::BadFraction(trainable_fraction));
    }
    for (name, value) in [("bt units", overhead.bt), ("other units", overhead.other)] {
        if !value.is_finite() || value < 0.0 {
            return Err(CostError::BadUnits(name, value));
        }
    }
    let forward = streams as f64;
    let backward = 2.0 * trainable_fraction;
    let total = forward + backward + overhead.bt + overhead.other;
    Ok(VariantCost {
        forward,
        backward,
        bt: overhead.bt,
        other: overhead.other,
        total,
        relative: total / BASELINE_TOTAL,
    })
}

/// A named row of the standard cost table.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostTableRow {
    pub variant: &'static str,
    pub cost: VariantCost,
}

/// The five-variant reference table at P = 4: the shared-adapter recipe
/// with and without its cheap decorrelation pass, independent per-stream
/// adapters, and the full method with the O(P^2) decorrelation term.
pub fn standard_table() -> Vec<CostTableRow> {
    let fraction = REFERENCE_TRAINABLE_PARAMS / REFERENCE_BACKBONE_PARAMS;
    let rows: [(&'static str, usize, f64, OverheadSpec); 5] = [
        ("standard", 1, 1.0, OverheadSpec::NONE),
        ("parscale", 4, fraction, OverheadSpec { bt: 0.0, other: 0.01 }),
        ("parscale_bt", 4, fraction, OverheadSpec { bt: 0.1, other: 0.05 }),
        ("stream", 4, fraction, OverheadSpec { bt: 0.0, other: 0.05 }),
        ("ndlora", 4, fraction, OverheadSpec { bt: 1.6, other: 0.05 }),
    ];
    rows.into_iter()
        .map(|(variant, p, f, overhead)| CostTableRow {
            variant,
            cost: variant_cost(p, f, overhead).expect("reference rows are valid"),
        })
        .collect()
}

/// Whole-lifecycle cost factor: pretraining plus a fine-tuning run at
/// `relative` times baseline cost, normalized by pretraining alone.
pub fn amortized_cost(
    pretrain_tokens: f64,
    finetune_tokens: f64,
    relative: f64,
) -> Result<f64, CostError> {
    if !pretrain_tokens.is_finite() || pretrain_tokens <= 0.0 {
        return Err(CostError::NonPositive("pretrain tokens", pretrain_tokens));
    }
    if !finetune_tokens.is_finite() || finetune_tokens < 0.0 {
        return Err(CostError::BadUnits("finetune tokens", finetune_tokens));
    }
    if !relative.is_finite() || relative <= 0.0 {
        return Err(CostError::NonPositive("relative factor", relative));
    }
    Ok((pretrain_tokens + finetune_tokens * relative) / pretrain_tokens)
}
