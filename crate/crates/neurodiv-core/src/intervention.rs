//! Corruption-hook causal experiment: paired baseline-vs-corrupted
//! evaluations on identical samples, per-sub-experiment paired t-tests, a
//! template multiple-choice probe scored by McNemar's test, bootstrap
//! confirmation, and Fisher meta-analysis across sub-experiments.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AutodiffError, Graph, GraphBuilder, Real, Tensor};
use crate::diversity::{
    stream_diversity, DiversityError, FeatureSet, Normalization, VARIANCE_FLOOR,
};
use crate::model::{
    build_lm_graph, internal_seq_len, CorruptionPlan, ForwardGraph, ForwardOptions, ModelError,
    NdModel, TARGETS_INPUT, TOKENS_INPUT,
};
use crate::seeding::SeedTree;
use crate::stats::{self, StatsError};
use crate::training::{Corpus, Sample, Split, TrainingError};

#[derive(Debug, thiserror::Error)]
pub enum InterventionError {
    #[error("corruption requires at least two streams, got {0}")]
    NeedsMultipleStreams(usize),
    #[error("substitution fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("corruption target {target} out of range for {streams} streams")]
    BadTarget { target: usize, streams: usize },
    #[error("{0} must be nonzero")]
    ZeroField(&'static str),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// The corruption experiment's design: how hard to corrupt, where to tap
/// the streams, and how many paired sub-experiments to run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorruptionConfig {
    /// Probability that a token position of the target stream is replaced.
    pub fraction: f64,
    /// 1-indexed layer whose output is spliced (the same tap the
    /// decorrelation term trains on).
    pub design_layer: usize,
    /// Number of independent sub-experiments (Fisher dof is twice this).
    pub subexperiments: usize,
    /// Paired samples per sub-experiment.
    pub samples: usize,
    /// Sequences per forward pass.
    pub batch: usize,
    /// Resamples for the bootstrap confirmation test.
    pub bootstrap_resamples: usize,
    /// Same sample indices in both arms (the paired design). When false,
    /// the corrupted arm draws its own indices.
    pub paired: bool,
    /// Root seed: sample draws, masks, and resampling all derive from it.
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            fraction: 0.25,
            design_layer: 3,
            subexperiments: 4,
            samples: 128,
            batch: 16,
            bootstrap_resamples: 10_000,
            paired: true,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), InterventionError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(InterventionError::BadFraction(self.fraction));
        }
        for (value, name) in [
            (self.subexperiments, "subexperiments"),
            (self.samples, "samples"),
            (self.batch, "batch"),
            (self.bootstrap_resamples, "bootstrap_resamples"),
        ] {
            if value == 0 {
                return Err(InterventionError::ZeroField(name));
            }
        }
        if self.samples < 2 {
            return Err(InterventionError::ZeroField("samples (need at least 2)"));
        }
        Ok(())
    }
}

/// Multiple-choice probe outcome for one sub-experiment: per-arm correct
/// counts and McNemar's test on the discordant pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub baseline_correct: usize,
    pub corrupted_correct: usize,
    /// Baseline right, corrupted wrong.
    pub b: u64,
    /// Baseline wrong, corrupted right.
    pub c: u64,
    pub p: f64,
    /// No discordant pairs: p pinned to 1.
    pub degenerate: bool,
}

/// One paired sub-experiment: per-sample scores for both arms, the
/// diversity shift, and the test statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SubExperimentResult {
    pub index: usize,
    pub n: usize,
    pub target_stream: usize,
    pub baseline_scores: Vec<f64>,
    pub corrupted_scores: Vec<f64>,
    /// corrupted - baseline, per sample.
    pub deltas: Vec<f64>,
    pub baseline_d_spec: f64,
    pub corrupted_d_spec: f64,
    pub delta_d_spec: f64,
    pub mean_delta: f64,
    pub t: f64,
    pub p: f64,
    /// Zero-variance deltas: t undefined, p pinned to 1.
    pub degenerate: bool,
    /// Standardized effect size mean/sd of the deltas (0 when degenerate).
    pub cohen_d: f64,
    pub bootstrap_p: f64,
    pub probe: ProbeResult,
}

/// The whole experiment: sub-experiments plus their Fisher combination.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedResult {
    pub subexperiments: Vec<SubExperimentResult>,
    /// Pooled mean of all per-sample deltas.
    pub mean_delta: f64,
    /// Mean of the per-sub-experiment diversity shifts.
    pub mean_delta_d_spec: f64,
    pub chi2: f64,
    pub dof: u64,
    pub p: f64,
}

/// Bernoulli substitution masks over real token positions: each selected
/// position of the target stream is replaced by the same position of a
/// uniformly drawn other stream. Values are copied, never rescaled, so
/// activation magnitudes are preserved by construction. Prefix rows of
/// input-prepended prefixes are never corrupted. A zero fraction yields a
/// donor-free plan whose splice is exactly the identity.
pub fn corruption_plan<T: Real, R: Rng + ?Sized>(
    streams: usize,
    target: usize,
    batch: usize,
    seq: usize,
    prefix_rows: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<CorruptionPlan<T>, InterventionError> {
    if streams < 2 {
        return Err(InterventionError::NeedsMultipleStreams(streams));
    }
    if target >= streams {
        return Err(InterventionError::BadTarget { target, streams });
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(InterventionError::BadFraction(fraction));
    }
    if batch == 0 || seq == 0 {
        return Err(InterventionError::ZeroField("corruption batch/seq"));
    }
    let tap = prefix_rows + seq;
    let mut keep = vec![1.0f64; batch * tap];
    let mut donor_masks = vec![vec![0.0f64; batch * tap]; streams];
    if fraction > 0.0 {
        for b in 0..batch {
            for pos in 0..seq {
                if rng.gen_bool(fraction) {
                    let row = b * tap + prefix_rows + pos;
                    keep[row] = 0.0;
                    let mut donor = rng.gen_range(0..streams - 1);
                    if donor >= target {
                        donor += 1;
                    }
                    donor_masks[donor][row] = 1.0;
                }
            }
        }
    }
    let shape = [batch, tap, 1];
    let donors = donor_masks
        .into_iter()
        .enumerate()
        .filter(|(j, mask)| *j != target && mask.iter().any(|&v| v != 0.0))
        .map(|(j, mask)| Ok((j, Tensor::from_f64s(&shape, &mask)?)))
        .collect::<Result<Vec<_>, AutodiffError>>()?;
    Ok(CorruptionPlan {
        target,
        keep: Tensor::from_f64s(&shape, &keep)?,
        donors,
    })
}

/// Per-arm evaluation products for one sub-experiment.
struct ArmOutcome {
    scores: Vec<f64>,
    correct: Vec<bool>,
    /// Per stream, flattened (samples * seq, dim) design features.
    features: Vec<Vec<f64>>,
}

fn batch_tensors<T: Real>(
    samples: &[Sample],
    seq: usize,
) -> Result<(Tensor<T>, Tensor<T>), AutodiffError> {
    let mut tokens = Vec::with_capacity(samples.len() * seq);
    let mut targets = Vec::with_capacity(samples.len() * seq);
    for sample in samples {
        tokens.extend(sample.tokens.iter().map(|&t| t as f64));
        targets.extend(sample.targets.iter().map(|&t| t as f64));
    }
    let shape = [samples.len(), seq];
    Ok((
        Tensor::from_f64s(&shape, &tokens)?,
        Tensor::from_f64s(&shape, &targets)?,
    ))
}

/// Multiple-choice correctness at the probe position: among the byte each
/// template would place there, did the model's logits rank the true
/// template's byte highest?
fn probe_correct<T: Real>(
    logits: &Tensor<T>,
    row: usize,
    probe_pos: usize,
    vocab: usize,
    seq: usize,
    corpus: &Corpus,
    sample: &Sample,
) -> bool {
    let truth = corpus.template(sample.template)
        [(sample.phase + probe_pos) % corpus.config().template_len];
    let base = row * seq * vocab + probe_pos * vocab;
    let mut best_byte = 0u8;
    let mut best_logit = f64::NEG_INFINITY;
    for t in 0..corpus.template_count() {
        let candidate =
            corpus.template(t)[(sample.phase + probe_pos) % corpus.config().template_len];
        let logit = logits.data()[base + candidate as usize].to_f64();
        if logit > best_logit {
            best_logit = logit;
            best_byte = candidate;
        }
    }
    best_byte == truth
}

fn eval_arm<T: Real>(
    model: &NdModel<T>,
    corpus: &Corpus,
    cfg: &CorruptionConfig,
    indices: &[usize],
    target: usize,
    corrupt: bool,
    mask_tree: &SeedTree,
    subexp: usize,
) -> Result<ArmOutcome, InterventionError> {
    let sc = *model.stream_config();
    let bb = *model.backbone_config();
    let seq = corpus.config().seq_len;
    let prefix_rows = internal_seq_len(&sc, seq) - seq;
    let probe_pos = seq.saturating_sub(2);

    let mut scores = Vec::with_capacity(indices.len());
    let mut correct = Vec::with_capacity(indices.len());
    let mut features: Vec<Vec<f64>> = vec![Vec::new(); sc.streams];
    // A corruption-free graph only depends on the chunk size; cache it.
    let mut clean_graphs: Vec<(usize, Graph<T>, ForwardGraph)> = Vec::new();

    for (chunk_id, chunk) in indices.chunks(cfg.batch).enumerate() {
        let samples: Vec<Sample> = chunk
            .iter()
            .map(|&i| corpus.sample(Split::Eval, i))
            .collect::<Result<_, _>>()?;
        let (tokens, targets) = batch_tensors::<T>(&samples, seq)?;

        let built;
        let (graph, handles) = if corrupt {
            let mut rng = mask_tree.rng_indexed(
                "mask",
                (subexp * (indices.len() / cfg.batch + 2) + chunk_id) as u64,
            );
            let plan = corruption_plan::<T, _>(
                sc.streams,
                target,
                chunk.len(),
                seq,
                prefix_rows,
                cfg.fraction,
                &mut rng,
            )?;
            let mut gb = GraphBuilder::new();
            let mut opts = ForwardOptions::new(chunk.len(), seq, cfg.design_layer);
            opts.corruption = Some(plan);
            let handles = build_lm_graph(&mut gb, &bb, &sc, &opts)?;
            built = (gb.finish(), handles);
            (&built.0, &built.1)
        } else if let Some(entry) = clean_graphs.iter().find(|(n, _, _)| *n == chunk.len()) {
            (&entry.1, &entry.2)
        } else {
            let mut gb = GraphBuilder::new();
            let opts = ForwardOptions::<T>::new(chunk.len(), seq, cfg.design_layer);
            let handles = build_lm_graph(&mut gb, &bb, &sc, &opts)?;
            clean_graphs.push((chunk.len(), gb.finish(), handles));
            let entry = clean_graphs.last().unwrap();
            (&entry.1, &entry.2)
        };

        let mut bindings = model.bindings();
        bindings.insert(TOKENS_INPUT.to_string(), &tokens);
        bindings.insert(TARGETS_INPUT.to_string(), &targets);
        let eval = graph.eval(&bindings)?;

        let sample_nll = eval.value(handles.sample_nll.expect("loss requested"));
        scores.extend(sample_nll.data().iter().map(|v| (-v.to_f64()).exp()));
        let logits = eval.value(handles.logits);
        for (row, sample) in samples.iter().enumerate() {
            correct.push(probe_correct(
                logits, row, probe_pos, bb.vocab, seq, corpus, sample,
            ));
        }
        for (i, &node) in handles.design_features.iter().enumerate() {
            features[i].extend(eval.value(node).data().iter().map(|v| v.to_f64()));
        }
    }
    Ok(ArmOutcome {
        scores,
        correct,
        features,
    })
}

/// Run the full paired corruption experiment on a multi-stream model.
///
/// Both arms of every sub-experiment evaluate identical samples (when
/// `paired`); the corrupted arm splices the target stream's design-layer
/// output per [`corruption_plan`]. Scores are exp(-CE) per sample; each
/// sub-experiment reports a paired t-test, a bootstrap confirmation, the
/// probe's McNemar test, and the diversity shift, and the t-test p-values
/// combine Fisher-style with dof = 2 x sub-experiments.
pub fn paired_eval<T: Real>(
    model: &NdModel<T>,
    corpus: &Corpus,
    cfg: &CorruptionConfig,
) -> Result<PairedResult, InterventionError> {
    cfg.validate()?;
    let sc = *model.stream_config();
    if sc.streams < 2 {
        return Err(InterventionError::NeedsMultipleStreams(sc.streams));
    }
    let eval_len = corpus.len(Split::Eval);
    if eval_len == 0 {
        return Err(InterventionError::EmptyEvalSet);
    }
    let seq = corpus.config().seq_len;
    let d = model.backbone_config().dim;

    let root = SeedTree::new(cfg.seed);
    let corr_tree = root.child("corruption");
    let boot_tree = root.child("bootstrap");

    let mut subexperiments = Vec::with_capacity(cfg.subexperiments);
    let mut all_deltas = Vec::new();
    let mut t_test_pvalues = Vec::with_capacity(cfg.subexperiments);

    for e in 0..cfg.subexperiments {
        let mut idx_rng = corr_tree.rng_indexed("samples", e as u64);
        let base_indices: Vec<usize> = (0..cfg.samples)
            .map(|_| idx_rng.gen_range(0..eval_len))
            .collect();
        let corr_indices = if cfg.paired {
            base_indices.clone()
        } else {
            let mut rng = corr_tree.rng_indexed("unpaired", e as u64);
            (0..cfg.samples)
                .map(|_| rng.gen_range(0..eval_len))
                .collect()
        };
        let target = e % sc.streams;

        let baseline = eval_arm(model, corpus, cfg, &base_indices, target, false, &corr_tree, e)?;
        let corrupted = eval_arm(model, corpus, cfg, &corr_indices, target, true, &corr_tree, e)?;

        let n_rows = cfg.samples * seq;
        let base_set = FeatureSet::new(baseline.features, n_rows, d)?;
        let corr_set = FeatureSet::new(corrupted.features, n_rows, d)?;
        // Both arms share the diversity seed so that identical features
        // yield an exactly-zero shift (the seed only starts the spectral
        // power iteration).
        let dspec_seed = corr_tree.subseed_indexed("dspec", e as u64);
        let baseline_d_spec =
            stream_diversity(&base_set, Normalization::Whiten, VARIANCE_FLOOR, dspec_seed)?.value;
        let corrupted_d_spec =
            stream_diversity(&corr_set, Normalization::Whiten, VARIANCE_FLOOR, dspec_seed)?.value;

        let t_test = stats::paired_t_test(&corrupted.scores, &baseline.scores)?;
        let deltas: Vec<f64> = corrupted
            .scores
            .iter()
            .zip(&baseline.scores)
            .map(|(c, b)| c - b)
            .collect();
        let mut boot_rng = boot_tree.rng_indexed("subexp", e as u64);
        let bootstrap =
            stats::bootstrap_paired_p(&deltas, cfg.bootstrap_resamples, &mut boot_rng)?;

        let mut b_count = 0u64;
        let mut c_count = 0u64;
        let mut baseline_correct = 0usize;
        let mut corrupted_correct = 0usize;
        for (&bc, &cc) in baseline.correct.iter().zip(&corrupted.correct) {
            baseline_correct += bc as usize;
            corrupted_correct += cc as usize;
            match (bc, cc) {
                (true, false) => b_count += 1,
                (false, true) => c_count += 1,
                _ => {}
            }
        }
        let mcnemar = stats::mcnemar_test(b_count, c_count)?;

        let cohen_d = if t_test.degenerate {
            0.0
        } else {
            t_test.mean_delta / t_test.sd_delta
        };
        all_deltas.extend_from_slice(&deltas);
        t_test_pvalues.push(t_test.p);
        subexperiments.push(SubExperimentResult {
            index: e,
            n: cfg.samples,
            target_stream: target,
            baseline_scores: baseline.scores,
            corrupted_scores: corrupted.scores,
            deltas,
            baseline_d_spec,
            corrupted_d_spec,
            delta_d_spec: corrupted_d_spec - baseline_d_spec,
            mean_delta: t_test.mean_delta,
            t: t_test.t,
            p: t_test.p,
            degenerate: t_test.degenerate,
            cohen_d,
            bootstrap_p: bootstrap.p,
            probe: ProbeResult {
                baseline_correct,
                corrupted_correct,
                b: b_count,
                c: c_count,
                p: mcnemar.p,
                degenerate: b_count + c_count == 0,
            },
        });
    }

    let combined = stats::fisher_combine(&t_test_pvalues)?;
    let mean_delta = all_deltas.iter().sum::<f64>() / all_deltas.len() as f64;
    let mean_delta_d_spec = subexperiments
        .iter()
        .map(|s| s.delta_d_spec)
        .sum::<f64>()
        / subexperiments.len() as f64;
    Ok(PairedResult {
        subexperiments,
        mean_delta,
        mean_delta_d_spec,
        chi2: combined.chi2,
        dof: combined.dof,
        p: combined.p,
    })
}

/// Calibration of the paired t-test under a true null: synthetic paired
/// experiments whose per-sample deltas are pure noise, reduced to the
/// Kolmogorov-Smirnov distance between the p-values and Uniform(0,1).
///
/// The literal fraction-zero experiment cannot calibrate anything: its
/// deltas are exactly zero, which the test reports as the degenerate
/// "no effect, p = 1" convention rather than a uniform draw.
pub fn null_calibration(
    replications: usize,
    samples: usize,
    seed: u64,
) -> Result<f64, InterventionError> {
    if replications == 0 {
        return Err(InterventionError::ZeroField("replications"));
    }
    if samples < 2 {
        return Err(InterventionError::ZeroField("samples (need at least 2)"));
    }
    let tree = SeedTree::new(seed).child("null");
    let mut pvalues = Vec::with_capacity(replications);
    for rep in 0..replications {
        let mut rng = tree.rng_indexed("rep", rep as u64);
        let baseline: Vec<f64> = (0..samples)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let corrupted: Vec<f64> = baseline
            .iter()
            .map(|b| b + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        pvalues.push(stats::paired_t_test(&corrupted, &baseline)?.p);
    }
    Ok(stats::ks_distance_uniform(&pvalues)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::model::{BackboneConfig, LoraTargets, PrefixMode, StreamConfig};
    use crate::training::{
        pretrain_backbone, train_from_backbone, BtVariant, CorpusConfig, PretrainConfig,
        TrainConfig,
    };

    use super::*;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            mlp_hidden: 32,
            max_seq: 32,
            ..BackboneConfig::default()
        }
    }

    fn tiny_corpus() -> Corpus {
        Corpus::new(
            CorpusConfig {
                templates: 4,
                template_len: 8,
                noise: 0.02,
                train_sequences: 256,
                eval_sequences: 64,
                seq_len: 16,
            },
            91,
        )
        .expect("corpus")
    }

    fn tiny_model(streams: usize, seed: u64) -> NdModel<f64> {
        let sc = StreamConfig {
            streams,
            rank: 2,
            targets: LoraTargets::All,
            n_prefix: 2,
            prefix_mode: PrefixMode::KvPerLayer,
            epsilon: 0.1,
            shared_adapters: false,
        };
        let mut model = NdModel::build(tiny_backbone(), sc, seed).expect("model");
        model.freeze_backbone();
        model
    }

    fn tiny_config(samples: usize) -> CorruptionConfig {
        CorruptionConfig {
            fraction: 0.25,
            design_layer: 2,
            subexperiments: 2,
            samples,
            batch: 8,
            bootstrap_resamples: 1000,
            paired: true,
            seed: 5,
        }
    }

    #[test]
    fn corruption_plan_respects_fraction_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Fraction 0: identity plan, no donors.
        let plan = corruption_plan::<f64, _>(3, 1, 2, 5, 0, 0.0, &mut rng).expect("plan");
        assert!(plan.donors.is_empty());
        assert!(plan.keep.data().iter().all(|&k| k == 1.0));

        // Fraction 1: every real position replaced, each by exactly one donor.
        let plan = corruption_plan::<f64, _>(3, 1, 2, 5, 3, 1.0, &mut rng).expect("plan");
        let tap = 8;
        for b in 0..2 {
            for row in 0..tap {
                let keep = plan.keep.data()[b * tap + row];
                let donor_sum: f64 = plan.donors.iter().map(|(_, m)| m.data()[b * tap + row]).sum();
                if row < 3 {
                    // Prefix rows stay untouched.
                    assert_eq!(keep, 1.0);
                    assert_eq!(donor_sum, 0.0);
                } else {
                    assert_eq!(keep, 0.0);
                    assert_eq!(donor_sum, 1.0);
                }
            }
        }
        assert!(plan.donors.iter().all(|(j, _)| *j != 1));

        // Two streams: the only possible donor is the other stream.
        let plan = corruption_plan::<f64, _>(2, 0, 1, 6, 0, 1.0, &mut rng).expect("plan");
        assert_eq!(plan.donors.len(), 1);
        assert_eq!(plan.donors[0].0, 1);

        assert!(matches!(
            corruption_plan::<f64, _>(1, 0, 2, 5, 0, 0.5, &mut rng),
            Err(InterventionError::NeedsMultipleStreams(1))
        ));
        assert!(matches!(
            corruption_plan::<f64, _>(3, 3, 2, 5, 0, 0.5, &mut rng),
            Err(InterventionError::BadTarget { .. })
        ));
        assert!(matches!(
            corruption_plan::<f64, _>(3, 0, 2, 5, 0, 1.5, &mut rng),
            Err(InterventionError::BadFraction(_))
        ));
    }

    #[test]
    fn fraction_zero_is_a_null_experiment() {
        let model = tiny_model(2, 3);
        let corpus = tiny_corpus();
        let mut cfg = tiny_config(8);
        cfg.fraction = 0.0;
        let result = paired_eval(&model, &corpus, &cfg).expect("eval");
        for sub in &result.subexperiments {
            assert_eq!(sub.baseline_scores, sub.corrupted_scores);
            assert!(sub.deltas.iter().all(|&d| d == 0.0));
            assert!(sub.degenerate, "zero-variance deltas must be flagged");
            assert_eq!(sub.p, 1.0);
            assert_eq!(sub.delta_d_spec, 0.0);
            assert_eq!(sub.probe.b + sub.probe.c, 0);
            assert_eq!(sub.probe.p, 1.0);
        }
        // Fisher combination of all-ones is the no-evidence point.
        assert_eq!(result.chi2, 0.0);
        assert_eq!(result.dof, 4);
        assert!((result.p - 1.0).abs() <= 1e-12);
        assert_eq!(result.mean_delta, 0.0);
    }

    #[test]
    fn pairing_reuses_identical_samples_and_dof_is_twice_k() {
        let model = tiny_model(2, 3);
        let corpus = tiny_corpus();
        let mut cfg = tiny_config(8);
        cfg.subexperiments = 4;
        let result = paired_eval(&model, &corpus, &cfg).expect("eval");
        assert_eq!(result.subexperiments.len(), 4);
        assert_eq!(result.dof, 8);
        for sub in &result.subexperiments {
            assert_eq!(sub.n, 8);
            assert_eq!(sub.deltas.len(), 8);
            assert!(sub.baseline_scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
        // Determinism: the full result reproduces bit for bit.
        let again = paired_eval(&model, &corpus, &cfg).expect("eval");
        assert_eq!(result, again);

        // Unpaired draws different corrupted-arm samples: with fraction 0
        // the arms would no longer match exactly.
        let mut unpaired = cfg;
        unpaired.fraction = 0.0;
        unpaired.paired = false;
        let loose = paired_eval(&model, &corpus, &unpaired).expect("eval");
        assert!(loose
            .subexperiments
            .iter()
            .any(|s| s.baseline_scores != s.corrupted_scores));
    }

    #[test]
    fn corruption_shifts_diversity_up_on_a_trained_model() {
        let corpus = tiny_corpus();
        let pre = pretrain_backbone::<f64>(
            tiny_backbone(),
            &corpus,
            &PretrainConfig {
                steps: 40,
                batch: 8,
                peak_lr: 1e-2,
                warmup_fraction: 0.1,
                log_every: 20,
            },
            12,
        )
        .expect("pretrain");
        let cfg = TrainConfig {
            streams: 2,
            rank: 4,
            targets: LoraTargets::All,
            shared_adapters: false,
            n_prefix: 2,
            prefix_mode: PrefixMode::KvPerLayer,
            epsilon: 0.1,
            design_layer: 2,
            lambda_bt: 0.5,
            bt_variant: BtVariant::Full,
            dropout: 0.0,
            peak_lr: 5e-3,
            warmup_fraction: 0.1,
            steps: 60,
            batch: 8,
            seq: 16,
            log_every: 20,
            seed: 3,
        };
        let trained = train_from_backbone(&pre.model, &corpus, &cfg).expect("train");

        let mut icfg = tiny_config(16);
        icfg.fraction = 0.5;
        let result = paired_eval(&trained.model, &corpus, &icfg).expect("eval");
        for sub in &result.subexperiments {
            assert!(
                sub.delta_d_spec > 0.0,
                "corruption should blur stream identity: {}",
                sub.delta_d_spec
            );
            assert!(!sub.degenerate, "corruption must change scores");
        }
        assert!(
            result.mean_delta <= 0.0,
            "corruption should not help: mean delta {}",
            result.mean_delta
        );
    }

    #[test]
    fn planted_shift_is_recovered_by_the_t_test() {
        let model = tiny_model(2, 3);
        let corpus = tiny_corpus();
        let mut cfg = tiny_config(32);
        cfg.fraction = 0.0;
        cfg.subexperiments = 1;
        let result = paired_eval(&model, &corpus, &cfg).expect("eval");
        let baseline = &result.subexperiments[0].baseline_scores;

        // Shift the corrupted arm by -0.05 plus small per-sample noise and
        // re-run the same statistics the experiment uses.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shifted: Vec<f64> = baseline
            .iter()
            .map(|b| b - 0.05 + 0.02 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t = stats::paired_t_test(&shifted, baseline).expect("t test");
        assert!(
            (t.mean_delta + 0.05).abs() <= 0.01,
            "recovered {}",
            t.mean_delta
        );
        assert!(t.p < 1e-6, "a planted shift this large must be detected");
    }

    #[test]
    fn null_calibration_pvalues_are_uniform() {
        let ks = null_calibration(300, 24, 11).expect("calibration");
        assert!(ks < 0.1, "KS distance {ks} too far from uniform");
        // Far-from-null inputs would not pass: sanity-check the metric by
        // feeding it a constant (degenerate) distribution.
        assert!(stats::ks_distance_uniform(&vec![1.0; 300]).unwrap() > 0.9);
    }

    #[test]
    fn invalid_experiments_are_rejected() {
        let corpus = tiny_corpus();
        let single = {
            let mut model =
                NdModel::<f64>::build(tiny_backbone(), StreamConfig::backbone_only(), 3)
                    .expect("model");
            model.freeze_backbone();
            model
        };
        assert!(matches!(
            paired_eval(&single, &corpus, &tiny_config(8)),
            Err(InterventionError::NeedsMultipleStreams(1))
        ));

        let model = tiny_model(2, 3);
        let mut bad = tiny_config(8);
        bad.fraction = 2.0;
        assert!(matches!(
            paired_eval(&model, &corpus, &bad),
            Err(InterventionError::BadFraction(_))
        ));
        let mut bad = tiny_config(8);
        bad.samples = 0;
        assert!(paired_eval(&model, &corpus, &bad).is_err());
    }
}
