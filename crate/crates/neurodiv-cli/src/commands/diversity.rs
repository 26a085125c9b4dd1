//! `diversity`: score a checkpoint's stream separation on held-out data
//! and report per-pair spectral norms plus aggregator-weight statistics.

use neurodiv_core::autodiff::GraphBuilder;
use neurodiv_core::csv::{fmt_f64, Cell, CsvFile};
use neurodiv_core::diversity::{stream_diversity, FeatureSet, Normalization, VARIANCE_FLOOR};
use neurodiv_core::model::{build_lm_graph, ForwardOptions, NdModel, TOKENS_INPUT};
use neurodiv_core::seeding::SeedTree;
use neurodiv_core::training::{Corpus, Split};

use crate::config::Resolver;

use super::{io_err, train, usage, Ctx, RunOutput};
use crate::CliError;

pub struct Flags {
    pub checkpoint: Option<String>,
    pub normalization: Option<Normalization>,
}

/// Design-layer features and aggregator weights over the first
/// `samples` held-out sequences.
pub struct FeaturePass {
    /// Per stream: flattened (samples * seq, dim) feature rows.
    pub features: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub rows: usize,
}

pub fn collect_features(
    model: &NdModel<f64>,
    corpus: &Corpus,
    samples: usize,
    batch: usize,
    design_layer: usize,
) -> Result<FeaturePass, CliError> {
    let sc = *model.stream_config();
    let bb = *model.backbone_config();
    let seq = corpus.config().seq_len;
    let mut features: Vec<Vec<f64>> = vec![Vec::new(); sc.streams];
    let mut alphas = Vec::new();

    let mut start = 0usize;
    while start < samples {
        let chunk = batch.min(samples - start);
        let mut gb = GraphBuilder::new();
        let mut opts = ForwardOptions::<f64>::new(chunk, seq, design_layer);
        opts.with_loss = false;
        let handles = build_lm_graph(&mut gb, &bb, &sc, &opts).map_err(usage)?;
        let graph = gb.finish();

        let mut tokens = Vec::with_capacity(chunk * seq);
        for i in start..start + chunk {
            let sample = corpus.sample(Split::Eval, i).map_err(usage)?;
            tokens.extend(sample.tokens.iter().map(|&t| t as f64));
        }
        let tokens = neurodiv_core::autodiff::Tensor::from_f64s(&[chunk, seq], &tokens)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let mut bindings = model.bindings();
        bindings.insert(TOKENS_INPUT.to_string(), &tokens);
        let eval = graph
            .eval(&bindings)
            .map_err(|e| CliError::Numerical(e.to_string()))?;

        for (i, &node) in handles.design_features.iter().enumerate() {
            features[i].extend(eval.value(node).data().iter().copied());
        }
        if let Some(alpha) = handles.alpha {
            alphas.extend(eval.value(alpha).data().iter().copied());
        }
        start += chunk;
    }
    Ok(FeaturePass {
        features,
        alphas,
        rows: samples * seq,
    })
}

pub fn run(ctx: &Ctx, flags: &Flags) -> Result<RunOutput, CliError> {
    let mut r = Resolver::new(ctx.file);
    let (model, corpus) = train::load_model_and_corpus(
        &mut r,
        "diversity.checkpoint",
        flags.checkpoint.clone(),
        ctx.seed,
    )?;
    let samples = r.get("diversity.samples", None, 128usize)?;
    let batch = r.get("diversity.batch", None, 16usize)?;
    let design_layer = r.get("diversity.design_layer", None, 3usize)?;
    let normalization = r.get::<Normalization>(
        "diversity.normalization",
        flags.normalization,
        Normalization::Whiten,
    )?;
    let resolved = r.finish()?;

    let streams = model.stream_config().streams;
    if streams < 2 {
        return Err(CliError::Usage(format!(
            "diversity needs a multi-stream checkpoint; this one has {streams} stream"
        )));
    }
    if samples == 0 || batch == 0 {
        return Err(CliError::Usage("diversity.samples/batch must be nonzero".into()));
    }
    if samples > corpus.len(Split::Eval) {
        return Err(CliError::Usage(format!(
            "diversity.samples {} exceeds the {} held-out sequences",
            samples,
            corpus.len(Split::Eval)
        )));
    }
    if design_layer == 0 || design_layer > model.backbone_config().layers {
        return Err(CliError::Usage(format!(
            "diversity.design_layer {} out of range for {} layers",
            design_layer,
            model.backbone_config().layers
        )));
    }

    let pass = collect_features(&model, &corpus, samples, batch, design_layer)?;
    let set = FeatureSet::new(pass.features, pass.rows, model.backbone_config().dim)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let score = stream_diversity(
        &set,
        normalization,
        VARIANCE_FLOOR,
        SeedTree::new(ctx.seed).subseed("dspec"),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;

    let (mut a_min, mut a_max, mut a_sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &a in &pass.alphas {
        a_min = a_min.min(a);
        a_max = a_max.max(a);
        a_sum += a;
    }
    let a_mean = a_sum / pass.alphas.len() as f64;

    let path = ctx.out_dir.join("diversity_report.csv");
    let mut csv = CsvFile::create(&path, &[
        "pair_i", "pair_j", "spectral_norm", "iterations", "converged",
    ])
    .map_err(io_err)?;
    for pair in &score.pairs {
        csv.row(&[
            Cell::from(pair.i),
            Cell::from(pair.j),
            Cell::from(pair.spectral_norm),
            Cell::from(pair.iterations),
            Cell::from(pair.converged),
        ])
        .map_err(io_err)?;
    }
    csv.finish().map_err(io_err)?;

    let path = ctx.out_dir.join("diversity_summary.csv");
    let mut csv = CsvFile::create(&path, &[
        "d_spec", "normalization", "streams", "samples", "alpha_min", "alpha_mean", "alpha_max",
        "all_converged",
    ])
    .map_err(io_err)?;
    csv.row(&[
        Cell::from(score.value),
        Cell::from(normalization.to_string()),
        Cell::from(streams),
        Cell::from(samples),
        Cell::from(a_min),
        Cell::from(a_mean),
        Cell::from(a_max),
        Cell::from(score.all_converged),
    ])
    .map_err(io_err)?;
    csv.finish().map_err(io_err)?;

    println!(
        "d_spec = {} ({normalization} normalization, {streams} streams, {samples} sequences)",
        fmt_f64(score.value)
    );
    println!(
        "alpha: min {} mean {} max {}",
        fmt_f64(a_min),
        fmt_f64(a_mean),
        fmt_f64(a_max)
    );

    Ok(RunOutput {
        resolved,
        artifacts: vec![
            "diversity_report.csv".to_string(),
            "diversity_summary.csv".to_string(),
        ],
        failure: None,
    })
}
