//! `corrupt`: run the paired corruption experiment on a trained
//! multi-stream checkpoint and emit per-sub-experiment statistics plus
//! the Fisher combination.

use neurodiv_core::csv::{fmt_f64, Cell, CsvFile};
use neurodiv_core::intervention::{paired_eval, CorruptionConfig, InterventionError};
use neurodiv_core::training::Split;

use crate::config::Resolver;

use super::{io_err, train, Ctx, RunOutput};
use crate::CliError;

pub struct Flags {
    pub checkpoint: Option<String>,
    pub fraction: Option<f64>,
}

fn intervention_err(e: InterventionError) -> CliError {
    match e {
        InterventionError::NeedsMultipleStreams(_)
        | InterventionError::BadFraction(_)
        | InterventionError::BadTarget { .. }
        | InterventionError::ZeroField(_)
        | InterventionError::EmptyEvalSet
        | InterventionError::Model(_) => CliError::Usage(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

pub fn run(ctx: &Ctx, flags: &Flags) -> Result<RunOutput, CliError> {
    let mut r = Resolver::new(ctx.file);
    let (model, corpus) = train::load_model_and_corpus(
        &mut r,
        "corrupt.checkpoint",
        flags.checkpoint.clone(),
        ctx.seed,
    )?;
    let cfg = CorruptionConfig {
        fraction: r.get("corrupt.fraction", flags.fraction, 0.25f64)?,
        design_layer: r.get("corrupt.design_layer", None, 3usize)?,
        subexperiments: r.get("corrupt.subexperiments", None, 4usize)?,
        samples: r.get("corrupt.samples", None, 128usize)?,
        batch: r.get("corrupt.batch", None, 16usize)?,
        bootstrap_resamples: r.get("corrupt.bootstrap_resamples", None, 10_000usize)?,
        paired: r.get("corrupt.paired", None, true)?,
        seed: ctx.seed,
    };
    let resolved = r.finish()?;

    let streams = model.stream_config().streams;
    if streams < 2 {
        return Err(CliError::Usage(format!(
            "corruption needs a multi-stream checkpoint; this one has {streams} stream"
        )));
    }
    if cfg.design_layer == 0 || cfg.design_layer > model.backbone_config().layers {
        return Err(CliError::Usage(format!(
            "corrupt.design_layer {} out of range for {} layers",
            cfg.design_layer,
            model.backbone_config().layers
        )));
    }
    println!(
        "corrupting one of {streams} streams at fraction {} ({} sub-experiments x {} samples from {} held-out sequences)",
        fmt_f64(cfg.fraction),
        cfg.subexperiments,
        cfg.samples,
        corpus.len(Split::Eval)
    );

    let result = paired_eval(&model, &corpus, &cfg).map_err(intervention_err)?;

    let path = ctx.out_dir.join("intervention.csv");
    let mut csv = CsvFile::create(&path, &["subexp", "n", "delta_dspec", "mean_delta", "t", "p"])
        .map_err(io_err)?;
    for sub in &result.subexperiments {
        csv.row(&[
            Cell::from(sub.index),
            Cell::from(sub.n),
            Cell::from(sub.delta_d_spec),
            Cell::from(sub.mean_delta),
            Cell::from(sub.t),
            Cell::from(sub.p),
        ])
        .map_err(io_err)?;
        println!(
            "sub {}: target stream {}, mean delta {}, t {}, p {}{}, bootstrap p {}, delta d_spec {}, probe {}->{} correct (b={}, c={}, mcnemar p {})",
            sub.index,
            sub.target_stream,
            fmt_f64(sub.mean_delta),
            fmt_f64(sub.t),
            fmt_f64(sub.p),
            if sub.degenerate { " (degenerate)" } else { "" },
            fmt_f64(sub.bootstrap_p),
            fmt_f64(sub.delta_d_spec),
            sub.probe.baseline_correct,
            sub.probe.corrupted_correct,
            sub.probe.b,
            sub.probe.c,
            fmt_f64(sub.probe.p),
        );
    }
    csv.finish().map_err(io_err)?;

    let path = ctx.out_dir.join("intervention_combined.csv");
    let mut csv = CsvFile::create(&path, &["chi2", "dof", "p"]).map_err(io_err)?;
    csv.row(&[
        Cell::from(result.chi2),
        Cell::from(result.dof),
        Cell::from(result.p),
    ])
    .map_err(io_err)?;
    csv.finish().map_err(io_err)?;

    println!(
        "combined: chi2 {} (dof {}), p {}",
        fmt_f64(result.chi2),
        result.dof,
        fmt_f64(result.p)
    );
    println!(
        "mean score delta = {}, mean delta d_spec = {}",
        fmt_f64(result.mean_delta),
        fmt_f64(result.mean_delta_d_spec)
    );

    Ok(RunOutput {
        resolved,
        artifacts: vec![
            "intervention.csv".to_string(),
            "intervention_combined.csv".to_string(),
        ],
        failure: None,
    })
}
