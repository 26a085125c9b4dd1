//! `train`: pretrain a small backbone on the synthetic corpus, freeze it,
//! fine-tune the requested arm's stream contexts, and emit traces plus a
//! checkpoint.

use neurodiv_core::csv::{fmt_f64, Cell, CsvFile};
use neurodiv_core::model::{checkpoint, BackboneConfig, LoraTargets, PrefixMode, BYTE_VOCAB};
use neurodiv_core::seeding::SeedTree;
use neurodiv_core::training::{
    evaluate, pretrain_backbone, train_from_backbone, Arm, BtVariant, Corpus, CorpusConfig, Split,
    TrainConfig, TrainStatus,
};

use crate::config::Resolver;

use super::{io_err, train_err, usage, Ctx, RunOutput};
use crate::CliError;

pub struct Flags {
    pub arm: Option<Arm>,
    pub steps: Option<usize>,
}

/// Corpus keys are shared verbatim by `train`, `diversity`, and
/// `corrupt`: the same config and seed rebuild the same corpus.
pub fn resolve_corpus(r: &mut Resolver) -> Result<CorpusConfig, CliError> {
    Ok(CorpusConfig {
        templates: r.get("corpus.templates", None, 8usize)?,
        template_len: r.get("corpus.template_len", None, 16usize)?,
        noise: r.get("corpus.noise", None, 0.05f64)?,
        train_sequences: r.get("corpus.train_sequences", None, 2048usize)?,
        eval_sequences: r.get("corpus.eval_sequences", None, 256usize)?,
        seq_len: r.get("corpus.seq_len", None, 128usize)?,
    })
}

pub fn build_corpus(config: CorpusConfig, seed: u64) -> Result<Corpus, CliError> {
    Corpus::new(config, SeedTree::new(seed).subseed("data")).map_err(usage)
}

pub fn resolve_backbone(r: &mut Resolver) -> Result<BackboneConfig, CliError> {
    let bb = BackboneConfig {
        dim: r.get("backbone.dim", None, 64usize)?,
        layers: r.get("backbone.layers", None, 4usize)?,
        heads: r.get("backbone.heads", None, 4usize)?,
        mlp_hidden: r.get("backbone.mlp_hidden", None, 256usize)?,
        vocab: BYTE_VOCAB,
        max_seq: r.get("backbone.max_seq", None, 192usize)?,
    };
    bb.validate().map_err(usage)?;
    Ok(bb)
}

pub fn run(ctx: &Ctx<'_>, flags: &Flags) -> Result<RunOutput, CliError> {
    let mut r = Resolver::new(ctx.file);
    let corpus_cfg = resolve_corpus(&mut r)?;
    let bb = resolve_backbone(&mut r)?;

    let arm = r.get("train.arm", flags.arm, Arm::NdLora)?;
    let mut base = TrainConfig {
        streams: r.get("train.streams", None, 4usize)?,
        rank: r.get("train.rank", None, 8usize)?,
        targets: r.get::<LoraTargets>("train.targets", None, LoraTargets::All)?,
        shared_adapters: false,
        n_prefix: r.get("train.n_prefix", None, 48usize)?,
        prefix_mode: r.get::<PrefixMode>("train.prefix_mode", None, PrefixMode::KvPerLayer)?,
        epsilon: r.get("train.epsilon", None, 0.1f64)?,
        design_layer: r.get("train.design_layer", None, 3usize)?,
        lambda_bt: r.get("train.lambda_bt", None, 0.01f64)?,
        bt_variant: r.get::<BtVariant>("train.bt", None, BtVariant::Full)?,
        dropout: r.get("train.dropout", None, 0.0f64)?,
        peak_lr: r.get("train.peak_lr", None, 3e-4f64)?,
        warmup_fraction: r.get("train.warmup_fraction", None, 0.02f64)?,
        steps: r.get("train.steps", flags.steps, 2000usize)?,
        batch: r.get("train.batch", None, 16usize)?,
        seq: corpus_cfg.seq_len,
        log_every: r.get("train.log_every", None, 50usize)?,
        seed: ctx.seed,
    };
    let pretrain_cfg = neurodiv_core::training::PretrainConfig {
        steps: r.get("pretrain.steps", None, 300usize)?,
        batch: r.get("pretrain.batch", None, 16usize)?,
        peak_lr: r.get("pretrain.peak_lr", None, 1e-3f64)?,
        warmup_fraction: r.get("pretrain.warmup_fraction", None, 0.02f64)?,
        log_every: r.get("pretrain.log_every", None, 100usize)?,
    };
    let resolved = r.finish()?;

    base.seed = ctx.seed;
    let cfg = arm.configure(&base);
    cfg.validate().map_err(train_err)?;
    if cfg.design_layer == 0 || cfg.design_layer > bb.layers {
        return Err(CliError::Usage(format!(
            "train.design_layer {} out of range for {} layers",
            cfg.design_layer, bb.layers
        )));
    }
    println!(
        "arm {}: streams={} rank={} shared_adapters={} lambda_bt={} dropout={} bt={}",
        arm,
        cfg.streams,
        cfg.rank,
        cfg.shared_adapters,
        fmt_f64(cfg.lambda_bt),
        fmt_f64(cfg.dropout),
        cfg.bt_variant
    );

    let corpus = build_corpus(corpus_cfg, ctx.seed)?;
    let init_seed = SeedTree::new(ctx.seed).subseed("init");
    let pre = pretrain_backbone::<f64>(bb, &corpus, &pretrain_cfg, init_seed).map_err(train_err)?;
    println!(
        "pretrain: held-out ce {} -> {} over {} steps",
        fmt_f64(pre.untrained_ce),
        fmt_f64(pre.trained_ce),
        pretrain_cfg.steps
    );

    let outcome = train_from_backbone(&pre.model, &corpus, &cfg).map_err(train_err)?;

    let multi = cfg.streams >= 2;
    let mut artifacts = Vec::new();
    let trace_path = ctx.out_dir.join("train_trace.csv");
    let mut trace = if multi {
        CsvFile::create(&trace_path, &[
            "step", "lr", "ce", "bt", "total", "d_spec", "alpha_min", "alpha_max",
        ])
        .map_err(io_err)?
    } else {
        CsvFile::create(&trace_path, &["step", "lr", "ce", "total"]).map_err(io_err)?
    };
    for row in &outcome.trace {
        if multi {
            trace
                .row(&[
                    Cell::from(row.step),
                    Cell::from(row.lr),
                    Cell::from(row.ce),
                    Cell::from(row.bt.expect("multi-stream trace")),
                    Cell::from(row.total),
                    Cell::from(row.d_spec.expect("multi-stream trace")),
                    Cell::from(row.alpha_min.expect("multi-stream trace")),
                    Cell::from(row.alpha_max.expect("multi-stream trace")),
                ])
                .map_err(io_err)?;
        } else {
            trace
                .row(&[
                    Cell::from(row.step),
                    Cell::from(row.lr),
                    Cell::from(row.ce),
                    Cell::from(row.total),
                ])
                .map_err(io_err)?;
        }
    }
    trace.finish().map_err(io_err)?;
    artifacts.push("train_trace.csv".to_string());

    if multi {
        let path = ctx.out_dir.join("diversity_trace.csv");
        let mut csv =
            CsvFile::create(&path, &["step", "d_spec", "bt_loss", "mode"]).map_err(io_err)?;
        for row in &outcome.trace {
            csv.row(&[
                Cell::from(row.step),
                Cell::from(row.d_spec.expect("multi-stream trace")),
                Cell::from(row.bt.expect("multi-stream trace")),
                Cell::from(cfg.bt_variant.to_string()),
            ])
            .map_err(io_err)?;
        }
        csv.finish().map_err(io_err)?;
        artifacts.push("diversity_trace.csv".to_string());
    }

    let ckpt_path = ctx.out_dir.join("checkpoint.ndck");
    checkpoint::save(&outcome.model, &ckpt_path).map_err(|e| io_err(e))?;
    artifacts.push("checkpoint.ndck".to_string());

    let eval = evaluate(&outcome.model, &corpus, Split::Eval, cfg.batch, None).map_err(train_err)?;
    println!("final held-out ce = {}", fmt_f64(eval.ce));
    if let Some(last) = outcome.trace.last() {
        if let Some(d) = last.d_spec {
            println!("final d_spec = {}", fmt_f64(d));
        }
    }
    if !outcome.rejected_steps.is_empty() {
        eprintln!(
            "warning: {} step(s) rejected for non-finite gradients: {:?}",
            outcome.rejected_steps.len(),
            outcome.rejected_steps
        );
    }

    let failure = match outcome.status {
        TrainStatus::Completed => None,
        TrainStatus::AbortedNonFinite { step, restored_step } => {
            Some(CliError::Numerical(format!(
                "training diverged at step {step}; checkpoint restored from {}",
                match restored_step {
                    Some(s) => format!("step {s}"),
                    None => "the initial parameters".to_string(),
                }
            )))
        }
    };

    Ok(RunOutput {
        resolved,
        artifacts,
        failure,
    })
}

/// Loads a checkpoint for the analysis commands and rebuilds the corpus
/// it should be evaluated on.
pub fn load_model_and_corpus(
    r: &mut Resolver,
    checkpoint_key: &str,
    checkpoint_flag: Option<String>,
    seed: u64,
) -> Result<(neurodiv_core::model::NdModel<f64>, Corpus), CliError> {
    let path = r.require(checkpoint_key, checkpoint_flag)?;
    let corpus_cfg = resolve_corpus(r)?;
    let model = checkpoint::load::<f64>(std::path::Path::new(&path))
        .map_err(|e| CliError::Usage(format!("checkpoint {path}: {e}")))?;
    let corpus = build_corpus(corpus_cfg, seed)?;
    if corpus.config().seq_len > model.backbone_config().max_seq {
        return Err(CliError::Usage(format!(
            "corpus sequences ({}) exceed the checkpoint's maximum context ({})",
            corpus.config().seq_len,
            model.backbone_config().max_seq
        )));
    }
    Ok((model, corpus))
}
