//! `cost`: emit the training-step cost table and, on request, the
//! lifecycle amortization factor.

use neurodiv_core::costmodel::{
    amortized_cost, standard_table, variant_cost, OverheadSpec, REFERENCE_BACKBONE_PARAMS,
    REFERENCE_TRAINABLE_PARAMS,
};
use neurodiv_core::csv::{fmt_f64, Cell, CsvFile};

use crate::config::Resolver;

use super::{io_err, usage, Ctx, RunOutput};
use crate::CliError;

pub struct Flags {
    pub streams: Option<usize>,
    pub amortize: bool,
}

pub fn run(ctx: &Ctx, flags: &Flags) -> Result<RunOutput, CliError> {
    let mut r = Resolver::new(ctx.file);
    let custom_streams = r.get("cost.streams", flags.streams, 0usize)?;
    let fraction = r.get(
        "cost.fraction",
        None,
        REFERENCE_TRAINABLE_PARAMS / REFERENCE_BACKBONE_PARAMS,
    )?;
    let bt = r.get("cost.bt", None, 0.0f64)?;
    let other = r.get("cost.other", None, 0.0f64)?;
    let amortize = r.get("cost.amortize", flags.amortize.then_some(true), false)?;
    let pretrain_tokens = r.get("cost.pretrain_tokens", None, 1e12f64)?;
    let finetune_tokens = r.get("cost.finetune_tokens", None, 20e6f64)?;
    let relative = r.get("cost.relative", None, 1.885f64)?;
    let resolved = r.finish()?;

    let mut table = standard_table();
    if custom_streams > 0 {
        let cost = variant_cost(custom_streams, fraction, OverheadSpec { bt, other })
            .map_err(usage)?;
        table.push(neurodiv_core::costmodel::CostTableRow {
            variant: "custom",
            cost,
        });
    }

    let path = ctx.out_dir.join("cost_table.csv");
    let mut csv = CsvFile::create(&path, &[
        "variant", "forward", "backward", "bt", "other", "total", "relative",
    ])
    .map_err(io_err)?;
    for row in &table {
        csv.row(&[
            Cell::from(row.variant),
            Cell::from(row.cost.forward),
            Cell::from(row.cost.backward),
            Cell::from(row.cost.bt),
            Cell::from(row.cost.other),
            Cell::from(row.cost.total),
            Cell::from(row.cost.relative),
        ])
        .map_err(io_err)?;
        println!(
            "{:<12} total {:<8} relative {}",
            row.variant,
            fmt_f64(row.cost.total),
            fmt_f64(row.cost.relative)
        );
    }
    csv.finish().map_err(io_err)?;

    if amortize {
        let factor = amortized_cost(pretrain_tokens, finetune_tokens, relative).map_err(usage)?;
        println!(
            "amortized lifecycle factor = {} ({} pretrain tokens, {} fine-tune tokens at {}x)",
            fmt_f64(factor),
            fmt_f64(pretrain_tokens),
            fmt_f64(finetune_tokens),
            fmt_f64(relative)
        );
    }

    Ok(RunOutput {
        resolved,
        artifacts: vec!["cost_table.csv".to_string()],
        failure: None,
    })
}
