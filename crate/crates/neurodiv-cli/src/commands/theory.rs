//! `theory`: emit the failure-bound curve over stream counts and run the
//! Monte Carlo certification grid for the variance and bound formulas.

use neurodiv_core::csv::{fmt_f64, Cell, CsvFile};
use neurodiv_core::seeding::SeedTree;
use neurodiv_core::theory::{bound_curve, cell_seeds, certify_cell, optimal_stream_count, RhoSchedule};

use crate::config::Resolver;

use super::{io_err, usage, Ctx, RunOutput};
use crate::CliError;

/// Certification grid: every combination is simulated and checked.
const GRID_SIGMA2: [f64; 3] = [0.25, 1.0, 4.0];
const GRID_MU: [f64; 3] = [0.5, 1.0, 2.0];
const GRID_RHO: [f64; 4] = [0.0, 0.3, 0.7, 1.0];
const GRID_P: [u32; 4] = [1, 2, 4, 8];

pub fn run(ctx: &Ctx) -> Result<RunOutput, CliError> {
    let mut r = Resolver::new(ctx.file);
    let sigma2 = r.get("theory.sigma2", None, 1.0f64)?;
    let mu = r.get("theory.mu", None, 1.0f64)?;
    let rho0 = r.get("theory.rho0", None, 0.0f64)?;
    let beta = r.get("theory.beta", None, 0.01f64)?;
    let gamma = r.get("theory.gamma", None, 1.0f64)?;
    let p_max = r.get("theory.p_max", None, 64u32)?;
    let mc_samples = r.get("theory.mc_samples", None, 200_000u64)?;
    let mc_shards = r.get("theory.mc_shards", None, 32u32)?;
    let se_margin = r.get("theory.se_margin", None, 3.0f64)?;
    let grid = r.get("theory.grid", None, true)?;
    let resolved = r.finish()?;

    let schedule = RhoSchedule::new(rho0, beta, gamma).map_err(usage)?;
    let curve = bound_curve(&schedule, sigma2, mu, p_max).map_err(usage)?;
    let path = ctx.out_dir.join("bound_curve.csv");
    let mut csv = CsvFile::create(&path, &["P", "rho", "g", "B"]).map_err(io_err)?;
    for point in &curve {
        csv.row(&[
            Cell::from(u64::from(point.p)),
            Cell::from(point.rho),
            Cell::from(point.g),
            Cell::from(point.bound),
        ])
        .map_err(io_err)?;
    }
    csv.finish().map_err(io_err)?;

    let optimum = optimal_stream_count(&schedule, p_max).map_err(usage)?;
    if optimum.interior {
        println!(
            "P* = {} (interior minimum, g = {})",
            optimum.p_star,
            fmt_f64(optimum.g_star)
        );
    } else {
        println!(
            "P* = {} (g = {})",
            optimum.p_star,
            fmt_f64(optimum.g_star)
        );
        eprintln!(
            "warning: boundary minimizer at P = {}; the variance factor has no interior optimum in 1..={p_max}",
            optimum.p_star
        );
    }
    if let Some(continuous) = optimum.continuous {
        println!("continuous stationary point = {}", fmt_f64(continuous));
    }

    let mut artifacts = vec!["bound_curve.csv".to_string()];
    let mut failure = None;
    if grid {
        let seeds = SeedTree::new(ctx.seed).child("mc");
        let path = ctx.out_dir.join("mc_cert.csv");
        let mut csv = CsvFile::create(&path, &[
            "sigma2", "mu", "rho", "P", "rate", "se", "bound", "pass",
        ])
        .map_err(io_err)?;
        let mut cells = 0usize;
        let mut failures = 0usize;
        for s2 in GRID_SIGMA2 {
            for m in GRID_MU {
                for rho in GRID_RHO {
                    for p in GRID_P {
                        let cell = certify_cell(
                            s2,
                            m,
                            rho,
                            p,
                            mc_samples,
                            mc_shards,
                            se_margin,
                            &cell_seeds(&seeds, s2, m, rho, p),
                        )
                        .map_err(|e| CliError::Numerical(e.to_string()))?;
                        cells += 1;
                        failures += usize::from(!cell.pass);
                        csv.row(&[
                            Cell::from(s2),
                            Cell::from(m),
                            Cell::from(rho),
                            Cell::from(u64::from(p)),
                            Cell::from(cell.estimate.failure_rate),
                            Cell::from(cell.estimate.se),
                            Cell::from(cell.bound),
                            Cell::from(cell.pass),
                        ])
                        .map_err(io_err)?;
                    }
                }
            }
        }
        csv.finish().map_err(io_err)?;
        artifacts.push("mc_cert.csv".to_string());
        println!(
            "certification: {}/{} cells within {} standard errors of the bound",
            cells - failures,
            cells,
            fmt_f64(se_margin)
        );
        if failures > 0 {
            failure = Some(CliError::Certification(format!(
                "{failures} of {cells} certification cells exceeded the bound"
            )));
        }
    }

    Ok(RunOutput {
        resolved,
        artifacts,
        failure,
    })
}
