//! Variance scaling of aggregated correlated streams.
//!
//! A population of P stream scores is modeled as equicorrelated Gaussians:
//! each stream shares a common factor with weight sqrt(rho) and keeps an
//! independent residual with weight sqrt(1-rho). Averaging P streams then
//! has variance sigma^2 * ((1-rho)/P + rho): the independent part shrinks
//! like 1/P while the correlated floor survives. With a correlation that
//! grows in P (streams become more redundant as more are packed in), the
//! normalized variance factor g(P) = (1-rho(P))/P + rho(P) is U-shaped and
//! has an interior optimum. Failure probability (aggregate score falling
//! to zero or below) is bounded one-sidedly by Cantelli's inequality,
//! v/(v + mu^2). Monte Carlo certification estimates both the variance
//! and the failure rate from the explicit common-factor construction,
//! sharded so results never depend on thread count.

use crate::seeding::SeedTree;
use crate::Real;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("correlation floor rho0 = {0} outside [0, 1]")]
    BadRho0(f64),
    #[error("growth coefficient beta = {0} must be >= 0")]
    BadBeta(f64),
    #[error("growth exponent gamma = {0} must be > 0")]
    BadGamma(f64),
    #[error("correlation rho = {0} outside [0, 1]")]
    BadRho(f64),
    #[error("variance sigma2 = {0} must be >= 0")]
    BadSigma2(f64),
    #[error("stream count p must be >= 1")]
    BadStreamCount,
    #[error("mean mu = {0} must be > 0 for a one-sided failure bound")]
    BadMean(f64),
    #[error("sample count must be >= 1")]
    NoSamples,
    #[error("shard count must be >= 1")]
    NoShards,
}

/// Correlation as a function of stream count:
/// rho(P) = min(1, rho0 + beta * (P - 1)^gamma).
///
/// gamma must be strictly positive. beta may be zero, giving the flat
/// schedule rho(P) = rho0 whose variance factor is strictly decreasing in
/// P; the scan then reports a boundary rather than interior minimizer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RhoSchedule {
    pub rho0: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// A correlation value together with whether the schedule was clipped at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoValue {
    pub value: f64,
    pub clipped: bool,
}

impl RhoSchedule {
    pub fn new(rho0: f64, beta: f64, gamma: f64) -> Result<Self, TheoryError> {
        if !(0.0..=1.0).contains(&rho0) {
            return Err(TheoryError::BadRho0(rho0));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(TheoryError::BadBeta(beta));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(TheoryError::BadGamma(gamma));
        }
        Ok(Self { rho0, beta, gamma })
    }

    pub fn rho(&self, p: u32) -> Result<RhoValue, TheoryError> {
        if p < 1 {
            return Err(TheoryError::BadStreamCount);
        }
        let raw = self.rho0 + self.beta * ((p - 1) as f64).powf(self.gamma);
        if raw > 1.0 {
            Ok(RhoValue { value: 1.0, clipped: true })
        } else {
            Ok(RhoValue { value: raw, clipped: false })
        }
    }
}

/// Var(mean of P streams) = sigma2 * ((1 - rho)/P + rho).
pub fn variance_of_mean(sigma2: f64, rho: f64, p: u32) -> Result<f64, TheoryError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(TheoryError::BadRho(rho));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(TheoryError::BadSigma2(sigma2));
    }
    if p < 1 {
        return Err(TheoryError::BadStreamCount);
    }
    Ok(sigma2 * ((1.0 - rho) / p as f64 + rho))
}

/// One-sided Cantelli bound on P(M <= 0) for a mean-mu, variance-v score:
/// v / (v + mu^2). Requires mu > 0 (the bound addresses downward failures
/// of a positive-mean score).
pub fn cantelli_failure_bound(variance: f64, mu: f64) -> Result<f64, TheoryError> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(TheoryError::BadSigma2(variance));
    }
    if !(mu > 0.0) {
        return Err(TheoryError::BadMean(mu));
    }
    Ok(variance / (variance + mu * mu))
}

/// Normalized variance factor g(P) = (1 - rho(P))/P + rho(P).
pub fn variance_factor(schedule: &RhoSchedule, p: u32) -> Result<(f64, bool), TheoryError> {
    let rho = schedule.rho(p)?;
    Ok(((1.0 - rho.value) / p as f64 + rho.value, rho.clipped))
}

/// One row of the bound-versus-stream-count curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    pub p: u32,
    pub rho: f64,
    /// Normalized variance factor g(P).
    pub g: f64,
    /// Cantelli failure bound at variance sigma2 * g(P).
    pub bound: f64,
    pub clipped: bool,
}

pub fn bound_curve(
    schedule: &RhoSchedule,
    sigma2: f64,
    mu: f64,
    p_max: u32,
) -> Result<Vec<BoundPoint>, TheoryError> {
    if p_max < 1 {
        return Err(TheoryError::BadStreamCount);
    }
    (1..=p_max)
        .map(|p| {
            let rho = schedule.rho(p)?;
            let (g, clipped) = variance_factor(schedule, p)?;
            let bound = cantelli_failure_bound(sigma2 * g, mu)?;
            Ok(BoundPoint { p, rho: rho.value, g, bound, clipped })
        })
        .collect()
}

/// Result of the integer scan for the variance-minimizing stream count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalP {
    pub p_star: u32,
    pub g_star: f64,
    /// Strict interior minimum: both neighbors inside the scanned range
    /// are strictly worse.
    pub interior: bool,
    /// Continuous stationary point sqrt((1 - rho0 + beta) / beta),
    /// defined for the linear schedule gamma = 1.
    pub continuous: Option<f64>,
}

/// Brute-force integer scan of g over 1..=p_max. Ties keep the smallest P.
pub fn optimal_stream_count(
    schedule: &RhoSchedule,
    p_max: u32,
) -> Result<OptimalP, TheoryError> {
    if p_max < 1 {
        return Err(TheoryError::BadStreamCount);
    }
    let mut best_p = 1u32;
    let mut best_g = f64::INFINITY;
    let mut gs = Vec::with_capacity(p_max as usize);
    for p in 1..=p_max {
        let (g, _) = variance_factor(schedule, p)?;
        gs.push(g);
        if g < best_g {
            best_g = g;
            best_p = p;
        }
    }
    let i = (best_p - 1) as usize;
    let interior = best_p > 1
        && best_p < p_max
        && gs[i - 1] > best_g
        && gs[i + 1] > best_g;
    let continuous = if schedule.gamma == 1.0 && schedule.beta > 0.0 {
        Some(((1.0 - schedule.rho0 + schedule.beta) / schedule.beta).sqrt())
    } else {
        None
    };
    Ok(OptimalP { p_star: best_p, g_star: best_g, interior, continuous })
}

/// Monte Carlo summary of the aggregate score M = mean_i m_i with
/// m_i = mu + sigma * (sqrt(rho) c + sqrt(1-rho) e_i).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub n: u64,
    pub mean: f64,
    pub variance: f64,
    /// Fraction of draws with M <= 0.
    pub failure_rate: f64,
    /// Binomial standard error of the failure rate.
    pub se: f64,
}

struct ShardMoments {
    n: u64,
    mean: f64,
    m2: f64,
    failures: u64,
}

fn combine(a: ShardMoments, b: ShardMoments) -> ShardMoments {
    if b.n == 0 {
        return a;
    }
    if a.n == 0 {
        return b;
    }
    let n = a.n + b.n;
    let delta = b.mean - a.mean;
    let mean = a.mean + delta * (b.n as f64 / n as f64);
    let m2 = a.m2 + b.m2 + delta * delta * (a.n as f64 * b.n as f64 / n as f64);
    ShardMoments { n, mean, m2, failures: a.failures + b.failures }
}

/// Estimate mean, variance, and failure rate of the aggregate by direct
/// simulation of the stream construction. Work is split into `shards`
/// fixed sub-streams of the seed tree and reduced in shard order, so the
/// result is a pure function of (arguments, seed tree) regardless of how
/// many threads execute the shards.
pub fn mc_aggregate(
    sigma2: f64,
    mu: f64,
    rho: f64,
    p: u32,
    samples: u64,
    shards: u32,
    seeds: &SeedTree,
) -> Result<McEstimate, TheoryError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(TheoryError::BadRho(rho));
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(TheoryError::BadSigma2(sigma2));
    }
    if p < 1 {
        return Err(TheoryError::BadStreamCount);
    }
    if samples == 0 {
        return Err(TheoryError::NoSamples);
    }
    if shards == 0 {
        return Err(TheoryError::NoShards);
    }
    let sigma = sigma2.sqrt();
    let w_common = rho.sqrt();
    let w_indep = (1.0 - rho).sqrt();
    let base = samples / shards as u64;
    let extra = samples % shards as u64;

    let partials: Vec<ShardMoments> = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let n = base + if (shard as u64) < extra { 1 } else { 0 };
            let mut rng = seeds.rng_indexed("mc-shard", shard as u64);
            let mut mean = 0.0f64;
            let mut m2 = 0.0f64;
            let mut failures = 0u64;
            let inv_p = 1.0 / p as f64;
            for i in 0..n {
                let c: f64 = f64::sample_standard_normal(&mut rng);
                let mut e_sum = 0.0f64;
                for _ in 0..p {
                    e_sum += f64::sample_standard_normal(&mut rng);
                }
                let m = mu + sigma * (w_common * c + w_indep * e_sum * inv_p);
                if m <= 0.0 {
                    failures += 1;
                }
                // Welford update.
                let delta = m - mean;
                mean += delta / (i + 1) as f64;
                m2 += delta * (m - mean);
            }
            ShardMoments { n, mean, m2, failures }
        })
        .collect();

    let total = partials
        .into_iter()
        .fold(ShardMoments { n: 0, mean: 0.0, m2: 0.0, failures: 0 }, combine);
    let n = total.n;
    let variance = if n > 1 { total.m2 / (n as f64 - 1.0) } else { 0.0 };
    let rate = total.failures as f64 / n as f64;
    let se = (rate * (1.0 - rate) / n as f64).sqrt();
    Ok(McEstimate { n, mean: total.mean, variance, failure_rate: rate, se })
}

/// Certification of one grid cell: the empirical failure rate must not
/// exceed the Cantelli bound by more than `se_margin` standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCertification {
    pub sigma2: f64,
    pub mu: f64,
    pub rho: f64,
    pub p: u32,
    pub estimate: McEstimate,
    pub bound: f64,
    pub pass: bool,
}

pub fn certify_cell(
    sigma2: f64,
    mu: f64,
    rho: f64,
    p: u32,
    samples: u64,
    shards: u32,
    se_margin: f64,
    seeds: &SeedTree,
) -> Result<CellCertification, TheoryError> {
    let estimate = mc_aggregate(sigma2, mu, rho, p, samples, shards, seeds)?;
    let v = variance_of_mean(sigma2, rho, p)?;
    let bound = cantelli_failure_bound(v, mu)?;
    let pass = estimate.failure_rate <= bound + se_margin * estimate.se;
    Ok(CellCertification { sigma2, mu, rho, p, estimate, bound, pass })
}

/// Stable per-cell seed tree so every grid cell draws an independent,
/// reproducible stream.
pub fn cell_seeds(base: &SeedTree, sigma2: f64, mu: f64, rho: f64, p: u32) -> SeedTree {
    base.child(&format!("cell/sigma2={sigma2}/mu={mu}/rho={rho}/p={p}"))
}
