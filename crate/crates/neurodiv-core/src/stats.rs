//! Special functions and the statistical tests used by the corruption
//! experiments. Everything is evaluated in f64 from first principles
//! (Lanczos log-gamma, incomplete gamma/beta via series and continued
//! fractions) and validated against tabulated references in the tests.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("continued fraction failed to converge for {0}")]
    NoConvergence(&'static str),
    #[error("paired samples have mismatched lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two pairs, got {0}")]
    TooFewSamples(usize),
    #[error("p-value {0} outside (0, 1]")]
    BadPValue(f64),
}

const EPS: f64 = 1e-15;
const MAX_ITER: usize = 500;

/// Natural log of the gamma function (Lanczos, g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the approximation on its accurate half-line.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete gamma pair (P, Q) with P + Q = 1. The series
/// is used where it converges fast, the Lentz continued fraction where
/// the series does not; each branch computes its component directly so
/// small tails never go through a 1 - x cancellation.
pub fn reg_gamma_pq(a: f64, x: f64) -> Result<(f64, f64), StatsError> {
    if a <= 0.0 || x < 0.0 || !a.is_finite() || !x.is_finite() {
        return Err(StatsError::InvalidArgument(format!(
            "reg_gamma_pq(a={a}, x={x})"
        )));
    }
    if x == 0.0 {
        return Ok((0.0, 1.0));
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series for P.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = 1.0;
        loop {
            term *= x / (a + n);
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
            n += 1.0;
            if n as usize > MAX_ITER * 10 {
                return Err(StatsError::NoConvergence("incomplete gamma series"));
            }
        }
        let p = (sum * log_prefix.exp()).clamp(0.0, 1.0);
        Ok((p, 1.0 - p))
    } else {
        // Lentz continued fraction for Q.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        let mut converged = false;
        for i in 1..=MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(StatsError::NoConvergence("incomplete gamma fraction"));
        }
        let q = (h * log_prefix.exp()).clamp(0.0, 1.0);
        Ok((1.0 - q, q))
    }
}

pub fn erf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let p = reg_gamma_pq(0.5, x * x).expect("erf arguments are always valid").0;
    if x > 0.0 { p } else { -p }
}

/// Standard normal CDF. Negative arguments use the Q tail directly.
pub fn normal_cdf(x: f64) -> f64 {
    let z = x * x / 2.0;
    if x >= 0.0 {
        let (p, _) = reg_gamma_pq(0.5, z).unwrap_or((1.0, 0.0));
        0.5 * (1.0 + p)
    } else {
        let (_, q) = reg_gamma_pq(0.5, z).unwrap_or((1.0, 0.0));
        0.5 * q
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64, StatsError> {
    let tiny = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(StatsError::NoConvergence("incomplete beta fraction"))
}

/// Regularized incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64, StatsError> {
    if a <= 0.0 || b <= 0.0 || !(0.0..=1.0).contains(&x) {
        return Err(StatsError::InvalidArgument(format!(
            "reg_inc_beta(a={a}, b={b}, x={x})"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_bt =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok((bt * beta_cf(a, b, x)? / a).clamp(0.0, 1.0))
    } else {
        Ok((1.0 - bt * beta_cf(b, a, 1.0 - x)? / b).clamp(0.0, 1.0))
    }
}

/// Two-sided p-value for a Student t statistic with `df` degrees of freedom:
/// I_{df/(df+t^2)}(df/2, 1/2).
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64, StatsError> {
    if df <= 0.0 {
        return Err(StatsError::InvalidArgument(format!("df={df}")));
    }
    if !t.is_finite() {
        return Ok(0.0);
    }
    reg_inc_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: f64) -> Result<f64, StatsError> {
    if df <= 0.0 || x < 0.0 {
        return Err(StatsError::InvalidArgument(format!(
            "chi_square_sf(x={x}, df={df})"
        )));
    }
    Ok(reg_gamma_pq(0.5 * df, 0.5 * x)?.1)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// P(X <= k) for X ~ Binomial(n, 1/2).
pub fn binomial_half_cdf(k: u64, n: u64) -> f64 {
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut p = 0.0;
    for i in 0..=k.min(n) {
        p += (ln_choose(n, i) + ln_half_n).exp();
    }
    p.min(1.0)
}

/// Paired t-test on matched samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedT {
    pub n: usize,
    pub mean_delta: f64,
    pub sd_delta: f64,
    pub t: f64,
    pub p: f64,
    /// All deltas identical (zero variance): t is undefined, p pinned to 1.
    pub degenerate: bool,
}

pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<PairedT, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    let deltas: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let ss: f64 = deltas.iter().map(|d| (d - mean) * (d - mean)).sum();
    let var = ss / (n as f64 - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(PairedT {
            n,
            mean_delta: mean,
            sd_delta: 0.0,
            t: 0.0,
            p: 1.0,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = student_t_two_sided_p(t, n as f64 - 1.0)?;
    Ok(PairedT { n, mean_delta: mean, sd_delta: sd, t, p, degenerate: false })
}

/// Fisher's combination of independent p-values: chi2 = -2 sum ln p with
/// 2k degrees of freedom. Zero or negative p-values are rejected because
/// the log diverges.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherCombined {
    pub chi2: f64,
    pub dof: u64,
    pub p: f64,
}

pub fn fisher_combine(p_values: &[f64]) -> Result<FisherCombined, StatsError> {
    if p_values.is_empty() {
        return Err(StatsError::InvalidArgument("no p-values".into()));
    }
    let mut chi2 = 0.0;
    for &p in p_values {
        if !(p > 0.0 && p <= 1.0) {
            return Err(StatsError::BadPValue(p));
        }
        chi2 += -2.0 * p.ln();
    }
    let dof = 2 * p_values.len() as u64;
    let p = chi_square_sf(chi2, dof as f64)?;
    Ok(FisherCombined { chi2, dof, p })
}

/// McNemar test on discordant pair counts. Exact binomial when
/// b + c <= 25, chi-square approximation above that.
#[derive(Debug, Clone, PartialEq)]
pub struct McNemar {
    pub b: u64,
    pub c: u64,
    pub p: f64,
    pub exact: bool,
    /// Present only on the chi-square branch.
    pub chi2: Option<f64>,
}

pub fn mcnemar_test(b: u64, c: u64) -> Result<McNemar, StatsError> {
    let n = b + c;
    if n == 0 {
        // No discordant pairs carries no evidence either way.
        return Ok(McNemar { b, c, p: 1.0, exact: true, chi2: None });
    }
    if n <= 25 {
        let tail = binomial_half_cdf(b.min(c), n);
        let p = (2.0 * tail).min(1.0);
        Ok(McNemar { b, c, p, exact: true, chi2: None })
    } else {
        let diff = b as f64 - c as f64;
        let chi2 = diff * diff / n as f64;
        let p = chi_square_sf(chi2, 1.0)?;
        Ok(McNemar { b, c, p, exact: false, chi2: Some(chi2) })
    }
}

/// Paired bootstrap on per-pair deltas: resample with replacement, count
/// resampled means on each side of zero, and report the two-sided
/// add-one-smoothed p-value, which is always in (0, 1] and therefore safe
/// to feed into Fisher's combination.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapP {
    pub replicates: usize,
    pub p: f64,
}

pub fn bootstrap_paired_p<R: Rng>(
    deltas: &[f64],
    replicates: usize,
    rng: &mut R,
) -> Result<BootstrapP, StatsError> {
    if deltas.is_empty() {
        return Err(StatsError::InvalidArgument("no deltas".into()));
    }
    if replicates == 0 {
        return Err(StatsError::InvalidArgument("zero replicates".into()));
    }
    let n = deltas.len();
    let mut le = 0usize;
    let mut ge = 0usize;
    for _ in 0..replicates {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += deltas[rng.gen_range(0..n)];
        }
        let mean = sum / n as f64;
        if mean <= 0.0 {
            le += 1;
        }
        if mean >= 0.0 {
            ge += 1;
        }
    }
    let p = (2.0 * (le.min(ge) + 1) as f64 / (replicates + 1) as f64).min(1.0);
    Ok(BootstrapP { replicates, p })
}

/// Kolmogorov-Smirnov distance between a sample and Uniform(0,1).
pub fn ks_distance_uniform(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::InvalidArgument("no values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("p-values must not be NaN"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let hi = (i as f64 + 1.0) / n - x;
        let lo = x - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_rel(actual: f64, expected: f64, tol: f64) {
        let denom = expected.abs().max(1e-300);
        assert!(
            ((actual - expected) / denom).abs() <= tol || (actual - expected).abs() <= tol,
            "actual {actual} expected {expected}"
        );
    }

    #[test]
    fn ln_gamma_matches_reference() {
        for &(x, want) in &[
            (0.5, 0.5723649429247),
            (1.0, 0.0),
            (1.5, -0.12078223763524526),
            (2.0, 0.0),
            (3.7, 1.428072326665388),
            (10.0, 12.801827480081469),
            (100.0, 359.1342053695754),
            (0.1, 2.252712651734206),
        ] {
            assert_rel(ln_gamma(x), want, 1e-12);
        }
    }

    #[test]
    fn erf_matches_reference() {
        for &(x, want) in &[
            (0.0, 0.0),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497148),
            (2.0, 0.9953222650189527),
            (-1.5, -0.9661051464753108),
            (3.0, 0.9999779095030014),
        ] {
            assert_rel(erf(x), want, 1e-12);
        }
    }

    #[test]
    fn normal_cdf_matches_reference() {
        for &(x, want) in &[
            (-3.0, 0.0013498980316300933),
            (-1.0, 0.15865525393145707),
            (0.0, 0.5),
            (0.5, 0.6914624612740131),
            (2.0, 0.9772498680518208),
            (4.0, 0.9999683287581669),
        ] {
            assert_rel(normal_cdf(x), want, 1e-12);
        }
    }

    #[test]
    fn incomplete_gamma_matches_reference() {
        for &(a, x, want) in &[
            (0.5, 0.25, 0.5204998778130466),
            (1.0, 1.0, 0.6321205588285577),
            (2.5, 1.3, 0.23863473215498604),
            (4.0, 8.0, 0.957619888008316),
            (10.0, 3.0, 0.0011024881301154815),
        ] {
            let (p, q) = reg_gamma_pq(a, x).unwrap();
            assert_rel(p, want, 1e-12);
            assert_rel(p + q, 1.0, 1e-12);
        }
    }

    #[test]
    fn incomplete_beta_matches_reference() {
        for &(a, b, x, want) in &[
            (0.5, 0.5, 0.3, 0.36901011956554536),
            (2.0, 3.0, 0.4, 0.5247999999999999),
            (3.5, 1.2, 0.75, 0.43979698406415746),
            (10.0, 10.0, 0.5, 0.5),
            (0.5, 4.0, 0.05, 0.46540785173875493),
        ] {
            assert_rel(reg_inc_beta(a, b, x).unwrap(), want, 1e-12);
        }
    }

    #[test]
    fn student_t_matches_reference() {
        for &(t, df, want) in &[
            (2.1, 7.0, 0.0738711962129226),
            (0.0, 5.0, 1.0),
            (-3.3, 12.0, 0.006340750106287178),
            (1.0, 1.0, 0.49999999999999956),
            (5.0, 30.0, 2.3296685467007786e-5),
        ] {
            assert_rel(student_t_two_sided_p(t, df).unwrap(), want, 1e-10);
        }
    }

    #[test]
    fn chi_square_matches_reference() {
        for &(x, df, want) in &[
            (5.545177444479562, 8.0, 0.6980297367583733),
            (1.0, 1.0, 0.31731050786291115),
            (10.0, 4.0, 0.04042768199451279),
            (3.0, 2.0, 0.22313016014842982),
            (25.0, 10.0, 0.005345505487134069),
        ] {
            assert_rel(chi_square_sf(x, df).unwrap(), want, 1e-10);
        }
    }

    #[test]
    fn paired_t_matches_reference() {
        let x = [1.2, 0.8, 1.5, 0.9, 1.1, 1.3, 0.7, 1.0];
        let y = [1.0, 0.9, 1.2, 1.0, 0.9, 1.1, 0.8, 0.9];
        let r = paired_t_test(&x, &y).unwrap();
        assert_rel(r.t, 1.5071573172061192, 1e-12);
        assert_rel(r.p, 0.1754994493585012, 1e-10);
        assert_rel(r.mean_delta, 0.0875, 1e-12);
        assert!(!r.degenerate);
    }

    #[test]
    fn paired_t_zero_variance_is_flagged() {
        let x = [1.0, 2.0, 3.0];
        let y = [0.5, 1.5, 2.5];
        let r = paired_t_test(&x, &y).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.mean_delta, 0.5);
    }

    #[test]
    fn fisher_known_value() {
        // Four p-values of 0.5 give chi2 = -8 ln 0.5 = 5.545177...
        let r = fisher_combine(&[0.5; 4]).unwrap();
        assert_rel(r.chi2, 5.545177444479562, 1e-3);
        assert_eq!(r.dof, 8);
        assert_rel(r.p, 0.6980297367583733, 1e-10);
        assert!(fisher_combine(&[0.5, 0.0]).is_err());
        assert!(fisher_combine(&[1.5]).is_err());
    }

    #[test]
    fn mcnemar_exact_and_chi2_branches() {
        // b=0, c=15: two-sided exact p = 2 * 0.5^15.
        let r = mcnemar_test(0, 15).unwrap();
        assert!(r.exact);
        assert_rel(r.p, 6.103515625e-5, 1e-12);
        // b=2, c=13 exact: 2 * BinomCDF(2; 15, 1/2).
        let r = mcnemar_test(2, 13).unwrap();
        assert!(r.exact);
        assert_rel(r.p, 0.00738525390625, 1e-12);
        // Equal discordance is no evidence.
        let r = mcnemar_test(4, 4).unwrap();
        assert_eq!(r.p, 1.0);
        // Large counts switch to chi-square: (30-10)^2/40 = 10.
        let r = mcnemar_test(30, 10).unwrap();
        assert!(!r.exact);
        assert_rel(r.chi2.unwrap(), 10.0, 1e-12);
        // No discordant pairs at all.
        let r = mcnemar_test(0, 0).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn bootstrap_p_is_smoothed_and_detects_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Strong positive shift: all resampled means > 0, so the smoothed
        // p equals 2/(R+1).
        let deltas = vec![1.0; 24];
        let r = bootstrap_paired_p(&deltas, 999, &mut rng).unwrap();
        assert_rel(r.p, 2.0 / 1000.0, 1e-12);
        // Symmetric noise: p should be large.
        let deltas: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = bootstrap_paired_p(&deltas, 999, &mut rng).unwrap();
        assert!(r.p > 0.2, "p = {}", r.p);
        assert!(r.p <= 1.0);
    }

    #[test]
    fn ks_distance_detects_uniform_and_shifted() {
        // A perfect uniform grid has distance 1/(2n) at midpoints; use
        // x_i = (i - 0.5)/n which achieves exactly 1/(2n).
        let n = 100;
        let grid: Vec<f64> = (1..=n).map(|i| (i as f64 - 0.5) / n as f64).collect();
        let d = ks_distance_uniform(&grid).unwrap();
        assert_rel(d, 0.5 / n as f64, 1e-12);
        // Everything piled near zero is far from uniform.
        let piled: Vec<f64> = (0..n).map(|i| 0.001 * (i as f64 + 1.0) / n as f64).collect();
        assert!(ks_distance_uniform(&piled).unwrap() > 0.9);
    }

    #[test]
    fn proptest_p_values_stay_in_range() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(
                &(proptest::collection::vec(-1e3f64..1e3, 2..64), 1u64..1_000_000),
                |(deltas, seed)| {
                    let y = vec![0.0; deltas.len()];
                    let r = paired_t_test(&deltas, &y).unwrap();
                    prop_assert!(r.p >= 0.0 && r.p <= 1.0);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let b = bootstrap_paired_p(&deltas, 99, &mut rng).unwrap();
                    prop_assert!(b.p > 0.0 && b.p <= 1.0);
                    Ok(())
                },
            )
            .unwrap();
    }
}
