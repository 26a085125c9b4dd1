//! Representation-diversity measurement and decorrelation losses.
//!
//! Given per-stream feature matrices `Z_1..Z_P` (one row per sample), this
//! module provides:
//!
//! - detached (metric-side, always `f64`) normalization: per-dimension
//!   standardization or full ZCA whitening;
//! - the pairwise cross-correlation matrix `C_ij = Z_i^T Z_j / N`;
//! - a deterministic power-iteration spectral norm;
//! - the stream-diversity score: the mean spectral norm of `C_ij` over all
//!   pairs of distinct streams (ordered and unordered means coincide because
//!   the spectral norm is transpose-invariant);
//! - an in-graph, differentiable decorrelation penalty that pushes each
//!   cross-correlation matrix toward the identity, with either the full set
//!   of stream pairs or a sampled subset for cheaper steps.
//!
//! Interpretation: after whitening, the singular values of `C_ij` are the
//! canonical correlations between the two streams' feature spaces, so the
//! score lands in `[0, 1]`; `1` means some direction is perfectly shared.
//! With plain standardization the score can exceed 1 because within-stream
//! correlations are not removed. Note that whitened scores degenerate to
//! exactly 1 whenever `2d > N - 1`: two d-dimensional subspaces of the
//! centered sample space must then intersect. Use sample counts well above
//! the feature dimension when whitening.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AutodiffError, GraphBuilder, NodeId, Real, Tensor};
use crate::linalg::{self, LinalgError};
use crate::seeding::SeedTree;

/// Variance floor used when standardizing or whitening on the metric side.
/// Dimensions whose variance falls below the floor are treated as having
/// exactly this variance, which sends (near-)constant dimensions to zero
/// instead of amplifying noise.
pub const VARIANCE_FLOOR: f64 = 1e-5;

/// Additive variance epsilon used inside the differentiable loss; this keeps
/// the standardization smooth (the metric-side hard floor is not
/// differentiable).
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Power-iteration convergence threshold on successive singular-value
/// estimates, relative to `max(sigma, 1)`.
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Power-iteration cap. Non-convergence within this budget is reported via
/// [`SpectralNorm::converged`] rather than by failing.
pub const SPECTRAL_MAX_ITERS: usize = 2000;

/// Errors from diversity metrics and loss construction.
#[derive(Debug, thiserror::Error)]
pub enum DiversityError {
    #[error("need at least two streams, got {0}")]
    TooFewStreams(usize),
    #[error("need at least two samples per stream, got {0}")]
    TooFewSamples(usize),
    #[error("stream {stream} has {got} values, expected {expected}")]
    StreamLength {
        stream: usize,
        got: usize,
        expected: usize,
    },
    #[error("pair ({i}, {j}) is invalid for {p} streams (need i < j < p)")]
    BadPair { i: usize, j: usize, p: usize },
    #[error("duplicate stream pair ({i}, {j})")]
    DuplicatePair { i: usize, j: usize },
    #[error("requested {requested} pairs but only {available} exist")]
    PairBudget { requested: usize, available: usize },
    #[error("requested zero pairs")]
    NoPairs,
    #[error("unknown normalization {0:?} (expected standardize or whiten)")]
    BadNormalization(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Detached normalization applied before measuring cross-stream correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Center and scale each feature dimension to unit variance.
    Standardize,
    /// Center and multiply by the inverse matrix square root of the
    /// covariance (ZCA), producing identity covariance per stream.
    Whiten,
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Normalization::Standardize => write!(f, "standardize"),
            Normalization::Whiten => write!(f, "whiten"),
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = DiversityError;

    fn from_str(s: &str) -> Result<Self, DiversityError> {
        match s {
            "standardize" => Ok(Normalization::Standardize),
            "whiten" => Ok(Normalization::Whiten),
            other => Err(DiversityError::BadNormalization(other.to_string())),
        }
    }
}

/// A batch of per-stream feature matrices with identical shape `(n, d)`,
/// stored row-major in `f64` for metric computation.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    p: usize,
    n: usize,
    d: usize,
    streams: Vec<Vec<f64>>,
}

impl FeatureSet {
    /// Builds a feature set from `p` row-major `(n, d)` matrices.
    pub fn new(streams: Vec<Vec<f64>>, n: usize, d: usize) -> Result<Self, DiversityError> {
        let p = streams.len();
        if p < 2 {
            return Err(DiversityError::TooFewStreams(p));
        }
        if n < 2 {
            return Err(DiversityError::TooFewSamples(n));
        }
        for (i, s) in streams.iter().enumerate() {
            if s.len() != n * d {
                return Err(DiversityError::StreamLength {
                    stream: i,
                    got: s.len(),
                    expected: n * d,
                });
            }
        }
        Ok(FeatureSet { p, n, d, streams })
    }

    /// Builds a feature set from per-stream tensors. Each tensor must share
    /// one shape whose last axis is the feature dimension; leading axes are
    /// flattened into the sample axis.
    pub fn from_tensors<T: Real>(tensors: &[&Tensor<T>]) -> Result<Self, DiversityError> {
        let p = tensors.len();
        if p < 2 {
            return Err(DiversityError::TooFewStreams(p));
        }
        let shape = tensors[0].shape().to_vec();
        if shape.is_empty() {
            return Err(DiversityError::TooFewSamples(1));
        }
        let d = *shape.last().expect("non-empty shape");
        let n = shape[..shape.len() - 1].iter().product::<usize>();
        let mut streams = Vec::with_capacity(p);
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(DiversityError::StreamLength {
                    stream: i,
                    got: t.numel(),
                    expected: n * d,
                });
            }
            streams.push(t.to_f64_vec());
        }
        FeatureSet::new(streams, n, d)
    }

    pub fn stream_count(&self) -> usize {
        self.p
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn stream(&self, i: usize) -> &[f64] {
        &self.streams[i]
    }

    /// Centers each stream and scales every feature dimension to unit
    /// variance, with variances floored at `variance_floor` so constant
    /// dimensions map to zero instead of blowing up.
    pub fn standardized(&self, variance_floor: f64) -> FeatureSet {
        let (n, d) = (self.n, self.d);
        let streams = self
            .streams
            .iter()
            .map(|z| {
                let mut out = vec![0.0; n * d];
                for k in 0..d {
                    let mean = column_mean(z, n, d, k);
                    let mut var = 0.0;
                    for t in 0..n {
                        let c = z[t * d + k] - mean;
                        var += c * c;
                    }
                    var /= n as f64;
                    let inv_sd = 1.0 / var.max(variance_floor).sqrt();
                    for t in 0..n {
                        out[t * d + k] = (z[t * d + k] - mean) * inv_sd;
                    }
                }
                out
            })
            .collect();
        FeatureSet {
            p: self.p,
            n,
            d,
            streams,
        }
    }

    /// Centers each stream and applies ZCA whitening: multiplies by the
    /// inverse matrix square root of the per-stream covariance, with
    /// eigenvalues floored at `variance_floor`. The result has identity
    /// covariance on all directions above the floor.
    pub fn whitened(&self, variance_floor: f64) -> Result<FeatureSet, DiversityError> {
        let (n, d) = (self.n, self.d);
        let mut streams = Vec::with_capacity(self.p);
        for z in &self.streams {
            let mut centered = vec![0.0; n * d];
            for k in 0..d {
                let mean = column_mean(z, n, d, k);
                for t in 0..n {
                    centered[t * d + k] = z[t * d + k] - mean;
                }
            }
            let mut cov = vec![0.0; d * d];
            for t in 0..n {
                let row = &centered[t * d..(t + 1) * d];
                for a in 0..d {
                    for b in 0..d {
                        cov[a * d + b] += row[a] * row[b];
                    }
                }
            }
            for v in cov.iter_mut() {
                *v /= n as f64;
            }
            let w = linalg::inverse_sqrt_psd(&cov, d, variance_floor)?;
            streams.push(linalg::matmul(&centered, &w, n, d, d));
        }
        Ok(FeatureSet {
            p: self.p,
            n,
            d,
            streams,
        })
    }

    /// Applies the requested normalization.
    pub fn normalized(
        &self,
        normalization: Normalization,
        variance_floor: f64,
    ) -> Result<FeatureSet, DiversityError> {
        match normalization {
            Normalization::Standardize => Ok(self.standardized(variance_floor)),
            Normalization::Whiten => self.whitened(variance_floor),
        }
    }
}

fn column_mean(z: &[f64], n: usize, d: usize, k: usize) -> f64 {
    let mut acc = 0.0;
    for t in 0..n {
        acc += z[t * d + k];
    }
    acc / n as f64
}

/// Cross-correlation matrix `C = A^T B / n` for two row-major `(n, d)`
/// matrices, returned row-major `(d, d)`.
pub fn cross_correlation(a: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * d);
    debug_assert_eq!(b.len(), n * d);
    let mut c = vec![0.0; d * d];
    for t in 0..n {
        let ra = &a[t * d..(t + 1) * d];
        let rb = &b[t * d..(t + 1) * d];
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += ra[i] * rb[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for v in c.iter_mut() {
        *v *= inv_n;
    }
    c
}

/// Result of a power-iteration spectral-norm computation.
#[derive(Debug, Clone, Copy)]
pub struct SpectralNorm {
    /// Largest-singular-value estimate.
    pub value: f64,
    /// Iterations performed.
    pub iterations: usize,
    /// Whether the estimate met [`SPECTRAL_TOL`] before the iteration cap.
    pub converged: bool,
}

/// Largest singular value of a row-major `(rows, cols)` matrix via power
/// iteration on `M^T M`, with a seeded random start vector so results are
/// reproducible. Ties or tight spectral gaps may hit the iteration cap; the
/// last estimate is still returned with `converged = false`.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize, seed: u64) -> SpectralNorm {
    assert_eq!(m.len(), rows * cols, "matrix data does not match its shape");
    if rows == 0 || cols == 0 {
        return SpectralNorm {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut rng: ChaCha8Rng = SeedTree::new(seed).rng("spectral-start");
    let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    let mut u = vec![0.0; rows];
    let mut w = vec![0.0; cols];
    let mut sigma = 0.0;
    for iter in 1..=SPECTRAL_MAX_ITERS {
        // u = M v
        for (r, ur) in u.iter_mut().enumerate() {
            let row = &m[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v.iter()) {
                acc += a * b;
            }
            *ur = acc;
        }
        let next = norm2(&u);
        // w = M^T u
        w.iter_mut().for_each(|x| *x = 0.0);
        for (r, ur) in u.iter().enumerate() {
            let row = &m[r * cols..(r + 1) * cols];
            for (wc, a) in w.iter_mut().zip(row.iter()) {
                *wc += a * ur;
            }
        }
        let wn = norm2(&w);
        if wn < 1e-300 {
            // The iterate landed in (or the matrix maps everything to) the
            // null space; the norm estimate is the current sigma (zero for a
            // zero matrix).
            return SpectralNorm {
                value: next,
                iterations: iter,
                converged: true,
            };
        }
        let delta = (next - sigma).abs();
        sigma = next;
        if delta <= SPECTRAL_TOL * sigma.max(1.0) {
            return SpectralNorm {
                value: sigma,
                iterations: iter,
                converged: true,
            };
        }
        for (vc, wc) in v.iter_mut().zip(w.iter()) {
            *vc = wc / wn;
        }
    }
    SpectralNorm {
        value: sigma,
        iterations: SPECTRAL_MAX_ITERS,
        converged: false,
    }
}

fn norm2(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    } else {
        // Astronomically unlikely for a Gaussian start, but keep it sane.
        v[0] = 1.0;
    }
}

/// Spectral norm of one stream pair's cross-correlation matrix.
#[derive(Debug, Clone, Copy)]
pub struct PairCorrelation {
    pub i: usize,
    pub j: usize,
    pub spectral_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Stream-diversity score: mean spectral norm of the pairwise
/// cross-correlation matrices. Lower is more diverse.
#[derive(Debug, Clone)]
pub struct StreamDiversity {
    /// Mean of `pairs[*].spectral_norm`.
    pub value: f64,
    /// One entry per unordered stream pair, in lexicographic order.
    pub pairs: Vec<PairCorrelation>,
    /// True when every pair's power iteration converged.
    pub all_converged: bool,
}

/// Computes the stream-diversity score of a feature set under the given
/// normalization. The mean runs over unordered pairs, which equals the mean
/// over ordered pairs because `C_ji = C_ij^T` has the same spectral norm.
/// `seed` only fixes the power-iteration start vectors.
pub fn stream_diversity(
    set: &FeatureSet,
    normalization: Normalization,
    variance_floor: f64,
    seed: u64,
) -> Result<StreamDiversity, DiversityError> {
    let normalized = set.normalized(normalization, variance_floor)?;
    let (p, n, d) = (normalized.p, normalized.n, normalized.d);
    let seeds = SeedTree::new(seed);
    let mut pairs = Vec::with_capacity(p * (p - 1) / 2);
    let mut sum = 0.0;
    let mut all_converged = true;
    for i in 0..p {
        for j in (i + 1)..p {
            let c = cross_correlation(normalized.stream(i), normalized.stream(j), n, d);
            let pair_seed = seeds.subseed_indexed("pair", (i * p + j) as u64);
            let sn = spectral_norm(&c, d, d, pair_seed);
            sum += sn.value;
            all_converged &= sn.converged;
            pairs.push(PairCorrelation {
                i,
                j,
                spectral_norm: sn.value,
                iterations: sn.iterations,
                converged: sn.converged,
            });
        }
    }
    let value = sum / pairs.len() as f64;
    Ok(StreamDiversity {
        value,
        pairs,
        all_converged,
    })
}

/// Number of unordered stream pairs.
pub fn full_pair_count(p: usize) -> usize {
    p * (p - 1) / 2
}

/// Samples `k` distinct unordered stream pairs uniformly without
/// replacement, returned in lexicographic order so downstream loss graphs
/// are built deterministically given the sampled set.
pub fn sample_pairs<R: Rng + ?Sized>(
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>, DiversityError> {
    if p < 2 {
        return Err(DiversityError::TooFewStreams(p));
    }
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(full_pair_count(p));
    for i in 0..p {
        for j in (i + 1)..p {
            all.push((i, j));
        }
    }
    if k == 0 {
        return Err(DiversityError::NoPairs);
    }
    if k > all.len() {
        return Err(DiversityError::PairBudget {
            requested: k,
            available: all.len(),
        });
    }
    // Partial Fisher-Yates: after k swaps the first k slots are a uniform
    // k-subset.
    for idx in 0..k {
        let pick = rng.gen_range(idx..all.len());
        all.swap(idx, pick);
    }
    all.truncate(k);
    all.sort_unstable();
    Ok(all)
}

/// Handles to the nodes of an in-graph decorrelation loss.
#[derive(Debug, Clone)]
pub struct DecorrelationLoss {
    /// Scalar loss: mean over the selected pairs of the squared Frobenius
    /// distance between the cross-correlation matrix and the identity.
    pub loss: NodeId,
    /// Per-pair squared-distance nodes, matching `pairs` order.
    pub pair_terms: Vec<(usize, usize, NodeId)>,
    /// Number of pairs the loss averaged over.
    pub pair_count: usize,
}

/// Builds the differentiable decorrelation penalty over the given stream
/// feature nodes. Each feature node may have any rank >= 2 with the feature
/// dimension last; leading axes are flattened into samples. Features are
/// standardized in-graph with a smooth epsilon, then every selected pair
/// contributes `||Z_i^T Z_j / n - I||_F^2`; the loss is the mean over pairs.
///
/// Pairs must satisfy `i < j` and are sorted (and checked for duplicates) so
/// an exhaustive sample builds the exact same graph as the full loss.
pub fn decorrelation_loss<T: Real>(
    gb: &mut GraphBuilder<T>,
    features: &[NodeId],
    pairs: &[(usize, usize)],
    eps: f64,
) -> Result<DecorrelationLoss, DiversityError> {
    let p = features.len();
    if p < 2 {
        return Err(DiversityError::TooFewStreams(p));
    }
    let mut pairs: Vec<(usize, usize)> = pairs.to_vec();
    pairs.sort_unstable();
    if pairs.is_empty() {
        return Err(DiversityError::NoPairs);
    }
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            return Err(DiversityError::DuplicatePair {
                i: w[0].0,
                j: w[0].1,
            });
        }
    }
    for &(i, j) in &pairs {
        if i >= j || j >= p {
            return Err(DiversityError::BadPair { i, j, p });
        }
    }

    // Standardize only the streams that participate in a selected pair.
    let mut used = vec![false; p];
    for &(i, j) in &pairs {
        used[i] = true;
        used[j] = true;
    }
    let mut standardized: Vec<Option<(NodeId, usize, usize)>> = vec![None; p];
    for (s, flag) in used.iter().enumerate() {
        if !flag {
            continue;
        }
        let shape = gb.shape(features[s])?.to_vec();
        if shape.len() < 2 {
            return Err(DiversityError::Autodiff(AutodiffError::Shape {
                node: features[s],
                op: "decorrelation_loss",
                msg: format!("feature node must have rank >= 2, got shape {shape:?}"),
            }));
        }
        let d = *shape.last().expect("rank >= 2");
        let n: usize = shape[..shape.len() - 1].iter().product();
        if n < 2 {
            return Err(DiversityError::TooFewSamples(n));
        }
        let flat = gb.reshape(features[s], &[n, d])?;
        let mean = gb.mean_axis(flat, 0)?;
        let centered = gb.sub(flat, mean)?;
        let sq = gb.mul(centered, centered)?;
        let var = gb.mean_axis(sq, 0)?;
        let shifted = gb.add_scalar(var, eps)?;
        let inv_sd = gb.powf(shifted, -0.5)?;
        let z = gb.mul(centered, inv_sd)?;
        standardized[s] = Some((z, n, d));
    }

    let mut pair_terms = Vec::with_capacity(pairs.len());
    let mut total: Option<NodeId> = None;
    for &(i, j) in &pairs {
        let (zi, ni, di) = standardized[i].expect("standardized above");
        let (zj, nj, dj) = standardized[j].expect("standardized above");
        if ni != nj || di != dj {
            return Err(DiversityError::StreamLength {
                stream: j,
                got: nj * dj,
                expected: ni * di,
            });
        }
        let raw = gb.matmul_tn(zi, zj)?;
        let c = gb.scale(raw, 1.0 / ni as f64)?;
        let eye = gb.constant(Tensor::eye(di));
        let diff = gb.sub(c, eye)?;
        let term = gb.frob_sq(diff)?;
        pair_terms.push((i, j, term));
        total = Some(match total {
            None => term,
            Some(t) => gb.add(t, term)?,
        });
    }
    let total = total.expect("at least one pair");
    let loss = gb.scale(total, 1.0 / pairs.len() as f64)?;
    Ok(DecorrelationLoss {
        loss,
        pair_terms,
        pair_count: pairs.len(),
    })
}

/// Builds the full decorrelation penalty over every unordered stream pair.
pub fn full_decorrelation_loss<T: Real>(
    gb: &mut GraphBuilder<T>,
    features: &[NodeId],
    eps: f64,
) -> Result<DecorrelationLoss, DiversityError> {
    let p = features.len();
    if p < 2 {
        return Err(DiversityError::TooFewStreams(p));
    }
    let mut pairs = Vec::with_capacity(full_pair_count(p));
    for i in 0..p {
        for j in (i + 1)..p {
            pairs.push((i, j));
        }
    }
    decorrelation_loss(gb, features, &pairs, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fdcheck, Bindings, Graph};
    use proptest::prelude::*;
    use rand::SeedableRng;

    /// Three 8x4 feature matrices (literal data; oracle values below were
    /// computed independently with numpy/LAPACK on the same literals).
    fn small_streams() -> Vec<Vec<f64>> {
        vec![
            vec![
                0.496714, -0.138264, 0.647689, 1.52303, -0.234153, -0.234137, 1.579213, 0.767435,
                -0.469474, 0.54256, -0.463418, -0.46573, 0.241962, -1.91328, -1.724918, -0.562288,
                -1.012831, 0.314247, -0.908024, -1.412304, 1.465649, -0.225776, 0.067528,
                -1.424748, -0.544383, 0.110923, -1.150994, 0.375698, -0.600639, -0.291694,
                -0.601707, 1.852278,
            ],
            vec![
                0.079754, -1.486566, 1.333817, -1.731265, 0.413295, -2.839505, -1.892279,
                0.395292, 1.2077, 0.357052, -0.073472, -0.351656, -2.117783, -0.979766, -0.590958,
                1.685683, 0.615427, -2.54456, 0.586126, -0.477623, -0.915383, 1.017514, 1.646499,
                1.49692, -1.158826, -0.363819, 0.596895, 1.563318, -0.618761, -0.178488,
                -1.559502, -1.69431,
            ],
            vec![
                1.825052, 2.91248, 0.05598, 2.207066, 0.923272, -1.09024, 0.922791, 3.276073,
                0.128348, 3.329287, -5.03949, 1.843805, 0.374094, -0.398015, 0.383522, -3.775138,
                -0.239344, 0.914225, 3.155788, -0.83654, -1.416987, -0.803514, 2.030804, 0.857502,
                -0.85952, 1.226535, 0.394155, 2.13729, -1.204106, -0.455324, -0.584216, -2.72703,
            ],
        ]
    }

    fn small_set() -> FeatureSet {
        FeatureSet::new(small_streams(), 8, 4).expect("valid")
    }

    /// Deterministic 3x64x4 features from exact integer arithmetic, so an
    /// independent implementation reproduces them bit-for-bit: a component
    /// shared across streams plus a stream-specific one.
    fn formula_set() -> FeatureSet {
        let (p, n, d) = (3usize, 64usize, 4usize);
        let mut streams = Vec::with_capacity(p);
        for s in 0..p {
            let mut z = Vec::with_capacity(n * d);
            for t in 0..n {
                for k in 0..d {
                    let shared = (((t * d + k) * 37 + 11) % 101) as f64 / 101.0 - 0.5;
                    let g = s * n * d + t * d + k;
                    let own = ((g * 53 + 29) % 103) as f64 / 103.0 - 0.5;
                    z.push(shared + 0.9 * own);
                }
            }
            streams.push(z);
        }
        FeatureSet::new(streams, n, d).expect("valid")
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn spectral_norm_matches_reference_values() {
        // numpy.linalg.norm(m, 2) on the same literals.
        let m = [
            1.0, 2.0, 0.5, -1.0, 0.0, 3.0, -2.0, 1.5, 2.0, -1.0, 1.0, 0.0,
        ];
        let got = spectral_norm(&m, 3, 4, 7);
        assert!(got.converged);
        assert!(rel_close(got.value, 4.267030573297398, 1e-9), "{got:?}");

        // Transposing preserves singular values.
        let mut mt = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                mt[c * 3 + r] = m[r * 4 + c];
            }
        }
        let got_t = spectral_norm(&mt, 4, 3, 7);
        assert!(rel_close(got.value, got_t.value, 1e-9));

        // Symmetric case with a known top eigenvalue.
        let sym = [2.0, 1.0, 1.0, 2.0];
        let got = spectral_norm(&sym, 2, 2, 0);
        assert!(rel_close(got.value, 3.0, 1e-10));

        let zero = [0.0; 6];
        let got = spectral_norm(&zero, 2, 3, 0);
        assert_eq!(got.value, 0.0);
        assert!(got.converged);

        let id = [1.0, 0.0, 0.0, 1.0];
        let got = spectral_norm(&id, 2, 2, 3);
        assert!(got.converged);
        assert!(rel_close(got.value, 1.0, 1e-12));
    }

    #[test]
    fn cross_correlation_matches_naive_loop() {
        let set = small_set();
        let (n, d) = (set.sample_count(), set.dim());
        let c = cross_correlation(set.stream(0), set.stream(1), n, d);
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for t in 0..n {
                    acc += set.stream(0)[t * d + i] * set.stream(1)[t * d + j];
                }
                acc /= n as f64;
                assert!((c[i * d + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standardized_features_have_zero_mean_unit_variance() {
        let std = formula_set().standardized(VARIANCE_FLOOR);
        let (n, d) = (std.sample_count(), std.dim());
        for s in 0..std.stream_count() {
            for k in 0..d {
                let mean = column_mean(std.stream(s), n, d, k);
                let mut var = 0.0;
                for t in 0..n {
                    let c = std.stream(s)[t * d + k] - mean;
                    var += c * c;
                }
                var /= n as f64;
                assert!(mean.abs() < 1e-12, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-12, "var {var}");
            }
        }
    }

    #[test]
    fn constant_dimension_standardizes_to_zero_without_nan() {
        let mut streams = small_streams();
        for t in 0..8 {
            streams[0][t * 4 + 2] = 3.5; // constant column
        }
        let set = FeatureSet::new(streams, 8, 4).expect("valid");
        let std = set.standardized(VARIANCE_FLOOR);
        for t in 0..8 {
            assert_eq!(std.stream(0)[t * 4 + 2], 0.0);
        }
        assert!(std.stream(0).iter().all(|v| v.is_finite()));
        let wht = set.whitened(VARIANCE_FLOOR).expect("floored eigenvalues");
        assert!(wht.stream(0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let wht = formula_set().whitened(VARIANCE_FLOOR).expect("whiten");
        let (n, d) = (wht.sample_count(), wht.dim());
        for s in 0..wht.stream_count() {
            let c = cross_correlation(wht.stream(s), wht.stream(s), n, d);
            for i in 0..d {
                for j in 0..d {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (c[i * d + j] - want).abs() < 1e-10,
                        "cov[{i},{j}] = {}",
                        c[i * d + j]
                    );
                }
            }
        }
    }

    #[test]
    fn diversity_score_matches_reference_values() {
        // Oracles from an independent numpy/LAPACK evaluation of the same
        // definitions on the same data.
        let small = small_set();
        let got = stream_diversity(&small, Normalization::Standardize, VARIANCE_FLOOR, 11)
            .expect("score");
        assert!(got.all_converged);
        assert!(rel_close(got.value, 1.1409549854175778, 1e-8), "{got:?}");
        let norms: Vec<f64> = got.pairs.iter().map(|p| p.spectral_norm).collect();
        let expect = [
            1.3203858180042682,
            1.0537516751752551,
            1.0487274630732106,
        ];
        for (g, e) in norms.iter().zip(expect.iter()) {
            assert!(rel_close(*g, *e, 1e-8), "{g} vs {e}");
        }

        let formula = formula_set();
        let got = stream_diversity(&formula, Normalization::Standardize, VARIANCE_FLOOR, 11)
            .expect("score");
        assert!(rel_close(got.value, 0.9968720185624793, 1e-8), "{got:?}");
        let got =
            stream_diversity(&formula, Normalization::Whiten, VARIANCE_FLOOR, 11).expect("score");
        assert!(rel_close(got.value, 0.9330894553413916, 1e-8), "{got:?}");
    }

    #[test]
    fn whitened_score_saturates_when_subspaces_must_intersect() {
        // With n = 8 samples and d = 4 features, two 4-dimensional feature
        // subspaces of the 7-dimensional centered sample space always share
        // a direction, so every canonical correlation tops out at exactly 1.
        let got = stream_diversity(&small_set(), Normalization::Whiten, VARIANCE_FLOOR, 2)
            .expect("score");
        assert!(rel_close(got.value, 1.0, 1e-7), "{got:?}");
    }

    #[test]
    fn duplicated_streams_have_maximal_whitened_correlation() {
        let base = small_streams();
        let set = FeatureSet::new(vec![base[0].clone(), base[0].clone()], 8, 4).expect("valid");
        let got =
            stream_diversity(&set, Normalization::Whiten, VARIANCE_FLOOR, 5).expect("score");
        assert!(rel_close(got.value, 1.0, 1e-7), "{got:?}");

        let got = stream_diversity(&set, Normalization::Standardize, VARIANCE_FLOOR, 5)
            .expect("score");
        assert!(got.value > 0.99, "identical streams look diverse: {got:?}");
    }

    #[test]
    fn diversity_score_is_invariant_to_feature_scaling_and_permutation() {
        let set = formula_set();
        let base = stream_diversity(&set, Normalization::Standardize, VARIANCE_FLOOR, 9)
            .expect("score");

        // Per-dimension rescaling washes out under standardization.
        let scales = [3.0, 0.25, 10.0, 1.0];
        let scaled: Vec<Vec<f64>> = (0..set.stream_count())
            .map(|s| {
                set.stream(s)
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| v * scales[idx % 4])
                    .collect()
            })
            .collect();
        let scaled = FeatureSet::new(scaled, set.sample_count(), set.dim()).expect("valid");
        let got = stream_diversity(&scaled, Normalization::Standardize, VARIANCE_FLOOR, 9)
            .expect("score");
        assert!(rel_close(got.value, base.value, 1e-8));

        // Permuting feature dimensions consistently conjugates each C_ij by
        // a permutation matrix, which leaves singular values alone.
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = (0..set.stream_count())
            .map(|s| {
                let z = set.stream(s);
                let mut out = vec![0.0; z.len()];
                for t in 0..set.sample_count() {
                    for (k, &src) in perm.iter().enumerate() {
                        out[t * 4 + k] = z[t * 4 + src];
                    }
                }
                out
            })
            .collect();
        let permuted = FeatureSet::new(permuted, set.sample_count(), set.dim()).expect("valid");
        let got = stream_diversity(&permuted, Normalization::Standardize, VARIANCE_FLOOR, 9)
            .expect("score");
        assert!(rel_close(got.value, base.value, 1e-8));
    }

    #[test]
    fn diversity_score_is_deterministic() {
        let set = formula_set();
        let a = stream_diversity(&set, Normalization::Standardize, VARIANCE_FLOOR, 42)
            .expect("score");
        let b = stream_diversity(&set, Normalization::Standardize, VARIANCE_FLOOR, 42)
            .expect("score");
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    fn eval_decorrelation(
        set: &FeatureSet,
        pairs: Option<&[(usize, usize)]>,
    ) -> (f64, Graph<f64>) {
        let (p, n, d) = (set.stream_count(), set.sample_count(), set.dim());
        let mut gb = GraphBuilder::<f64>::new();
        let feats: Vec<NodeId> = (0..p)
            .map(|s| gb.input(&format!("z{s}"), &[n, d]).expect("input"))
            .collect();
        let built = match pairs {
            Some(pairs) => decorrelation_loss(&mut gb, &feats, pairs, STANDARDIZE_EPS),
            None => full_decorrelation_loss(&mut gb, &feats, STANDARDIZE_EPS),
        }
        .expect("loss");
        gb.output("loss", built.loss).expect("output");
        let graph = gb.finish();
        let tensors: Vec<Tensor<f64>> = (0..p)
            .map(|s| Tensor::new(&[n, d], set.stream(s).to_vec()).expect("tensor"))
            .collect();
        let mut bindings: Bindings<'_, f64> = Bindings::new();
        for (s, t) in tensors.iter().enumerate() {
            bindings.insert(format!("z{s}"), t);
        }
        let eval = graph.eval(&bindings).expect("eval");
        let loss = graph.output_value(&eval, "loss").expect("loss").item();
        (loss, graph)
    }

    #[test]
    fn decorrelation_loss_matches_reference_values() {
        let (loss, _) = eval_decorrelation(&small_set(), None);
        assert!(rel_close(loss, 5.900472571140681, 1e-10), "{loss}");

        let (loss, _) = eval_decorrelation(&small_set(), Some(&[(0, 1), (1, 2)]));
        assert!(rel_close(loss, 6.679418806202081, 1e-10), "{loss}");

        let (loss, _) = eval_decorrelation(&formula_set(), None);
        assert!(rel_close(loss, 2.1067688680741345, 1e-10), "{loss}");
    }

    #[test]
    fn exhaustive_pair_sample_equals_full_loss_exactly() {
        let set = small_set();
        let (full, _) = eval_decorrelation(&set, None);
        // Hand the pairs over shuffled; the builder sorts them, so the graph
        // and therefore every floating-point operation is identical.
        let (sampled, _) = eval_decorrelation(&set, Some(&[(1, 2), (0, 1), (0, 2)]));
        assert_eq!(full.to_bits(), sampled.to_bits());
    }

    #[test]
    fn decorrelation_loss_gradients_pass_finite_difference_check() {
        let set = small_set();
        let (p, n, d) = (set.stream_count(), set.sample_count(), set.dim());
        let mut gb = GraphBuilder::<f64>::new();
        let feats: Vec<NodeId> = (0..p)
            .map(|s| gb.input(&format!("z{s}"), &[n, d]).expect("input"))
            .collect();
        let built = full_decorrelation_loss(&mut gb, &feats, STANDARDIZE_EPS).expect("loss");
        gb.output("loss", built.loss).expect("output");
        let loss_id = built.loss;
        let graph = gb.finish();
        let tensors: Vec<Tensor<f64>> = (0..p)
            .map(|s| {
                Tensor::new(&[n, d], set.stream(s).to_vec())
                    .expect("tensor")
                    .with_grad()
            })
            .collect();
        let mut bindings: Bindings<'_, f64> = Bindings::new();
        for (s, t) in tensors.iter().enumerate() {
            bindings.insert(format!("z{s}"), t);
        }
        for s in 0..p {
            let report = fdcheck::finite_difference_check(
                &graph,
                &bindings,
                loss_id,
                &format!("z{s}"),
                fdcheck::FD_STEP,
                fdcheck::FD_REL_TOL,
            )
            .expect("fd check");
            assert!(report.pass, "stream {s}: {report:?}");
        }
    }

    #[test]
    fn pair_sampling_is_uniform_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = 6;
        let total = full_pair_count(p);
        assert_eq!(total, 15);
        for k in 1..=total {
            let pairs = sample_pairs(p, k, &mut rng).expect("sample");
            assert_eq!(pairs.len(), k);
            let mut sorted = pairs.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), k, "duplicates in {pairs:?}");
            assert!(pairs.windows(2).all(|w| w[0] < w[1]), "unsorted {pairs:?}");
            assert!(pairs.iter().all(|&(i, j)| i < j && j < p));
        }
        let all = sample_pairs(p, total, &mut rng).expect("sample");
        let mut expect = Vec::new();
        for i in 0..p {
            for j in (i + 1)..p {
                expect.push((i, j));
            }
        }
        assert_eq!(all, expect);

        assert!(matches!(
            sample_pairs(p, total + 1, &mut rng),
            Err(DiversityError::PairBudget { .. })
        ));
        assert!(matches!(
            sample_pairs(p, 0, &mut rng),
            Err(DiversityError::NoPairs)
        ));
        assert!(matches!(
            sample_pairs(1, 1, &mut rng),
            Err(DiversityError::TooFewStreams(1))
        ));

        // Same seed, same sample.
        let a = sample_pairs(8, 5, &mut ChaCha8Rng::seed_from_u64(3)).expect("sample");
        let b = sample_pairs(8, 5, &mut ChaCha8Rng::seed_from_u64(3)).expect("sample");
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(
            FeatureSet::new(vec![vec![0.0; 8]], 4, 2),
            Err(DiversityError::TooFewStreams(1))
        ));
        assert!(matches!(
            FeatureSet::new(vec![vec![0.0; 2], vec![0.0; 2]], 1, 2),
            Err(DiversityError::TooFewSamples(1))
        ));
        assert!(matches!(
            FeatureSet::new(vec![vec![0.0; 8], vec![0.0; 6]], 4, 2),
            Err(DiversityError::StreamLength { stream: 1, .. })
        ));

        let mut gb = GraphBuilder::<f64>::new();
        let a = gb.input("a", &[4, 2]).expect("input");
        let b = gb.input("b", &[4, 2]).expect("input");
        assert!(matches!(
            decorrelation_loss(&mut gb, &[a, b], &[(1, 0)], 1e-5),
            Err(DiversityError::BadPair { .. })
        ));
        assert!(matches!(
            decorrelation_loss(&mut gb, &[a, b], &[(0, 1), (0, 1)], 1e-5),
            Err(DiversityError::DuplicatePair { .. })
        ));
        assert!(matches!(
            decorrelation_loss(&mut gb, &[a, b], &[], 1e-5),
            Err(DiversityError::NoPairs)
        ));
    }

    #[test]
    fn feature_set_from_tensors_flattens_leading_axes() {
        // A (2, 4, 3) activation tensor and its (8, 3) flattening give the
        // same metric.
        let data: Vec<f64> = (0..24).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let a3 = Tensor::<f64>::new(&[2, 4, 3], data.clone()).expect("tensor");
        let b3 = Tensor::<f64>::new(
            &[2, 4, 3],
            data.iter().map(|v| v * 0.5 + 1.0).collect::<Vec<f64>>(),
        )
        .expect("tensor");
        let flat_a = a3.reshaped(&[8, 3]).expect("reshape");
        let flat_b = b3.reshaped(&[8, 3]).expect("reshape");
        let from3 = FeatureSet::from_tensors(&[&a3, &b3]).expect("set");
        let from2 = FeatureSet::from_tensors(&[&flat_a, &flat_b]).expect("set");
        assert_eq!(from3.sample_count(), 8);
        assert_eq!(from3.dim(), 3);
        let s3 = stream_diversity(&from3, Normalization::Standardize, VARIANCE_FLOOR, 1)
            .expect("score");
        let s2 = stream_diversity(&from2, Normalization::Standardize, VARIANCE_FLOOR, 1)
            .expect("score");
        assert_eq!(s3.value.to_bits(), s2.value.to_bits());
    }

    proptest! {
        #[test]
        fn spectral_norm_between_zero_and_frobenius(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            seed in 0u64..1000,
        ) {
            let got = spectral_norm(&vals, 3, 4, seed);
            let frob: f64 = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(got.value >= -1e-12);
            prop_assert!(got.value <= frob + 1e-9 * frob.max(1.0));
        }

        #[test]
        fn diversity_score_is_nonnegative_and_finite(
            raw in proptest::collection::vec(-5.0f64..5.0, 2 * 6 * 3),
        ) {
            let streams = vec![raw[..18].to_vec(), raw[18..].to_vec()];
            let set = FeatureSet::new(streams, 6, 3).expect("valid");
            let got = stream_diversity(&set, Normalization::Standardize, VARIANCE_FLOOR, 0)
                .expect("score");
            prop_assert!(got.value.is_finite());
            prop_assert!(got.value >= 0.0);
        }
    }
}
