//! Two-sample tests for equality of conditional future-cone distributions.
//!
//! Univariate samples go straight to Kolmogorov–Smirnov. Multivariate samples
//! are screened with a mean test first (Welch or Hotelling T²); only when the
//! means look equal do we pay for a full distributional check, done by KS on
//! random one-dimensional projections with a Bonferroni combination.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::matrix::RowMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestMethod {
    Ks1d,
    MeanPretest,
    RandomProjKs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    /// Set when the pooled covariance was singular and a diagonal one was used.
    pub diagonal_fallback: bool,
}

impl TestOutcome {
    fn new(statistic: f64, p_value: f64, method: TestMethod) -> Self {
        Self { statistic, p_value: p_value.clamp(0.0, 1.0), method, diagonal_fallback: false }
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSettings {
    pub alpha: f64,
    pub n_projections: usize,
    pub seed: u64,
}

impl Default for TestSettings {
    fn default() -> Self {
        Self { alpha: 0.05, n_projections: 10, seed: 0 }
    }
}

/// Survival function of the Kolmogorov distribution, P(K > λ).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    const EPS: f64 = 1e-10;
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form converges fast for small λ.
        let scale = std::f64::consts::PI * std::f64::consts::PI / (8.0 * lambda * lambda);
        let mut cdf = 0.0;
        for k in 1.. {
            let odd = (2 * k - 1) as f64;
            let term = (-odd * odd * scale).exp();
            cdf += term;
            if term < EPS {
                break;
            }
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * cdf;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1.. {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < EPS {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic two-sided KS p-value for statistic `d` and sample sizes `n`, `m`.
pub fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let root = ne.sqrt();
    kolmogorov_sf((root + 0.12 + 0.11 / root) * d)
}

/// sup |F_a − F_b| for two ascending samples, returned as the exact integer
/// numerator over `|a|·|b|`. Cost is O(min log max).
pub fn ks_numerator_sorted(a: &[f64], b: &[f64]) -> u64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let ns = small.len() as u64;
    let nl = large.len() as u64;
    let mut best = 0u64;
    let mut i = 0;
    while i < small.len() {
        let v = small[i];
        let below = i as u64;
        while i < small.len() && small[i] == v {
            i += 1;
        }
        let at = i as u64;
        let lt = large.partition_point(|&x| x < v) as u64;
        let le = lt + large[lt as usize..].partition_point(|&x| x <= v) as u64;
        best = best.max((below * nl).abs_diff(lt * ns)).max((at * nl).abs_diff(le * ns));
    }
    best
}

fn sorted_copy(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptySample);
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("test sample"));
    }
    let mut v = x.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    Ok(v)
}

/// KS test on samples that are already sorted ascending and finite.
pub fn ks_sorted(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let num = ks_numerator_sorted(a, b);
    let d = num as f64 / (a.len() as f64 * b.len() as f64);
    Ok(TestOutcome::new(d, ks_p_value(d, a.len(), b.len()), TestMethod::Ks1d))
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    ks_sorted(&sorted_copy(a)?, &sorted_copy(b)?)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("Welch test needs at least two observations per sample"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TestOutcome::new(0.0, 1.0, TestMethod::MeanPretest)
        } else {
            TestOutcome::new(f64::INFINITY, 0.0, TestMethod::MeanPretest)
        });
    }
    let t = ((ma - mb) / se2.sqrt()).abs();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| invalid(e.to_string()))?;
    Ok(TestOutcome::new(t, 2.0 * dist.sf(t), TestMethod::MeanPretest))
}

fn column_means(m: &RowMatrix) -> DVector<f64> {
    let mut mean = DVector::zeros(m.cols());
    for r in m.iter_rows() {
        for (j, v) in r.iter().enumerate() {
            mean[j] += v;
        }
    }
    mean / m.rows() as f64
}

fn scatter(m: &RowMatrix, mean: &DVector<f64>) -> DMatrix<f64> {
    let d = m.cols();
    let mut s = DMatrix::zeros(d, d);
    for r in m.iter_rows() {
        let centered = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(v, m)| v - m));
        s += &centered * centered.transpose();
    }
    s
}

/// Two-sample Hotelling T² with pooled covariance and an F reference
/// distribution. A singular pooled covariance falls back to its diagonal.
pub fn hotelling_t2(a: &RowMatrix, b: &RowMatrix) -> Result<TestOutcome> {
    let p = a.cols();
    if b.cols() != p {
        return Err(Error::DimensionMismatch { expected: p, got: b.cols() });
    }
    let (na, nb) = (a.rows(), b.rows());
    if na < p + 2 || nb < p + 2 {
        return Err(invalid(format!("Hotelling test in dimension {p} needs at least {} rows per sample", p + 2)));
    }
    let ma = column_means(a);
    let mb = column_means(b);
    let diff = &ma - &mb;
    let pooled = (scatter(a, &ma) + scatter(b, &mb)) / (na + nb - 2) as f64;
    let scale = (na * nb) as f64 / (na + nb) as f64;

    let finish = |t2: f64, dim: usize, fallback: bool| -> Result<TestOutcome> {
        let df2 = (na + nb - dim - 1) as f64;
        let f = t2 * df2 / (dim as f64 * (na + nb - 2) as f64);
        let dist = FisherSnedecor::new(dim as f64, df2).map_err(|e| invalid(e.to_string()))?;
        let mut out = TestOutcome::new(t2, if t2 > 0.0 { dist.sf(f) } else { 1.0 }, TestMethod::MeanPretest);
        out.diagonal_fallback = fallback;
        Ok(out)
    };

    let max_diag = pooled.diagonal().max();
    let well_posed = max_diag > 0.0
        && pooled.clone().cholesky().is_some_and(|c| {
            let l = c.l();
            let min_l = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            min_l * min_l > 1e-12 * max_diag
        });
    if well_posed {
        let chol = pooled.cholesky().expect("checked above");
        let t2 = scale * diff.dot(&chol.solve(&diff));
        return finish(t2.max(0.0), p, false);
    }

    let mut t2 = 0.0;
    let mut used = 0;
    for j in 0..p {
        let v = pooled[(j, j)];
        if v > 0.0 {
            t2 += diff[j] * diff[j] / v;
            used += 1;
        } else if diff[j] != 0.0 {
            let mut out = TestOutcome::new(f64::INFINITY, 0.0, TestMethod::MeanPretest);
            out.diagonal_fallback = true;
            return Ok(out);
        }
    }
    if used == 0 {
        let mut out = TestOutcome::new(0.0, 1.0, TestMethod::MeanPretest);
        out.diagonal_fallback = true;
        return Ok(out);
    }
    finish(scale * t2, used, true)
}

/// Equality-of-means test: Welch for one column, Hotelling T² otherwise.
pub fn mean_pretest(a: &RowMatrix, b: &RowMatrix) -> Result<TestOutcome> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), got: b.cols() });
    }
    if a.cols() == 1 {
        welch_t_test(a.as_slice(), b.as_slice())
    } else {
        hotelling_t2(a, b)
    }
}

/// Unit-norm Gaussian directions in `dim` dimensions.
pub fn random_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn project(m: &RowMatrix, dir: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
}

/// KS on `n_proj` random projections, Bonferroni-combined. `alpha` is kept
/// for interface symmetry; the outcome reports a p-value, not a decision.
pub fn random_projection_test(a: &RowMatrix, b: &RowMatrix, n_proj: usize, _alpha: f64, seed: u64) -> Result<TestOutcome> {
    if n_proj == 0 {
        return Err(invalid("need at least one projection"));
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), got: b.cols() });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptySample);
    }
    let mut max_d = 0.0f64;
    let mut min_p = 1.0f64;
    for dir in random_directions(a.cols(), n_proj, seed) {
        let out = ks_two_sample(&project(a, &dir), &project(b, &dir))?;
        max_d = max_d.max(out.statistic);
        min_p = min_p.min(out.p_value);
    }
    Ok(TestOutcome::new(max_d, (n_proj as f64 * min_p).min(1.0), TestMethod::RandomProjKs))
}

/// Staged test of H₀: both samples share one distribution.
///
/// One column: KS. Several columns: a mean test first, which decides alone if
/// it rejects; otherwise the projection test runs and the smaller p-value of
/// the two stages is reported.
pub fn test_equal_distributions(a: &RowMatrix, b: &RowMatrix, settings: &TestSettings) -> Result<TestOutcome> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), got: b.cols() });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptySample);
    }
    if a.cols() == 1 {
        return ks_two_sample(a.as_slice(), b.as_slice());
    }
    let dim = a.cols();
    let pre = if a.rows() >= dim + 2 && b.rows() >= dim + 2 { Some(mean_pretest(a, b)?) } else { None };
    if let Some(pre) = pre {
        if pre.rejects(settings.alpha) {
            return Ok(pre);
        }
    }
    let proj = random_projection_test(a, b, settings.n_projections, settings.alpha, settings.seed)?;
    Ok(match pre {
        Some(pre) if pre.p_value < proj.p_value => pre,
        _ => proj,
    })
}
