//! Competing one-step forecasters: per-site time average, per-site AR(p)
//! by OLS, and per-patch VAR(p) fit by lasso coordinate descent.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::Field;
use crate::par;

/// Intercept plus lag coefficients. For patch models the lags are ordered
/// lag-major: all patch sites at t−1, then all at t−2, and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

impl LinearPredictor {
    fn eval(&self, lags: &[f64]) -> f64 {
        self.intercept + self.coefs.iter().zip(lags).map(|(c, x)| c * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchModel {
    pub first_site: usize,
    pub n_sites: usize,
    /// One predictor per site in the patch.
    pub outputs: Vec<LinearPredictor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineModel {
    SiteMean {
        means: Vec<f64>,
    },
    Ar {
        p: usize,
        sites: Vec<LinearPredictor>,
        /// Number of sites whose normal equations needed the ridge fallback.
        ridge_fallbacks: usize,
    },
    PatchVar {
        p: usize,
        patch_size: usize,
        lambda: f64,
        patches: Vec<PatchModel>,
        /// Lasso fits that stopped at the sweep cap instead of converging.
        sweep_cap_hits: usize,
    },
}

impl BaselineModel {
    /// Number of past steps a forecast needs.
    pub fn lags(&self) -> usize {
        match self {
            BaselineModel::SiteMean { .. } => 0,
            BaselineModel::Ar { p, .. } | BaselineModel::PatchVar { p, .. } => *p,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineModel::SiteMean { .. } => "site_mean",
            BaselineModel::Ar { .. } => "ar",
            BaselineModel::PatchVar { .. } => "var_lasso",
        }
    }
}

fn check_range(field: &Field, train: &Range<usize>) -> Result<()> {
    if train.start >= train.end || train.end > field.steps() {
        return Err(invalid(format!("training range {train:?} is empty or outside 0..{}", field.steps())));
    }
    Ok(())
}

pub fn fit_site_mean(field: &Field, train: Range<usize>) -> Result<BaselineModel> {
    check_range(field, &train)?;
    let n = field.n_sites();
    let mut means = vec![0.0; n];
    for t in train.clone() {
        for (m, v) in means.iter_mut().zip(field.slice(t)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= train.len() as f64);
    Ok(BaselineModel::SiteMean { means })
}

/// OLS with intercept; falls back to ridge with λ = 1e−8 when the normal
/// equations are singular. Returns the fit and whether the fallback fired.
fn ols(design: &[Vec<f64>], y: &[f64]) -> (LinearPredictor, bool) {
    let k = design.first().map_or(0, Vec::len) + 1;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for (x, &target) in design.iter().zip(y) {
        row[0] = 1.0;
        row[1..].copy_from_slice(x);
        for i in 0..k {
            xty[i] += row[i] * target;
            for j in 0..k {
                xtx[(i, j)] += row[i] * row[j];
            }
        }
    }
    let solve = |m: DMatrix<f64>| m.cholesky().map(|c| c.solve(&xty));
    let scale = xtx.diagonal().max().max(1.0);
    let well_posed = xtx.clone().cholesky().is_some_and(|c| {
        let d = c.l().diagonal();
        d.iter().all(|v| v * v > 1e-12 * scale)
    });
    let (beta, fallback) = if well_posed {
        (solve(xtx).expect("checked"), false)
    } else {
        let ridge = &xtx + DMatrix::identity(k, k) * 1e-8;
        let beta = solve(ridge).unwrap_or_else(|| DVector::zeros(k));
        (beta, true)
    };
    (LinearPredictor { intercept: beta[0], coefs: beta.iter().skip(1).copied().collect() }, fallback)
}

fn site_lags(field: &Field, site: usize, t: usize, p: usize) -> Vec<f64> {
    (1..=p).map(|l| field.get(site, t - l)).collect()
}

/// Separate AR(p) with intercept for every site, fit by OLS over `train`.
pub fn fit_ar(field: &Field, p: usize, train: Range<usize>) -> Result<BaselineModel> {
    check_range(field, &train)?;
    if p == 0 {
        return Err(invalid("AR order must be positive"));
    }
    if train.len() <= p + 1 {
        return Err(invalid(format!("AR({p}) needs more than {} training steps", p + 1)));
    }
    let fits = par::map_range(field.n_sites(), |site| {
        let times = train.start + p..train.end;
        let design: Vec<Vec<f64>> = times.clone().map(|t| site_lags(field, site, t, p)).collect();
        let y: Vec<f64> = times.map(|t| field.get(site, t)).collect();
        ols(&design, &y)
    });
    let ridge_fallbacks = fits.iter().filter(|f| f.1).count();
    Ok(BaselineModel::Ar { p, sites: fits.into_iter().map(|f| f.0).collect(), ridge_fallbacks })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoSettings {
    /// Stop once no coefficient moves by more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    pub record_objective: bool,
}

impl Default for LassoSettings {
    fn default() -> Self {
        Self { tol: 1e-7, max_sweeps: 10_000, record_objective: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    pub sweeps: usize,
    pub hit_cap: bool,
    /// Objective after each sweep, when requested.
    pub objective_trace: Vec<f64>,
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// (1/2n)‖y − Xβ‖² + λ‖β‖₁ for column-stored `x`.
pub fn lasso_objective(columns: &[Vec<f64>], y: &[f64], coef: &[f64], lambda: f64) -> f64 {
    let n = y.len() as f64;
    let rss: f64 = (0..y.len())
        .map(|i| {
            let fit: f64 = columns.iter().zip(coef).map(|(c, b)| c[i] * b).sum();
            (y[i] - fit).powi(2)
        })
        .sum();
    rss / (2.0 * n) + lambda * coef.iter().map(|b| b.abs()).sum::<f64>()
}

/// Cyclic coordinate descent for the lasso without intercept; center `x`
/// and `y` beforehand to leave the intercept unpenalized.
pub fn lasso_cd(columns: &[Vec<f64>], y: &[f64], lambda: f64, settings: &LassoSettings) -> Result<LassoFit> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    if let Some(bad) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad.len() });
    }
    if !(lambda >= 0.0) {
        return Err(invalid("λ must be non-negative"));
    }
    let nf = n as f64;
    let norms: Vec<f64> = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut coef = vec![0.0; columns.len()];
    let mut resid = y.to_vec();
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < settings.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for (j, col) in columns.iter().enumerate() {
            if norms[j] == 0.0 {
                continue;
            }
            let old = coef[j];
            let rho = col.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / nf + norms[j] * old;
            let new = soft_threshold(rho, lambda) / norms[j];
            if new != old {
                let step = new - old;
                for (r, x) in resid.iter_mut().zip(col) {
                    *r -= x * step;
                }
                coef[j] = new;
                max_change = max_change.max(step.abs());
            }
        }
        if settings.record_objective {
            trace.push(lasso_objective(columns, y, &coef, lambda));
        }
        if max_change < settings.tol {
            converged = true;
            break;
        }
    }
    Ok(LassoFit { coef, sweeps, hit_cap: !converged, objective_trace: trace })
}

fn patch_bounds(n_sites: usize, patch_size: usize) -> Vec<(usize, usize)> {
    (0..n_sites).step_by(patch_size).map(|s| (s, patch_size.min(n_sites - s))).collect()
}

fn patch_lags(field: &Field, first: usize, len: usize, t: usize, p: usize) -> Vec<f64> {
    (1..=p).flat_map(|l| (first..first + len).map(move |s| (s, t - l))).map(|(s, u)| field.get(s, u)).collect()
}

/// Per-patch VAR(p): each site regressed on the last `p` values of every
/// site in its patch. Regressors are z-scored, the intercept is left
/// unpenalized, and coefficients are mapped back to the raw scale.
pub fn fit_var_lasso(field: &Field, p: usize, patch_size: usize, lambda: f64, train: Range<usize>) -> Result<BaselineModel> {
    fit_var_lasso_with(field, p, patch_size, lambda, train, &LassoSettings::default())
}

pub fn fit_var_lasso_with(
    field: &Field,
    p: usize,
    patch_size: usize,
    lambda: f64,
    train: Range<usize>,
    settings: &LassoSettings,
) -> Result<BaselineModel> {
    check_range(field, &train)?;
    if p == 0 || patch_size == 0 {
        return Err(invalid("VAR order and patch size must be positive"));
    }
    if train.len() <= p * patch_size {
        return Err(invalid(format!("VAR({p}) on patches of {patch_size} needs more than {} training steps", p * patch_size)));
    }
    let patches = patch_bounds(field.n_sites(), patch_size);
    let fitted = par::map_slice(&patches, |&(first, len)| -> Result<(PatchModel, usize)> {
        let times: Vec<usize> = (train.start + p..train.end).collect();
        let rows: Vec<Vec<f64>> = times.iter().map(|&t| patch_lags(field, first, len, t, p)).collect();
        let k = len * p;
        let n = rows.len() as f64;
        let mut columns: Vec<Vec<f64>> = (0..k).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let mut means = vec![0.0; k];
        let mut sds = vec![0.0; k];
        for (j, col) in columns.iter_mut().enumerate() {
            let m = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            means[j] = m;
            sds[j] = sd;
            for v in col.iter_mut() {
                *v = if sd > 0.0 { (*v - m) / sd } else { 0.0 };
            }
        }
        let mut cap_hits = 0;
        let mut outputs = Vec::with_capacity(len);
        for site in first..first + len {
            let y: Vec<f64> = times.iter().map(|&t| field.get(site, t)).collect();
            let ybar = y.iter().sum::<f64>() / n;
            let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
            let fit = lasso_cd(&columns, &yc, lambda, settings)?;
            cap_hits += usize::from(fit.hit_cap);
            let coefs: Vec<f64> = fit.coef.iter().zip(&sds).map(|(b, sd)| if *sd > 0.0 { b / sd } else { 0.0 }).collect();
            let intercept = ybar - coefs.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
            outputs.push(LinearPredictor { intercept, coefs });
        }
        Ok((PatchModel { first_site: first, n_sites: len, outputs }, cap_hits))
    });
    let mut patches_out = Vec::with_capacity(fitted.len());
    let mut sweep_cap_hits = 0;
    for f in fitted {
        let (m, hits) = f?;
        sweep_cap_hits += hits;
        patches_out.push(m);
    }
    Ok(BaselineModel::PatchVar { p, patch_size, lambda, patches: patches_out, sweep_cap_hits })
}

/// One-step-ahead forecasts for every site at time `t`.
pub fn baseline_predict(model: &BaselineModel, field: &Field, t: usize) -> Result<Vec<f64>> {
    if t < model.lags() {
        return Err(invalid(format!("time {t} has fewer than {} steps of history", model.lags())));
    }
    if t > field.steps() {
        return Err(invalid(format!("time {t} is beyond the field")));
    }
    Ok(match model {
        BaselineModel::SiteMean { means } => means.clone(),
        BaselineModel::Ar { p, sites, .. } => sites.iter().enumerate().map(|(s, m)| m.eval(&site_lags(field, s, t, *p))).collect(),
        BaselineModel::PatchVar { p, patches, .. } => {
            let mut out = Vec::with_capacity(field.n_sites());
            for patch in patches {
                let lags = patch_lags(field, patch.first_site, patch.n_sites, t, *p);
                out.extend(patch.outputs.iter().map(|o| o.eval(&lags)));
            }
            out
        }
    })
}

/// Mean squared one-step error over all sites and the listed times.
pub fn baseline_mse(model: &BaselineModel, field: &Field, times: Range<usize>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in times {
        let pred = baseline_predict(model, field, t)?;
        for (p, a) in pred.iter().zip(field.slice(t)) {
            sum += (p - a) * (p - a);
        }
        count += pred.len();
    }
    if count == 0 {
        return Err(Error::EmptySample);
    }
    Ok(sum / count as f64)
}

/// Training range split 80/20 in time: (fit part, validation part).
pub fn validation_split(train: &Range<usize>) -> (Range<usize>, Range<usize>) {
    let cut = train.start + (train.len() * 4) / 5;
    (train.start..cut, cut..train.end)
}

/// AR order chosen by one-step validation MSE on the last 20% of the
/// training range, then refit on the whole range.
pub fn select_ar(field: &Field, orders: &[usize], train: Range<usize>) -> Result<BaselineModel> {
    let (fit_part, validate) = validation_split(&train);
    let mut best: Option<(f64, usize)> = None;
    for &p in orders {
        let Ok(model) = fit_ar(field, p, fit_part.clone()) else { continue };
        let score = baseline_mse(&model, field, validate.start.max(p)..validate.end)?;
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, p));
        }
    }
    let (_, p) = best.ok_or_else(|| invalid("no AR order could be fit"))?;
    fit_ar(field, p, train)
}

/// Default λ grid on the standardized-regressor scale.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..9).map(|i| 10f64.powf(-(i as f64) / 2.0)).collect()
}

/// VAR order and λ chosen by validation MSE on the training tail, then
/// refit on the whole range.
pub fn select_var_lasso(field: &Field, orders: &[usize], patch_size: usize, lambdas: &[f64], train: Range<usize>) -> Result<BaselineModel> {
    let (fit_part, validate) = validation_split(&train);
    let mut best: Option<(f64, usize, f64)> = None;
    for &p in orders {
        for &lambda in lambdas {
            let Ok(model) = fit_var_lasso(field, p, patch_size, lambda, fit_part.clone()) else { continue };
            let score = baseline_mse(&model, field, validate.start.max(p)..validate.end)?;
            if best.is_none_or(|(b, _, _)| score < b) {
                best = Some((score, p, lambda));
            }
        }
    }
    let (_, p, lambda) = best.ok_or_else(|| invalid("no VAR order could be fit"))?;
    fit_var_lasso(field, p, patch_size, lambda, train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Boundary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise_field(sites: usize, steps: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..sites * steps).map(|_| rng.sample(StandardNormal)).collect();
        Field::new(vec![sites], steps, v, Boundary::Wrap).unwrap()
    }

    #[test]
    fn site_mean_examples() {
        let c = Field::from_fn(vec![3], 5, Boundary::Wrap, |_, _| 4.2).unwrap();
        let m = fit_site_mean(&c, 0..5).unwrap();
        assert_eq!(baseline_mse(&m, &c, 0..5).unwrap(), 0.0);
        let f = Field::new(vec![1], 2, vec![1.0, 3.0], Boundary::Wrap).unwrap();
        assert_eq!(baseline_predict(&fit_site_mean(&f, 0..2).unwrap(), &f, 1).unwrap(), vec![2.0]);
        assert!(fit_site_mean(&f, 1..1).is_err());
    }

    #[test]
    fn ar_recovers_exact_recursion() {
        let f = Field::from_fn(vec![2], 30, Boundary::Wrap, |r, t| (r as f64 + 1.0) * 0.5f64.powi(t as i32)).unwrap();
        let BaselineModel::Ar { sites, .. } = fit_ar(&f, 1, 0..30).unwrap() else { panic!() };
        for s in sites {
            assert!((s.coefs[0] - 0.5).abs() < 1e-6, "{s:?}");
        }
    }

    #[test]
    fn ar_prediction_by_hand() {
        let model = BaselineModel::Ar { p: 1, sites: vec![LinearPredictor { intercept: 0.0, coefs: vec![0.5] }], ridge_fallbacks: 0 };
        let f = Field::new(vec![1], 2, vec![4.0, 0.0], Boundary::Wrap).unwrap();
        assert_eq!(baseline_predict(&model, &f, 1).unwrap(), vec![2.0]);
        assert!(baseline_predict(&model, &f, 0).is_err());
    }

    #[test]
    fn ar_on_white_noise_shrinks() {
        let steps = 2000;
        let f = noise_field(4, steps, 1);
        let BaselineModel::Ar { sites, .. } = fit_ar(&f, 2, 0..steps).unwrap() else { panic!() };
        let bound = 3.0 / (steps as f64).sqrt();
        assert!(sites.iter().flat_map(|s| &s.coefs).all(|c| c.abs() <= bound));
    }

    #[test]
    fn constant_series_triggers_ridge_fallback() {
        let f = Field::from_fn(vec![1], 10, Boundary::Wrap, |_, _| 1.0).unwrap();
        let BaselineModel::Ar { ridge_fallbacks, .. } = fit_ar(&f, 1, 0..10).unwrap() else { panic!() };
        assert_eq!(ridge_fallbacks, 1);
    }

    #[test]
    fn nested_ar_in_sample_error_does_not_grow() {
        let f = noise_field(3, 200, 4);
        for p in 1..4 {
            // Same response rows for both orders.
            let small = fit_ar(&f, p, 0..200).unwrap();
            let large = fit_ar(&f, p + 1, 0..200).unwrap();
            let span = p + 1..200;
            assert!(baseline_mse(&large, &f, span.clone()).unwrap() <= baseline_mse(&small, &f, span).unwrap() + 1e-12);
        }
    }

    #[test]
    fn soft_threshold_univariate_closed_form() {
        let x = [1.0, -2.0, 0.5, 0.5];
        let y = [2.0, -1.0, 0.0, -1.0];
        let (sx, sy) = (x.iter().sum::<f64>() / 4.0, y.iter().sum::<f64>() / 4.0);
        let xc: Vec<f64> = x.iter().map(|v| v - sx).collect();
        let yc: Vec<f64> = y.iter().map(|v| v - sy).collect();
        let xy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
        let xx: f64 = xc.iter().map(|a| a * a).sum();
        for lambda in [0.0, 0.1, 0.4, 5.0] {
            let fit = lasso_cd(std::slice::from_ref(&xc), &yc, lambda, &LassoSettings::default()).unwrap();
            let expected = soft_threshold(xy, 4.0 * lambda) / xx;
            assert!((fit.coef[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lasso_objective_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cols: Vec<Vec<f64>> = (0..6).map(|_| (0..40).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let y: Vec<f64> = (0..40).map(|i| cols[0][i] - 0.5 * cols[3][i] + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let fit = lasso_cd(&cols, &y, 0.05, &LassoSettings { record_objective: true, ..Default::default() }).unwrap();
        assert!(!fit.hit_cap);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn huge_lambda_leaves_intercepts_only() {
        let f = noise_field(10, 60, 3);
        let model = fit_var_lasso(&f, 2, 5, 1e6, 0..60).unwrap();
        let BaselineModel::PatchVar { patches, .. } = &model else { panic!() };
        assert_eq!(patches.len(), 2);
        assert!(patches.iter().flat_map(|p| &p.outputs).flat_map(|o| &o.coefs).all(|&c| c == 0.0));
        let means = fit_site_mean(&f, 2..60).unwrap();
        let a = baseline_predict(&model, &f, 30).unwrap();
        let b = baseline_predict(&means, &f, 30).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn var_prediction_is_a_matrix_product() {
        let model = BaselineModel::PatchVar {
            p: 1,
            patch_size: 2,
            lambda: 0.0,
            patches: vec![PatchModel {
                first_site: 0,
                n_sites: 2,
                outputs: vec![
                    LinearPredictor { intercept: 1.0, coefs: vec![0.5, -1.0] },
                    LinearPredictor { intercept: 0.0, coefs: vec![2.0, 0.25] },
                ],
            }],
            sweep_cap_hits: 0,
        };
        let f = Field::new(vec![2], 2, vec![2.0, 4.0, 0.0, 0.0], Boundary::Wrap).unwrap();
        assert_eq!(baseline_predict(&model, &f, 1).unwrap(), vec![1.0 + 1.0 - 4.0, 4.0 + 1.0]);
    }

    #[test]
    fn unpenalized_lasso_matches_ols() {
        let f = noise_field(3, 120, 6);
        let BaselineModel::Ar { sites, .. } = fit_ar(&f, 2, 0..120).unwrap() else { panic!() };
        let settings = LassoSettings { tol: 1e-12, ..Default::default() };
        let BaselineModel::PatchVar { patches, .. } = fit_var_lasso_with(&f, 2, 1, 0.0, 0..120, &settings).unwrap() else { panic!() };
        for (ar, patch) in sites.iter().zip(&patches) {
            let v = &patch.outputs[0];
            assert!((ar.intercept - v.intercept).abs() < 1e-8);
            assert!(ar.coefs.iter().zip(&v.coefs).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }

    #[test]
    fn truncated_last_patch() {
        let f = noise_field(7, 40, 5);
        let BaselineModel::PatchVar { patches, .. } = fit_var_lasso(&f, 1, 5, 0.1, 0..40).unwrap() else { panic!() };
        assert_eq!(patches.iter().map(|p| p.n_sites).collect::<Vec<_>>(), vec![5, 2]);
    }
}
