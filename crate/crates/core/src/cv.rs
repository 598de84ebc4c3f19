//! Split-half cross-validation over (h_p, α), the forecasting competition,
//! and excess-risk bookkeeping across replicates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineModel};
use crate::cones::{extract_cones, ConeGeometry, ConeSet, Presence};
use crate::error::{invalid, Error, Result};
use crate::field::Field;
use crate::forecast::{assign_clusters, forecast_from_clusters, mse, predict_batch};
use crate::par;
use crate::simulate::{derive_seed, oracle_predict, simulate, SimConfig};
use crate::states::{FitMode, FitOptions, StateModel, TrainingSetup};

pub const DEFAULT_HP: [usize; 3] = [1, 2, 3];
pub const DEFAULT_ALPHAS: [f64; 7] = [0.3, 0.2, 0.15, 0.1, 0.05, 0.01, 0.001];

/// Whether test cones may reach back into the training half for history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SplitMode {
    /// Test cones lie wholly in the second half.
    #[default]
    Strict,
    /// Test cones are centered in the second half but may read history from
    /// the first.
    Leaky,
}

/// First ⌊T/2⌋ steps and the remainder.
pub fn split_half(field: &Field) -> Result<(Field, Field)> {
    let mid = field.steps() / 2;
    if mid == 0 {
        return Err(Error::InsufficientTimeSteps { needed: 2, got: field.steps() });
    }
    Ok((field.time_window(0, mid)?, field.time_window(mid, field.steps())?))
}

/// Training cones from the first half and test cones from the second.
/// Coordinates of both sets refer to time in the full field.
pub fn split_cones(field: &Field, geometry: &ConeGeometry, mode: SplitMode) -> Result<(ConeSet, ConeSet)> {
    let span = geometry.past_reach() + geometry.future_reach() + 1;
    if field.steps() < 2 * span {
        return Err(Error::InsufficientTimeSteps { needed: 2 * span, got: field.steps() });
    }
    let (d1, d2) = split_half(field)?;
    let mid = d1.steps();
    let train = extract_cones(&d1, geometry)?;
    let test = match mode {
        SplitMode::Strict => {
            let mut test = extract_cones(&d2, geometry)?;
            test.coords.iter_mut().for_each(|c| c.1 += mid);
            test
        }
        SplitMode::Leaky => extract_cones(field, geometry)?.filter_time(|t| t >= mid),
    };
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub h_p_values: Vec<usize>,
    pub alpha_values: Vec<f64>,
    pub c: usize,
    pub h_f: usize,
    pub mode: FitMode,
    pub options: FitOptions,
    pub split: SplitMode,
}

impl Default for CvGrid {
    fn default() -> Self {
        Self {
            h_p_values: DEFAULT_HP.to_vec(),
            alpha_values: DEFAULT_ALPHAS.to_vec(),
            c: 1,
            h_f: 0,
            mode: FitMode::default(),
            options: FitOptions::default(),
            split: SplitMode::Strict,
        }
    }
}

impl CvGrid {
    pub fn validate(&self) -> Result<()> {
        if self.h_p_values.is_empty() || self.alpha_values.is_empty() {
            return Err(invalid("CV grid needs at least one h_p and one α"));
        }
        if let Some(a) = self.alpha_values.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(invalid(format!("α = {a} is outside (0, 1)")));
        }
        for &h_p in &self.h_p_values {
            self.geometry(h_p)?;
        }
        Ok(())
    }

    pub fn geometry(&self, h_p: usize) -> Result<ConeGeometry> {
        ConeGeometry::new(self.c, h_p, self.h_f, Presence::Future)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub h_p: usize,
    pub alpha: f64,
}

impl Setting {
    /// True when `self` is preferred to `other` at equal loss.
    fn breaks_tie_over(&self, other: &Setting) -> bool {
        self.h_p < other.h_p || (self.h_p == other.h_p && self.alpha > other.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub setting: Setting,
    pub test_mse: Option<f64>,
    pub in_sample_mse: Option<f64>,
    pub m_hat: Option<usize>,
    pub error: Option<String>,
}

impl CvCell {
    fn failed(setting: Setting, err: &Error) -> Self {
        Self { setting, test_mse: None, in_sample_mse: None, m_hat: None, error: Some(err.to_string()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CvCell>,
    pub chosen: Option<Setting>,
    pub in_sample_mse: Option<f64>,
    pub future_mse: Option<f64>,
    pub independent_mse: Option<f64>,
    pub m_hat: Option<usize>,
    /// Filled in once the next replicate's grid is known.
    pub excess_risk: Option<f64>,
}

impl EvalReport {
    pub fn cell(&self, setting: Setting) -> Option<&CvCell> {
        self.cells.iter().find(|c| c.setting.h_p == setting.h_p && c.setting.alpha == setting.alpha)
    }

    /// Valid cell with the lowest test MSE, ties broken toward smaller h_p
    /// and then larger α.
    pub fn best_cell(&self) -> Option<&CvCell> {
        let mut best: Option<&CvCell> = None;
        for cell in self.cells.iter().filter(|c| c.test_mse.is_some()) {
            let better = match best {
                None => true,
                Some(b) => {
                    let (x, y) = (cell.test_mse.unwrap(), b.test_mse.unwrap());
                    x < y || (x == y && cell.setting.breaks_tie_over(&b.setting))
                }
            };
            if better {
                best = Some(cell);
            }
        }
        best
    }
}

/// Trains on the first half at every grid setting, scores on the second
/// half and picks the minimizer. Cells that fail to train are kept with
/// their error and never chosen.
pub fn grid_search(field: &Field, grid: &CvGrid) -> Result<EvalReport> {
    grid_search_with(field, grid, None)
}

/// As [`grid_search`], also scoring the chosen model on all of an
/// independent realization.
pub fn grid_search_with(field: &Field, grid: &CvGrid, independent: Option<&Field>) -> Result<EvalReport> {
    grid.validate()?;
    let mut cells = Vec::new();
    let mut best: Option<(f64, Setting, StateModel)> = None;
    for &h_p in &grid.h_p_values {
        let settings: Vec<Setting> = grid.alpha_values.iter().map(|&alpha| Setting { h_p, alpha }).collect();
        let fitted = fit_h_p(field, grid, h_p);
        let (setup, train, test, test_clusters) = match fitted {
            Ok(f) => f,
            Err(e) => {
                cells.extend(settings.iter().map(|&s| CvCell::failed(s, &e)));
                continue;
            }
        };
        let results = par::map_slice(&settings, |s| -> Result<(CvCell, StateModel)> {
            let model = setup.merge(s.alpha)?;
            let test_mse = mse(&forecast_from_clusters(&test_clusters, &model).predictions, &test.flc)?;
            let in_sample = mse(&forecast_from_clusters(&setup.row_group, &model).predictions, &train.flc)?;
            let cell = CvCell {
                setting: *s,
                test_mse: Some(test_mse),
                in_sample_mse: Some(in_sample),
                m_hat: Some(model.n_states()),
                error: None,
            };
            Ok((cell, model))
        });
        for (s, r) in settings.iter().zip(results) {
            match r {
                Ok((cell, model)) => {
                    let score = cell.test_mse.expect("set above");
                    let better = match &best {
                        None => true,
                        Some((b, bs, _)) => score < *b || (score == *b && s.breaks_tie_over(bs)),
                    };
                    if better {
                        best = Some((score, *s, model));
                    }
                    cells.push(cell);
                }
                Err(e) => cells.push(CvCell::failed(*s, &e)),
            }
        }
    }
    let mut report =
        EvalReport { cells, chosen: None, in_sample_mse: None, future_mse: None, independent_mse: None, m_hat: None, excess_risk: None };
    if let Some((score, setting, model)) = best {
        let cell = report.cell(setting).expect("chosen from cells");
        (report.in_sample_mse, report.m_hat) = (cell.in_sample_mse, cell.m_hat);
        report.future_mse = Some(score);
        report.chosen = Some(setting);
        if let Some(other) = independent {
            report.independent_mse = Some(model_mse(&model, other)?);
        }
    }
    Ok(report)
}

type HpFit = (TrainingSetup, ConeSet, ConeSet, Vec<usize>);

fn fit_h_p(field: &Field, grid: &CvGrid, h_p: usize) -> Result<HpFit> {
    let geometry = grid.geometry(h_p)?;
    let (train, test) = split_cones(field, &geometry, grid.split)?;
    let setup = TrainingSetup::new(&train, grid.mode, grid.options)?;
    // Centroids do not depend on α, so one assignment serves every cell.
    let probe = setup.merge(grid.alpha_values[0])?;
    let clusters = assign_clusters(&test.plc, &probe)?;
    Ok((setup, train, test, clusters))
}

/// One-step MSE of a fitted model over every cone of `field`.
pub fn model_mse(model: &StateModel, field: &Field) -> Result<f64> {
    let cones = extract_cones(field, &model.geometry)?;
    mse(&predict_batch(&cones.plc, model)?.predictions, &cones.flc)
}

pub fn excess_risk_ratio(chosen_mse: f64, min_mse: f64) -> f64 {
    chosen_mse / min_mse
}

/// Test MSE on the next replicate at this replicate's chosen setting,
/// relative to the best setting on the next replicate.
pub fn excess_risk(next: &EvalReport, chosen: Setting) -> Option<f64> {
    let numerator = next.cell(chosen)?.test_mse?;
    let denominator = next.best_cell()?.test_mse?;
    Some(excess_risk_ratio(numerator, denominator))
}

/// Configuration of the simulation study: competition plus CV per replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replicates: usize,
    pub seed: u64,
    pub sim: SimConfig,
    pub h_p: usize,
    pub alpha: f64,
    pub knn_k: usize,
    pub clusters_k: usize,
    pub ar_orders: Vec<usize>,
    pub var_orders: Vec<usize>,
    pub patch_size: usize,
    pub lambda_grid: Vec<f64>,
    /// Run the CV grid for both LICORS variants as well.
    pub cv: bool,
    pub cv_h_p: Vec<usize>,
    pub cv_alphas: Vec<f64>,
    pub split: SplitMode,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            replicates: 10,
            seed: 0,
            sim: SimConfig { n_space: 100, steps: 200, burn_in: 100, seed: 0 },
            h_p: 2,
            alpha: 0.05,
            knn_k: 50,
            clusters_k: 200,
            ar_orders: vec![1, 2, 3],
            var_orders: vec![1, 2, 3],
            patch_size: 5,
            lambda_grid: baselines::default_lambda_grid(),
            cv: true,
            cv_h_p: DEFAULT_HP.to_vec(),
            cv_alphas: DEFAULT_ALPHAS.to_vec(),
            split: SplitMode::Strict,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(invalid("need at least one replicate"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("α = {} is outside (0, 1)", self.alpha)));
        }
        ConeGeometry::new(1, self.h_p, 0, Presence::Future)?;
        if self.cv {
            self.cv_grid(FitMode::Knn { k: self.knn_k }, 0).validate()?;
        }
        Ok(())
    }

    fn cv_grid(&self, mode: FitMode, seed: u64) -> CvGrid {
        CvGrid {
            h_p_values: self.cv_h_p.clone(),
            alpha_values: self.cv_alphas.clone(),
            c: 1,
            h_f: 0,
            mode,
            options: FitOptions { seed, ..FitOptions::default() },
            split: self.split,
        }
    }

    /// The two LICORS variants: (name, mode).
    pub fn variants(&self) -> [(&'static str, FitMode); 2] {
        [("licors_direct", FitMode::Knn { k: self.knn_k }), ("licors_cluster", FitMode::PreClustered { k: self.clusters_k })]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub setting: String,
    pub in_mse: f64,
    pub out_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub methods: Vec<MethodResult>,
    /// CV report per LICORS variant, in [`StudyConfig::variants`] order.
    pub cv: Vec<(String, EvalReport)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessRow {
    pub replicate: usize,
    pub variant: String,
    pub chosen: Setting,
    pub next_best: Setting,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub replicates: Vec<ReplicateResult>,
    pub failures: Vec<(usize, String)>,
    pub excess: Vec<ExcessRow>,
}

impl StudyReport {
    /// Out-of-sample MSE of `method` in replicate order.
    pub fn out_mses(&self, method: &str) -> Vec<f64> {
        self.replicates.iter().flat_map(|r| r.methods.iter().filter(|m| m.method == method).map(|m| m.out_mse)).collect()
    }

    pub fn cv_reports<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a EvalReport> + 'a {
        self.replicates.iter().flat_map(move |r| r.cv.iter().filter(move |(v, _)| v == variant).map(|(_, e)| e))
    }
}

fn licors_row(
    name: &str,
    setting: String,
    model: &StateModel,
    setup: &TrainingSetup,
    cones: &ConeSet,
    other: &Field,
) -> Result<MethodResult> {
    let in_mse = mse(&forecast_from_clusters(&setup.row_group, model).predictions, &cones.flc)?;
    let out_mse = model_mse(model, other)?;
    Ok(MethodResult { method: name.into(), setting, in_mse, out_mse })
}

fn baseline_row(model: &BaselineModel, setting: String, field: &Field, other: &Field) -> Result<MethodResult> {
    let lags = model.lags();
    Ok(MethodResult {
        method: model.name().into(),
        setting,
        in_mse: baselines::baseline_mse(model, field, lags..field.steps())?,
        out_mse: baselines::baseline_mse(model, other, lags..other.steps())?,
    })
}

fn oracle_mse(x: &Field) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 2..x.steps() {
        for site in 0..x.n_sites() {
            sum += (x.get(site, t) - oracle_predict(x, site, t)?).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySample);
    }
    Ok(sum / count as f64)
}

/// One replicate: LICORS variants, baselines and the oracle trained on one
/// realization and scored on it and on an independent one; optionally the
/// CV grid for each LICORS variant.
pub fn run_replicate(cfg: &StudyConfig, replicate: usize) -> Result<ReplicateResult> {
    let r = replicate as u64;
    let main = simulate(&SimConfig { seed: derive_seed(cfg.seed, &[r, 0]), ..cfg.sim })?.x;
    let other = simulate(&SimConfig { seed: derive_seed(cfg.seed, &[r, 1]), ..cfg.sim })?.x;
    let fit_seed = derive_seed(cfg.seed, &[r, 2]);
    let options = FitOptions { seed: fit_seed, ..FitOptions::default() };

    let mut methods = Vec::new();
    let geometry = ConeGeometry::new(1, cfg.h_p, 0, Presence::Future)?;
    let cones = extract_cones(&main, &geometry)?;
    for (name, mode) in cfg.variants() {
        let setup = TrainingSetup::new(&cones, mode, options)?;
        let model = setup.merge(cfg.alpha)?;
        let k = match mode {
            FitMode::Knn { k } | FitMode::PreClustered { k } => k,
            FitMode::Delta { .. } => 0,
        };
        let key = if matches!(mode, FitMode::Knn { .. }) { "k" } else { "K" };
        let setting = format!("h_p={} {key}={k} alpha={} m={}", cfg.h_p, cfg.alpha, model.n_states());
        methods.push(licors_row(name, setting, &model, &setup, &cones, &other)?);
    }

    let steps = main.steps();
    let mean = baselines::fit_site_mean(&main, 0..steps)?;
    methods.push(baseline_row(&mean, String::new(), &main, &other)?);
    let ar = baselines::select_ar(&main, &cfg.ar_orders, 0..steps)?;
    methods.push(baseline_row(&ar, format!("p={}", ar.lags()), &main, &other)?);
    let var = baselines::select_var_lasso(&main, &cfg.var_orders, cfg.patch_size, &cfg.lambda_grid, 0..steps)?;
    let lambda = match &var {
        BaselineModel::PatchVar { lambda, .. } => *lambda,
        _ => unreachable!("select_var_lasso returns a patch model"),
    };
    methods.push(baseline_row(&var, format!("p={} patch={} lambda={lambda}", var.lags(), cfg.patch_size), &main, &other)?);
    methods.push(MethodResult {
        method: "oracle".into(),
        setting: String::new(),
        in_mse: oracle_mse(&main)?,
        out_mse: oracle_mse(&other)?,
    });

    let mut cv = Vec::new();
    if cfg.cv {
        for (name, mode) in cfg.variants() {
            let report = grid_search_with(&main, &cfg.cv_grid(mode, fit_seed), Some(&other))?;
            cv.push((name.to_string(), report));
        }
    }
    Ok(ReplicateResult { replicate, methods, cv })
}

/// Every replicate (in parallel), then excess risk between consecutive
/// successful replicates. Failed replicates are recorded and skipped.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let outcomes = par::map_range(cfg.replicates, |i| run_replicate(cfg, i));
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => replicates.push(r),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    let mut excess = Vec::new();
    for pair in replicates.windows(2) {
        for ((variant, this), (_, next)) in pair[0].cv.iter().zip(&pair[1].cv) {
            let (Some(chosen), Some(best)) = (this.chosen, next.best_cell()) else { continue };
            if let Some(ratio) = excess_risk(next, chosen) {
                excess.push(ExcessRow { replicate: pair[0].replicate, variant: variant.clone(), chosen, next_best: best.setting, ratio });
            }
        }
    }
    for row in &excess {
        let rep = replicates.iter_mut().find(|r| r.replicate == row.replicate).expect("row from replicates");
        if let Some((_, report)) = rep.cv.iter_mut().find(|(v, _)| *v == row.variant) {
            report.excess_risk = Some(row.ratio);
        }
    }
    Ok(StudyReport { replicates, failures, excess })
}

/// Competition only, without the CV grids.
pub fn run_competition(n_replicates: usize, seed: u64) -> Result<StudyReport> {
    run_study(&StudyConfig { replicates: n_replicates, seed, cv: false, ..StudyConfig::default() })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format { format: "CSV", reason: e.to_string() }
}

pub fn write_competition_csv<W: Write>(w: W, report: &StudyReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["replicate", "method", "setting", "in_mse", "out_mse"]).map_err(csv_err)?;
    for r in &report.replicates {
        for m in &r.methods {
            out.write_record([r.replicate.to_string(), m.method.clone(), m.setting.clone(), m.in_mse.to_string(), m.out_mse.to_string()])
                .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Grid rows for a set of labeled reports. Failed cells have an empty
/// test_mse and m_hat.
pub fn write_cv_table_csv<'a, W: Write>(w: W, rows: impl IntoIterator<Item = (usize, &'a str, &'a EvalReport)>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["replicate", "variant", "h_p", "alpha", "test_mse", "m_hat"]).map_err(csv_err)?;
    for (replicate, variant, report) in rows {
        for c in &report.cells {
            out.write_record([
                replicate.to_string(),
                variant.to_string(),
                c.setting.h_p.to_string(),
                c.setting.alpha.to_string(),
                opt(c.test_mse),
                opt(c.m_hat),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn study_cv_rows(report: &StudyReport) -> impl Iterator<Item = (usize, &str, &EvalReport)> {
    report.replicates.iter().flat_map(|r| r.cv.iter().map(move |(v, e)| (r.replicate, v.as_str(), e)))
}

/// Chosen setting and its in-sample, future-half and independent MSE.
pub fn write_cv_summary_csv<'a, W: Write>(w: W, rows: impl IntoIterator<Item = (usize, &'a str, &'a EvalReport)>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["replicate", "variant", "h_p", "alpha", "m_hat", "in_sample_mse", "future_mse", "independent_mse", "excess_risk"])
        .map_err(csv_err)?;
    for (replicate, variant, e) in rows {
        out.write_record([
            replicate.to_string(),
            variant.to_string(),
            opt(e.chosen.map(|s| s.h_p)),
            opt(e.chosen.map(|s| s.alpha)),
            opt(e.m_hat),
            opt(e.in_sample_mse),
            opt(e.future_mse),
            opt(e.independent_mse),
            opt(e.excess_risk),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_excess_risk_csv<W: Write>(w: W, report: &StudyReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["replicate", "variant", "chosen_h_p", "chosen_alpha", "next_best_h_p", "next_best_alpha", "ratio"])
        .map_err(csv_err)?;
    for e in &report.excess {
        out.write_record([
            e.replicate.to_string(),
            e.variant.clone(),
            e.chosen.h_p.to_string(),
            e.chosen.alpha.to_string(),
            e.next_best.h_p.to_string(),
            e.next_best.alpha.to_string(),
            e.ratio.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
