//! Point forecasts from a fitted state model, plus kernel smoothers that
//! predict without state reconstruction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, RowMatrix};
use crate::neighborhoods::nearest_centroid;
use crate::par;
use crate::states::StateModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub predictions: RowMatrix,
    pub per_point_state: Vec<usize>,
}

fn check_len(model: &StateModel, row: &[f64]) -> Result<()> {
    if row.len() != model.n_p() {
        return Err(Error::DimensionMismatch { expected: model.n_p(), got: row.len() });
    }
    Ok(())
}

/// Index of the centroid nearest to a raw (unstandardized) PLC row.
pub fn assign_cluster(plc_row: &[f64], model: &StateModel) -> Result<usize> {
    check_len(model, plc_row)?;
    let mut z = vec![0.0; plc_row.len()];
    model.standardization.apply_row(plc_row, &mut z);
    Ok(nearest_centroid(&z, &model.cluster_centroids).0)
}

/// Predictive state of a raw PLC row: nearest centroid, then its state.
pub fn assign_state(plc_row: &[f64], model: &StateModel) -> Result<usize> {
    Ok(model.cluster_to_state[assign_cluster(plc_row, model)?])
}

pub fn predict_point(plc_row: &[f64], model: &StateModel) -> Result<Vec<f64>> {
    Ok(model.state_means.row(assign_state(plc_row, model)?).to_vec())
}

/// Nearest-centroid index for every row, in parallel.
pub fn assign_clusters(plc: &RowMatrix, model: &StateModel) -> Result<Vec<usize>> {
    if plc.cols() != model.n_p() {
        return Err(Error::DimensionMismatch { expected: model.n_p(), got: plc.cols() });
    }
    let z = model.standardization.apply(plc)?;
    Ok(par::map_range(z.rows(), |i| nearest_centroid(z.row(i), &model.cluster_centroids).0))
}

/// Forecast from precomputed cluster indices; lets callers reuse one
/// assignment across models that share centroids.
pub fn forecast_from_clusters(clusters: &[usize], model: &StateModel) -> Forecast {
    let per_point_state: Vec<usize> = clusters.iter().map(|&c| model.cluster_to_state[c]).collect();
    let mut predictions = RowMatrix::zeros(clusters.len(), model.n_f());
    for (i, &s) in per_point_state.iter().enumerate() {
        predictions.row_mut(i).copy_from_slice(model.state_means.row(s));
    }
    Forecast { predictions, per_point_state }
}

pub fn predict_batch(plc: &RowMatrix, model: &StateModel) -> Result<Forecast> {
    Ok(forecast_from_clusters(&assign_clusters(plc, model)?, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smoothed {
    pub prediction: Vec<f64>,
    /// Every kernel weight underflowed and the nearest point's value was used.
    pub nearest_fallback: bool,
}

/// Normalized Gaussian-kernel average of `values`, with weights
/// exp(−d²/h) from the given squared distances.
fn kernel_average(sq_dist: &[f64], values: &RowMatrix, bandwidth: f64) -> Smoothed {
    let weights: Vec<f64> = sq_dist.iter().map(|d| (-d / bandwidth).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        let nearest = sq_dist.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0))).map_or(0, |(i, _)| i);
        return Smoothed { prediction: values.row(nearest).to_vec(), nearest_fallback: true };
    }
    let mut out = vec![0.0; values.cols()];
    for (w, row) in weights.iter().zip(values.iter_rows()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Smoothed { prediction: out, nearest_fallback: false }
}

fn check_smoother(query: &[f64], train_x: &RowMatrix, train_y: &RowMatrix, bandwidths: &[f64]) -> Result<()> {
    if bandwidths.iter().any(|h| !(*h > 0.0)) {
        return Err(crate::error::invalid("bandwidths must be positive"));
    }
    if train_x.rows() == 0 {
        return Err(Error::EmptySample);
    }
    if train_x.rows() != train_y.rows() {
        return Err(Error::DimensionMismatch { expected: train_x.rows(), got: train_y.rows() });
    }
    if query.len() != train_x.cols() {
        return Err(Error::DimensionMismatch { expected: train_x.cols(), got: query.len() });
    }
    Ok(())
}

/// Nadaraya–Watson kernel regression in PLC space. Rows are expected to be
/// standardized already.
pub fn riemann_smooth(query_plc: &[f64], train_plc: &RowMatrix, train_flc: &RowMatrix, h_x: f64) -> Result<Smoothed> {
    check_smoother(query_plc, train_plc, train_flc, &[h_x])?;
    let d: Vec<f64> = train_plc.iter_rows().map(|r| squared_distance(query_plc, r)).collect();
    Ok(kernel_average(&d, train_flc, h_x))
}

/// Second stage of Lebesgue smoothing: kernel weights on distances between
/// pilot predictions rather than between inputs.
pub fn lebesgue_from_pilots(query_pilot: &[f64], train_pilots: &RowMatrix, train_flc: &RowMatrix, h_y: f64) -> Result<Smoothed> {
    check_smoother(query_pilot, train_pilots, train_flc, &[h_y])?;
    let d: Vec<f64> = train_pilots.iter_rows().map(|r| squared_distance(query_pilot, r)).collect();
    Ok(kernel_average(&d, train_flc, h_y))
}

/// Pilot Riemann estimates at every training input.
pub fn riemann_pilots(train_plc: &RowMatrix, train_flc: &RowMatrix, h_x: f64) -> Result<RowMatrix> {
    let rows = par::map_range(train_plc.rows(), |i| riemann_smooth(train_plc.row(i), train_plc, train_flc, h_x).map(|s| s.prediction));
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    RowMatrix::from_rows(&rows)
}

/// Kernel regression averaging over training points whose pilot predictions
/// are close to the query's pilot prediction.
pub fn lebesgue_smooth(query_plc: &[f64], train_plc: &RowMatrix, train_flc: &RowMatrix, h_x: f64, h_y: f64) -> Result<Smoothed> {
    check_smoother(query_plc, train_plc, train_flc, &[h_x, h_y])?;
    let pilots = riemann_pilots(train_plc, train_flc, h_x)?;
    let query = riemann_smooth(query_plc, train_plc, train_flc, h_x)?;
    let mut out = lebesgue_from_pilots(&query.prediction, &pilots, train_flc, h_y)?;
    out.nearest_fallback |= query.nearest_fallback;
    Ok(out)
}

/// Mean squared error over every entry.
pub fn mse(predictions: &RowMatrix, actuals: &RowMatrix) -> Result<f64> {
    if predictions.rows() != actuals.rows() || predictions.cols() != actuals.cols() {
        return Err(Error::DimensionMismatch { expected: actuals.as_slice().len(), got: predictions.as_slice().len() });
    }
    if actuals.as_slice().is_empty() {
        return Err(Error::EmptySample);
    }
    let sum: f64 = predictions.as_slice().iter().zip(actuals.as_slice()).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok(sum / actuals.as_slice().len() as f64)
}

/// CSV export: one line per test coordinate with site, time, the n_f
/// predicted values and the state id.
pub fn write_forecast_csv<W: Write>(w: W, coords: &[(usize, usize)], forecast: &Forecast) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["site".to_string(), "t".to_string()];
    header.extend((0..forecast.predictions.cols()).map(|j| format!("pred_{j}")));
    header.push("state".into());
    let csv_err = |e: csv::Error| Error::Format { format: "CSV", reason: e.to_string() };
    out.write_record(&header).map_err(csv_err)?;
    for (i, &(site, t)) in coords.iter().enumerate() {
        let mut rec = vec![site.to_string(), t.to_string()];
        rec.extend(forecast.predictions.row(i).iter().map(|v| format!("{v}")));
        rec.push(forecast.per_point_state.get(i).map_or(String::new(), |s| s.to_string()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
