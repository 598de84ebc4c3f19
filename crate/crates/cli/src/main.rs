use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use licors::cv::{
    grid_search, median, run_study, split_cones, study_cv_rows, write_competition_csv, write_cv_summary_csv, write_cv_table_csv,
    write_excess_risk_csv, CvGrid, SplitMode, StudyConfig,
};
use licors::field::{load_csv_1d, load_stf1, save_stf1};
use licors::forecast::{mse, predict_batch, write_forecast_csv};
use licors::simulate::{simulate, SimConfig};
use licors::{extract_cones, Boundary, ConeGeometry, Field, FitMode, FitOptions, Presence, StateModel, TrainingSetup};
use serde::Serialize;
use serde_json::json;

/// Light-cone reconstruction of predictive states for spatio-temporal fields.
#[derive(Debug, Parser)]
#[command(name = "licors", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "LICORS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the (1+1)D test field and its true predictive means.
    Simulate(SimulateArgs),
    /// Reconstruct predictive states from a field and save the model.
    Fit(FitArgs),
    /// Point forecasts for every light cone of a field.
    Predict(PredictArgs),
    /// One-step MSE of a saved model on a field.
    Evaluate(EvaluateArgs),
    /// Split-half cross-validation over h_p and α.
    Cv(CvArgs),
    /// Forecasting competition and CV study over simulated replicates.
    Compete(CompeteArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BoundaryArg {
    Wrap,
    Truncate,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Self {
        match b {
            BoundaryArg::Wrap => Boundary::Wrap,
            BoundaryArg::Truncate => Boundary::Truncate,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Knn,
    Cluster,
    Delta,
}

#[derive(Debug, Args, Serialize)]
struct InputArgs {
    /// Field file: STF1 (.stf) or CSV with one row per site (.csv).
    input: PathBuf,
    #[arg(long, value_enum, default_value = "wrap")]
    boundary: BoundaryArg,
}

#[derive(Debug, Args, Serialize)]
struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    space: usize,
    /// Steps kept after burn-in.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write simulation.csv (site, t, x, d, oracle).
    #[arg(long)]
    csv: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    #[arg(long = "hp", default_value_t = 2)]
    h_p: usize,
    #[arg(long = "hf", default_value_t = 0)]
    h_f: usize,
    #[arg(long, default_value_t = 1)]
    c: usize,
    #[arg(long, value_enum, default_value = "knn")]
    mode: ModeArg,
    /// Neighbors per sample in knn mode.
    #[arg(long = "k", default_value_t = 50)]
    k: usize,
    /// Number of clusters in cluster mode.
    #[arg(long = "K", default_value_t = 200)]
    clusters: usize,
    /// Ball radius (standardized units) in delta mode.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn mode(&self) -> FitMode {
        match self.mode {
            ModeArg::Knn => FitMode::Knn { k: self.k },
            ModeArg::Cluster => FitMode::PreClustered { k: self.clusters },
            ModeArg::Delta => FitMode::Delta { delta: self.delta },
        }
    }

    fn options(&self) -> FitOptions {
        FitOptions { seed: self.seed, ..FitOptions::default() }
    }
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Train on the first ⌊T/2⌋ steps only, leaving the rest for `evaluate --strict-split`.
    #[arg(long)]
    first_half: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    model: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    model: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    /// Score only second-half cones that never read the first half.
    #[arg(long, conflicts_with = "leaky_split")]
    strict_split: bool,
    /// Score second-half cones, letting them read first-half history.
    #[arg(long)]
    leaky_split: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct CvArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long = "hp", value_delimiter = ',', default_values_t = [1, 2, 3])]
    h_p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = licors::cv::DEFAULT_ALPHAS)]
    alpha: Vec<f64>,
    #[arg(long = "hf", default_value_t = 0)]
    h_f: usize,
    #[arg(long, default_value_t = 1)]
    c: usize,
    #[arg(long, value_enum, default_value = "knn")]
    mode: ModeArg,
    #[arg(long = "k", default_value_t = 50)]
    k: usize,
    #[arg(long = "K", default_value_t = 200)]
    clusters: usize,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Let test cones read first-half history.
    #[arg(long)]
    leaky_split: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
struct CompeteArgs {
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    space: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    #[arg(long = "hp", default_value_t = 2)]
    h_p: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long = "k", default_value_t = 50)]
    k: usize,
    #[arg(long = "K", default_value_t = 200)]
    clusters: usize,
    /// Skip the CV grids (competition only).
    #[arg(long)]
    no_cv: bool,
    #[arg(long = "cv-hp", value_delimiter = ',', default_values_t = [1, 2, 3])]
    cv_h_p: Vec<usize>,
    #[arg(long = "cv-alpha", value_delimiter = ',', default_values_t = licors::cv::DEFAULT_ALPHAS)]
    cv_alpha: Vec<f64>,
    #[arg(long)]
    leaky_split: bool,
    #[command(flatten)]
    out: OutArgs,
}

fn load_field(input: &InputArgs) -> Result<Field> {
    let path = &input.input;
    let boundary = input.boundary.into();
    let field = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv_1d(path, boundary),
        _ => load_stf1(path, boundary),
    };
    field.with_context(|| format!("reading {}", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_manifest(dir: &Path, command: &str, args: &impl Serialize, threads: usize) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads,
        "parallel": licors::par::is_parallel(),
        "args": args,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn prepare(out: &OutArgs) -> Result<&Path> {
    fs::create_dir_all(&out.out).with_context(|| format!("creating {}", out.out.display()))?;
    Ok(&out.out)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!("--alpha must lie in (0, 1), got {alpha}");
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, threads: usize) -> Result<()> {
    let sim = simulate(&SimConfig { n_space: a.space, steps: a.steps, burn_in: a.burn_in, seed: a.seed })?;
    let dir = prepare(&a.out)?;
    save_stf1(&sim.x, dir.join("x.stf"))?;
    save_stf1(&sim.d_field(), dir.join("d.stf"))?;
    save_stf1(&sim.true_state_mean, dir.join("oracle.stf"))?;
    if a.csv {
        let mut w = csv::Writer::from_writer(create(dir, "simulation.csv")?);
        w.write_record(["site", "t", "x", "d", "oracle"])?;
        for t in 0..sim.x.steps() {
            for r in 0..sim.x.n_sites() {
                let rec = [
                    r.to_string(),
                    t.to_string(),
                    sim.x.get(r, t).to_string(),
                    sim.d_at(r, t).to_string(),
                    sim.true_state_mean.get(r, t).to_string(),
                ];
                w.write_record(rec)?;
            }
        }
        w.flush()?;
    }
    write_manifest(dir, "simulate", a, threads)?;
    println!("wrote {} sites × {} steps to {}", a.space, a.steps, dir.display());
    Ok(())
}

fn cmd_fit(a: &FitArgs, threads: usize) -> Result<()> {
    check_alpha(a.alpha)?;
    let mut field = load_field(&a.input)?;
    if a.first_half {
        field = licors::cv::split_half(&field)?.0;
    }
    let geometry = ConeGeometry::new(a.model.c, a.model.h_p, a.model.h_f, Presence::Future)?;
    let cones = extract_cones(&field, &geometry)?;
    let setup = TrainingSetup::new(&cones, a.model.mode(), a.model.options())?;
    let model = setup.merge(a.alpha)?;
    let dir = prepare(&a.out)?;
    model.save(dir.join("model.bin"))?;
    fs::write(dir.join("model.json"), model.to_json() + "\n")?;
    let report = json!({
        "m_hat": model.n_states(),
        "training_cones": cones.len(),
        "groups": setup.groups.len(),
        "n_p": model.n_p(),
        "n_f": model.n_f(),
        "max_cluster_diameter": setup.max_cluster_diameter,
        "state_sample_counts": model.state_sample_counts,
    });
    fs::write(dir.join("fit_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_manifest(dir, "fit", a, threads)?;
    println!("m_hat={} cones={}", model.n_states(), cones.len());
    Ok(())
}

fn load_model(path: &Path) -> Result<StateModel> {
    StateModel::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn cmd_predict(a: &PredictArgs, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    let field = load_field(&a.input)?;
    let cones = extract_cones(&field, &model.geometry)?;
    let forecast = predict_batch(&cones.plc, &model)?;
    let dir = prepare(&a.out)?;
    write_forecast_csv(create(dir, "predictions.csv")?, &cones.coords, &forecast)?;
    write_manifest(dir, "predict", a, threads)?;
    println!("predicted {} light cones", cones.len());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    let field = load_field(&a.input)?;
    let cones = if a.strict_split || a.leaky_split {
        let mode = if a.strict_split { SplitMode::Strict } else { SplitMode::Leaky };
        split_cones(&field, &model.geometry, mode)?.1
    } else {
        extract_cones(&field, &model.geometry)?
    };
    let value = mse(&predict_batch(&cones.plc, &model)?.predictions, &cones.flc)?;
    let dir = prepare(&a.out)?;
    write_manifest(dir, "evaluate", a, threads)?;
    println!("mse={value} cones={}", cones.len());
    Ok(())
}

fn cmd_cv(a: &CvArgs, threads: usize) -> Result<()> {
    let field = load_field(&a.input)?;
    let mode = ModelArgs { h_p: 1, h_f: a.h_f, c: a.c, mode: a.mode, k: a.k, clusters: a.clusters, delta: a.delta, seed: a.seed }.mode();
    let grid = CvGrid {
        h_p_values: a.h_p.clone(),
        alpha_values: a.alpha.clone(),
        c: a.c,
        h_f: a.h_f,
        mode,
        options: FitOptions { seed: a.seed, ..FitOptions::default() },
        split: if a.leaky_split { SplitMode::Leaky } else { SplitMode::Strict },
    };
    let report = grid_search(&field, &grid)?;
    let dir = prepare(&a.out)?;
    let variant = format!("{:?}", a.mode).to_lowercase();
    write_cv_table_csv(create(dir, "cv_table.csv")?, [(0, variant.as_str(), &report)])?;
    write_cv_summary_csv(create(dir, "cv_summary.csv")?, [(0, variant.as_str(), &report)])?;
    write_manifest(dir, "cv", a, threads)?;
    for cell in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("cell h_p={} alpha={} failed: {}", cell.setting.h_p, cell.setting.alpha, cell.error.as_deref().unwrap_or(""));
    }
    match report.chosen {
        Some(s) => println!(
            "chosen h_p={} alpha={} test_mse={} m_hat={}",
            s.h_p,
            s.alpha,
            report.future_mse.unwrap_or(f64::NAN),
            report.m_hat.unwrap_or(0)
        ),
        None => bail!("every grid cell failed"),
    }
    Ok(())
}

fn cmd_compete(a: &CompeteArgs, threads: usize) -> Result<()> {
    check_alpha(a.alpha)?;
    let cfg = StudyConfig {
        replicates: a.replicates,
        seed: a.seed,
        sim: SimConfig { n_space: a.space, steps: a.steps, burn_in: a.burn_in, seed: 0 },
        h_p: a.h_p,
        alpha: a.alpha,
        knn_k: a.k,
        clusters_k: a.clusters,
        cv: !a.no_cv,
        cv_h_p: a.cv_h_p.clone(),
        cv_alphas: a.cv_alpha.clone(),
        split: if a.leaky_split { SplitMode::Leaky } else { SplitMode::Strict },
        ..StudyConfig::default()
    };
    let report = run_study(&cfg)?;
    let dir = prepare(&a.out)?;
    write_competition_csv(create(dir, "competition.csv")?, &report)?;
    if cfg.cv {
        write_cv_table_csv(create(dir, "cv_table.csv")?, study_cv_rows(&report))?;
        write_cv_summary_csv(create(dir, "cv_summary.csv")?, study_cv_rows(&report))?;
        write_excess_risk_csv(create(dir, "excess_risk.csv")?, &report)?;
    }
    write_manifest(dir, "compete", a, threads)?;
    for (i, reason) in &report.failures {
        eprintln!("replicate {i} skipped: {reason}");
    }
    if report.replicates.is_empty() {
        bail!("every replicate failed");
    }
    println!("{:<16} {:>12} {:>12}", "method", "median_in", "median_out");
    for method in ["licors_direct", "licors_cluster", "site_mean", "ar", "var_lasso", "oracle"] {
        let ins: Vec<f64> =
            report.replicates.iter().flat_map(|r| r.methods.iter().filter(|m| m.method == method).map(|m| m.in_mse)).collect();
        let outs = report.out_mses(method);
        println!("{method:<16} {:>12.4} {:>12.4}", median(&ins).unwrap_or(f64::NAN), median(&outs).unwrap_or(f64::NAN));
    }
    Ok(())
}

fn configure_threads(requested: Option<usize>) -> Result<usize> {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            if n == 0 {
                bail!("--threads must be positive");
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
        }
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        if requested == Some(0) {
            bail!("--threads must be positive");
        }
        Ok(1)
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = configure_threads(cli.threads)?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, threads),
        Command::Fit(a) => cmd_fit(a, threads),
        Command::Predict(a) => cmd_predict(a, threads),
        Command::Evaluate(a) => cmd_evaluate(a, threads),
        Command::Cv(a) => cmd_cv(a, threads),
        Command::Compete(a) => cmd_compete(a, threads),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
