//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails. Criteria 2–5 share one simulation study.

use std::process::ExitCode;
use std::time::Instant;

use licors::baselines::{lasso_cd, LassoSettings};
use licors::cones::Offset;
use licors::cv::{
    median, run_study, study_cv_rows, write_competition_csv, write_cv_summary_csv, write_cv_table_csv, write_excess_risk_csv, StudyConfig,
    StudyReport,
};
use licors::forecast::{lebesgue_smooth, riemann_smooth};
use licors::neighborhoods::knn_neighborhood;
use licors::simulate::{latent_state, oracle_predict, simulate, SimConfig};
use licors::states::{equivalence_matrix, merge_states, DistributionTester, Group};
use licors::two_sample::{hotelling_t2, ks_two_sample, random_projection_test, welch_t_test, TestSettings};
use licors::{cone_offsets, extract_cones, Boundary, ConeGeometry, Field, Presence, RowMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Review,
    Fail,
}

struct Ledger {
    failed: usize,
}

impl Ledger {
    fn record(&mut self, id: u32, name: &str, verdict: Verdict, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Review => "REVIEW",
            Verdict::Fail => "FAIL",
        };
        if verdict == Verdict::Fail {
            self.failed += 1;
        }
        println!("{tag:<6} [{id}] {name}: {detail}");
    }

    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        self.record(id, name, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn oracle_field_mse(x: &Field) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for t in 2..x.steps() {
        for r in 0..x.n_sites() {
            sum += (x.get(r, t) - oracle_predict(x, r, t).unwrap()).powi(2);
            count += 1;
        }
    }
    sum / count as f64
}

fn criterion_1(ledger: &mut Ledger) {
    let start = Instant::now();
    let mses: Vec<f64> = (0..5)
        .map(|seed| oracle_field_mse(&simulate(&SimConfig { n_space: 100, steps: 200, burn_in: 100, seed: 1000 + seed }).unwrap().x))
        .collect();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = mses.iter().all(|m| (m - 1.0).abs() <= 0.05) && elapsed < 60.0;
    let shown: Vec<String> = mses.iter().map(|m| format!("{m:.4}")).collect();
    ledger.check(1, "oracle Bayes risk", ok, format!("MSE per replicate [{}] (target 1.00 ± 0.05), {elapsed:.1}s", shown.join(", ")));
}

fn study_config() -> StudyConfig {
    StudyConfig { replicates: 11, seed: 2024, ..StudyConfig::default() }
}

fn criterion_2(ledger: &mut Ledger, report: &StudyReport, seconds: f64) {
    let med = |m: &str| median(&report.out_mses(m)).unwrap_or(f64::NAN);
    let direct = med("licors_direct");
    let cluster = med("licors_cluster");
    let (site, ar, var, oracle) = (med("site_mean"), med("ar"), med("var_lasso"), med("oracle"));
    let n = report.out_mses("licors_direct").len();
    let ok = n >= 10 && direct < site && direct < ar && direct < var && direct <= cluster && seconds < 1800.0;
    ledger.check(
        2,
        "competition ordering",
        ok,
        format!(
            "median out-of-sample MSE over {n} replicates: direct {direct:.4}, pre-clustered {cluster:.4}, site-mean {site:.4}, AR {ar:.4}, VAR-lasso {var:.4}, oracle {oracle:.4}; study took {seconds:.0}s"
        ),
    );
}

fn criterion_3(ledger: &mut Ledger, report: &StudyReport) {
    let mut parts = Vec::new();
    let mut ok = true;
    for variant in ["licors_direct", "licors_cluster"] {
        let picks: Vec<usize> = report.cv_reports(variant).take(10).filter_map(|e| e.chosen.map(|s| s.h_p)).collect();
        let hits = picks.iter().filter(|&&h| h == 2).count();
        ok &= picks.len() == 10 && hits >= 9;
        parts.push(format!("{variant} {hits}/{} (picks {picks:?})", picks.len()));
    }
    ledger.check(3, "CV selects h_p = 2", ok, parts.join("; "));
}

fn criterion_4(ledger: &mut Ledger, report: &StudyReport) {
    let mut parts = Vec::new();
    let mut ok = true;
    for variant in ["licors_direct", "licors_cluster"] {
        let ratios: Vec<f64> = report.excess.iter().filter(|e| e.variant == variant).map(|e| e.ratio).collect();
        let m = median(&ratios).unwrap_or(f64::NAN);
        let worst = ratios.iter().copied().fold(f64::NAN, f64::max);
        ok &= ratios.len() >= 10 && m <= 1.05;
        parts.push(format!("{variant} median {m:.4} over {} pairs (max {worst:.4})", ratios.len()));
    }
    ledger.check(4, "excess risk", ok, parts.join("; "));
}

fn criterion_5(ledger: &mut Ledger, report: &StudyReport) {
    let mut verdict = Verdict::Pass;
    let mut parts = Vec::new();
    for (variant, lo, hi) in [("licors_cluster", 10.0, 30.0), ("licors_direct", 30.0, 90.0)] {
        let counts: Vec<f64> = report.cv_reports(variant).filter_map(|e| e.m_hat).map(|m| m as f64).collect();
        let m = median(&counts).unwrap_or(f64::NAN);
        let v = if (lo..=hi).contains(&m) {
            Verdict::Pass
        } else if (lo / 1.5..=hi * 1.5).contains(&m) {
            Verdict::Review
        } else {
            Verdict::Fail
        };
        verdict = match (verdict, v) {
            (Verdict::Fail, _) | (_, Verdict::Fail) => Verdict::Fail,
            (Verdict::Review, _) | (_, Verdict::Review) => Verdict::Review,
            _ => Verdict::Pass,
        };
        parts.push(format!("{variant} median m̂ {m} in [{lo}, {hi}] (all {counts:?})"));
    }
    ledger.record(5, "state-count bands", verdict, parts.join("; "));
}

fn rejection_rate(trials: usize, mut p_value: impl FnMut(usize) -> f64, alpha: f64) -> f64 {
    (0..trials).filter(|&i| p_value(i) < alpha).count() as f64 / trials as f64
}

fn criterion_6(ledger: &mut Ledger) {
    let trials = 1000;
    let n = 200;
    let mut ok = true;
    let mut parts = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut draws = |dim: usize| -> Vec<(RowMatrix, RowMatrix)> {
        (0..trials)
            .map(|_| {
                let a = RowMatrix::from_vec(n, dim, normals(&mut rng, n * dim)).unwrap();
                let b = RowMatrix::from_vec(n, dim, normals(&mut rng, n * dim)).unwrap();
                (a, b)
            })
            .collect()
    };
    let uni = draws(1);
    let multi = draws(3);
    let ks: Vec<f64> = uni.iter().map(|(a, b)| ks_two_sample(a.as_slice(), b.as_slice()).unwrap().p_value).collect();
    let welch: Vec<f64> = uni.iter().map(|(a, b)| welch_t_test(a.as_slice(), b.as_slice()).unwrap().p_value).collect();
    let hotelling: Vec<f64> = multi.iter().map(|(a, b)| hotelling_t2(a, b).unwrap().p_value).collect();
    let projection: Vec<f64> =
        multi.iter().enumerate().map(|(i, (a, b))| random_projection_test(a, b, 10, 0.05, i as u64).unwrap().p_value).collect();
    for alpha in [0.05, 0.01] {
        let se = (alpha * (1.0 - alpha) / trials as f64).sqrt();
        for (name, ps) in [("KS", &ks), ("Welch", &welch), ("Hotelling", &hotelling)] {
            let rate = rejection_rate(trials, |i| ps[i], alpha);
            let good = (rate - alpha).abs() <= 2.0 * se;
            ok &= good;
            parts.push(format!("{name}@{alpha} {rate:.3}{}", if good { "" } else { " (out of band)" }));
        }
        let rate = rejection_rate(trials, |i| projection[i], alpha);
        let good = rate <= alpha + 2.0 * se;
        ok &= good;
        parts.push(format!("projection@{alpha} {rate:.3}{}", if good { "" } else { " (above α)" }));
    }
    ledger.check(6, "test calibration", ok, format!("{} (band ±2 SE, {trials} replicates, n = {n})", parts.join(", ")));
}

fn criterion_7(ledger: &mut Ledger) {
    let n = 500;
    let mut exact = 0;
    let mut found = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut values = Vec::with_capacity(7 * n);
        let mut truth = Vec::with_capacity(7 * n);
        for (c, k) in (-3i32..=3).enumerate() {
            values.extend(normals(&mut rng, n).into_iter().map(|z| z + k as f64));
            truth.extend(std::iter::repeat_n(c, n));
        }
        let flc = RowMatrix::column(values);
        let groups: Vec<Group> = (0..7).map(|c| Group { members: vec![c], sample: (c * n..(c + 1) * n).collect() }).collect();
        let tester = DistributionTester { settings: TestSettings { alpha: 0.01, n_projections: 10, seed } };
        let merged = merge_states(&flc, &groups, 0.01, &tester).unwrap();
        let labels: Vec<usize> = truth.iter().map(|&c| merged.cluster_to_state[c]).collect();
        let a_hat = equivalence_matrix(&labels, 7 * n).unwrap();
        let a = equivalence_matrix(&truth, 7 * n).unwrap();
        exact += usize::from(a_hat == a);
        found.push(merged.n_states);
    }
    ledger.check(7, "seven-state recovery", exact >= 9, format!("Â = A in {exact}/10 seeds (states found {found:?})"));
}

/// (PLC, FLC, (site, t)).
type GatheredRow = (Vec<f64>, Vec<f64>, (usize, usize));

fn brute_cones(field: &Field, g: &ConeGeometry) -> Vec<GatheredRow> {
    let offsets = cone_offsets(g, field.lattice().dims()).unwrap();
    let mut rows = Vec::new();
    for t in g.past_reach()..field.steps() - g.future_reach() {
        for r in 0..field.n_sites() {
            let gather = |stencil: &[Offset]| -> Option<Vec<f64>> {
                stencil.iter().map(|o| field.lattice().offset_site(r, &o.dr).map(|s| field.get(s, (t as isize + o.dt) as usize))).collect()
            };
            if let (Some(p), Some(f)) = (gather(&offsets.plc), gather(&offsets.flc)) {
                rows.push((p, f, (r, t)));
            }
        }
    }
    rows
}

fn check_cones(rng: &mut ChaCha8Rng) -> bool {
    let dims = rng.random_range(1..=2);
    let extent: Vec<usize> = (0..dims).map(|_| rng.random_range(3..=6)).collect();
    let steps = rng.random_range(5..=10);
    let boundary = if rng.random_bool(0.5) { Boundary::Wrap } else { Boundary::Truncate };
    let n: usize = extent.iter().product();
    let field = Field::new(extent, steps, normals(rng, n * steps), boundary).unwrap();
    let present_in = if rng.random_bool(0.5) { Presence::Past } else { Presence::Future };
    let h_p = rng.random_range(1..=2);
    let h_f = rng.random_range(if present_in == Presence::Past { 1 } else { 0 }..=2);
    let g = ConeGeometry::new(1, h_p, h_f, present_in).unwrap();
    let cones = extract_cones(&field, &g).unwrap();
    let expected = brute_cones(&field, &g);
    cones.len() == expected.len()
        && expected
            .iter()
            .enumerate()
            .all(|(i, (p, f, at))| cones.plc.row(i) == p.as_slice() && cones.flc.row(i) == f.as_slice() && cones.coords[i] == *at)
}

fn check_knn(rng: &mut ChaCha8Rng) -> bool {
    let n = rng.random_range(2..40);
    let dim = rng.random_range(1..4);
    // Small integer coordinates force distance ties.
    let data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(0..4) as f64).collect();
    let m = RowMatrix::from_vec(n, dim, data).unwrap();
    let anchor = rng.random_range(0..n);
    let k = rng.random_range(1..=n);
    let dist = |j: usize| m.row(anchor).iter().zip(m.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)));
    let mut expected: Vec<usize> = order[..k].to_vec();
    if !expected.contains(&anchor) {
        expected[k - 1] = anchor;
    }
    expected.sort_unstable();
    knn_neighborhood(&m, anchor, k).unwrap().members == expected
}

fn check_latent(rng: &mut ChaCha8Rng) -> bool {
    let n = rng.random_range(5..12);
    let x = Field::new(vec![n], 3, (0..3 * n).map(|_| rng.random_range(-6.0..6.0)).collect(), Boundary::Wrap).unwrap();
    (0..n).all(|r| {
        let at = |i: isize, t: usize| x.get((r as isize + i).rem_euclid(n as isize) as usize, t);
        let older = (-2..=2).map(|i| at(i, 0)).sum::<f64>() / 5.0;
        let newer = (-1..=1).map(|i| at(i, 1)).sum::<f64>() / 3.0;
        latent_state(&x, r, 2).unwrap() == (older - newer).round() as i64
    })
}

fn kernel(query: &[f64], train: &[Vec<f64>], values: &[f64], h: f64) -> f64 {
    let w: Vec<f64> = train.iter().map(|row| (-row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h).exp()).collect();
    w.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / w.iter().sum::<f64>()
}

fn check_smoothers(rng: &mut ChaCha8Rng) -> (bool, f64) {
    let n = rng.random_range(1..15);
    let dim = rng.random_range(1..4);
    let train: Vec<Vec<f64>> = (0..n).map(|_| normals(rng, dim)).collect();
    let values = normals(rng, n);
    let query = normals(rng, dim);
    let (h_x, h_y) = (rng.random_range(0.5..4.0), rng.random_range(0.1..2.0));
    let plc = RowMatrix::from_rows(&train).unwrap();
    let flc = RowMatrix::column(values.clone());
    let riemann = kernel(&query, &train, &values, h_x);
    let pilots: Vec<Vec<f64>> = train.iter().map(|x| vec![kernel(x, &train, &values, h_x)]).collect();
    let lebesgue = kernel(&[riemann], &pilots, &values, h_y);
    let got_r = riemann_smooth(&query, &plc, &flc, h_x).unwrap().prediction[0];
    let got_l = lebesgue_smooth(&query, &plc, &flc, h_x, h_y).unwrap().prediction[0];
    let err = (got_r - riemann).abs().max((got_l - lebesgue).abs());
    (err <= 1e-12, err)
}

/// Lasso optimality: |⟨x_j, r⟩/n| ≤ λ at zeros and = λ·sign(β_j) elsewhere.
fn check_lasso(rng: &mut ChaCha8Rng) -> (bool, f64) {
    let n = rng.random_range(10..40);
    let p = rng.random_range(1..8);
    let center = |mut v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= m);
        v
    };
    let cols: Vec<Vec<f64>> = (0..p).map(|_| center(normals(rng, n))).collect();
    let y = center((0..n).map(|i| cols[0][i] * 1.5 - cols[p - 1][i] + rng.sample::<f64, _>(StandardNormal)).collect());
    let lambda = rng.random_range(0.001..0.8);
    let fit = lasso_cd(&cols, &y, lambda, &LassoSettings::default()).unwrap();
    let resid: Vec<f64> = (0..n).map(|i| y[i] - cols.iter().zip(&fit.coef).map(|(c, b)| c[i] * b).sum::<f64>()).collect();
    let mut worst = 0.0f64;
    for (c, &b) in cols.iter().zip(&fit.coef) {
        let grad = c.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / n as f64;
        let violation = if b == 0.0 { (grad.abs() - lambda).max(0.0) } else { (grad - lambda * b.signum()).abs() };
        worst = worst.max(violation);
    }
    (worst <= 1e-6 && !fit.hit_cap, worst)
}

fn criterion_8(ledger: &mut Ledger) {
    let trials = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cones = (0..trials).filter(|_| check_cones(&mut rng)).count();
    let knn = (0..trials).filter(|_| check_knn(&mut rng)).count();
    let latent = (0..trials).filter(|_| check_latent(&mut rng)).count();
    let mut smooth_err = 0.0f64;
    let smooth = (0..trials)
        .filter(|_| {
            let (ok, e) = check_smoothers(&mut rng);
            smooth_err = smooth_err.max(e);
            ok
        })
        .count();
    let mut lasso_err = 0.0f64;
    let lasso = (0..trials)
        .filter(|_| {
            let (ok, e) = check_lasso(&mut rng);
            lasso_err = lasso_err.max(e);
            ok
        })
        .count();
    let ok = [cones, knn, latent, smooth, lasso].iter().all(|&c| c == trials);
    ledger.check(
        8,
        "brute-force oracles",
        ok,
        format!(
            "cones {cones}/{trials}, kNN {knn}/{trials}, latent state {latent}/{trials}, smoothers {smooth}/{trials} (max err {smooth_err:.1e}), lasso KKT {lasso}/{trials} (max violation {lasso_err:.1e})"
        ),
    );
}

fn study_bytes(cfg: &StudyConfig) -> Vec<Vec<u8>> {
    let report = run_study(cfg).unwrap();
    let mut out = vec![Vec::new(); 4];
    write_competition_csv(&mut out[0], &report).unwrap();
    write_cv_table_csv(&mut out[1], study_cv_rows(&report)).unwrap();
    write_cv_summary_csv(&mut out[2], study_cv_rows(&report)).unwrap();
    write_excess_risk_csv(&mut out[3], &report).unwrap();
    out
}

fn criterion_9(ledger: &mut Ledger) {
    let cfg =
        StudyConfig { replicates: 3, seed: 99, sim: SimConfig { n_space: 40, steps: 80, burn_in: 30, seed: 0 }, ..StudyConfig::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| study_bytes(&cfg))
    };
    let one = run(1);
    let four = run(4);
    let again = run(1);
    let ok = one == four && one == again;
    let sizes: Vec<usize> = one.iter().map(Vec::len).collect();
    ledger.check(
        9,
        "determinism",
        ok,
        format!("1 vs 4 threads vs repeat byte-identical: {ok} (CSV sizes {sizes:?}, parallel build: {})", licors::par::is_parallel()),
    );
}

fn main() -> ExitCode {
    let mut ledger = Ledger { failed: 0 };
    criterion_1(&mut ledger);
    let cfg = study_config();
    let start = Instant::now();
    let report = run_study(&cfg).expect("study runs");
    let seconds = start.elapsed().as_secs_f64();
    for (i, reason) in &report.failures {
        println!("note: replicate {i} failed: {reason}");
    }
    criterion_2(&mut ledger, &report, seconds);
    criterion_3(&mut ledger, &report);
    criterion_4(&mut ledger, &report);
    criterion_5(&mut ledger, &report);
    criterion_6(&mut ledger);
    criterion_7(&mut ledger);
    criterion_8(&mut ledger);
    criterion_9(&mut ledger);
    println!("acceptance: {} failing criteria", ledger.failed);
    if ledger.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
