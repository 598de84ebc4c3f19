//! Parallel versus single-thread timings for the heavy stages. The
//! single-thread case runs the same code inside a one-thread rayon pool,
//! which matches a build without the `parallel` feature.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use licors::cv::{run_study, StudyConfig};
use licors::forecast::assign_clusters;
use licors::neighborhoods::{knn_all, Standardization};
use licors::simulate::{simulate, SimConfig};
use licors::{extract_cones, ConeGeometry, FitMode, FitOptions, Presence, TrainingSetup};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut out = vec![("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    out.push(("parallel", rayon::ThreadPoolBuilder::new().num_threads(all).build().unwrap()));
    out
}

fn stages(c: &mut Criterion) {
    let x = simulate(&SimConfig { n_space: 100, steps: 100, burn_in: 50, seed: 1 }).unwrap().x;
    let g = ConeGeometry::new(1, 2, 0, Presence::Future).unwrap();
    let cones = extract_cones(&x, &g).unwrap();
    let z = Standardization::fit(&cones.plc).unwrap().apply(&cones.plc).unwrap();
    let model = TrainingSetup::new(&cones, FitMode::PreClustered { k: 200 }, FitOptions::default()).unwrap().merge(0.05).unwrap();
    let study = StudyConfig {
        replicates: 2,
        sim: SimConfig { n_space: 40, steps: 80, burn_in: 30, seed: 0 },
        cv_h_p: vec![2],
        cv_alphas: vec![0.05],
        ..StudyConfig::default()
    };

    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("extract_cones", name), |b| b.iter(|| pool.install(|| extract_cones(&x, &g).unwrap())));
        group.bench_function(BenchmarkId::new("knn_all_k50", name), |b| b.iter(|| pool.install(|| knn_all(&z, 50).unwrap())));
        group.bench_function(BenchmarkId::new("assign_clusters", name), |b| {
            b.iter(|| pool.install(|| assign_clusters(&cones.plc, &model).unwrap()))
        });
        group.bench_function(BenchmarkId::new("competition", name), |b| b.iter(|| pool.install(|| run_study(&study).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
