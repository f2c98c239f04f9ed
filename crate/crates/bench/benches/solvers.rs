use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;

use iqctube::analysis::analyze;
use iqctube::config::ProjectConfig;
use iqctube::estimator;
use iqctube::mpc::{solve, NuMode, OcpProblem};
use iqctube::pipeline::{synthesize, uncertainty_class, Loop};

fn offline(c: &mut Criterion) {
    let cfg = ProjectConfig::example();
    let file = synthesize(&cfg).unwrap();
    let class = uncertainty_class(&cfg).unwrap();
    let lp = Loop::new(&cfg, &file.controller).unwrap();
    let settings = cfg.settings();
    let mut g = c.benchmark_group("offline");
    g.sample_size(10);
    g.bench_function("analysis", |b| b.iter(|| analyze(black_box(&lp.gk), &class, cfg.rho, &settings).unwrap()));
    let an = analyze(&lp.gk, &class, cfg.rho, &settings).unwrap();
    g.bench_function("estimator_synthesis", |b| {
        b.iter(|| estimator::synthesize(black_box(&lp.sigma), &class, &an.p, &an.m(), &settings).unwrap())
    });
    g.bench_function("full_design", |b| b.iter(|| synthesize(black_box(&cfg)).unwrap()));
    g.finish();
}

fn online(c: &mut Criterion) {
    let cfg = ProjectConfig::example();
    let file = synthesize(&cfg).unwrap();
    let setup = file.mpc_setup(&cfg, cfg.horizon).unwrap();
    let mut theta = DVector::zeros(setup.model.n_theta());
    theta.rows_mut(0, cfg.plant.n_x()).copy_from_slice(&cfg.initial.x_hat0);
    let problem = OcpProblem { pred_theta: theta.clone(), pred_c: file.c_hat0.clone(), est_theta: theta, est_c: file.c_tilde0.clone() };
    let mut g = c.benchmark_group("online");
    g.sample_size(20);
    g.bench_function("mpc_fixed1", |b| b.iter(|| solve(&setup, black_box(&problem), NuMode::Fixed1).unwrap()));
    g.bench_function("mpc_optimize", |b| b.iter(|| solve(&setup, black_box(&problem), NuMode::Optimize).unwrap()));
    g.finish();
}

criterion_group!(benches, offline, online);
criterion_main!(benches);
