use brcdf::analysis::{self, BlockTransition};
use brcdf::attack::{self, AttackObjectiveContext};
use brcdf::filter::{self, GainVariant, NoiseMode, Scenario};
use brcdf::model;
use brcdf::rng::{self, StreamTag};
use brcdf::{Matrix, SelectionSchedule};
use criterion::{criterion_group, criterion_main, Criterion};

struct Fixture {
    scenario: Scenario,
    gains: filter::GainTrajectory,
}

fn fixture() -> Fixture {
    let (model, graph) = model::benchmark_model(11).unwrap();
    let mut rng = rng::stream(3, None, StreamTag::Custom(0));
    let schedules: Vec<SelectionSchedule> = (0..model.agent_count())
        .map(|_| SelectionSchedule::random(8, 4, 1, &mut rng).unwrap())
        .collect();
    let steady: Vec<Matrix> = model
        .agents()
        .iter()
        .map(|o| filter::steady_state_covariance(model.a(), model.q(), o).unwrap().covariance)
        .collect();
    let gamma = 0.9 * filter::gamma_bound(&graph, &steady, model.agents(), 1.0).unwrap().gamma_star;
    let scenario = Scenario::new(model, graph, schedules, gamma, GainVariant::Suboptimal).unwrap();
    let gains = filter::compute_gains(&scenario, 100).unwrap();
    Fixture { scenario, gains }
}

fn kernels(c: &mut Criterion) {
    let fx = fixture();
    let s = &fx.scenario;
    let last = fx.gains.last();

    c.bench_function("steady_state_covariance", |b| {
        b.iter(|| filter::steady_state_covariance(s.model.a(), s.model.q(), s.model.agent(0)).unwrap())
    });

    let t = BlockTransition::coupled(&s.model, last, &s.graph, &s.schedules);
    let p = Matrix::identity(200, 200);
    c.bench_function("joint_covariance_congruence_200", |b| b.iter(|| t.congruence(&p)));

    c.bench_function("monte_carlo_run_150", |b| {
        b.iter(|| filter::simulate_run(s, &fx.gains, 150, 1, 0, NoiseMode::Stochastic).unwrap())
    });

    let byz = attack::byzantine_set(&s.graph, 5).unwrap();
    let consensus: Vec<Matrix> = last.iter().map(|g| g.consensus.clone()).collect();
    let injection = analysis::assemble_injection(&consensus, &s.graph, &s.schedules, Some(&byz));
    c.bench_function("design_covariance", |b| {
        b.iter(|| attack::design_covariance(&injection, 25.0, &byz, 8).unwrap())
    });

    let sigma = attack::design_covariance(&injection, 25.0, &byz, 8).unwrap().sigma;
    let ctx = AttackObjectiveContext::new(&consensus, &s.graph, &byz);
    let initial: Vec<Vec<bool>> = byz.iter().map(|&i| s.schedules[i].bits()).collect();
    c.bench_function("bcd_design_10_sweeps", |b| {
        b.iter(|| attack::bcd_design(&ctx, &sigma, 4, 10, &initial).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
