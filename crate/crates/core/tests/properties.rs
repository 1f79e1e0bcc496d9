use brcdf::analysis::{self, assemble_injection};
use brcdf::attack::{self, attack_objective, AttackObjectiveContext};
use brcdf::experiment::{self, ExperimentConfig, Setup, PRESETS};
use brcdf::filter::{self, GainVariant, NoiseMode, Scenario};
use brcdf::linalg::{self, Matrix};
use brcdf::model::{self, ObservationModel};
use brcdf::rng::{self, StreamTag};
use brcdf::SelectionSchedule;
use proptest::prelude::*;

fn random_observer(seed: u64, m: usize, d: usize) -> ObservationModel {
    let mut r = rng::stream(seed, None, StreamTag::Custom(1));
    let h = rng::standard_normal_matrix(&mut r, d, m);
    let w = rng::standard_normal_matrix(&mut r, d, d);
    ObservationModel::new(h, &w * w.transpose() + Matrix::identity(d, d) * 0.05).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_graphs_are_connected_with_zero_row_sums(seed in 0u64..10_000, agents in 2usize..30, p in 0.15f64..1.0) {
        let g = model::build_network(seed, agents, p).unwrap();
        prop_assert!(g.is_connected());
        let lap = model::laplacian(&g);
        for i in 0..agents {
            prop_assert!(lap.row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn riccati_iterates_stay_symmetric_psd(seed in 0u64..10_000, m in 2usize..6, d in 1usize..4) {
        let mut r = rng::stream(seed, None, StreamTag::Custom(2));
        let a = rng::standard_normal_matrix(&mut r, m, m) * (0.9 / m as f64).sqrt();
        let q = Matrix::identity(m, m) * 0.1;
        let obs = random_observer(seed, m, d);
        let w = rng::standard_normal_matrix(&mut r, m, m);
        let mut p = &w * w.transpose() + Matrix::identity(m, m) * 0.01;
        for _ in 0..40 {
            let k = filter::kalman_gain(&p, &obs, &a).unwrap();
            // F̂ = A − KH agrees with A M̄⁻¹ P⁻¹
            let f_hat = filter::decoupled_transition(&a, &k, &obs);
            let m_bar = filter::information_matrix(&p, &obs).unwrap();
            let p_inv = linalg::spd_inverse(&p, "P").unwrap();
            let info_form = &a * linalg::spd_inverse(&m_bar, "M̄").unwrap() * p_inv;
            let scale = 1.0 + f_hat.amax();
            prop_assert!((&f_hat - info_form).amax() / scale < 1e-9);
            p = filter::riccati_step(&p, &a, &q, &obs, &k);
            prop_assert!(linalg::asymmetry(&p) < 1e-12);
            prop_assert!(linalg::sym_eigen_extremes(&p).0 > -1e-9);
        }
    }

    #[test]
    fn objective_equals_injection_trace(seed in 0u64..10_000, l in 1usize..5) {
        let m = 4;
        let agents = 5;
        let mut r = rng::stream(seed, None, StreamTag::Custom(3));
        let graph = model::build_network(seed, agents, 0.5).unwrap();
        let consensus: Vec<Matrix> = (0..agents).map(|_| rng::standard_normal_matrix(&mut r, m, m)).collect();
        let byz = attack::byzantine_set(&graph, 3).unwrap();
        let sigma = attack::random_covariance(agents, &byz, 3.0, m, &mut r).unwrap();
        let schedules: Vec<SelectionSchedule> = (0..agents).map(|_| SelectionSchedule::random(m, l, 1, &mut r).unwrap()).collect();
        let ctx = AttackObjectiveContext::new(&consensus, &graph, &byz);
        let patterns: Vec<Vec<bool>> = byz.iter().map(|&i| schedules[i].bits()).collect();
        let gam = assemble_injection(&consensus, &graph, &schedules, Some(&byz));
        let direct = (&gam * &sigma * gam.transpose()).trace();
        let via_u = attack_objective(&ctx, &patterns, &sigma);
        prop_assert!((direct - via_u).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn adding_psd_attack_never_lowers_nmse(seed in 0u64..10_000) {
        let m = 3;
        let agents = 4;
        let mut r = rng::stream(seed, None, StreamTag::Custom(4));
        let graph = model::build_network(seed, agents, 0.6).unwrap();
        let consensus: Vec<Matrix> = (0..agents).map(|_| rng::standard_normal_matrix(&mut r, m, m)).collect();
        let schedules: Vec<SelectionSchedule> = (0..agents).map(|_| SelectionSchedule::random(m, 2, 1, &mut r).unwrap()).collect();
        let byz = attack::byzantine_set(&graph, 2).unwrap();
        let base = attack::random_covariance(agents, &byz, 2.0, m, &mut r).unwrap();
        let extra = attack::random_covariance(agents, &byz, 1.0, m, &mut r).unwrap();
        let n = agents * m;
        let w = rng::standard_normal_matrix(&mut r, n, n);
        let state = analysis::NetworkErrorState {
            covariance: &w * w.transpose(),
            atilde: rng::standard_normal_matrix(&mut r, n, n) * 0.3,
            qtilde: Matrix::identity(n, n) * 0.1,
            injection: assemble_injection(&consensus, &graph, &schedules, Some(&byz)),
        };
        let before = analysis::nmse(&analysis::network_error_step(&state, &base).unwrap());
        let after = analysis::nmse(&analysis::network_error_step(&state, &(&base + &extra)).unwrap());
        prop_assert!(after >= before - 1e-12 * before.abs());
    }
}

#[test]
fn noise_free_consensus_for_several_step_sizes() {
    let cfg = ExperimentConfig::preset("fig2").unwrap();
    let setup = Setup::build(&cfg).unwrap();
    for l in [2, 4, 6, 8] {
        for fraction in [0.25, 0.5, 0.9] {
            let gamma = fraction * setup.gamma_star(l);
            let schedules = setup.schedules(&cfg, l).unwrap();
            let scenario = Scenario::new(setup.model.clone(), setup.graph.clone(), schedules, gamma, GainVariant::Suboptimal).unwrap();
            let trace = filter::run_online(&scenario, 500, cfg.seed, 0, NoiseMode::NoiseFree).unwrap();
            let norm: Vec<f64> = trace.mse.iter().map(|v| (v * scenario.agent_count() as f64).sqrt()).collect();
            let hit = norm.iter().position(|&e| e < 1e-6).expect("error falls below 1e-6");
            // monotone decrease once the transient has passed
            let last_rise = norm[..=hit].windows(2).rposition(|w| w[1] > w[0]).map_or(0, |i| i + 1);
            assert!(last_rise <= 10, "l={l}, γ={fraction}γ*: error rose at k={last_rise}");
        }
    }
}

#[test]
fn both_variants_are_deterministic() {
    let cfg = ExperimentConfig::preset("fig3").unwrap();
    let setup = Setup::build(&cfg).unwrap();
    for variant in [GainVariant::Suboptimal, GainVariant::Full] {
        let schedules = setup.schedules(&cfg, 4).unwrap();
        let scenario = Scenario::new(setup.model.clone(), setup.graph.clone(), schedules, setup.gamma(&cfg, 4), variant).unwrap();
        let g1 = filter::compute_gains(&scenario, 60).unwrap();
        let g2 = filter::compute_gains(&scenario, 60).unwrap();
        let a = filter::simulate_run(&scenario, &g1, 60, 9, 3, NoiseMode::Stochastic).unwrap();
        let b = filter::simulate_run(&scenario, &g2, 60, 9, 3, NoiseMode::Stochastic).unwrap();
        assert_eq!(a.mse.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.mse.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn preset_metrics_are_finite_and_nonnegative() {
    for name in PRESETS {
        let mut cfg = ExperimentConfig::preset(name).unwrap();
        cfg.runs = 2;
        let out = experiment::run_scenario(&cfg).unwrap();
        for cell in &out.cells {
            assert!(cell.gamma <= cell.gamma_star, "{name}: γ above the bound");
            let all = cell
                .mse_empirical
                .iter()
                .chain(&cell.mse_prime)
                .chain(&cell.mse_analytic)
                .chain([&cell.steady_analytic, &cell.steady_empirical, &cell.steady_prime]);
            for v in all {
                assert!(v.is_finite() && *v >= 0.0, "{name} {}: {v}", cell.key.label());
            }
        }
    }
}
