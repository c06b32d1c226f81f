use std::sync::Arc;

use jumpres_core::dynamics::*;
use jumpres_core::jump_process::*;
use jumpres_core::lq_exact::*;
use jumpres_core::lsmc::*;
use proptest::prelude::*;

fn nominal_model() -> InflowModel {
    InflowModel::new(0.5, 0.295, TemperedStableParams::new(0.923, 0.0493, 0.007).unwrap()).unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn volume_projection_is_idempotent(v in -1e5f64..1e5) {
        let spec = ReservoirSpec::default();
        let once = project_volume(v, &spec);
        prop_assert_eq!(project_volume(once, &spec), once);
        prop_assert!((0.0..=spec.v_max).contains(&once));
        if (0.0..=spec.v_max).contains(&v) {
            prop_assert_eq!(once, v);
        }
    }

    #[test]
    fn control_projection_is_idempotent(q in -10.0f64..200.0, a in -500.0f64..500.0) {
        let spec = ReservoirSpec::default();
        let range = admissible_range(q, &spec);
        let once = range.project(a);
        prop_assert!(range.contains(once));
        prop_assert_eq!(range.project(once), once);
        if range.contains(a) {
            prop_assert_eq!(once, a);
        }
    }

    #[test]
    fn constrained_step_stays_admissible(
        q_in in 0.0f64..500.0,
        q in 0.0f64..120.0,
        v in 0.0f64..16666.0,
        p_q in -1e7f64..1e7,
        z in 0.0f64..300.0,
        h in 0.01f64..3.0,
    ) {
        let spec = ReservoirSpec::default();
        let state = StateTriple::new(q_in, q, v);
        let a = clip_control(p_q, 2000.0, admissible_range(q, &spec));
        let (next, _) = step_forward(&state, a, z, h, &nominal_model(), &spec);
        prop_assert!((0.0..=spec.q_max).contains(&next.outflow));
        prop_assert!((0.0..=spec.v_max).contains(&next.volume));
        prop_assert!(next.inflow >= 0.0);
    }

    #[test]
    fn env_penalty_matches_finite_difference(q in -20.0f64..20.0, w4 in 0.0f64..5.0, q_env in 0.0f64..10.0) {
        prop_assume!((q - q_env).abs() > 1e-3);
        let eps = 1e-6;
        let (j, dj) = env_penalty(q, w4, q_env);
        let fd = (env_penalty(q + eps, w4, q_env).0 - env_penalty(q - eps, w4, q_env).0) / (2.0 * eps);
        prop_assert!(j >= 0.0);
        prop_assert!((fd - dj).abs() <= 1e-5 * (1.0 + dj.abs()), "fd {} analytic {}", fd, dj);
    }

    #[test]
    fn bundle_partition_properties(
        psi in prop::collection::vec(prop_oneof![0.0f64..10.0, Just(3.0)], 1..40usize),
        bundles in 1usize..6,
    ) {
        let len = psi.len() - psi.len() % bundles;
        prop_assume!(len > 0);
        let psi = &psi[..len];
        let part = build_bundles(psi, bundles).unwrap();
        prop_assert_eq!(part.bundle_count(), bundles);
        prop_assert!(part.boundaries.windows(2).all(|w| w[0] <= w[1]));
        let mut seen = vec![false; len];
        for b in 0..bundles {
            prop_assert_eq!(part.members(b).len(), len / bundles);
            for &p in part.members(b) {
                prop_assert!(!seen[p as usize]);
                seen[p as usize] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        // Without ties across a cut, each path locates to its own bundle.
        for b in 0..bundles {
            for &p in part.members(b) {
                let x = psi[p as usize];
                let tied = part.boundaries.iter().any(|&c| c == x);
                if !tied {
                    prop_assert_eq!(locate_bundle(&part.boundaries, x), b);
                }
            }
        }
        // Every real number lands in some cell.
        for x in [-1e300, -1.0, 0.0, 5.0, 1e300] {
            prop_assert!(locate_bundle(&part.boundaries, x) < bundles);
        }
    }

    #[test]
    fn regression_is_exact_on_linear_targets(
        beta in prop::array::uniform7(-10.0f64..10.0),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let basis = BasisSet::new(BasisId::Nlq2, 5.0);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let s = StateTriple::new(rng.random_range(0.0..20.0), rng.random_range(0.0..10.0), rng.random_range(0.0..100.0));
                eval_basis(&basis, &s)
            })
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r.iter().zip(&beta).map(|(x, b)| x * b).sum()).collect();
        let fit = ridge_regress(&rows, &y, 0.0).unwrap();
        for (r, &target) in rows.iter().zip(&y) {
            let pred: f64 = r.iter().zip(&fit).map(|(x, b)| x * b).sum();
            prop_assert!((pred - target).abs() <= 1e-8 * (1.0 + target.abs()), "pred {} target {}", pred, target);
        }
    }

    #[test]
    fn sampler_draws_are_nonnegative(alpha in 0.05f64..0.99, b in 0.01f64..5.0, c in 0.0f64..5.0, seed in any::<u64>()) {
        let sampler = TemperedStableSampler::new(alpha, b).unwrap();
        let mut rng = path_rng(seed, 0);
        for _ in 0..20 {
            let x = sampler.sample(c, &mut rng).unwrap();
            prop_assert!(x.is_finite() && x >= 0.0);
        }
    }

    #[test]
    fn stationary_mean_balances_drift(alpha in 0.1f64..0.95, a in 1e-3f64..0.05, b in 0.05f64..1.0, q_min in 0.1f64..2.0) {
        let model = InflowModel::new(q_min, 0.3, TemperedStableParams::new(alpha, a, b).unwrap()).unwrap();
        prop_assume!(model.one_minus_m1() > 0.05);
        let raw = stationary_raw_moments(&model, 4).unwrap();
        prop_assert!((raw[0] * model.one_minus_m1() - q_min).abs() <= 1e-10 * q_min);
        let m = moments_from_raw(&raw).unwrap();
        prop_assert!(m.sta > 0.0 && m.ske > 0.0);
    }

    #[test]
    fn relaxation_keeps_a_fixed_point(coef in prop::array::uniform4(-5.0f64..5.0), r in 0.01f64..0.99) {
        let basis = BasisSet::new(BasisId::Lq, 5.0);
        let spec = ReservoirSpec::unconstrained(NOMINAL_V_MAX);
        let w3 = 2000.0;
        let mut surface = RegressionSurface::zero(basis, 1e-8, 1.0, 3);
        for step in surface.steps.iter_mut().take(3) {
            step.coef_q = coef.iter().map(|c| c * w3).collect();
        }
        let mut policy = RelaxedPolicy::zero(basis, spec, 3);
        for (i, c) in policy.coef.iter_mut().enumerate() {
            *c = surface.steps[i].coef_q.iter().map(|x| x / w3).collect();
        }
        let before = policy.clone();
        policy.relax(&surface, r, w3);
        for (a, b) in policy.coef.iter().flatten().zip(before.coef.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn riccati_coefficients_vanish_at_horizon() {
    let obj = ObjectiveSpec::nominal(NOMINAL_V_MAX, 48.0);
    let table = solve_riccati(&nominal_model(), &obj, NOMINAL_V_MAX, 0.01, &Default::default()).unwrap();
    let last = table.coefficients.last().unwrap();
    assert!(last.to_array().iter().all(|&c| c == 0.0));
}

#[test]
fn reduced_and_full_riccati_agree() {
    let obj = ObjectiveSpec::nominal(NOMINAL_V_MAX, 240.0);
    let opts = RiccatiOptions::default();
    let reduced = solve_riccati(&nominal_model(), &obj, NOMINAL_V_MAX, 0.01, &opts).unwrap();
    let full = solve_riccati_full(&nominal_model(), &obj, NOMINAL_V_MAX, 0.01, &opts).unwrap();
    for (r, f) in reduced.coefficients.iter().zip(&full.coefficients) {
        assert!((f.E - f.B).abs() <= 1e-8 * (1.0 + f.E.abs()));
        assert!((f.J - f.C).abs() <= 1e-8 * (1.0 + f.J.abs()));
        assert!((f.K - f.G).abs() <= 1e-8 * (1.0 + f.G.abs()));
        for (a, b) in r.to_array().iter().zip(f.to_array()) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn backward_pass_is_exact_one_step_before_horizon() {
    let model = nominal_model();
    let spec = ReservoirSpec::unconstrained(NOMINAL_V_MAX);
    let obj = ObjectiveSpec::nominal(NOMINAL_V_MAX, 10.0);
    let h = 1.0;
    let init = InitialControl { outflow: 0.5, volume: 0.5 * NOMINAL_V_MAX };
    // A policy nonlinear in Q keeps q and V from being collinear.
    let ens = simulate_ensemble(
        &|_: usize, _: f64, s: &StateTriple| 0.01 * s.inflow.sqrt(),
        &model,
        &spec,
        init,
        h,
        10,
        400,
        3,
    )
    .unwrap();
    let basis = BasisSet::new(BasisId::Lq, obj.q_env);
    let partitions = inflow_partitions(&ens.inflow, 4).unwrap();
    let surface = backward_pass(&ens, &obj, NOMINAL_V_MAX, &basis, 0.0, &partitions).unwrap();
    let disc = 1.0 / (1.0 + obj.delta * h);
    let target = obj.target_at(9.0, NOMINAL_V_MAX);
    // y_V = -disc w2 (V - Vhat) h, y_q = -disc w1 (q - Q) h + disc^2 h (-w2 (V - Vhat) h)
    let cv = [disc * obj.w2 * target * h, 0.0, 0.0, -disc * obj.w2 * h];
    let cq =
        [-disc * disc * h * h * obj.w2 * target, disc * obj.w1 * h, -disc * obj.w1 * h, disc * disc * h * h * obj.w2];
    let dot = |c: &[f64; 4], s: &StateTriple| c[0] + c[1] * s.inflow + c[2] * s.outflow + c[3] * s.volume;
    for p in 0..ens.paths {
        let s = ens.state(p, 9);
        let (pq, pv) = surface.predict(9, &s);
        let (eq, ev) = (dot(&cq, &s), dot(&cv, &s));
        assert!((pq - eq).abs() <= 1e-8 * (1.0 + eq.abs()), "p_q {pq} vs {eq}");
        assert!((pv - ev).abs() <= 1e-8 * (1.0 + ev.abs()), "p_V {pv} vs {ev}");
    }
}

#[test]
fn zero_drivers_give_zero_surfaces() {
    let model = nominal_model();
    let spec = ReservoirSpec::default();
    let mut obj = ObjectiveSpec::nominal(NOMINAL_V_MAX, 20.0);
    obj.w1 = 0.0;
    obj.w2 = 0.0;
    let init = InitialControl { outflow: 0.5, volume: 0.5 * NOMINAL_V_MAX };
    let ens = simulate_ensemble(&ZeroPolicy, &model, &spec, init, 0.5, 40, 64, 9).unwrap();
    let basis = BasisSet::new(BasisId::Nlq2, obj.q_env);
    let partitions = inflow_partitions(&ens.inflow, 4).unwrap();
    let surface = backward_pass(&ens, &obj, NOMINAL_V_MAX, &basis, 1e-7, &partitions).unwrap();
    assert!(surface.steps.iter().all(|s| s.coef_q.iter().chain(&s.coef_v).all(|&c| c == 0.0)));
}

#[test]
fn inflow_paths_do_not_depend_on_worker_count() {
    let model = nominal_model();
    let one = in_pool(1, || simulate_inflow_paths(&model, 0.5, 200, 700, 11).unwrap());
    let many = in_pool(4, || simulate_inflow_paths(&model, 0.5, 200, 700, 11).unwrap());
    assert_eq!(one.raw(), many.raw());
    assert!(one.raw().iter().all(|&q| q >= 0.0));
}

#[test]
fn picard_log_does_not_depend_on_worker_count() {
    let model = nominal_model();
    let spec = ReservoirSpec::default();
    let obj = ObjectiveSpec::nominal_nonlinear(NOMINAL_V_MAX, 48.0, TargetProfile::sine());
    let init = InitialControl { outflow: 0.5, volume: 0.5 * NOMINAL_V_MAX };
    let numerics = LsmcNumerics {
        h: 1.0,
        steps: 48,
        paths: 400,
        basis: BasisId::Nlq2,
        picard: PicardConfig { bundle_count: 4, lambda: 1e-7, ..Default::default() },
    };
    let run = |threads| {
        in_pool(threads, || {
            let out = picard_solve(&model, &spec, &obj, init, &numerics, 5).unwrap();
            let log: Vec<(usize, u64, u64)> =
                out.log.iter().map(|r| (r.iteration, r.residual.to_bits(), r.p_q0.to_bits())).collect();
            (log, out.surface.steps.iter().flat_map(|s| s.coef_q.clone()).map(f64::to_bits).collect::<Vec<_>>())
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn controlled_paths_respect_bounds() {
    let model = nominal_model();
    let spec = ReservoirSpec::default();
    let init = InitialControl { outflow: 0.5, volume: 0.5 * NOMINAL_V_MAX };
    let inflow = Arc::new(simulate_inflow_paths(&model, 0.5, 400, 300, 21).unwrap());
    let wild = |i: usize, _: f64, s: &StateTriple| if i % 7 < 3 { 1e4 } else { -1e4 * s.inflow };
    let ens = simulate_controlled(&wild, inflow, &spec, init.outflow, init.volume);
    for i in 0..=ens.steps {
        assert!(ens.outflow_at(i).iter().all(|&q| (0.0..=spec.q_max).contains(&q)));
        assert!(ens.volume_at(i).iter().all(|&v| (0.0..=spec.v_max).contains(&v)));
    }
}
