//! Self-supervised training of the warm-start network: feasible data needs
//! no correction, squashing keeps γ in range, and learned warm starts beat
//! cold starts on held-out scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqdrive_core::filter::{
    run_filter, train_filter, BarrierParams, FilterConfig, FilterSample, FilterTrainConfig,
    ObstacleForecast, SceneConstraints, WarmStart, WarmStartNet,
};
use vqdrive_core::obs::{Observation, OBS_DIM};
use vqdrive_core::trajgen::{build_basis, BoundaryConditions, QpGains, SetpointSolver, Setpoints};

fn solver() -> SetpointSolver {
    let basis = build_basis(12, 5, 0.25).unwrap();
    let bc = BoundaryConditions::at_rest((0.0, 0.0));
    SetpointSolver::new(&basis, QpGains::default(), &bc.terminal).unwrap()
}

fn obs_for(scene: &SceneConstraints, ego_y: f64, ego_v: f64) -> Observation {
    let mut vals = [0.0; OBS_DIM];
    vals[0] = 2.0;
    vals[1] = 2.0;
    vals[2] = ego_v;
    vals[4] = 0.0;
    for (slot, ob) in scene.obstacles.iter().take(10).enumerate() {
        let base = 5 + slot * 5;
        vals[base] = ob.xs[0];
        vals[base + 1] = ob.ys[0] - ego_y;
        vals[base + 2] = (ob.xs[1] - ob.xs[0]) / 0.25;
        vals[base + 3] = (ob.ys[1] - ob.ys[0]) / 0.25;
    }
    for slot in scene.obstacles.len()..10 {
        vals[5 + slot * 5] = 100.0;
    }
    Observation::new(vals)
}

fn make_scene(rng: &mut ChaCha8Rng, with_obstacle: bool) -> SceneConstraints {
    let obstacles = if with_obstacle {
        vec![ObstacleForecast::constant_velocity(
            rng.gen_range(8.0..20.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(0.0..3.0),
            0.0,
            12,
            0.25,
        )]
    } else {
        Vec::new()
    };
    SceneConstraints {
        obstacles,
        ellipse_ax: 4.5,
        ellipse_by: 1.75,
        y_lb: -7.0,
        y_ub: 7.0,
        v_min: 0.0,
        v_max: 30.0,
        a_max: 8.0,
    }
}

fn make_dataset(count: usize, with_obstacles: bool, seed: u64, sv: &SetpointSolver) -> Vec<FilterSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ego_y = rng.gen_range(-2.0..2.0);
        let ego_v = rng.gen_range(3.0..10.0);
        let bc = BoundaryConditions::new((0.0, ego_y), (ego_v, 0.0), (0.0, 0.0));
        let sp = Setpoints { v_d: rng.gen_range(2.0..12.0), y_d: rng.gen_range(-3.0..3.0) };
        let sol = sv.solve(&sp, &bc).unwrap();
        let scene = make_scene(&mut rng, with_obstacles);
        let obs = obs_for(&scene, ego_y, ego_v);
        out.push(FilterSample { xi_star: sol.trajectory.xi, obs, scene, bc });
    }
    out
}

#[test]
fn feasible_data_needs_no_correction() {
    let sv = solver();
    let dataset = make_dataset(12, false, 101, &sv);
    let mut net = WarmStartNet::init(sv.coeff_dim(), 16, 7);
    let fcfg = FilterConfig { obstacle_slots: 1, ..Default::default() };
    let tcfg = FilterTrainConfig { epochs: 4, unroll: 8, lr: 1e-4, ..Default::default() };
    let log = train_filter(&mut net, &dataset, &sv, &fcfg, &tcfg).unwrap();
    let last = log.epochs.last().unwrap();
    assert!(last.violation <= 1e-6, "violation {}", last.violation);
    assert!(last.projection <= 1e-4, "projection {}", last.projection);
    // γ stays in (0, 1] by construction.
    for s in &dataset {
        let warm = net.predict(&s.obs, &s.xi_star);
        assert!(warm.gamma.gamma_obs > 0.0 && warm.gamma.gamma_obs <= 1.0);
        assert!(warm.gamma.gamma_lane > 0.0 && warm.gamma.gamma_lane <= 1.0);
    }
}

#[test]
fn learned_warm_starts_beat_cold_starts() {
    let sv = solver();
    let train_set = make_dataset(40, true, 202, &sv);
    let held_out = make_dataset(15, true, 404, &sv);
    let mut net = WarmStartNet::init(sv.coeff_dim(), 32, 9);
    let fcfg = FilterConfig { obstacle_slots: 1, ..Default::default() };
    let tcfg = FilterTrainConfig { epochs: 12, unroll: 20, lr: 3e-4, ..Default::default() };
    train_filter(&mut net, &train_set, &sv, &fcfg, &tcfg).unwrap();

    let eval_cfg = FilterConfig { iters: 20, obstacle_slots: 1, ..Default::default() };
    let mut warm_sum = 0.0;
    let mut cold_sum = 0.0;
    for s in &held_out {
        let warm = net.predict(&s.obs, &s.xi_star);
        let run_warm =
            run_filter(&sv, &s.bc, &s.scene, &s.xi_star, &warm, &eval_cfg).unwrap();
        let cold = WarmStart::cold(&s.xi_star, BarrierParams::default());
        let run_cold =
            run_filter(&sv, &s.bc, &s.scene, &s.xi_star, &cold, &eval_cfg).unwrap();
        warm_sum += run_warm.final_residual.max(0.0);
        cold_sum += run_cold.final_residual.max(0.0);
    }
    assert!(
        warm_sum <= cold_sum + 1e-9,
        "learned warm starts did not help: {warm_sum} vs cold {cold_sum}"
    );
}
