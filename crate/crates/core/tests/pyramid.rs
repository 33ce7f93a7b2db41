use ndp::metrics::compute_metrics;
use ndp::pyramid::StopReason;
use ndp::synth::{self, Deformation, InstanceOptions, Shape};
use ndp::types::{self, Point3};
use ndp::{register, PointCloud, PyramidConfig, RegistrationResult, WarpFieldType};

fn brute_nn(p: Point3, cloud: &[Point3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &q) in cloud.iter().enumerate() {
        let d = types::norm(types::sub(p, q));
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Symmetric mean nearest-neighbour distance.
fn chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let one = |x: &[Point3], y: &[Point3]| {
        x.iter().map(|&p| brute_nn(p, y).1).sum::<f64>() / x.len() as f64
    };
    one(a, b) + one(b, a)
}

fn flow_of(warped: &[Point3], source: &PointCloud) -> Vec<Point3> {
    warped
        .iter()
        .zip(source.points())
        .map(|(&w, &s)| types::sub(w, s))
        .collect()
}

fn epe(warped: &[Point3], source: &PointCloud, gt: &[Point3]) -> f64 {
    compute_metrics(&flow_of(warped, source), gt).unwrap().epe
}

fn same_run(a: &RegistrationResult, b: &RegistrationResult) -> bool {
    a.warped == b.warped
        && a.total_iterations == b.total_iterations
        && a.pyramid == b.pyramid
        && a.levels.iter().zip(&b.levels).all(|(x, y)| {
            x.cost_history == y.cost_history
                && x.warped == y.warped
                && x.stop_reason == y.stop_reason
        })
}

fn cloud(shape: Shape, n: usize, seed: u64) -> PointCloud {
    synth::scale_to_diagonal(&synth::sample_surface(shape, n, seed), 1.0)
}

fn check_traces(r: &RegistrationResult, cfg: &PyramidConfig) {
    assert_eq!(r.levels.len(), cfg.levels);
    for t in &r.levels {
        assert!(t.iterations <= cfg.max_iter);
        assert_eq!(t.cost_history.len(), t.iterations);
    }
    assert_eq!(
        r.total_iterations,
        r.levels.iter().map(|t| t.iterations).sum::<usize>()
    );
    assert!(r.total_iterations <= cfg.levels * cfg.max_iter);
}

#[test]
fn identical_clouds_stop_at_first_level() {
    for seed in 0..3 {
        let a = cloud(Shape::Torus, 1000, seed);
        let cfg = PyramidConfig::default();
        let r = register(&a, &a, &cfg, None).unwrap();
        check_traces(&r, &cfg);
        assert_eq!(r.levels[0].stop_reason, StopReason::CostThreshold);
        assert!(r.total_iterations < 100, "{}", r.total_iterations);
        assert!(epe(r.warped.points(), &a, &vec![[0.0; 3]; a.len()]) < 1e-3);
    }
}

#[test]
fn translation_is_removed_by_the_first_level() {
    let cfg = PyramidConfig {
        levels: 1,
        ..Default::default()
    };
    for seed in 0..5 {
        let source = cloud(Shape::Torus, 1000, seed);
        let dir = [1.0, 0.5, 0.3];
        let offset = types::scale(dir, 0.1 * source.diagonal() / types::norm(dir));
        let moved = source
            .points()
            .iter()
            .map(|&p| types::add(p, offset))
            .collect();
        let target = PointCloud::new(moved).unwrap();
        let r = register(&source, &target, &cfg, None).unwrap();
        let before = chamfer(source.points(), target.points());
        let after = chamfer(&r.levels[0].warped, target.points());
        assert!(
            after <= 0.05 * before,
            "seed {seed}: chamfer {before} -> {after}"
        );
    }
}

#[test]
fn twist_error_shrinks_level_by_level() {
    let source = cloud(Shape::Plane, 1500, 11);
    let deformation = Deformation::Twist {
        axis: [1.0, 0.0, 0.0],
        rate: 40f64.to_radians() * 2f64.sqrt(),
    };
    let (target, gt) = synth::apply_deformation(&source, &deformation);
    let inst = synth::Instance {
        name: "plane-twist".into(),
        shape: Shape::Plane,
        deformation,
        source,
        target,
        gt,
    };
    let cfg = PyramidConfig::default();
    let r = register(&inst.source, &inst.target, &cfg, None).unwrap();
    check_traces(&r, &cfg);
    let initial = epe(inst.source.points(), &inst.source, &inst.gt);
    let per_level: Vec<f64> = r
        .levels
        .iter()
        .map(|t| epe(&t.warped, &inst.source, &inst.gt))
        .collect();
    let mut prev = initial;
    for (k, &e) in per_level.iter().enumerate() {
        assert!(
            e <= 1.05 * prev,
            "level {} epe {e} after {prev}: {per_level:?}",
            k + 1
        );
        prev = e;
    }
    assert!(
        prev <= 0.2 * initial,
        "final epe {prev} vs initial {initial}: {per_level:?}"
    );
}

#[test]
fn converged_levels_stay_frozen() {
    let inst = synth::make_instance(
        Shape::Plane,
        Deformation::Sine {
            amplitude: 0.05,
            frequency: 6.0,
        },
        &InstanceOptions {
            points: 600,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let short = PyramidConfig {
        levels: 2,
        max_iter: 80,
        ..Default::default()
    };
    let long = PyramidConfig {
        levels: 4,
        ..short.clone()
    };
    let a = register(&inst.source, &inst.target, &short, None).unwrap();
    let b = register(&inst.source, &inst.target, &long, None).unwrap();
    assert_eq!(a.pyramid.levels[..], b.pyramid.levels[..2]);
    for k in 0..2 {
        assert_eq!(a.levels[k].warped, b.levels[k].warped);
    }
    let probes = cloud(Shape::Sphere, 200, 99);
    let qa = a.pyramid.query_levels(probes.points()).unwrap();
    let qb = b.pyramid.query_levels(probes.points()).unwrap();
    assert_eq!(qa[..], qb[..2]);
}

#[test]
fn reruns_are_bit_identical() {
    let inst = synth::make_instance(
        Shape::Torus,
        Deformation::Bend {
            axis: [0.0, 1.0, 0.0],
            curvature: 0.8,
        },
        &InstanceOptions {
            points: 500,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    let cfg = PyramidConfig {
        max_iter: 60,
        seed: 17,
        ..Default::default()
    };
    let a = register(&inst.source, &inst.target, &cfg, None).unwrap();
    let b = register(&inst.source, &inst.target, &cfg, None).unwrap();
    assert!(same_run(&a, &b));
    let c = register(
        &inst.source,
        &inst.target,
        &PyramidConfig { seed: 18, ..cfg },
        None,
    )
    .unwrap();
    assert!(!same_run(&a, &c));
}

fn sim3_config() -> PyramidConfig {
    PyramidConfig {
        warp_type: WarpFieldType::Sim3,
        levels: 9,
        k0: -8,
        ..Default::default()
    }
}

#[test]
fn sim3_recovers_uniform_scale() {
    let opts = InstanceOptions {
        points: 1000,
        ..Default::default()
    };
    let scale = Deformation::Similarity {
        scale: 1.5,
        rotation: [0.0; 3],
        translation: [0.0; 3],
    };
    let inst = synth::make_instance(Shape::Torus, scale, &opts, 21).unwrap();
    let r = register(&inst.source, &inst.target, &sim3_config(), None).unwrap();
    let moved = r.pyramid.query(inst.source.points()).unwrap();
    assert_eq!(moved, r.warped.points());
    let ratio = PointCloud::new(moved).unwrap().diagonal() / inst.source.diagonal();
    assert!((1.47..=1.53).contains(&ratio), "scale {ratio}");
}

#[test]
fn densified_queries_move_with_their_neighbours() {
    let opts = InstanceOptions {
        points: 1000,
        ..Default::default()
    };
    let deformation = Deformation::Bend {
        axis: [0.0, 1.0, 0.0],
        curvature: 1.0,
    };
    let inst = synth::make_instance(Shape::Plane, deformation, &opts, 4).unwrap();
    let r = register(&inst.source, &inst.target, &sim3_config(), None).unwrap();
    let flow = r.flow(&inst.source);
    // Same surface and scale as the source, twice as dense.
    let dense = synth::sample_surface(Shape::Plane, 2000, 404);
    let s = inst.source.diagonal() / synth::sample_surface(Shape::Plane, 1000, 4).diagonal();
    let dense: Vec<Point3> = dense.points().iter().map(|&p| types::scale(p, s)).collect();
    let moved = r.pyramid.query(&dense).unwrap();
    let limit = 0.1 * inst.source.diagonal();
    let worst = dense
        .iter()
        .zip(&moved)
        .map(|(&q, &m)| {
            let (i, _) = brute_nn(q, inst.source.points());
            types::norm(types::sub(types::sub(m, q), flow[i]))
        })
        .fold(0.0, f64::max);
    assert!(worst < limit, "worst {worst} limit {limit}");
}
