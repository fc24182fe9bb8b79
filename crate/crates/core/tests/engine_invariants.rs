use proptest::prelude::*;
use sandpile_core::engine::{stabilize, SandpileState, Schedule, StabilizeOptions};
use sandpile_core::lattice::Site;
use sandpile_core::{Field, State};

fn schedule_of(tag: u8, seed: u64) -> Schedule {
    match tag % 3 {
        0 => Schedule::sweep(),
        1 => Schedule::random(seed),
        _ => Schedule::priority(),
    }
}

/// Stability, conservation, the Laplacian identity and the region rules of a
/// final state.
fn assert_final(s: &State, eps: f64) {
    let (n, m) = (s.n(), s.m());
    assert!(s.max_excess() <= eps);
    assert!(s.mass_error() <= 1e-9 * n, "mass error {}", s.mass_error());
    assert!(s.laplace_identity_error() <= 1e-9 * m, "identity error {}", s.laplace_identity_error());
    for (x, u, mu) in s.visited_sites() {
        assert!(u >= 0.0 && mu >= -eps, "{x}: u={u} mu={mu}");
        assert!(mu <= m + eps, "{x}: mu={mu}");
        if u > s.kappa() {
            assert!(mu <= eps, "{x}: mass {mu} on the core");
        }
    }
    let (count, bound) = s.boundary_count_bound();
    assert!(count as f64 <= bound);
}

fn sup_rel_diff(a: &State, b: &State) -> f64 {
    let scale = a.u().max_value().max(1e-300);
    a.visited_sites()
        .iter()
        .chain(b.visited_sites().iter())
        .map(|(x, _, _)| (a.odometer(x) - b.odometer(x)).abs())
        .fold(0.0, f64::max)
        / scale
}

prop_compose! {
    fn sources(d: usize)(
        raw in prop::collection::vec((prop::collection::vec(-6i64..=6, d), 1.0f64..400.0), 1..4)
    ) -> Vec<(Site, f64)> {
        raw.into_iter().map(|(c, w)| (Site::new(c), w)).collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_configurations_stabilize_correctly(
        d in 2usize..=3,
        srcs in sources(2),
        extra in -6i64..=6,
        m in 0.5f64..20.0,
        tag in 0u8..3,
        seed in any::<u64>(),
        accelerated in any::<bool>(),
    ) {
        let srcs: Vec<(Site, f64)> = srcs
            .into_iter()
            .map(|(x, w)| {
                let mut c = x.coords().to_vec();
                c.resize(d, extra);
                (Site::new(c), w)
            })
            .collect();
        let mut s = SandpileState::new(d, &srcs, m).unwrap();
        let opts = if accelerated { StabilizeOptions::default() } else { StabilizeOptions::pure() };
        stabilize(&mut s, schedule_of(tag, seed), &opts).unwrap();
        assert_final(&s, opts.resolved_eps(s.n()));
    }

    #[test]
    fn schedules_reach_the_same_state(srcs in sources(2), m in 1.0f64..10.0, seed in any::<u64>()) {
        let run = |schedule, opts: StabilizeOptions<f64>| {
            let mut s = SandpileState::new(2, &srcs, m).unwrap();
            stabilize(&mut s, schedule, &opts).unwrap();
            s
        };
        let a = run(Schedule::sweep(), StabilizeOptions::pure());
        let b = run(Schedule::random(seed), StabilizeOptions::pure());
        let c = run(Schedule::priority(), StabilizeOptions::default());
        prop_assert!(sup_rel_diff(&a, &b) <= 1e-7);
        prop_assert!(sup_rel_diff(&a, &c) <= 1e-7);
    }
}

#[test]
fn pure_toppling_keeps_the_identity() {
    let mut s = SandpileState::new(2, &[(Site::origin(2), 5000.0)], 5.0).unwrap();
    let opts = StabilizeOptions::pure();
    let out = stabilize(&mut s, Schedule::sweep(), &opts).unwrap();
    assert_eq!(out.block_solves, 0);
    assert_final(&s, opts.resolved_eps(s.n()));
}

#[test]
fn single_precision_tracks_double_precision() {
    let mut a = SandpileState::<f32>::new(2, &[(Site::origin(2), 800.0)], 4.0).unwrap();
    let mut b: State = SandpileState::new(2, &[(Site::origin(2), 800.0)], 4.0).unwrap();
    stabilize(&mut a, Schedule::sweep(), &StabilizeOptions::default()).unwrap();
    stabilize(&mut b, Schedule::sweep(), &StabilizeOptions::default()).unwrap();
    let scale = b.u().max_value();
    for (x, u, _) in b.visited_sites() {
        assert!((a.odometer(&x) as f64 - u).abs() <= 1e-4 * scale, "{x}");
    }
    assert!((a.mass_error() as f64) <= 1e-4 * 800.0);
}

#[test]
fn three_dimensional_run_is_symmetric_and_conservative() {
    let mut s: State = SandpileState::new(3, &[(Site::origin(3), 3000.0)], 3.0).unwrap();
    let opts = StabilizeOptions::default();
    stabilize(&mut s, Schedule::sweep(), &opts).unwrap();
    assert_final(&s, opts.resolved_eps(s.n()));
    assert!(sandpile_core::verify::check_symmetry(&s).unwrap() <= 1e-9 * s.u().max_value());
    assert_eq!(sandpile_core::verify::check_monotonicity(&s).unwrap(), 0);
    assert!(sandpile_core::verify::check_boundary_graph(&s).unwrap());
}

#[test]
fn odometer_field_alias() {
    let f: Field = Field::new(2, 3).unwrap();
    assert_eq!(f.len(), 49);
}
