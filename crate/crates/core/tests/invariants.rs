use fraclab_core::fracop::FracOperator;
use fraclab_core::grid::{BumpSpec, Grid, Interval, SpaceTimeField, TimeGrid};
use fraclab_core::heat::{solve_linear, solve_nonlinear, HeatProblem};
use fraclab_core::nonlinearity::PolynomialQ;
use fraclab_core::wave::{energy_series, solve_linear_wave, WaveProblem};
use proptest::prelude::*;

fn grid(n: usize) -> Grid {
    Grid::new(
        3.0,
        n,
        Interval::new(-1.0, 1.0),
        Interval::new(1.2, 2.4),
        Interval::new(-2.4, -1.2),
    )
    .unwrap()
}

fn profile(g: &Grid, coeffs: &[f64]) -> Vec<f64> {
    g.omega_field(|x| {
        let envelope = (1.0 - x * x).max(0.0).powi(2);
        envelope
            * coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * (k as f64 * x).cos())
                .sum::<f64>()
    })
}

fn exterior(g: &Grid, tg: &TimeGrid, center: f64, amplitude: f64) -> SpaceTimeField {
    BumpSpec {
        center,
        radius: 0.25,
        t_on: 0.05 * tg.horizon,
        t_off: 0.8 * tg.horizon,
        amplitude,
    }
    .sample(g, tg)
    .unwrap()
}

fn lattice_dot(g: &Grid, u: &[f64], v: &[f64]) -> f64 {
    g.spacing * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_symmetric_and_nonnegative(
        s in 0.1f64..0.95,
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let g = grid(81);
        let op = FracOperator::assemble(&g, s).unwrap();
        let (u, v) = (profile(&g, &a), profile(&g, &b));
        let (au, av) = (op.apply(&u).unwrap(), op.apply(&v).unwrap());
        let (uv, vu) = (lattice_dot(&g, &au, &v), lattice_dot(&g, &u, &av));
        let scale = lattice_dot(&g, &au, &u).abs() + lattice_dot(&g, &av, &v).abs() + 1e-300;
        prop_assert!((uv - vu).abs() <= 1e-10 * scale);
        prop_assert!(op.quadratic_form(&u).unwrap() >= -1e-12 * scale);
    }

    #[test]
    fn fitted_grid_places_the_boundary(theta in 0.0f64..0.95, n in 60usize..200) {
        let g = Grid::fitted(
            2.4,
            n,
            Interval::new(-1.0, 1.0),
            Interval::new(1.2, 2.2),
            Interval::new(-2.2, -1.2),
            theta,
        )
        .unwrap();
        prop_assert!(g.box_halfwidth >= 2.4);
        let off = g.boundary_offset();
        let d = (off - theta).abs();
        prop_assert!(d.min(1.0 - d) < 1e-8, "offset {} vs {}", off, theta);
    }

    #[test]
    fn heat_solution_is_linear_in_the_data(
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        c in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let g = grid(81);
        let tg = TimeGrid::new(0.5, 16).unwrap();
        let op = FracOperator::assemble(&g, 0.6).unwrap();
        let a = SpaceTimeField::from_fn(&g, &tg, |t, x| 0.3 + 0.2 * x * t);
        let solve = |f: SpaceTimeField, phi: Vec<f64>| {
            solve_linear(
                &HeatProblem::new(&op).with_exterior(f).with_initial(phi).with_potential(a.clone()),
                &tg,
            )
            .unwrap()
        };
        let (f1, f2) = (exterior(&g, &tg, 1.6, 1.0), exterior(&g, &tg, 2.0, 1.0));
        let phi = profile(&g, &c);
        let u1 = solve(f1.clone(), phi.clone());
        let u2 = solve(f2.clone(), vec![0.0; g.n_points]);
        let mut f = f1.scaled(alpha);
        f.axpy(beta, &f2);
        let combined = solve(f, phi.iter().map(|v| alpha * v).collect());
        let mut expect = u1.scaled(alpha);
        expect.axpy(beta, &u2);
        prop_assert!(combined.max_abs_diff(&expect) <= 1e-10 * (1.0 + expect.sup_norm()));
    }

    #[test]
    fn heat_preserves_sign_of_nonnegative_data(
        amp in 0.0f64..10.0,
        center in 1.5f64..2.1,
        s in 0.2f64..0.9,
        a0 in -1.0f64..2.0,
    ) {
        let g = grid(81);
        let tg = TimeGrid::new(1.0, 16).unwrap();
        let op = FracOperator::assemble(&g, s).unwrap();
        let a = SpaceTimeField::from_fn(&g, &tg, |_, x| a0 * (1.0 - 0.5 * x * x));
        let u = solve_linear(
            &HeatProblem::new(&op).with_exterior(exterior(&g, &tg, center, amp)).with_potential(a),
            &tg,
        )
        .unwrap();
        prop_assert!(u.values.iter().all(|v| *v >= -1e-12 * (1.0 + amp)));
    }

    #[test]
    fn free_wave_energy_is_conserved(
        c in prop::collection::vec(-1.0f64..1.0, 3),
        d in prop::collection::vec(-1.0f64..1.0, 3),
        s in 0.55f64..0.95,
    ) {
        let g = grid(81);
        let tg = TimeGrid::new(1.0, 128).unwrap();
        let op = FracOperator::assemble(&g, s).unwrap();
        let sol = solve_linear_wave(
            &WaveProblem::new(&op).with_position(profile(&g, &c)).with_velocity(profile(&g, &d)),
            &tg,
        )
        .unwrap();
        let e = energy_series(&sol, &op).unwrap();
        prop_assume!(e[0] > 1e-12);
        let drift = e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / e[0];
        prop_assert!(drift < 1e-9, "drift {}", drift);
    }

    #[test]
    fn zero_nonlinearity_reproduces_the_linear_solver(amp in 0.1f64..20.0, center in 1.5f64..2.1) {
        let g = grid(81);
        let tg = TimeGrid::new(1.0, 16).unwrap();
        let op = FracOperator::assemble(&g, 0.5).unwrap();
        let f = exterior(&g, &tg, center, amp);
        let lin = solve_linear(&HeatProblem::new(&op).with_exterior(f.clone()), &tg).unwrap();
        let non = solve_nonlinear(&op, &PolynomialQ::zero(3, 100.0), &f, &tg).unwrap();
        prop_assert!(non.u.max_abs_diff(&lin) <= 1e-12 * (1.0 + lin.sup_norm()));
    }
}
