//! Fractional diffusion `(∂_t + (-Δ)^s + a) u = F` in `Ω_T`, `u = f` outside Ω,
//! `u(0) = φ`: implicit Euler for `v = u - f`, a modal Galerkin variant, the
//! stationary barrier behind the `L∞` bound, and the semilinear solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{
    gather, reduced_source, scatter, validate_data, Equation, Factor, NonlinearSolution,
    PicardOptions, Propagator,
};
use crate::fracop::{dirichlet_eigenpairs, EigenBasis, FracOperator};
use crate::grid::{IndexRange, Interval, SpaceTimeField, TimeGrid};
use crate::nonlinearity::Nonlinearity;

/// Implicit Euler on Ω: `(I/dt + A_ΩΩ + diag a^{k+1}) v^{k+1} = v^k/dt + F̃^{k+1}`.
#[derive(Debug, Clone)]
pub(crate) struct HeatStepper {
    omega: IndexRange,
    block: DMatrix<f64>,
    dt: f64,
    base: Factor,
}

impl HeatStepper {
    pub(crate) fn new(op: &FracOperator, tg: &TimeGrid) -> Result<Self> {
        let omega = op.grid.omega;
        let block = op.restricted(omega);
        let m = &block + DMatrix::identity(omega.len(), omega.len()) / tg.dt;
        Ok(Self {
            omega,
            block,
            dt: tg.dt,
            base: Factor::new(m)?,
        })
    }

    fn factor_with(&self, a: &DVector<f64>) -> Result<Factor> {
        let mut m = self.block.clone();
        for (j, aj) in a.iter().enumerate() {
            m[(j, j)] += 1.0 / self.dt + aj;
        }
        Factor::new(m)
    }

    /// States at every time level, starting from `v0`; `src[k]` is `F̃` at level `k`.
    pub(crate) fn march(
        &self,
        v0: DVector<f64>,
        src: &[DVector<f64>],
        potential: Option<&SpaceTimeField>,
    ) -> Result<Vec<DVector<f64>>> {
        let mut states = Vec::with_capacity(src.len());
        states.push(v0);
        let mut cached: Option<(DVector<f64>, Factor)> = None;
        for k in 0..src.len() - 1 {
            let rhs = &states[k] / self.dt + &src[k + 1];
            let a = potential.map(|a| gather(a.row(k + 1), self.omega));
            let next = match a {
                Some(a) if a.iter().any(|v| *v != 0.0) => {
                    let reuse = matches!(&cached, Some((prev, _)) if *prev == a);
                    if !reuse {
                        let f = self.factor_with(&a)?;
                        cached = Some((a, f));
                    }
                    cached.as_ref().map(|(_, f)| f.solve(&rhs)).unwrap()
                }
                _ => self.base.solve(&rhs),
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularSystem(format!(
                    "non-finite state at step {}",
                    k + 1
                )));
            }
            states.push(next);
        }
        Ok(states)
    }
}

/// Data of a linear diffusion problem; `None` means identically zero.
#[derive(Debug, Clone)]
pub struct HeatProblem<'a> {
    pub op: &'a FracOperator,
    /// `a(t,x)` on Ω (values off Ω ignored).
    pub potential: Option<SpaceTimeField>,
    /// `F(t,x)` on Ω (values off Ω ignored).
    pub source: Option<SpaceTimeField>,
    /// `f(t,x)`, supported in `W`.
    pub exterior: Option<SpaceTimeField>,
    /// `φ(x)`, supported in Ω.
    pub initial: Option<Vec<f64>>,
}

impl<'a> HeatProblem<'a> {
    pub fn new(op: &'a FracOperator) -> Self {
        Self {
            op,
            potential: None,
            source: None,
            exterior: None,
            initial: None,
        }
    }

    pub fn with_potential(mut self, a: SpaceTimeField) -> Self {
        self.potential = Some(a);
        self
    }

    pub fn with_source(mut self, f: SpaceTimeField) -> Self {
        self.source = Some(f);
        self
    }

    pub fn with_exterior(mut self, f: SpaceTimeField) -> Self {
        self.exterior = Some(f);
        self
    }

    pub fn with_initial(mut self, phi: Vec<f64>) -> Self {
        self.initial = Some(phi);
        self
    }

    fn validate(&self, tg: &TimeGrid) -> Result<()> {
        validate_data(
            self.op,
            tg,
            self.exterior.as_ref(),
            &[self.potential.as_ref(), self.source.as_ref()],
            &[self.initial.as_ref()],
        )
    }

    /// `sup |a|` over Ω_T.
    pub fn potential_sup(&self) -> f64 {
        self.potential
            .as_ref()
            .map(|a| a.sup_on(self.op.grid.omega))
            .unwrap_or(0.0)
    }
}

/// Implicit Euler solution `u = v + f` on the full lattice.
pub fn solve_linear(problem: &HeatProblem, tg: &TimeGrid) -> Result<SpaceTimeField> {
    problem.validate(tg)?;
    let op = problem.op;
    let omega = op.grid.omega;
    let src = reduced_source(
        op,
        problem.source.as_ref(),
        problem.exterior.as_ref(),
        tg.n_times(),
    )?;
    let v0 = match &problem.initial {
        Some(phi) => gather(phi, omega),
        None => DVector::zeros(omega.len()),
    };
    let states = HeatStepper::new(op, tg)?.march(v0, &src, problem.potential.as_ref())?;
    let mut u = match &problem.exterior {
        Some(f) => f.clone(),
        None => SpaceTimeField::zeros_like(&op.grid, tg),
    };
    for (k, v) in states.iter().enumerate() {
        scatter(v, omega, u.row_mut(k));
    }
    u.support_mask = None;
    Ok(u)
}

/// Modal solution `v = Σ_k d^k(t) w_k` and its coefficients.
#[derive(Debug, Clone)]
pub struct GalerkinSolution {
    /// Reduced solution `v = u - f`, zero off Ω.
    pub v: SpaceTimeField,
    /// `coefficients[t][k] = d^k(t)`.
    pub coefficients: Vec<Vec<f64>>,
}

/// Galerkin solve in the lowest `m_modes` Dirichlet eigenvectors. Exterior data,
/// if present, enters through `F̃ = F - (-Δ)^s f`; the result is `v = u - f`.
pub fn solve_linear_galerkin(
    problem: &HeatProblem,
    tg: &TimeGrid,
    m_modes: usize,
) -> Result<GalerkinSolution> {
    let basis = dirichlet_eigenpairs(problem.op, m_modes)?;
    galerkin_with_basis(problem, tg, &basis)
}

/// As [`solve_linear_galerkin`] with a precomputed basis.
///
/// Coefficients solve `(d^k)' + Σ_ℓ e^{kℓ}(t) d^ℓ = (F̃, w_k)` with
/// `e^{kℓ} = λ_ℓ δ_{kℓ} + (a w_ℓ, w_k)`, by implicit Euler.
pub fn galerkin_with_basis(
    problem: &HeatProblem,
    tg: &TimeGrid,
    basis: &EigenBasis,
) -> Result<GalerkinSolution> {
    problem.validate(tg)?;
    let op = problem.op;
    let grid = &op.grid;
    let omega = grid.omega;
    let h = grid.spacing;
    let m = basis.modes();
    let w = DMatrix::from_fn(omega.len(), m, |r, c| basis.vectors[c][omega.start + r]);
    let wt_h = w.transpose() * h;
    let src = reduced_source(
        op,
        problem.source.as_ref(),
        problem.exterior.as_ref(),
        tg.n_times(),
    )?;

    let lambda = DMatrix::from_diagonal(&DVector::from_vec(basis.eigenvalues.clone()));
    let step_matrix = |a: Option<DVector<f64>>| -> Result<Factor> {
        let mut e = lambda.clone();
        if let Some(a) = a {
            if a.iter().any(|v| *v != 0.0) {
                let mut aw = w.clone();
                for (r, ar) in a.iter().enumerate() {
                    aw.row_mut(r).scale_mut(*ar);
                }
                e += &wt_h * aw;
            }
        }
        for j in 0..m {
            e[(j, j)] += 1.0 / tg.dt;
        }
        Factor::new(e)
    };

    let mut d = match &problem.initial {
        Some(phi) => &wt_h * gather(phi, omega),
        None => DVector::zeros(m),
    };
    let mut coefficients = Vec::with_capacity(tg.n_times());
    coefficients.push(d.iter().copied().collect::<Vec<_>>());
    let constant_a = problem.potential.is_none();
    let base = if constant_a {
        Some(step_matrix(None)?)
    } else {
        None
    };
    for k in 0..tg.n_steps {
        let rhs = &d / tg.dt + &wt_h * &src[k + 1];
        d = match &base {
            Some(f) => f.solve(&rhs),
            None => {
                let a = problem
                    .potential
                    .as_ref()
                    .map(|a| gather(a.row(k + 1), omega));
                step_matrix(a)?.solve(&rhs)
            }
        };
        coefficients.push(d.iter().copied().collect());
    }

    let mut v = SpaceTimeField::zeros_like(grid, tg);
    for (k, dk) in coefficients.iter().enumerate() {
        let local = &w * DVector::from_column_slice(dk);
        scatter(&local, omega, v.row_mut(k));
    }
    v.support_mask = Some(omega);
    Ok(GalerkinSolution { v, coefficients })
}

/// Stationary barrier: `φ ≥ 0` everywhere and `(-Δ)^s φ ≥ 1` on Ω; the
/// parabolic barrier is `Φ(t,x) = e^t φ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Barrier {
    pub phi: Vec<f64>,
    pub enlarged: Interval,
    pub enlarged_set: IndexRange,
    /// `min_Ω (-Δ)^s φ` as verified on the lattice.
    pub min_forcing: f64,
}

impl Barrier {
    /// `Φ(t, ·)`.
    pub fn parabolic(&self, t: f64) -> Vec<f64> {
        self.phi.iter().map(|p| t.exp() * p).collect()
    }

    /// `sup_{Ω_T} Φ = e^T sup_Ω φ`.
    pub fn parabolic_sup(&self, omega: IndexRange, horizon: f64) -> f64 {
        horizon.exp() * omega.iter().map(|i| self.phi[i]).fold(0.0, f64::max)
    }
}

/// Fraction of Ω's radius by which the barrier's support extends past Ω.
pub const BARRIER_MARGIN: f64 = 0.5;

/// `φ = 2 w` where `(-Δ)^s w = 1` in `Ω' ⊃ Ω`, `w = 0` outside `Ω'`.
pub fn build_barrier(op: &FracOperator) -> Result<Barrier> {
    let grid = &op.grid;
    let om = grid.omega_interval;
    let r = om.radius() * (1.0 + BARRIER_MARGIN);
    let enlarged = Interval::new(om.center() - r, om.center() + r);
    let tol = 1e-9 * grid.spacing;
    let start = (0..grid.n_points).find(|&i| grid.x(i) > enlarged.lo + tol);
    let end = (0..grid.n_points)
        .rev()
        .find(|&i| grid.x(i) < enlarged.hi - tol)
        .map(|i| i + 1);
    let set = match (start, end) {
        (Some(s), Some(e)) if s >= 1 && e < grid.n_points && e > s => {
            IndexRange { start: s, end: e }
        }
        _ => {
            return Err(Error::Domain(format!(
                "enlarged set ({}, {}) does not fit inside the box",
                enlarged.lo, enlarged.hi
            )))
        }
    };
    let block = op.restricted(set);
    let w = Factor::new(block)?.solve(&DVector::from_element(set.len(), 1.0));
    let mut phi = vec![0.0; grid.n_points];
    for (local, i) in set.iter().enumerate() {
        phi[i] = 2.0 * w[local];
    }
    let scale = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min_phi = phi.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min_phi < -1e-12 * scale {
        return Err(Error::Barrier(format!(
            "barrier takes negative value {min_phi:.3e}"
        )));
    }
    let forcing = op.apply_rows(&phi, grid.omega)?;
    let min_forcing = forcing.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min_forcing < 1.0 - 1e-9 {
        return Err(Error::Barrier(format!(
            "(-Δ)^s φ reaches only {min_forcing:.6} < 1 on Ω; enlarge the margin"
        )));
    }
    Ok(Barrier {
        phi,
        enlarged,
        enlarged_set: set,
        min_forcing,
    })
}

/// Constant `C` in `‖u‖_{L∞(Ω_T)} ≤ C (‖f‖_{L∞} + ‖F‖_{L∞})` for zero initial
/// data, from comparison with `e^{Mt}(‖f‖ + ‖F‖ Φ)`, `M = ‖a‖_{L∞}`:
/// `C = e^{T M} max(1, sup_{Ω_T} Φ)`.
pub fn linf_bound_constant(barrier: &Barrier, omega: IndexRange, horizon: f64, a_sup: f64) -> f64 {
    (horizon * a_sup).exp() * barrier.parabolic_sup(omega, horizon).max(1.0)
}

/// Semilinear diffusion `(∂_t + (-Δ)^s) u + q(t,x,u) = 0`, `u = f` outside Ω,
/// `u(0) = 0`, by Picard iteration with the default stopping rules.
pub fn solve_nonlinear(
    op: &FracOperator,
    q: &dyn Nonlinearity,
    f: &SpaceTimeField,
    tg: &TimeGrid,
) -> Result<NonlinearSolution> {
    solve_nonlinear_with(op, q, f, tg, &PicardOptions::default())
}

pub fn solve_nonlinear_with(
    op: &FracOperator,
    q: &dyn Nonlinearity,
    f: &SpaceTimeField,
    tg: &TimeGrid,
    opts: &PicardOptions,
) -> Result<NonlinearSolution> {
    Propagator::new(op, tg, Equation::Heat)?.solve_nonlinear(q, f, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BumpSpec, Grid};
    use crate::nonlinearity::{make_polynomial_q, Coefficient};

    fn setup(s: f64) -> (FracOperator, TimeGrid) {
        let g = Grid::new(
            3.0,
            121,
            Interval::new(-1.0, 1.0),
            Interval::new(1.4, 2.0),
            Interval::new(-2.0, -1.4),
        )
        .unwrap();
        (
            FracOperator::assemble(&g, s).unwrap(),
            TimeGrid::new(1.0, 64).unwrap(),
        )
    }

    fn bump() -> BumpSpec {
        BumpSpec {
            center: 1.7,
            radius: 0.25,
            t_on: 0.05,
            t_off: 0.8,
            amplitude: 1.0,
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        let (op, tg) = setup(0.5);
        let u = solve_linear(&HeatProblem::new(&op), &tg).unwrap();
        assert!(u.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ground_mode_decays_exponentially() {
        let (op, tg) = setup(0.5);
        let basis = dirichlet_eigenpairs(&op, 1).unwrap();
        let (l1, w1) = (basis.eigenvalues[0], basis.vectors[0].clone());
        let u = solve_linear(&HeatProblem::new(&op).with_initial(w1.clone()), &tg).unwrap();
        let k = tg.n_steps / 2;
        let coef = op.grid.omega_dot(u.row(k), &w1);
        let exact = (-l1 * tg.t(k)).exp();
        assert!(
            (coef - exact).abs() <= 5.0 * tg.dt * l1 * l1 * tg.horizon,
            "{coef} vs {exact}"
        );
    }

    #[test]
    fn nonnegative_data_gives_nonnegative_solution() {
        let (op, tg) = setup(0.3);
        let f = bump().sample(&op.grid, &tg).unwrap();
        let src = SpaceTimeField::from_fn(&op.grid, &tg, |t, x| (t * (1.0 - x * x)).max(0.0));
        let u = solve_linear(
            &HeatProblem::new(&op).with_exterior(f).with_source(src),
            &tg,
        )
        .unwrap();
        assert!(u.values.iter().all(|v| *v >= -1e-12));
    }

    #[test]
    fn full_basis_galerkin_matches_direct() {
        let (op, tg) = setup(0.6);
        let g = &op.grid;
        let a = SpaceTimeField::from_fn(g, &tg, |t, x| 0.5 * (x + t).sin());
        let src = SpaceTimeField::from_fn(g, &tg, |t, x| (1.0 - x * x).max(0.0) * t.cos());
        let phi = g.omega_field(|x| (1.0 - x * x).powi(2));
        let p = HeatProblem::new(&op)
            .with_potential(a)
            .with_source(src)
            .with_initial(phi);
        let direct = solve_linear(&p, &tg).unwrap();
        let gal = solve_linear_galerkin(&p, &tg, g.omega.len()).unwrap();
        let diff = {
            let mut d = gal.v.clone();
            d.axpy(-1.0, &direct);
            d.l2_on(g.omega, g, &tg)
        };
        assert!(diff <= 1e-8 * direct.l2_on(g.omega, g, &tg));
    }

    #[test]
    fn galerkin_second_mode_decouples() {
        let (op, tg) = setup(0.5);
        let basis = dirichlet_eigenpairs(&op, 4).unwrap();
        let p = HeatProblem::new(&op).with_initial(basis.vectors[1].clone());
        let sol = galerkin_with_basis(&p, &tg, &basis).unwrap();
        let l2 = basis.eigenvalues[1];
        for (k, d) in sol.coefficients.iter().enumerate() {
            let exact = (-l2 * tg.t(k)).exp();
            assert!((d[1] - exact).abs() <= tg.t(k) * tg.dt * l2 * l2 + 1e-12);
            for (j, dj) in d.iter().enumerate() {
                if j != 1 {
                    assert!(dj.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn barrier_is_verified() {
        let (op, _) = setup(0.5);
        let b = build_barrier(&op).unwrap();
        assert!(b.min_forcing >= 1.0);
        assert_eq!(b.phi[0], 0.0);
        assert_eq!(*b.phi.last().unwrap(), 0.0);
        assert!(b.phi.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn nonlinear_zero_exterior_is_zero() {
        let (op, tg) = setup(0.5);
        let q = make_polynomial_q(vec![(2, Coefficient::Space(vec![1.0; 121]))], 0.5, 2).unwrap();
        let sol =
            solve_nonlinear(&op, &q, &SpaceTimeField::zeros_like(&op.grid, &tg), &tg).unwrap();
        assert!(sol.u.values.iter().all(|v| *v == 0.0));
        assert_eq!(sol.trace.iterations, 1);
        assert!(sol.trace.converged);
    }

    #[test]
    fn nonlinear_large_data_is_refused() {
        let (op, tg) = setup(0.5);
        let q = make_polynomial_q(vec![(2, Coefficient::Space(vec![1.0; 121]))], 0.5, 2).unwrap();
        let f = BumpSpec {
            amplitude: 1e3,
            ..bump()
        }
        .sample(&op.grid, &tg)
        .unwrap();
        let err = solve_nonlinear(&op, &q, &f, &tg).unwrap_err();
        assert_eq!(err.kind(), "SmallnessError");
    }
}
