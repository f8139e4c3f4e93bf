//! Fractional wave equation `(∂_t² + (-Δ)^s + a) u = F` in `Ω_T` for
//! `1/2 < s < 1` in one dimension: average-acceleration Newmark for
//! `v = u - f`, discrete energy, and the semilinear solver.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::evolve::{
    gather, reduced_source, scatter, validate_data, Equation, Factor, NonlinearSolution,
    PicardOptions, Propagator,
};
use crate::fracop::FracOperator;
use crate::grid::{Grid, IndexRange, SpaceTimeField, TimeGrid};
use crate::nonlinearity::Nonlinearity;

pub(crate) fn check_wave_order(s: f64) -> Result<()> {
    if s > 0.5 && s < 1.0 {
        Ok(())
    } else {
        Err(Error::Param(format!(
            "the fractional wave solver requires 1/2 < s < 1 in one dimension \
             (H^s embeds into L∞ only for s > n/2, which the semilinear theory needs); got s = {s}"
        )))
    }
}

/// Newmark with `β = 1/4`, `γ = 1/2`:
/// `(4/dt² I + K_{n+1}) v_{n+1} = F̃_{n+1} + 4/dt² (v_n + dt v̇_n) + a_n`,
/// `K = A_ΩΩ + diag(a)`, `a_n` the acceleration.
#[derive(Debug, Clone)]
pub(crate) struct WaveStepper {
    omega: IndexRange,
    block: DMatrix<f64>,
    dt: f64,
    base: Factor,
}

impl WaveStepper {
    pub(crate) fn new(op: &FracOperator, tg: &TimeGrid) -> Result<Self> {
        check_wave_order(op.s)?;
        let omega = op.grid.omega;
        let block = op.restricted(omega);
        let c = 4.0 / (tg.dt * tg.dt);
        let m = &block + DMatrix::identity(omega.len(), omega.len()) * c;
        Ok(Self {
            omega,
            block,
            dt: tg.dt,
            base: Factor::new(m)?,
        })
    }

    fn stiffness_times(&self, a: Option<&DVector<f64>>, v: &DVector<f64>) -> DVector<f64> {
        let mut kv = &self.block * v;
        if let Some(a) = a {
            kv += a.component_mul(v);
        }
        kv
    }

    /// Positions and velocities at every level.
    pub(crate) fn march(
        &self,
        v0: DVector<f64>,
        vdot0: DVector<f64>,
        src: &[DVector<f64>],
        potential: Option<&SpaceTimeField>,
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let dt = self.dt;
        let c = 4.0 / (dt * dt);
        let a_at = |k: usize| -> Option<DVector<f64>> {
            potential
                .map(|a| gather(a.row(k), self.omega))
                .filter(|a| a.iter().any(|v| *v != 0.0))
        };
        let mut acc = &src[0] - self.stiffness_times(a_at(0).as_ref(), &v0);
        let mut pos = Vec::with_capacity(src.len());
        let mut vel = Vec::with_capacity(src.len());
        pos.push(v0);
        vel.push(vdot0);
        let mut cached: Option<(DVector<f64>, Factor)> = None;
        for n in 0..src.len() - 1 {
            let predictor = &pos[n] + &vel[n] * dt;
            let rhs = &src[n + 1] + &predictor * c + &acc;
            let next = match a_at(n + 1) {
                Some(a) => {
                    let reuse = matches!(&cached, Some((prev, _)) if *prev == a);
                    if !reuse {
                        let mut m = self.block.clone();
                        for (j, aj) in a.iter().enumerate() {
                            m[(j, j)] += c + aj;
                        }
                        cached = Some((a, Factor::new(m)?));
                    }
                    cached.as_ref().map(|(_, f)| f.solve(&rhs)).unwrap()
                }
                None => self.base.solve(&rhs),
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularSystem(format!(
                    "non-finite state at step {}",
                    n + 1
                )));
            }
            let acc_next = (&next - &predictor) * c - &acc;
            let vel_next = &vel[n] + (&acc + &acc_next) * (0.5 * dt);
            acc = acc_next;
            pos.push(next);
            vel.push(vel_next);
        }
        Ok((pos, vel))
    }
}

/// Data of a linear wave problem; `None` means identically zero.
#[derive(Debug, Clone)]
pub struct WaveProblem<'a> {
    pub op: &'a FracOperator,
    pub potential: Option<SpaceTimeField>,
    pub source: Option<SpaceTimeField>,
    pub exterior: Option<SpaceTimeField>,
    /// Initial position `φ`, supported in Ω.
    pub position: Option<Vec<f64>>,
    /// Initial velocity `ψ`, supported in Ω.
    pub velocity: Option<Vec<f64>>,
}

impl<'a> WaveProblem<'a> {
    pub fn new(op: &'a FracOperator) -> Self {
        Self {
            op,
            potential: None,
            source: None,
            exterior: None,
            position: None,
            velocity: None,
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

    pub fn with_position(mut self, phi: Vec<f64>) -> Self {
        self.position = Some(phi);
        self
    }

    pub fn with_velocity(mut self, psi: Vec<f64>) -> Self {
        self.velocity = Some(psi);
        self
    }
}

#[derive(Debug, Clone)]
pub struct WaveSolution {
    /// `u = v + f` on the full lattice.
    pub u: SpaceTimeField,
    /// `∂_t u` on Ω (zero elsewhere).
    pub velocity: SpaceTimeField,
}

pub fn solve_linear_wave(problem: &WaveProblem, tg: &TimeGrid) -> Result<WaveSolution> {
    let op = problem.op;
    check_wave_order(op.s)?;
    validate_data(
        op,
        tg,
        problem.exterior.as_ref(),
        &[problem.potential.as_ref(), problem.source.as_ref()],
        &[problem.position.as_ref(), problem.velocity.as_ref()],
    )?;
    let omega = op.grid.omega;
    let src = reduced_source(
        op,
        problem.source.as_ref(),
        problem.exterior.as_ref(),
        tg.n_times(),
    )?;
    let local = |v: &Option<Vec<f64>>| match v {
        Some(v) => gather(v, omega),
        None => DVector::zeros(omega.len()),
    };
    let (pos, vel) = WaveStepper::new(op, tg)?.march(
        local(&problem.position),
        local(&problem.velocity),
        &src,
        problem.potential.as_ref(),
    )?;
    let mut u = match &problem.exterior {
        Some(f) => f.clone(),
        None => SpaceTimeField::zeros_like(&op.grid, tg),
    };
    let mut velocity = SpaceTimeField::zeros_like(&op.grid, tg);
    for k in 0..tg.n_times() {
        scatter(&pos[k], omega, u.row_mut(k));
        scatter(&vel[k], omega, velocity.row_mut(k));
    }
    u.support_mask = None;
    velocity.support_mask = Some(omega);
    Ok(WaveSolution { u, velocity })
}

/// `E(t) = ½‖∂_t u‖²_{L²(Ω)} + ½((-Δ)^s u, u)_{L²}` at every time level.
pub fn energy_series(sol: &WaveSolution, op: &FracOperator) -> Result<Vec<f64>> {
    let grid = &op.grid;
    (0..sol.u.n_times)
        .map(|k| {
            let kinetic = grid.omega_dot(sol.velocity.row(k), sol.velocity.row(k));
            let potential = op.quadratic_form(sol.u.row(k))?;
            Ok(0.5 * (kinetic + potential))
        })
        .collect()
}

/// Bound `C` with `sup|u| ≤ C · hs_norm(u)` for every lattice field, from
/// Cauchy-Schwarz on the discrete inverse transform:
/// `C = sqrt((I_s + Δξ) / 2π)`, `I_s = ∫(1+ξ²)^{-s} dξ = √π Γ(s-1/2)/Γ(s)`.
/// Finite only for `s > 1/2`.
pub fn embedding_constant(s: f64, grid: &Grid) -> Result<f64> {
    check_wave_order(s)?;
    let pi = std::f64::consts::PI;
    let i_s = pi.sqrt() * gamma(s - 0.5) / gamma(s);
    let m = 64usize.max(2 * grid.n_points).next_power_of_two();
    let dxi = 2.0 * pi / (m as f64 * grid.spacing);
    Ok(((i_s + dxi) / (2.0 * pi)).sqrt())
}

/// Semilinear wave `(∂_t² + (-Δ)^s) u + q(t,x,u) = 0`, `u = f` outside Ω,
/// zero initial position and velocity.
pub fn solve_nonlinear_wave(
    op: &FracOperator,
    q: &dyn Nonlinearity,
    f: &SpaceTimeField,
    tg: &TimeGrid,
) -> Result<NonlinearSolution> {
    solve_nonlinear_wave_with(op, q, f, tg, &PicardOptions::default())
}

pub fn solve_nonlinear_wave_with(
    op: &FracOperator,
    q: &dyn Nonlinearity,
    f: &SpaceTimeField,
    tg: &TimeGrid,
    opts: &PicardOptions,
) -> Result<NonlinearSolution> {
    Propagator::new(op, tg, Equation::Wave)?.solve_nonlinear(q, f, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fracop::dirichlet_eigenpairs;
    use crate::grid::Interval;

    fn setup(s: f64, n_steps: usize) -> (FracOperator, TimeGrid) {
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
            TimeGrid::new(2.0, n_steps).unwrap(),
        )
    }

    #[test]
    fn rejects_low_order() {
        let (op, tg) = setup(0.4, 16);
        let err = solve_linear_wave(&WaveProblem::new(&op), &tg).unwrap_err();
        assert_eq!(err.kind(), "ParamError");
        assert!(err.to_string().contains("1/2 < s < 1"));
    }

    #[test]
    fn zero_data_gives_zero() {
        let (op, tg) = setup(0.75, 16);
        let sol = solve_linear_wave(&WaveProblem::new(&op), &tg).unwrap();
        assert!(sol.u.values.iter().all(|v| *v == 0.0));
        assert!(energy_series(&sol, &op).unwrap().iter().all(|e| *e == 0.0));
    }

    #[test]
    fn ground_mode_oscillates() {
        let (op, tg) = setup(0.75, 256);
        let basis = dirichlet_eigenpairs(&op, 1).unwrap();
        let w1 = basis.vectors[0].clone();
        let omega = basis.eigenvalues[0].sqrt();
        let sol = solve_linear_wave(&WaveProblem::new(&op).with_position(w1.clone()), &tg).unwrap();
        let k = tg.n_steps / 2;
        let t = tg.t(k);
        let coef = op.grid.omega_dot(sol.u.row(k), &w1);
        // Newmark phase error is t ω³ dt² / 12; allow twice that.
        let tol = t * omega.powi(3) * tg.dt * tg.dt / 6.0;
        assert!(
            (coef - (omega * t).cos()).abs() <= tol,
            "{coef} vs {}",
            (omega * t).cos()
        );
    }

    #[test]
    fn free_energy_is_conserved() {
        let (op, tg) = setup(0.75, 512);
        let phi = op.grid.omega_field(|x| (1.0 - x * x).powi(2));
        let sol = solve_linear_wave(&WaveProblem::new(&op).with_position(phi), &tg).unwrap();
        let e = energy_series(&sol, &op).unwrap();
        let drift = e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / e[0];
        assert!(drift < 1e-10, "drift {drift}");
    }

    #[test]
    fn embedding_constant_is_finite_above_half() {
        let (op, _) = setup(0.75, 16);
        assert!(embedding_constant(0.75, &op.grid).unwrap().is_finite());
        assert_eq!(
            embedding_constant(0.5, &op.grid).unwrap_err().kind(),
            "ParamError"
        );
    }
}
