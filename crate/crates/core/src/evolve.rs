//! Shared time-evolution machinery: step-matrix factorizations, a propagator
//! for zero-potential problems (the building block of every fixed-point and
//! linearization solve), and the Picard iteration for the semilinear problems.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracop::FracOperator;
use crate::grid::{IndexRange, SpaceTimeField, TimeGrid};
use crate::heat::HeatStepper;
use crate::nonlinearity::Nonlinearity;
use crate::wave::WaveStepper;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Heat,
    Wave,
}

impl Equation {
    pub fn name(&self) -> &'static str {
        match self {
            Equation::Heat => "heat",
            Equation::Wave => "wave",
        }
    }
}

/// Factorized step matrix: Cholesky when positive definite, LU otherwise.
#[derive(Debug, Clone)]
pub(crate) enum Factor {
    Chol(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl Factor {
    pub(crate) fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem(
                "step matrix has non-finite entries".into(),
            ));
        }
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok(Factor::Chol(c));
        }
        let lu = m.lu();
        let u = lu.u();
        let diag = u.diagonal();
        let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if !(max > 0.0) || min <= 1e-14 * max {
            return Err(Error::SingularSystem(format!(
                "pivot ratio {:.3e} below 1e-14",
                if max > 0.0 { min / max } else { 0.0 }
            )));
        }
        Ok(Factor::Lu(lu))
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Factor::Chol(c) => c.solve(b),
            Factor::Lu(l) => l.solve(b).expect("nonsingular by construction"),
        }
    }
}

/// Entries of `row` on `set` as a vector.
pub(crate) fn gather(row: &[f64], set: IndexRange) -> DVector<f64> {
    DVector::from_iterator(set.len(), set.iter().map(|i| row[i]))
}

/// Write `v` into `row` on `set`.
pub(crate) fn scatter(v: &DVector<f64>, set: IndexRange, row: &mut [f64]) {
    for (local, i) in set.iter().enumerate() {
        row[i] = v[local];
    }
}

/// `F̃ = F - (-Δ)^s f` on Ω at every time level, as local vectors.
pub(crate) fn reduced_source(
    op: &FracOperator,
    source: Option<&SpaceTimeField>,
    exterior: Option<&SpaceTimeField>,
    n_times: usize,
) -> Result<Vec<DVector<f64>>> {
    let omega = op.grid.omega;
    (0..n_times)
        .map(|k| {
            let mut v = match source {
                Some(s) => gather(s.row(k), omega),
                None => DVector::zeros(omega.len()),
            };
            if let Some(f) = exterior {
                let row = f.row(k);
                if row.iter().any(|x| *x != 0.0) {
                    let af = op.apply_rows(row, omega)?;
                    for (a, b) in v.iter_mut().zip(af) {
                        *a -= b;
                    }
                }
            }
            Ok(v)
        })
        .collect()
}

/// Check that optional data fields match the lattice and their supports.
pub(crate) fn validate_data(
    op: &FracOperator,
    tg: &TimeGrid,
    exterior: Option<&SpaceTimeField>,
    fields_on_omega: &[Option<&SpaceTimeField>],
    initial: &[Option<&Vec<f64>>],
) -> Result<()> {
    let grid = &op.grid;
    for f in fields_on_omega.iter().flatten() {
        f.check_shape(tg.n_times(), grid.n_points)?;
        if !f.is_finite() {
            return Err(Error::Param("data field has non-finite entries".into()));
        }
    }
    if let Some(f) = exterior {
        f.check_shape(tg.n_times(), grid.n_points)?;
        if !f.is_finite() {
            return Err(Error::Param("exterior data has non-finite entries".into()));
        }
        if !f.vanishes_off(grid.w_set) {
            return Err(Error::Support("exterior data must vanish off W".into()));
        }
    }
    for phi in initial.iter().flatten() {
        if phi.len() != grid.n_points {
            return Err(Error::Shape {
                expected: grid.n_points,
                got: phi.len(),
            });
        }
        if phi
            .iter()
            .enumerate()
            .any(|(i, v)| *v != 0.0 && !grid.omega.contains(i))
        {
            return Err(Error::Support("initial data must vanish outside Ω".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Stepper {
    Heat(HeatStepper),
    Wave(WaveStepper),
}

/// Solver for zero-potential problems on a fixed lattice, with the step
/// matrix factorized once.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub op: FracOperator,
    pub tg: TimeGrid,
    pub equation: Equation,
    stepper: Stepper,
}

impl Propagator {
    pub fn new(op: &FracOperator, tg: &TimeGrid, equation: Equation) -> Result<Self> {
        let stepper = match equation {
            Equation::Heat => Stepper::Heat(HeatStepper::new(op, tg)?),
            Equation::Wave => Stepper::Wave(WaveStepper::new(op, tg)?),
        };
        Ok(Self {
            op: op.clone(),
            tg: *tg,
            equation,
            stepper,
        })
    }

    pub fn omega(&self) -> IndexRange {
        self.op.grid.omega
    }

    /// Solution with zero exterior and zero initial data for a source given
    /// on Ω (values off Ω are ignored). The result vanishes off Ω.
    pub fn solve_source(&self, source: &SpaceTimeField) -> Result<SpaceTimeField> {
        let n_times = self.tg.n_times();
        source.check_shape(n_times, self.op.grid.n_points)?;
        let omega = self.omega();
        let src: Vec<DVector<f64>> = (0..n_times).map(|k| gather(source.row(k), omega)).collect();
        self.solve_local(&src)
    }

    /// As [`Self::solve_source`] with the source already restricted to Ω.
    pub(crate) fn solve_local(&self, src: &[DVector<f64>]) -> Result<SpaceTimeField> {
        let omega = self.omega();
        let states = match &self.stepper {
            Stepper::Heat(h) => h.march(DVector::zeros(omega.len()), src, None)?,
            Stepper::Wave(w) => {
                let z = DVector::zeros(omega.len());
                w.march(z.clone(), z, src, None)?.0
            }
        };
        let mut out = SpaceTimeField::zeros(self.tg.n_times(), self.op.grid.n_points);
        for (k, v) in states.iter().enumerate() {
            scatter(v, omega, out.row_mut(k));
        }
        out.support_mask = Some(omega);
        Ok(out)
    }

    /// Free solution with exterior data `f`, zero source, potential and
    /// initial data: `u = v + f` with `v` solving the reduced problem.
    pub fn solve_exterior(&self, f: &SpaceTimeField) -> Result<SpaceTimeField> {
        validate_data(&self.op, &self.tg, Some(f), &[], &[])?;
        let src = reduced_source(&self.op, None, Some(f), self.tg.n_times())?;
        let mut u = self.solve_local(&src)?;
        u.axpy(1.0, f);
        u.support_mask = None;
        Ok(u)
    }

    /// Semilinear solve by Picard iteration around the free solution.
    pub fn solve_nonlinear(
        &self,
        q: &dyn Nonlinearity,
        f: &SpaceTimeField,
        opts: &PicardOptions,
    ) -> Result<NonlinearSolution> {
        picard(self, q, f, opts)
    }
}

/// Stopping rules for the fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    /// Stop once the sup-norm update is below `rel_tol · max(1, sup|u₀|)`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Consecutive growing updates that count as divergence.
    pub growth_limit: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: 100,
            growth_limit: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardTrace {
    pub iterations: usize,
    /// `sup|v_{j} - v_{j-1}|` for `j = 1..`.
    pub updates: Vec<f64>,
    pub converged: bool,
    pub tolerance: f64,
    /// `sup|u|` over the whole lattice at the final iterate.
    pub sup_norm: f64,
}

impl PicardTrace {
    /// Ratios of consecutive updates; entry `j` compares update `j+2` to `j+1`.
    pub fn ratios(&self) -> Vec<f64> {
        self.updates
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct NonlinearSolution {
    pub u: SpaceTimeField,
    pub trace: PicardTrace,
}

fn picard(
    prop: &Propagator,
    q: &dyn Nonlinearity,
    f: &SpaceTimeField,
    opts: &PicardOptions,
) -> Result<NonlinearSolution> {
    let delta = q.delta();
    let omega = prop.omega();
    let n_times = prop.tg.n_times();
    let u0 = prop.solve_exterior(f)?;
    let sup0 = u0.sup_norm();
    if sup0 > delta {
        return Err(Error::Smallness { sup: sup0, delta });
    }
    let scale = sup0.max(1.0);
    let tol = opts.rel_tol.max(8.0 * f64::EPSILON) * scale;
    // Updates at rounding level may fluctuate; they never count as growth.
    let noise_floor = 1e-12 * scale;
    let mut v = SpaceTimeField::zeros(n_times, prop.op.grid.n_points);
    let mut updates = Vec::new();
    let mut growing = 0usize;
    let mut converged = false;
    let mut sup_u = sup0;
    for _ in 0..opts.max_iter {
        let src: Vec<DVector<f64>> = (0..n_times)
            .map(|k| {
                let (ur, vr) = (u0.row(k), v.row(k));
                DVector::from_iterator(
                    omega.len(),
                    omega.iter().map(|i| -q.eval(0, k, i, ur[i] + vr[i])),
                )
            })
            .collect();
        let next = prop.solve_local(&src)?;
        let upd = next.max_abs_diff(&v);
        if !upd.is_finite() {
            return Err(Error::Divergence(updates.len() + 1));
        }
        if let Some(&prev) = updates.last() {
            growing = if upd > prev && upd > noise_floor {
                growing + 1
            } else {
                0
            };
        }
        updates.push(upd);
        v = next;
        sup_u = u0
            .values
            .iter()
            .zip(&v.values)
            .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        if sup_u > delta {
            return Err(Error::Smallness { sup: sup_u, delta });
        }
        if upd <= tol {
            converged = true;
            break;
        }
        if growing >= opts.growth_limit {
            return Err(Error::Divergence(growing));
        }
    }
    let mut u = u0;
    u.axpy(1.0, &v);
    u.support_mask = None;
    Ok(NonlinearSolution {
        u,
        trace: PicardTrace {
            iterations: updates.len(),
            updates,
            converged,
            tolerance: tol,
            sup_norm: sup_u,
        },
    })
}
