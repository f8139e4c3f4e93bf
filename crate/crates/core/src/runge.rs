//! Least-squares control synthesis: exterior bumps whose interior traces
//! approximate a prescribed field in `L²(Ω_T)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracop::FracOperator;
use crate::grid::{BumpSpec, SpaceTimeField, TimeGrid};
use crate::heat::{solve_linear, HeatProblem};
use crate::par;

/// Condition estimate above which an unregularized solve is refused.
pub const MAX_CONDITION: f64 = 1e14;

/// Interior trace `P_a f |_{Ω_T}`: the linear heat solution with exterior data
/// `f`, potential `a`, no source and zero initial data, zeroed off Ω.
pub fn forward_map(
    op: &FracOperator,
    potential: Option<&SpaceTimeField>,
    f: &SpaceTimeField,
    tg: &TimeGrid,
) -> Result<SpaceTimeField> {
    let mut problem = HeatProblem::new(op).with_exterior(f.clone());
    if let Some(a) = potential {
        problem = problem.with_potential(a.clone());
    }
    Ok(solve_linear(&problem, tg)?.restricted_to(op.grid.omega))
}

/// `(u, v)_{L²(Ω_T)}` with trapezoid weights in time.
pub fn omega_inner(
    op: &FracOperator,
    tg: &TimeGrid,
    u: &SpaceTimeField,
    v: &SpaceTimeField,
) -> f64 {
    let omega = op.grid.omega;
    (0..tg.n_times())
        .map(|k| {
            let (a, b) = (u.row(k), v.row(k));
            tg.weight(k) * op.grid.spacing * omega.iter().map(|i| a[i] * b[i]).sum::<f64>()
        })
        .sum()
}

/// Van der Corput sequence in base 2, starting `1/2, 1/4, 3/4, 1/8, …`; every
/// prefix of length `2^j - 1` is a dyadic grid, so prefixes nest.
fn van_der_corput(j: usize) -> f64 {
    let (mut n, mut denom, mut x) = (j, 1.0, 0.0);
    while n > 0 {
        denom *= 2.0;
        x += (n & 1) as f64 / denom;
        n >>= 1;
    }
    x
}

/// Tensor bumps: `n_space` centers spread through W and `n_time` overlapping
/// windows spread through `(0, T)`. Centers and windows follow a
/// hierarchical order, so a basis with fewer centers or windows is a subset of
/// one with more.
pub fn tensor_basis(
    op: &FracOperator,
    tg: &TimeGrid,
    n_space: usize,
    n_time: usize,
) -> Result<Vec<BumpSpec>> {
    if n_space == 0 || n_time == 0 {
        return Err(Error::Param(
            "basis needs at least one center and one window".into(),
        ));
    }
    let w = op.grid.w_interval;
    let radius = 0.3 * w.radius();
    let margin = radius + 2.0 * op.grid.spacing;
    let (lo, hi) = (w.lo + margin, w.hi - margin);
    if !(lo < hi) {
        return Err(Error::Domain(
            "W is too narrow for the control bumps".into(),
        ));
    }
    let horizon = tg.horizon;
    let half = 0.3 * horizon;
    let mut out = Vec::with_capacity(n_space * n_time);
    for jt in 0..n_time {
        let tc = horizon * van_der_corput(jt + 1);
        let t_on = (tc - half).max(0.02 * horizon);
        let t_off = (tc + half).min(0.98 * horizon);
        for js in 0..n_space {
            let center = lo + (hi - lo) * van_der_corput(js + 1);
            out.push(BumpSpec {
                center,
                radius,
                t_on,
                t_off,
                amplitude: 1.0,
            });
        }
    }
    Ok(out)
}

/// Control elements with their interior traces and Gram matrix.
#[derive(Debug, Clone)]
pub struct ControlBasis {
    pub elements: Vec<BumpSpec>,
    pub traces: Vec<SpaceTimeField>,
    pub gram: DMatrix<f64>,
}

impl ControlBasis {
    /// Forward maps run concurrently; the Gram matrix is filled in a fixed order.
    pub fn assemble(
        op: &FracOperator,
        potential: Option<&SpaceTimeField>,
        tg: &TimeGrid,
        elements: Vec<BumpSpec>,
    ) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::Param("empty control basis".into()));
        }
        let traces = par::try_map_range(elements.len(), |i| {
            let f = elements[i].sample(&op.grid, tg)?;
            forward_map(op, potential, &f, tg)
        })?;
        let k = elements.len();
        let mut gram = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let g = omega_inner(op, tg, &traces[i], &traces[j]);
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
        }
        Ok(Self {
            elements,
            traces,
            gram,
        })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Sub-basis on the given element indices (no new forward solves).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|i| **i >= self.len()) {
            return Err(Error::Param(format!("basis index {bad} out of range")));
        }
        Ok(Self {
            elements: indices.iter().map(|&i| self.elements[i]).collect(),
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
            gram: DMatrix::from_fn(indices.len(), indices.len(), |a, b| {
                self.gram[(indices[a], indices[b])]
            }),
        })
    }

    /// Ratio of extreme Gram eigenvalues (infinite if singular).
    pub fn condition(&self) -> f64 {
        let eig = SymmetricEigen::new(self.gram.clone()).eigenvalues;
        let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }

    /// Default regularization `1e-8 · trace(G) / K`.
    pub fn default_lambda(&self) -> f64 {
        1e-8 * self.gram.trace() / self.len() as f64
    }

    /// `Σ c_i P_a f_i` on Ω_T.
    pub fn combine(&self, coefficients: &[f64]) -> Result<SpaceTimeField> {
        if coefficients.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                got: coefficients.len(),
            });
        }
        let mut out = self.traces[0].scaled(0.0);
        for (c, t) in coefficients.iter().zip(&self.traces) {
            out.axpy(*c, t);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Approximation {
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    /// `‖Σ c_i P_a f_i - r‖_{L²(Ω_T)}`, computed directly.
    pub residual: f64,
    pub target_norm: f64,
    pub condition: f64,
    pub control_norm: f64,
}

impl Approximation {
    pub fn relative_residual(&self) -> f64 {
        if self.target_norm > 0.0 {
            self.residual / self.target_norm
        } else {
            self.residual
        }
    }
}

/// Regularized normal equations `(G + λI) c = b`, `b_i = (P_a f_i, r)`.
/// `lambda = None` selects [`ControlBasis::default_lambda`].
pub fn approximate(
    op: &FracOperator,
    tg: &TimeGrid,
    target: &SpaceTimeField,
    basis: &ControlBasis,
    lambda: Option<f64>,
) -> Result<Approximation> {
    target.check_shape(tg.n_times(), op.grid.n_points)?;
    let lambda = lambda.unwrap_or_else(|| basis.default_lambda());
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Param(format!(
            "regularization must be finite and ≥ 0, got {lambda}"
        )));
    }
    let target = target.restricted_to(op.grid.omega);
    let condition = basis.condition();
    if lambda == 0.0 && condition > MAX_CONDITION {
        return Err(Error::IllConditioned(condition));
    }
    let k = basis.len();
    let rhs = DVector::from_iterator(
        k,
        basis.traces.iter().map(|t| omega_inner(op, tg, t, &target)),
    );
    let mut m = basis.gram.clone();
    for i in 0..k {
        m[(i, i)] += lambda;
    }
    let c = match m.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => m.lu().solve(&rhs).ok_or(Error::IllConditioned(condition))?,
    };
    let coefficients: Vec<f64> = c.iter().copied().collect();
    let mut diff = basis.combine(&coefficients)?;
    diff.axpy(-1.0, &target);
    Ok(Approximation {
        residual: omega_inner(op, tg, &diff, &diff).sqrt(),
        target_norm: omega_inner(op, tg, &target, &target).sqrt(),
        control_norm: c.norm(),
        coefficients,
        lambda,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, Interval};

    fn setup() -> (FracOperator, TimeGrid) {
        let g = Grid::new(
            3.0,
            97,
            Interval::new(-1.0, 1.0),
            Interval::new(1.2, 2.4),
            Interval::new(-2.4, -1.2),
        )
        .unwrap();
        (
            FracOperator::assemble(&g, 0.5).unwrap(),
            TimeGrid::new(1.0, 32).unwrap(),
        )
    }

    #[test]
    fn van_der_corput_prefixes_nest() {
        let take = |n: usize| (1..=n).map(van_der_corput).collect::<Vec<_>>();
        assert_eq!(take(3), vec![0.5, 0.25, 0.75]);
        let small = take(4);
        assert!(small.iter().all(|x| take(8).contains(x)));
    }

    #[test]
    fn basis_elements_fit_in_w() {
        let (op, tg) = setup();
        for b in tensor_basis(&op, &tg, 8, 4).unwrap() {
            b.check_support(&op.grid, &tg).unwrap();
        }
    }

    #[test]
    fn zero_control_gives_zero_trace() {
        let (op, tg) = setup();
        let f = SpaceTimeField::zeros_like(&op.grid, &tg);
        assert_eq!(forward_map(&op, None, &f, &tg).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn in_span_target_is_reproduced() {
        let (op, tg) = setup();
        let basis =
            ControlBasis::assemble(&op, None, &tg, tensor_basis(&op, &tg, 2, 2).unwrap()).unwrap();
        let target = basis.traces[0].clone();
        let a = approximate(&op, &tg, &target, &basis, Some(0.0)).unwrap();
        assert!(a.relative_residual() < 1e-9, "{}", a.relative_residual());
        assert!((a.coefficients[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn projection_identity() {
        let (op, tg) = setup();
        let basis =
            ControlBasis::assemble(&op, None, &tg, tensor_basis(&op, &tg, 2, 2).unwrap()).unwrap();
        let g = &op.grid;
        let target = SpaceTimeField::from_fn(g, &tg, |t, x| t * (1.0 - x * x).max(0.0))
            .restricted_to(g.omega);
        let a = approximate(&op, &tg, &target, &basis, Some(0.0)).unwrap();
        let c = DVector::from_vec(a.coefficients.clone());
        let identity = a.target_norm.powi(2) - (c.transpose() * &basis.gram * &c)[(0, 0)];
        assert!((identity - a.residual.powi(2)).abs() <= 1e-9 * a.target_norm.powi(2));
    }
}
