//! Nonlinear potentials `q(t, x, z)` with their `z`-derivatives, and sampled
//! verification of the structural assumptions used by the solvers:
//! `q(·,0) = 0`, `∂_z q` small near `z = 0` (modulus `Φ`), and bounded
//! higher derivatives `M_k` on `|z| ≤ δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mollifier, Grid, SpaceTimeField, TimeGrid};

/// Evaluable nonlinearity on the space-time lattice.
pub trait Nonlinearity: Send + Sync {
    /// Jet order `m`; derivatives up to `m + 1` are available.
    fn order(&self) -> usize;
    /// Radius of the `z`-neighbourhood where the bounds hold.
    fn delta(&self) -> f64;
    /// `∂_z^k q(t_k, x_i, z)` at time level `kt`, lattice point `i`.
    fn eval(&self, k: usize, kt: usize, i: usize, z: f64) -> f64;
    /// Declared modulus `Φ(ε) ≥ sup_{|z|≤ε} |∂_z q|`, if known in closed form.
    fn phi(&self, _eps: f64) -> Option<f64> {
        None
    }
    /// Declared bound `M_k` for `2 ≤ k ≤ m+1`, if known in closed form.
    fn m_bound(&self, _k: usize) -> Option<f64> {
        None
    }
    /// Whether `q` does not depend on `t`.
    fn time_independent(&self) -> bool {
        false
    }
}

/// Coefficient field of one monomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coefficient {
    /// `c(x)`, one value per lattice point.
    Space(Vec<f64>),
    /// `c(t, x)`.
    SpaceTime(SpaceTimeField),
}

impl Coefficient {
    #[inline]
    pub fn at(&self, kt: usize, i: usize) -> f64 {
        match self {
            Coefficient::Space(v) => v[i],
            Coefficient::SpaceTime(f) => f.get(kt, i),
        }
    }

    pub fn sup(&self) -> f64 {
        match self {
            Coefficient::Space(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Coefficient::SpaceTime(f) => f.sup_norm(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Coefficient::Space(v) => v.iter().all(|x| x.is_finite()),
            Coefficient::SpaceTime(f) => f.is_finite(),
        }
    }
}

/// `q(t,x,z) = Σ_k c_k(t,x) z^k / k!` with every `k ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialQ {
    pub order: usize,
    pub delta: f64,
    /// Sorted by `k`, each `k` at most once.
    pub terms: Vec<(usize, Coefficient)>,
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Build a polynomial nonlinearity. Linear and constant terms are rejected so
/// that `q(·,0) = ∂_z q(·,0) = 0` holds by construction.
pub fn make_polynomial_q(
    coefficients: Vec<(usize, Coefficient)>,
    delta: f64,
    order: usize,
) -> Result<PolynomialQ> {
    if !(delta > 0.0) {
        return Err(Error::Param(format!("delta must be positive, got {delta}")));
    }
    let mut terms: Vec<(usize, Coefficient)> = Vec::new();
    for (k, c) in coefficients {
        if k < 2 {
            return Err(Error::Param(format!(
                "monomial of degree {k} would make q(·,0) or its z-derivative nonzero; degrees must be ≥ 2"
            )));
        }
        if !c.is_finite() {
            return Err(Error::Param(format!(
                "coefficient of degree {k} is not finite"
            )));
        }
        if let Some(pos) = terms.iter().position(|(kk, _)| *kk == k) {
            return Err(Error::Param(format!(
                "degree {k} given twice (entry {pos})"
            )));
        }
        terms.push((k, c));
    }
    terms.sort_by_key(|(k, _)| *k);
    Ok(PolynomialQ {
        order,
        delta,
        terms,
    })
}

impl PolynomialQ {
    /// The zero nonlinearity (linear model).
    pub fn zero(order: usize, delta: f64) -> Self {
        Self {
            order,
            delta,
            terms: Vec::new(),
        }
    }

    pub fn coefficient(&self, k: usize) -> Option<&Coefficient> {
        self.terms.iter().find(|(kk, _)| *kk == k).map(|(_, c)| c)
    }

    /// Copy with the degree-`k` term replaced (or removed with `None`).
    pub fn with_term(&self, k: usize, c: Option<Coefficient>) -> Result<Self> {
        let mut terms: Vec<(usize, Coefficient)> = self
            .terms
            .iter()
            .filter(|(kk, _)| *kk != k)
            .cloned()
            .collect();
        if let Some(c) = c {
            terms.push((k, c));
        }
        make_polynomial_q(terms, self.delta, self.order)
    }
}

impl Nonlinearity for PolynomialQ {
    fn order(&self) -> usize {
        self.order
    }

    fn delta(&self) -> f64 {
        self.delta
    }

    fn eval(&self, k: usize, kt: usize, i: usize, z: f64) -> f64 {
        let mut acc = 0.0;
        for (deg, c) in &self.terms {
            if *deg < k {
                continue;
            }
            let p = deg - k;
            let zp = if p == 0 { 1.0 } else { z.powi(p as i32) };
            acc += c.at(kt, i) * zp / factorial(p);
        }
        acc
    }

    fn phi(&self, eps: f64) -> Option<f64> {
        Some(
            self.terms
                .iter()
                .map(|(k, c)| c.sup() * eps.powi(*k as i32 - 1) / factorial(k - 1))
                .sum(),
        )
    }

    fn m_bound(&self, k: usize) -> Option<f64> {
        Some(
            self.terms
                .iter()
                .filter(|(deg, _)| *deg >= k)
                .map(|(deg, c)| c.sup() * self.delta.powi((deg - k) as i32) / factorial(deg - k))
                .sum(),
        )
    }

    fn time_independent(&self) -> bool {
        self.terms
            .iter()
            .all(|(_, c)| matches!(c, Coefficient::Space(_)))
    }
}

/// Scalar `q(z)` given by closed-form derivatives `derivs[k](z) = q^{(k)}(z)`,
/// independent of `(t, x)`. Bounds are not declared and must be sampled.
pub struct ScalarQ {
    pub order: usize,
    pub delta: f64,
    #[allow(clippy::type_complexity)]
    pub derivs: Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl Nonlinearity for ScalarQ {
    fn order(&self) -> usize {
        self.order
    }
    fn delta(&self) -> f64 {
        self.delta
    }
    fn eval(&self, k: usize, _kt: usize, _i: usize, z: f64) -> f64 {
        self.derivs.get(k).map(|d| d(z)).unwrap_or(0.0)
    }
    fn time_independent(&self) -> bool {
        true
    }
}

/// Outcome of one sampled check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub k: usize,
    pub measured_sup: f64,
    /// Declared `M_k`, or the sampled sup when none is declared.
    pub bound: f64,
    pub declared: bool,
    pub pass: bool,
}

/// Pass/fail per assumption with measured values. Smoothness of `q` is a
/// property of the representation and is not sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `q(t,x,0) = 0`.
    pub vanishes_at_zero: Check,
    /// `sup_{|z|≤ε} |∂_z q| → 0` as `ε → 0`; measured at the smallest sampled `ε`.
    pub modulus_vanishes: Check,
    /// Sampled modulus table `(ε, sup_{|z|≤ε} |∂_z q|)`, nondecreasing in `ε`.
    pub phi_table: Vec<(f64, f64)>,
    pub phi_declared_dominates: bool,
    /// `|∂_z^k q| ≤ M_k` on `|z| ≤ δ`, `2 ≤ k ≤ m+1`.
    pub derivative_bounds: Vec<DerivativeCheck>,
    /// True when any bound was estimated from samples (may under-approximate).
    pub sampled_estimates: bool,
    pub all_pass: bool,
}

/// Sample `q` over every lattice point of `Ω × [0,T]` and the given `z` values.
pub fn check_assumptions(
    q: &dyn Nonlinearity,
    grid: &Grid,
    tg: &TimeGrid,
    z_samples: &[f64],
) -> Result<AssumptionReport> {
    let delta = q.delta();
    if let Some(z) = z_samples.iter().find(|z| z.abs() > delta * (1.0 + 1e-12)) {
        return Err(Error::Param(format!(
            "z sample {z} outside [-δ, δ] with δ = {delta}"
        )));
    }
    const TOL: f64 = 1e-14;
    let sites: Vec<(usize, usize)> = (0..tg.n_times())
        .flat_map(|kt| grid.omega.iter().map(move |i| (kt, i)))
        .collect();
    let sup_over = |k: usize, zs: &[f64]| -> f64 {
        let mut m: f64 = 0.0;
        for &(kt, i) in &sites {
            for &z in zs {
                m = m.max(q.eval(k, kt, i, z).abs());
            }
        }
        m
    };

    let q0 = sup_over(0, &[0.0]);
    let vanishes_at_zero = Check {
        pass: q0 <= TOL,
        measured: q0,
        bound: TOL,
    };

    let mut radii: Vec<f64> = z_samples
        .iter()
        .map(|z| z.abs())
        .filter(|r| *r > 0.0)
        .collect();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let mut phi_table = Vec::with_capacity(radii.len() + 1);
    phi_table.push((0.0, sup_over(1, &[0.0])));
    for &eps in &radii {
        let zs: Vec<f64> = z_samples
            .iter()
            .copied()
            .filter(|z| z.abs() <= eps)
            .chain([0.0])
            .collect();
        let prev = phi_table.last().map(|p: &(f64, f64)| p.1).unwrap_or(0.0);
        phi_table.push((eps, sup_over(1, &zs).max(prev)));
    }
    let phi_declared_dominates = match q.phi(1.0) {
        Some(_) => phi_table.iter().all(|&(eps, m)| {
            q.phi(eps)
                .map(|p| m <= p * (1.0 + 1e-12) + TOL)
                .unwrap_or(true)
        }),
        None => true,
    };
    // Φ(ε) → 0: the derivative at z = 0 must vanish, and the sampled modulus must
    // shrink with ε (checked at the smallest sampled radius against the largest).
    let d0 = phi_table[0].1;
    let modulus_vanishes = Check {
        pass: d0 <= TOL,
        measured: d0,
        bound: TOL,
    };

    let mut sampled_estimates = q.m_bound(2).is_none() || q.phi(1.0).is_none();
    let mut zs_all: Vec<f64> = z_samples.to_vec();
    zs_all.push(0.0);
    let derivative_bounds: Vec<DerivativeCheck> = (2..=q.order() + 1)
        .map(|k| {
            let measured_sup = sup_over(k, &zs_all);
            match q.m_bound(k) {
                Some(b) => DerivativeCheck {
                    k,
                    measured_sup,
                    bound: b,
                    declared: true,
                    pass: measured_sup <= b * (1.0 + 1e-12) + TOL,
                },
                None => {
                    sampled_estimates = true;
                    DerivativeCheck {
                        k,
                        measured_sup,
                        bound: measured_sup,
                        declared: false,
                        pass: measured_sup.is_finite(),
                    }
                }
            }
        })
        .collect();

    let all_pass = vanishes_at_zero.pass
        && modulus_vanishes.pass
        && phi_declared_dominates
        && derivative_bounds.iter().all(|d| d.pass);
    Ok(AssumptionReport {
        vanishes_at_zero,
        modulus_vanishes,
        phi_table,
        phi_declared_dominates,
        derivative_bounds,
        sampled_estimates,
        all_pass,
    })
}

/// Symmetric `z` sample lattice on `[-δ, δ]`.
pub fn z_lattice(delta: f64, n: usize) -> Vec<f64> {
    (0..=2 * n)
        .map(|j| delta * (j as f64 / n as f64 - 1.0))
        .collect()
}

/// Serializable coefficient field descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    /// `amplitude · exp(-1/(1-((x-center)/radius)²))` times `e`, so the peak is `amplitude`.
    Bump {
        center: f64,
        radius: f64,
        amplitude: f64,
    },
    /// Explicit lattice values (length `n_points`).
    Values {
        values: Vec<f64>,
    },
}

impl FieldSpec {
    pub fn sample(&self, grid: &Grid) -> Result<Vec<f64>> {
        let out: Vec<f64> = match self {
            FieldSpec::Constant { value } => grid.omega_field(|_| *value),
            FieldSpec::Bump {
                center,
                radius,
                amplitude,
            } => {
                if !(*radius > 0.0) {
                    return Err(Error::Param(
                        "coefficient bump radius must be positive".into(),
                    ));
                }
                grid.omega_field(|x| {
                    amplitude * std::f64::consts::E * mollifier((x - center) / radius)
                })
            }
            FieldSpec::Values { values } => {
                if values.len() != grid.n_points {
                    return Err(Error::Shape {
                        expected: grid.n_points,
                        got: values.len(),
                    });
                }
                (0..grid.n_points)
                    .map(|i| {
                        if grid.omega.contains(i) {
                            values[i]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        };
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub k: usize,
    pub field: FieldSpec,
}

/// File format for a time-independent polynomial nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    pub delta: f64,
    pub order: usize,
    pub terms: Vec<TermSpec>,
}

impl NonlinearitySpec {
    pub fn build(&self, grid: &Grid) -> Result<PolynomialQ> {
        let coefs = self
            .terms
            .iter()
            .map(|t| Ok((t.k, Coefficient::Space(t.field.sample(grid)?))))
            .collect::<Result<Vec<_>>>()?;
        make_polynomial_q(coefs, self.delta, self.order)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Interval;

    fn setup() -> (Grid, TimeGrid) {
        let g = Grid::new(
            3.0,
            121,
            Interval::new(-1.0, 1.0),
            Interval::new(1.4, 2.0),
            Interval::new(-2.0, -1.4),
        )
        .unwrap();
        (g, TimeGrid::new(1.0, 16).unwrap())
    }

    fn c2_bump(g: &Grid) -> Coefficient {
        Coefficient::Space(
            FieldSpec::Bump {
                center: 0.0,
                radius: 0.8,
                amplitude: 1.5,
            }
            .sample(g)
            .unwrap(),
        )
    }

    #[test]
    fn quadratic_has_vanishing_value_and_slope() {
        let (g, _) = setup();
        let q = make_polynomial_q(vec![(2, c2_bump(&g))], 0.5, 2).unwrap();
        for i in g.omega.iter() {
            assert_eq!(q.eval(0, 3, i, 0.0), 0.0);
            assert_eq!(q.eval(1, 3, i, 0.0), 0.0);
            assert_eq!(q.eval(2, 3, i, 0.0), q.coefficient(2).unwrap().at(3, i));
            assert_eq!(q.eval(3, 3, i, 0.3), 0.0);
        }
    }

    #[test]
    fn rejects_low_degrees() {
        let (g, _) = setup();
        for k in [0, 1] {
            let err = make_polynomial_q(vec![(k, c2_bump(&g))], 0.5, 2).unwrap_err();
            assert_eq!(err.kind(), "ParamError");
        }
    }

    #[test]
    fn polynomial_passes_all_checks() {
        let (g, tg) = setup();
        let q = make_polynomial_q(
            vec![
                (2, c2_bump(&g)),
                (3, Coefficient::Space(g.omega_field(|x| x.cos()))),
            ],
            0.5,
            3,
        )
        .unwrap();
        let r = check_assumptions(&q, &g, &tg, &z_lattice(0.5, 20)).unwrap();
        assert!(r.all_pass, "{r:?}");
        assert!(!r.sampled_estimates);
        assert!(r.phi_table.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn linear_term_fails_modulus_check() {
        let (g, tg) = setup();
        let q = ScalarQ {
            order: 2,
            delta: 0.5,
            derivs: vec![
                Box::new(|z| z),
                Box::new(|_| 1.0),
                Box::new(|_| 0.0),
                Box::new(|_| 0.0),
            ],
        };
        let r = check_assumptions(&q, &g, &tg, &z_lattice(0.5, 10)).unwrap();
        assert!(r.vanishes_at_zero.pass);
        assert!(!r.modulus_vanishes.pass);
        assert!(!r.all_pass);
    }

    #[test]
    fn sine_of_cube_has_finite_sampled_bounds() {
        let (g, tg) = setup();
        let q = ScalarQ {
            order: 2,
            delta: 0.8,
            derivs: vec![
                Box::new(|z: f64| (z.powi(3)).sin()),
                Box::new(|z: f64| 3.0 * z * z * (z.powi(3)).cos()),
                Box::new(|z: f64| {
                    6.0 * z * (z.powi(3)).cos() - 9.0 * z.powi(4) * (z.powi(3)).sin()
                }),
                Box::new(|z: f64| {
                    let c = z.powi(3).cos();
                    let s = z.powi(3).sin();
                    6.0 * c - 54.0 * z.powi(3) * s - 27.0 * z.powi(6) * c
                }),
            ],
        };
        let r = check_assumptions(&q, &g, &tg, &z_lattice(0.8, 40)).unwrap();
        assert!(r.vanishes_at_zero.pass && r.modulus_vanishes.pass);
        assert!(r.sampled_estimates);
        let m3 = r.derivative_bounds.iter().find(|d| d.k == 3).unwrap();
        assert!(m3.measured_sup.is_finite() && m3.measured_sup >= 6.0 - 1e-12);
    }

    #[test]
    fn spec_round_trip() {
        let (g, _) = setup();
        let spec = NonlinearitySpec {
            delta: 0.5,
            order: 3,
            terms: vec![
                TermSpec {
                    k: 2,
                    field: FieldSpec::Bump {
                        center: 0.0,
                        radius: 0.8,
                        amplitude: 1.0,
                    },
                },
                TermSpec {
                    k: 3,
                    field: FieldSpec::Constant { value: -0.5 },
                },
            ],
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back = NonlinearitySpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        let q = back.build(&g).unwrap();
        let mid = g.n_points / 2;
        assert!((q.eval(2, 0, mid, 0.0) - 1.0).abs() < 1e-12);
        assert_eq!(q.eval(3, 0, 0, 0.0), 0.0); // outside Ω
    }
}
