//! DN maps `f ↦ (-Δ)^s u |_{V_T}` and higher-order linearization: direct
//! solutions of the linearized hierarchy through set-partition sources, and
//! central mixed differences of the DN map in the input amplitudes.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{Equation, NonlinearSolution, PicardOptions, Propagator};
use crate::fracop::FracOperator;
use crate::grid::{IndexRange, SpaceTimeField, TimeGrid};
use crate::nonlinearity::Nonlinearity;
use crate::par;

/// Where a DN record came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DnProvenance {
    pub input_hash: Option<String>,
    pub model_hash: Option<String>,
    pub epsilon: Option<f64>,
    pub set: Option<Vec<usize>>,
}

/// `(-Δ)^s u` sampled on `V` at every time level, row-major `[t][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DNData {
    pub n_times: usize,
    pub v_set: IndexRange,
    pub spacing: f64,
    pub dt: f64,
    pub values: Vec<f64>,
    pub provenance: DnProvenance,
}

impl DNData {
    pub fn zeros(n_times: usize, v_set: IndexRange, spacing: f64, dt: f64) -> Self {
        Self {
            n_times,
            v_set,
            spacing,
            dt,
            values: vec![0.0; n_times * v_set.len()],
            provenance: DnProvenance::default(),
        }
    }

    pub fn n_cols(&self) -> usize {
        self.v_set.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let m = self.n_cols();
        &self.values[k * m..(k + 1) * m]
    }

    pub fn same_layout(&self, other: &DNData) -> bool {
        self.n_times == other.n_times && self.v_set == other.v_set
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &DNData) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn difference(&self, other: &DNData) -> Result<DNData> {
        let mut d = self.clone();
        d.axpy(-1.0, other)?;
        Ok(d)
    }

    /// Discrete `L²(V_T)` norm with trapezoid weights in time.
    pub fn l2(&self) -> f64 {
        let n = self.n_times;
        let mut acc = 0.0;
        for k in 0..n {
            let w = if k == 0 || k + 1 == n {
                0.5 * self.dt
            } else {
                self.dt
            };
            acc += w * self.spacing * self.row(k).iter().map(|v| v * v).sum::<f64>();
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Row `t` of the output is `(-Δ)^s u(t)` on `V`.
pub fn dn_map(u: &SpaceTimeField, op: &FracOperator, tg: &TimeGrid) -> Result<DNData> {
    let grid = &op.grid;
    u.check_shape(tg.n_times(), grid.n_points)?;
    let v = grid.v_set;
    let mut out = DNData::zeros(tg.n_times(), v, grid.spacing, tg.dt);
    let m = v.len();
    for k in 0..tg.n_times() {
        let row = u.row(k);
        if row.iter().all(|x| *x == 0.0) {
            continue;
        }
        let vals = op.apply_rows(row, v)?;
        out.values[k * m..(k + 1) * m].copy_from_slice(&vals);
    }
    Ok(out)
}

/// Forward model: operator, nonlinearity and equation type on fixed lattices.
#[derive(Clone)]
pub struct Model {
    pub prop: Propagator,
    pub q: Arc<dyn Nonlinearity>,
    pub picard: PicardOptions,
}

impl Model {
    /// Stencil solves need fixed-point residuals far below the difference
    /// quotients' truncation error, hence the tight default tolerance.
    pub fn new(
        op: &FracOperator,
        q: Arc<dyn Nonlinearity>,
        equation: Equation,
        tg: &TimeGrid,
    ) -> Result<Self> {
        Ok(Self {
            prop: Propagator::new(op, tg, equation)?,
            q,
            picard: PicardOptions {
                rel_tol: 1e-14,
                ..PicardOptions::default()
            },
        })
    }

    pub fn op(&self) -> &FracOperator {
        &self.prop.op
    }

    pub fn tg(&self) -> &TimeGrid {
        &self.prop.tg
    }

    pub fn equation(&self) -> Equation {
        self.prop.equation
    }

    pub fn solve(&self, f: &SpaceTimeField) -> Result<NonlinearSolution> {
        self.prop.solve_nonlinear(self.q.as_ref(), f, &self.picard)
    }
}

/// DN data of the nonlinear solution with exterior input `f`.
pub fn dn_of_input(model: &Model, f: &SpaceTimeField) -> Result<DNData> {
    let sol = model.solve(f)?;
    dn_map(&sol.u, model.op(), model.tg())
}

/// Free solution with exterior data `g`: the first linearization, which does
/// not involve `q` because `∂_z q(·,0) = 0`.
pub fn first_linearized(prop: &Propagator, g: &SpaceTimeField) -> Result<SpaceTimeField> {
    prop.solve_exterior(g)
}

/// All set partitions of `elements`, blocks in order of first element.
pub fn set_partitions(elements: &[usize]) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut current: Vec<Vec<usize>> = Vec::new();
    fn rec(
        elements: &[usize],
        idx: usize,
        current: &mut Vec<Vec<usize>>,
        out: &mut Vec<Vec<Vec<usize>>>,
    ) {
        if idx == elements.len() {
            out.push(current.clone());
            return;
        }
        let e = elements[idx];
        for b in 0..current.len() {
            current[b].push(e);
            rec(elements, idx + 1, current, out);
            current[b].pop();
        }
        current.push(vec![e]);
        rec(elements, idx + 1, current, out);
        current.pop();
    }
    if !elements.is_empty() {
        rec(elements, 0, &mut current, &mut out);
    }
    out
}

fn normalize_set(set: &[usize], n_inputs: usize) -> Result<Vec<usize>> {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() || s.len() != set.len() {
        return Err(Error::Param(format!(
            "index set {set:?} must be nonempty without repeats"
        )));
    }
    if let Some(bad) = s.iter().find(|i| **i >= n_inputs) {
        return Err(Error::Param(format!(
            "index {bad} out of range ({n_inputs} inputs)"
        )));
    }
    Ok(s)
}

/// Inputs `g_1..g_m` and the solutions `U_S` of the linearized hierarchy,
/// memoized by the sorted index set.
#[derive(Debug, Clone)]
pub struct LinearizedFamily {
    pub inputs: Vec<SpaceTimeField>,
    blocks: BTreeMap<Vec<usize>, SpaceTimeField>,
}

impl LinearizedFamily {
    /// Family with the first-order blocks `U_{i}` computed.
    pub fn new(prop: &Propagator, inputs: Vec<SpaceTimeField>) -> Result<Self> {
        let firsts = par::try_map_range(inputs.len(), |i| first_linearized(prop, &inputs[i]))?;
        let blocks = firsts
            .into_iter()
            .enumerate()
            .map(|(i, u)| (vec![i], u))
            .collect();
        Ok(Self { inputs, blocks })
    }

    /// `U_S`, if present. `U_∅` is identically zero and never stored.
    pub fn get(&self, set: &[usize]) -> Option<&SpaceTimeField> {
        let mut s = set.to_vec();
        s.sort_unstable();
        self.blocks.get(&s)
    }

    pub fn insert(&mut self, set: &[usize], u: SpaceTimeField) -> Result<()> {
        let s = normalize_set(set, self.inputs.len())?;
        self.blocks.insert(s, u);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Compute `U_S` and every missing lower block.
    pub fn ensure(
        &mut self,
        prop: &Propagator,
        q: &dyn Nonlinearity,
        set: &[usize],
    ) -> Result<&SpaceTimeField> {
        let s = normalize_set(set, self.inputs.len())?;
        if !self.blocks.contains_key(&s) {
            // Proper nonempty subsets, smallest first.
            let mut subsets: Vec<Vec<usize>> = (1..(1usize << s.len()) - 1)
                .map(|mask| {
                    (0..s.len())
                        .filter(|b| mask >> b & 1 == 1)
                        .map(|b| s[b])
                        .collect()
                })
                .collect();
            subsets.sort_by_key(|b: &Vec<usize>| b.len());
            for b in subsets {
                if b.len() >= 2 && !self.blocks.contains_key(&b) {
                    let u = linearized_solution(prop, q, &b, self)?;
                    self.blocks.insert(b, u);
                }
            }
            let u = linearized_solution(prop, q, &s, self)?;
            self.blocks.insert(s.clone(), u);
        }
        Ok(&self.blocks[&s])
    }
}

/// `Σ_π ∂_z^{|π|} q(·,0) Π_{B∈π} U_B` over set partitions `π` of `S` with at
/// least two blocks, evaluated on Ω (zero elsewhere).
pub fn partition_source(
    q: &dyn Nonlinearity,
    set: &[usize],
    family: &LinearizedFamily,
    omega: IndexRange,
) -> Result<SpaceTimeField> {
    let s = normalize_set(set, family.inputs.len())?;
    let template = family
        .get(&[s[0]])
        .ok_or_else(|| Error::MissingBlock(vec![s[0]]))?;
    let (n_times, n_points) = (template.n_times, template.n_points);
    let mut out = SpaceTimeField::zeros(n_times, n_points);
    for partition in set_partitions(&s) {
        if partition.len() < 2 {
            continue;
        }
        let blocks: Vec<&SpaceTimeField> = partition
            .iter()
            .map(|b| {
                let mut b = b.clone();
                b.sort_unstable();
                family.get(&b).ok_or(Error::MissingBlock(b))
            })
            .collect::<Result<_>>()?;
        let order = partition.len();
        for kt in 0..n_times {
            for i in omega.iter() {
                let coef = q.eval(order, kt, i, 0.0);
                if coef == 0.0 {
                    continue;
                }
                let prod: f64 = blocks.iter().map(|u| u.get(kt, i)).product();
                out.values[kt * n_points + i] += coef * prod;
            }
        }
    }
    out.support_mask = Some(omega);
    Ok(out)
}

/// `U_S` for `|S| ≥ 2`: zero exterior and initial data, source
/// `-partition_source(q, S)`; `|S| = 1` returns the stored first-order block.
pub fn linearized_solution(
    prop: &Propagator,
    q: &dyn Nonlinearity,
    set: &[usize],
    family: &LinearizedFamily,
) -> Result<SpaceTimeField> {
    let s = normalize_set(set, family.inputs.len())?;
    if s.len() == 1 {
        return family.get(&s).cloned().ok_or(Error::MissingBlock(s));
    }
    let src = partition_source(q, &s, family, prop.omega())?.scaled(-1.0);
    prop.solve_source(&src)
}

/// Central mixed difference of `measure` over the `2^p` sign stencil with
/// amplitudes `±ε/2`, divided by `ε^p`. `measure` receives one amplitude per
/// index; the `2^p` evaluations run concurrently and are reduced in a fixed
/// order.
pub fn mixed_difference<F>(measure: F, p: usize, eps: f64) -> Result<DNData>
where
    F: Fn(&[f64]) -> Result<DNData> + Sync + Send,
{
    if p == 0 || !(eps > 0.0) {
        return Err(Error::Stencil(format!(
            "need p ≥ 1 and ε > 0 (p = {p}, ε = {eps})"
        )));
    }
    let n = 1usize << p;
    let results = par::try_map_range(n, |mask| {
        let amps: Vec<f64> = (0..p)
            .map(|b| {
                if mask >> b & 1 == 1 {
                    -0.5 * eps
                } else {
                    0.5 * eps
                }
            })
            .collect();
        measure(&amps)
    })?;
    let mut acc = results[0].scaled(0.0);
    for (mask, d) in results.iter().enumerate() {
        let sign = if mask.count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        acc.axpy(sign, d)?;
    }
    let mut out = acc.scaled(eps.powi(-(p as i32)));
    out.provenance.epsilon = Some(eps);
    Ok(out)
}

/// Mixed difference of the model's DN map in the amplitudes of the inputs
/// indexed by `set`.
pub fn mixed_difference_dn(
    model: &Model,
    inputs: &[SpaceTimeField],
    set: &[usize],
    eps: f64,
) -> Result<DNData> {
    let s = normalize_set(set, inputs.len())?;
    let reach: f64 = s.iter().map(|&i| 0.5 * eps * inputs[i].sup_norm()).sum();
    let delta = model.q.delta();
    if reach > delta {
        return Err(Error::Stencil(format!(
            "stencil reaches sup {reach:.3e} > δ = {delta:.3e}; reduce ε"
        )));
    }
    let mut out = mixed_difference(
        |amps| {
            let mut f = SpaceTimeField::zeros(inputs[0].n_times, inputs[0].n_points);
            for (a, &i) in amps.iter().zip(&s) {
                f.axpy(*a, &inputs[i]);
            }
            f.support_mask = inputs[s[0]].support_mask;
            dn_of_input(model, &f)
        },
        s.len(),
        eps,
    )?;
    out.provenance.set = Some(s);
    Ok(out)
}

/// One Richardson step on the `O(ε²)` central stencil: `(4 D(ε/2) - D(ε)) / 3`.
pub fn mixed_difference_dn_richardson(
    model: &Model,
    inputs: &[SpaceTimeField],
    set: &[usize],
    eps: f64,
) -> Result<DNData> {
    let coarse = mixed_difference_dn(model, inputs, set, eps)?;
    let fine = mixed_difference_dn(model, inputs, set, 0.5 * eps)?;
    let mut out = fine.scaled(4.0 / 3.0);
    out.axpy(-1.0 / 3.0, &coarse)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bell(n: usize) -> usize {
        // Bell triangle.
        let mut row = vec![1usize];
        for _ in 1..n {
            let mut next = vec![*row.last().unwrap()];
            for v in &row {
                next.push(next.last().unwrap() + v);
            }
            row = next;
        }
        *row.last().unwrap()
    }

    #[test]
    fn partition_counts_match_bell_numbers() {
        for n in 1..=6 {
            let elems: Vec<usize> = (0..n).collect();
            let parts = set_partitions(&elems);
            assert_eq!(parts.len(), bell(n), "n = {n}");
            for p in &parts {
                let mut all: Vec<usize> = p.iter().flatten().copied().collect();
                all.sort_unstable();
                assert_eq!(all, elems);
            }
        }
    }

    #[test]
    fn stirling_counts_for_four() {
        let parts = set_partitions(&[0, 1, 2, 3]);
        let count = |k: usize| parts.iter().filter(|p| p.len() == k).count();
        assert_eq!((count(1), count(2), count(3), count(4)), (1, 7, 6, 1));
    }

    #[test]
    fn mixed_difference_of_bilinear_is_exact() {
        let v = IndexRange { start: 0, end: 1 };
        let d = mixed_difference(
            |a| {
                let mut out = DNData::zeros(1, v, 1.0, 1.0);
                out.values[0] = 3.0 * a[0] * a[1] + a[0] * a[0] - 2.0 * a[1];
                Ok(out)
            },
            2,
            0.1,
        )
        .unwrap();
        assert!((d.values[0] - 3.0).abs() < 1e-12);
    }
}
