//! Spatial lattice, time lattice, set geometry and exterior data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Open physical interval `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn radius(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.hi + self.lo)
    }

    /// Closures intersect (touching counts).
    fn closure_meets(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// Half-open range of lattice indices `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub start: usize,
    pub end: usize,
}

impl IndexRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Index gap between two disjoint ranges (0 if they overlap).
    fn gap(&self, other: &IndexRange) -> usize {
        if self.end <= other.start {
            other.start - (self.end - 1)
        } else if other.end <= self.start {
            self.start - (other.end - 1)
        } else {
            0
        }
    }
}

/// Uniform lattice `x_i = -L + i h` on `[-L, L]` with the sets Ω, W, V
/// snapped to index ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub box_halfwidth: f64,
    pub n_points: usize,
    pub spacing: f64,
    pub omega: IndexRange,
    pub w_set: IndexRange,
    pub v_set: IndexRange,
    pub omega_interval: Interval,
    pub w_interval: Interval,
    pub v_interval: Interval,
}

const MIN_POINTS: usize = 32;
const MIN_SET_POINTS: usize = 4;

impl Grid {
    /// Build a grid and snap the three open sets onto it.
    pub fn new(
        box_halfwidth: f64,
        n_points: usize,
        omega: Interval,
        w: Interval,
        v: Interval,
    ) -> Result<Self> {
        if !(box_halfwidth > 0.0) || !box_halfwidth.is_finite() {
            return Err(Error::Domain(format!(
                "box half-width must be positive, got {box_halfwidth}"
            )));
        }
        if n_points < MIN_POINTS {
            return Err(Error::Domain(format!(
                "need at least {MIN_POINTS} grid points, got {n_points}"
            )));
        }
        let l = box_halfwidth;
        for (name, iv) in [("omega", &omega), ("W", &w), ("V", &v)] {
            if !(iv.lo < iv.hi) {
                return Err(Error::Domain(format!(
                    "{name} = ({}, {}) is empty",
                    iv.lo, iv.hi
                )));
            }
            if iv.lo <= -l || iv.hi >= l {
                return Err(Error::Domain(format!(
                    "{name} = ({}, {}) is not strictly inside the box (-{l}, {l})",
                    iv.lo, iv.hi
                )));
            }
        }
        for (name, iv) in [("W", &w), ("V", &v)] {
            if iv.closure_meets(&omega) {
                return Err(Error::Overlap(format!(
                    "closure of {name} = ({}, {}) meets closure of omega = ({}, {})",
                    iv.lo, iv.hi, omega.lo, omega.hi
                )));
            }
        }
        let spacing = 2.0 * l / (n_points - 1) as f64;
        let snap = |name: &str, iv: &Interval| -> Result<IndexRange> {
            let tol = 1e-9 * spacing;
            let x = |i: usize| -l + i as f64 * spacing;
            let start = (0..n_points).find(|&i| x(i) > iv.lo + tol);
            let range = start.map(|s| {
                let end = (s..n_points)
                    .find(|&i| x(i) >= iv.hi - tol)
                    .unwrap_or(n_points);
                IndexRange { start: s, end }
            });
            match range {
                Some(r) if r.len() >= MIN_SET_POINTS => Ok(r),
                Some(r) => Err(Error::Domain(format!(
                    "{name} holds {} grid points, need at least {MIN_SET_POINTS}",
                    r.len()
                ))),
                None => Err(Error::Domain(format!("{name} holds no grid points"))),
            }
        };
        let omega_idx = snap("omega", &omega)?;
        let w_idx = snap("W", &w)?;
        let v_idx = snap("V", &v)?;
        for (name, r) in [("W", &w_idx), ("V", &v_idx)] {
            if r.gap(&omega_idx) < 2 {
                return Err(Error::Overlap(format!(
                    "{name} lies within 2h of omega on this lattice"
                )));
            }
        }
        Ok(Self {
            box_halfwidth: l,
            n_points,
            spacing,
            omega: omega_idx,
            w_set: w_idx,
            v_set: v_idx,
            omega_interval: omega,
            w_interval: w,
            v_interval: v,
        })
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        -self.box_halfwidth + i as f64 * self.spacing
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Grid whose box half-width, the smallest one not below `min_halfwidth`,
    /// puts the left end of Ω a fraction `theta ∈ [0, 1)` of a cell past the
    /// last lattice point outside Ω. For Ω symmetric about 0 the right end is
    /// placed the same way.
    pub fn fitted(
        min_halfwidth: f64,
        n_points: usize,
        omega: Interval,
        w: Interval,
        v: Interval,
        theta: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&theta) {
            return Err(Error::Domain(format!(
                "boundary offset must lie in [0, 1), got {theta}"
            )));
        }
        if n_points < MIN_POINTS {
            return Err(Error::Domain(format!(
                "need at least {MIN_POINTS} grid points, got {n_points}"
            )));
        }
        // (a + L) / h = m + θ with h = 2L / (N - 1) gives L = a (N-1) / (2(m+θ) - (N-1)).
        let a = omega.lo;
        let cells = (n_points - 1) as f64;
        let best = (0..n_points)
            .map(|m| a * cells / (2.0 * (m as f64 + theta) - cells))
            .filter(|l| l.is_finite() && *l >= min_halfwidth)
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::Domain(format!(
                "no box half-width ≥ {min_halfwidth} puts the end of omega at offset {theta}"
            )));
        }
        Grid::new(best, n_points, omega, w, v)
    }

    /// Fractional cell position of the left end of Ω past the last lattice
    /// point outside Ω, in `[0, 1)`.
    pub fn boundary_offset(&self) -> f64 {
        let p = (self.omega_interval.lo + self.box_halfwidth) / self.spacing;
        let f = p - p.floor();
        if f > 1.0 - 1e-9 {
            0.0
        } else {
            f
        }
    }

    /// Same geometry with `factor - 1` points inserted per cell.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Grid::new(
            self.box_halfwidth,
            (self.n_points - 1) * factor + 1,
            self.omega_interval,
            self.w_interval,
            self.v_interval,
        )
    }

    /// Field equal to `f(x)` on Ω and zero elsewhere.
    pub fn omega_field(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n_points)
            .map(|i| {
                if self.omega.contains(i) {
                    f(self.x(i))
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Discrete `L²` norm `sqrt(h Σ u²)` over the whole lattice.
    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        (self.spacing * u.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// Discrete `L²(Ω)` inner product.
    pub fn omega_dot(&self, u: &[f64], v: &[f64]) -> f64 {
        self.spacing * self.omega.iter().map(|i| u[i] * v[i]).sum::<f64>()
    }
}

/// Uniform time lattice `t_k = k dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!(
                "time horizon must be positive, got {horizon}"
            )));
        }
        if n_steps < 8 {
            return Err(Error::Domain(format!(
                "need at least 8 time steps, got {n_steps}"
            )));
        }
        Ok(Self {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn n_times(&self) -> usize {
        self.n_steps + 1
    }

    pub fn refined(&self, factor: usize) -> Result<Self> {
        TimeGrid::new(self.horizon, self.n_steps * factor)
    }

    /// Trapezoid weight of time level `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            0.5 * self.dt
        } else {
            self.dt
        }
    }
}

/// Row-major samples `values[t * n_points + i]` over the space-time lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    pub n_times: usize,
    pub n_points: usize,
    pub values: Vec<f64>,
    pub support_mask: Option<IndexRange>,
}

impl SpaceTimeField {
    pub fn zeros(n_times: usize, n_points: usize) -> Self {
        Self {
            n_times,
            n_points,
            values: vec![0.0; n_times * n_points],
            support_mask: None,
        }
    }

    pub fn zeros_like(grid: &Grid, tg: &TimeGrid) -> Self {
        Self::zeros(tg.n_times(), grid.n_points)
    }

    /// Time-independent field repeated over all levels.
    pub fn constant_in_time(n_times: usize, profile: &[f64]) -> Self {
        let mut out = Self::zeros(n_times, profile.len());
        for k in 0..n_times {
            out.row_mut(k).copy_from_slice(profile);
        }
        out
    }

    pub fn from_fn(grid: &Grid, tg: &TimeGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros_like(grid, tg);
        for k in 0..tg.n_times() {
            let t = tg.t(k);
            for (i, v) in out.row_mut(k).iter_mut().enumerate() {
                *v = f(t, grid.x(i));
            }
        }
        out
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_points..(k + 1) * self.n_points]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n_points..(k + 1) * self.n_points]
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.n_points + i]
    }

    pub fn same_shape(&self, other: &SpaceTimeField) -> bool {
        self.n_times == other.n_times && self.n_points == other.n_points
    }

    pub fn check_shape(&self, n_times: usize, n_points: usize) -> Result<()> {
        if self.n_points != n_points {
            return Err(Error::Shape {
                expected: n_points,
                got: self.n_points,
            });
        }
        if self.n_times != n_times {
            return Err(Error::Shape {
                expected: n_times,
                got: self.n_times,
            });
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &SpaceTimeField) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        if self.support_mask != other.support_mask {
            self.support_mask = None;
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup over a set of spatial indices and all times.
    pub fn sup_on(&self, set: IndexRange) -> f64 {
        let mut m: f64 = 0.0;
        for k in 0..self.n_times {
            for i in set.iter() {
                m = m.max(self.get(k, i).abs());
            }
        }
        m
    }

    pub fn max_abs_diff(&self, other: &SpaceTimeField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Whether all values off `set` vanish.
    pub fn vanishes_off(&self, set: IndexRange) -> bool {
        (0..self.n_times).all(|k| {
            self.row(k)
                .iter()
                .enumerate()
                .all(|(i, v)| set.contains(i) || *v == 0.0)
        })
    }

    /// Discrete `L²(A × (0,T))` norm with trapezoid weights in time.
    pub fn l2_on(&self, set: IndexRange, grid: &Grid, tg: &TimeGrid) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.n_times {
            let w = tg.weight(k) * grid.spacing;
            acc += w * set.iter().map(|i| self.get(k, i).powi(2)).sum::<f64>();
        }
        acc.sqrt()
    }

    /// Copy with every value off `set` zeroed.
    pub fn restricted_to(&self, set: IndexRange) -> Self {
        let mut out = self.clone();
        for k in 0..self.n_times {
            for (i, v) in out.row_mut(k).iter_mut().enumerate() {
                if !set.contains(i) {
                    *v = 0.0;
                }
            }
        }
        out.support_mask = Some(set);
        out
    }
}

/// Smooth compactly supported space-time bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub center: f64,
    pub radius: f64,
    pub t_on: f64,
    pub t_off: f64,
    pub amplitude: f64,
}

/// `exp(-1/(1-r²))` for `|r| < 1`, zero otherwise.
pub fn mollifier(r: f64) -> f64 {
    let r2 = r * r;
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

impl BumpSpec {
    /// Spatial factor at `x`.
    pub fn space_profile(&self, x: f64) -> f64 {
        mollifier((x - self.center) / self.radius)
    }

    /// Temporal factor at `t`; vanishes outside `(t_on, t_off)`.
    pub fn time_profile(&self, t: f64) -> f64 {
        if t <= self.t_on || t >= self.t_off {
            return 0.0;
        }
        let half = 0.5 * (self.t_off - self.t_on);
        (-(half * half) / ((t - self.t_on) * (self.t_off - t))).exp()
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.amplitude * self.space_profile(x) * self.time_profile(t)
    }

    pub fn check_support(&self, grid: &Grid, tg: &TimeGrid) -> Result<()> {
        let w = grid.w_interval;
        if !(self.radius > 0.0) {
            return Err(Error::Support(format!(
                "bump radius must be positive, got {}",
                self.radius
            )));
        }
        if self.center - self.radius < w.lo || self.center + self.radius > w.hi {
            return Err(Error::Support(format!(
                "bump [{}, {}] leaves W = ({}, {})",
                self.center - self.radius,
                self.center + self.radius,
                w.lo,
                w.hi
            )));
        }
        if !(0.0 < self.t_on && self.t_on < self.t_off && self.t_off < tg.horizon) {
            return Err(Error::Support(format!(
                "time window ({}, {}) must satisfy 0 < t_on < t_off < T = {}",
                self.t_on, self.t_off, tg.horizon
            )));
        }
        Ok(())
    }

    /// Sample on the lattice; the support mask is the W index range.
    pub fn sample(&self, grid: &Grid, tg: &TimeGrid) -> Result<SpaceTimeField> {
        self.check_support(grid, tg)?;
        let space: Vec<f64> = (0..grid.n_points)
            .map(|i| {
                if grid.w_set.contains(i) {
                    self.space_profile(grid.x(i))
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = SpaceTimeField::zeros_like(grid, tg);
        for k in 0..tg.n_times() {
            let a = self.amplitude * self.time_profile(tg.t(k));
            if a != 0.0 {
                for (v, s) in out.row_mut(k).iter_mut().zip(&space) {
                    *v = a * s;
                }
            }
        }
        out.support_mask = Some(grid.w_set);
        Ok(out)
    }
}

/// Build the exterior bump field (see [`BumpSpec`]).
pub fn make_bump(grid: &Grid, tg: &TimeGrid, spec: &BumpSpec) -> Result<SpaceTimeField> {
    spec.sample(grid, tg)
}

/// Linear combination of bumps, sampled on whatever lattice evaluates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExteriorInput {
    pub terms: Vec<(f64, BumpSpec)>,
}

impl ExteriorInput {
    pub fn single(spec: BumpSpec) -> Self {
        Self {
            terms: vec![(1.0, spec)],
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|(c, b)| (alpha * c, *b)).collect(),
        }
    }

    pub fn sample(&self, grid: &Grid, tg: &TimeGrid) -> Result<SpaceTimeField> {
        let mut out = SpaceTimeField::zeros_like(grid, tg);
        for (c, b) in &self.terms {
            let f = b.sample(grid, tg)?;
            out.axpy(*c, &f);
        }
        out.support_mask = Some(grid.w_set);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_grid() -> Grid {
        Grid::new(
            3.0,
            241,
            Interval::new(-1.0, 1.0),
            Interval::new(1.4, 2.0),
            Interval::new(-2.0, -1.4),
        )
        .unwrap()
    }

    #[test]
    fn standard_grid_is_valid() {
        let g = std_grid();
        assert!((g.spacing - 0.025).abs() < 1e-15);
        assert_eq!(g.omega.len(), 79);
        assert!(g.omega.gap(&g.w_set) >= 2 && g.omega.gap(&g.v_set) >= 2);
        assert!((g.x(g.omega.start) + 0.975).abs() < 1e-12);
    }

    #[test]
    fn w_touching_omega_is_rejected() {
        let err = Grid::new(
            3.0,
            241,
            Interval::new(-1.0, 1.0),
            Interval::new(0.9, 1.5),
            Interval::new(-2.0, -1.4),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "OverlapError");
    }

    #[test]
    fn w_equal_v_is_allowed() {
        let g = Grid::new(
            2.0,
            129,
            Interval::new(-0.5, 0.5),
            Interval::new(1.0, 1.5),
            Interval::new(1.0, 1.5),
        )
        .unwrap();
        assert_eq!(g.w_set, g.v_set);
    }

    #[test]
    fn sets_must_fit_and_be_resolved() {
        let outside = Grid::new(
            2.0,
            129,
            Interval::new(-0.5, 0.5),
            Interval::new(1.0, 2.5),
            Interval::new(-1.5, -1.0),
        );
        assert_eq!(outside.unwrap_err().kind(), "DomainError");
        let tiny = Grid::new(
            2.0,
            129,
            Interval::new(-0.5, 0.5),
            Interval::new(1.0, 1.05),
            Interval::new(-1.5, -1.0),
        );
        assert_eq!(tiny.unwrap_err().kind(), "DomainError");
        let coarse = Grid::new(
            2.0,
            16,
            Interval::new(-0.5, 0.5),
            Interval::new(1.0, 1.5),
            Interval::new(-1.5, -1.0),
        );
        assert_eq!(coarse.unwrap_err().kind(), "DomainError");
    }

    #[test]
    fn time_grid_invariants() {
        let tg = TimeGrid::new(1.0, 64).unwrap();
        assert_eq!(tg.dt, 1.0 / 64.0);
        assert!(TimeGrid::new(1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 64).is_err());
    }

    #[test]
    fn zero_amplitude_bump_is_zero() {
        let g = std_grid();
        let tg = TimeGrid::new(1.0, 32).unwrap();
        let spec = BumpSpec {
            center: 1.7,
            radius: 0.25,
            t_on: 0.1,
            t_off: 0.9,
            amplitude: 0.0,
        };
        let f = make_bump(&g, &tg, &spec).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bump_vanishes_at_t0_and_off_w() {
        let g = std_grid();
        let tg = TimeGrid::new(1.0, 32).unwrap();
        let spec = BumpSpec {
            center: 1.7,
            radius: 0.25,
            t_on: 0.1,
            t_off: 0.9,
            amplitude: 2.0,
        };
        let f = make_bump(&g, &tg, &spec).unwrap();
        assert!(f.row(0).iter().all(|&v| v == 0.0));
        assert!(f.vanishes_off(g.w_set));
        assert_eq!(f.support_mask, Some(g.w_set));
    }

    #[test]
    fn bump_peaks_at_center_and_midtime() {
        let g = std_grid();
        let tg = TimeGrid::new(1.0, 32).unwrap();
        let spec = BumpSpec {
            center: 1.7,
            radius: 0.25,
            t_on: 0.25,
            t_off: 0.75,
            amplitude: 1.0,
        };
        let f = make_bump(&g, &tg, &spec).unwrap();
        let (mut best, mut arg) = (f64::MIN, (0, 0));
        for k in 0..tg.n_times() {
            for i in 0..g.n_points {
                if f.get(k, i) > best {
                    best = f.get(k, i);
                    arg = (k, i);
                }
            }
        }
        assert_eq!(arg.0, 16);
        assert!((g.x(arg.1) - 1.7).abs() < 1e-12);
        assert!((best - (-2.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn bump_support_checked() {
        let g = std_grid();
        let tg = TimeGrid::new(1.0, 32).unwrap();
        let wide = BumpSpec {
            center: 1.7,
            radius: 0.5,
            t_on: 0.1,
            t_off: 0.9,
            amplitude: 1.0,
        };
        assert_eq!(
            make_bump(&g, &tg, &wide).unwrap_err().kind(),
            "SupportError"
        );
        let late = BumpSpec {
            center: 1.7,
            radius: 0.2,
            t_on: 0.1,
            t_off: 1.0,
            amplitude: 1.0,
        };
        assert_eq!(
            make_bump(&g, &tg, &late).unwrap_err().kind(),
            "SupportError"
        );
    }
}
