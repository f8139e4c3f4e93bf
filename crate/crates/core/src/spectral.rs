//! Fourier-side tools: the discrete `H^s` and exterior norms, and an
//! independent Fourier-multiplier evaluation of `(-Δ)^s` used as a reference
//! for the quadrature operator.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fracop::{normalization, FracOperator};
use crate::grid::{Grid, SpaceTimeField, TimeGrid};

fn forward_power_spectrum(u: &[f64], min_len: usize) -> Vec<f64> {
    let m = min_len.max(2 * u.len()).next_power_of_two();
    let mut buf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(m, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

fn angular_frequency(k: usize, m: usize, dx: f64) -> f64 {
    let kk = if k <= m / 2 {
        k as f64
    } else {
        k as f64 - m as f64
    };
    2.0 * std::f64::consts::PI * kk / (m as f64 * dx)
}

/// `sqrt(Σ_ξ (1+ξ²)^s |û(ξ)|² Δξ / 2π)`, the field extended by zero and
/// zero-padded to at least twice its length. At `s = 0` this is exactly
/// `sqrt(h Σ u²)` (Parseval).
pub fn hs_norm(u: &[f64], s: f64, grid: &Grid) -> f64 {
    let h = grid.spacing;
    let power = forward_power_spectrum(u, 64);
    let m = power.len();
    let acc: f64 = power
        .iter()
        .enumerate()
        .map(|(k, p)| (1.0 + angular_frequency(k, m, h).powi(2)).powf(s) * p)
        .sum();
    (h / m as f64 * acc).sqrt()
}

/// Exterior norm of `f` on `W_T`:
/// `sqrt( max_t max(hs_norm(f(t)), sup|f(t)|)² + ‖(-Δ)^s f‖²_{L²(Ω_T)} )`.
pub fn ext_norm(f: &SpaceTimeField, op: &FracOperator, tg: &TimeGrid) -> Result<f64> {
    let grid = &op.grid;
    f.check_shape(tg.n_times(), grid.n_points)?;
    if !f.vanishes_off(grid.w_set) {
        return Err(Error::Support("exterior data is nonzero off W".into()));
    }
    let mut first: f64 = 0.0;
    let mut second = 0.0;
    for k in 0..tg.n_times() {
        let row = f.row(k);
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let sup = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        first = first.max(hs_norm(row, op.s, grid).max(sup));
        let af = op.apply_rows(row, grid.omega)?;
        second += tg.weight(k) * grid.spacing * af.iter().map(|v| v * v).sum::<f64>();
    }
    Ok((first * first + second).sqrt())
}

/// Riemann zeta for real `q > 1` (Euler-Maclaurin, ~1e-15).
pub fn zeta(q: f64) -> f64 {
    const N: usize = 12;
    // B_{2j} / (2j)!
    const B: [f64; 6] = [
        1.0 / 12.0,
        -1.0 / 720.0,
        1.0 / 30240.0,
        -1.0 / 1209600.0,
        1.0 / 47900160.0,
        -691.0 / 1307674368000.0,
    ];
    let nf = N as f64;
    let mut acc: f64 = (1..N).map(|k| (k as f64).powf(-q)).sum();
    acc += nf.powf(1.0 - q) / (q - 1.0) + 0.5 * nf.powf(-q);
    let mut rising = q; // q (q+1) ... (q+2j-2)
    for (j, b) in B.iter().enumerate() {
        let order = 2 * j + 1;
        acc += b * rising * nf.powf(-q - order as f64);
        rising *= (q + order as f64) * (q + order as f64 + 1.0);
    }
    acc
}

/// Reference evaluation of `(-Δ)^s u` at the points of `grid` by the Fourier
/// multiplier `|ξ|^{2s}` on a fine periodic lattice of `n_fine` points.
///
/// `u` must vanish outside `[-L, L]`. The period is at least `8L`; the
/// contribution of the periodic images (which the FFT silently adds) is
/// removed with a multipole expansion of the far kernel, so the result is
/// the whole-line operator up to FFT resolution.
pub struct FourierReference {
    pub s: f64,
    pub n_fine: usize,
}

impl FourierReference {
    pub fn new(s: f64, n_fine: usize) -> Self {
        Self { s, n_fine }
    }

    /// Values of `(-Δ)^s u` at every grid point.
    pub fn apply(&self, u: impl Fn(f64) -> f64, grid: &Grid) -> Vec<f64> {
        let s = self.s;
        let l = grid.box_halfwidth;
        let m = self.n_fine;
        let mut refine = 1usize;
        while (m as f64) * grid.spacing / (2 * refine) as f64 >= 8.0 * l {
            refine *= 2;
        }
        let dx = grid.spacing / refine as f64;
        let period = m as f64 * dx;
        assert!(
            period >= 8.0 * l - 1e-9,
            "fine lattice too short for the box"
        );

        let samples: Vec<f64> = (0..m)
            .map(|k| {
                let y = -l + k as f64 * dx;
                if y <= l + 1e-12 {
                    u(y)
                } else {
                    0.0
                }
            })
            .collect();
        let mut buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(m).process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            *c *= angular_frequency(k, m, dx).abs().powf(2.0 * s) / m as f64;
        }
        planner.plan_fft_inverse(m).process(&mut buf);

        // Image correction: Σ_{m≠0} ∫ u(y) |x-y-mP|^{-p} dy with p = 1+2s,
        // expanded in even powers of (x-y)/P.
        const ORDER: usize = 16;
        let p = 1.0 + 2.0 * s;
        let moments: Vec<f64> = (0..=ORDER)
            .map(|j| {
                dx * samples
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * (-l + k as f64 * dx).powi(j as i32))
                    .sum::<f64>()
            })
            .collect();
        let c = normalization(s);
        let mut coef = [0.0; ORDER + 1];
        let mut rising_over_fact = 1.0; // (p)_j / j!
        for (j, cj) in coef.iter_mut().enumerate() {
            if j > 0 {
                rising_over_fact *= (p + j as f64 - 1.0) / j as f64;
            }
            if j % 2 == 0 {
                *cj = 2.0 * c * period.powf(-p - j as f64) * rising_over_fact * zeta(p + j as f64);
            }
        }
        let binom = |n: usize, k: usize| -> f64 {
            (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        };

        (0..grid.n_points)
            .map(|i| {
                let x = grid.x(i);
                let mut images = 0.0;
                for j in (0..=ORDER).step_by(2) {
                    // ∫ u(y) (x-y)^j dy
                    let mj: f64 = (0..=j)
                        .map(|q| {
                            let sign = if q % 2 == 0 { 1.0 } else { -1.0 };
                            binom(j, q) * x.powi((j - q) as i32) * sign * moments[q]
                        })
                        .sum();
                    images += coef[j] * mj;
                }
                buf[i * refine].re + images
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BumpSpec, Interval};
    use statrs::function::gamma::gamma;

    fn grid(l: f64, n: usize) -> Grid {
        Grid::new(
            l,
            n,
            Interval::new(-1.0, 1.0),
            Interval::new(1.4, 2.0),
            Interval::new(-2.0, -1.4),
        )
        .unwrap()
    }

    #[test]
    fn zeta_known_values() {
        let pi = std::f64::consts::PI;
        assert!((zeta(2.0) - pi * pi / 6.0).abs() < 1e-14);
        assert!((zeta(4.0) - pi.powi(4) / 90.0).abs() < 1e-14);
        assert!((zeta(1.5) - 2.612_375_348_685_488).abs() < 1e-13);
    }

    #[test]
    fn hs_norm_at_zero_order_is_l2() {
        let g = grid(3.0, 241);
        let u: Vec<f64> = g
            .points()
            .iter()
            .map(|x| (-(x * x)).exp() * x.cos())
            .collect();
        assert!((hs_norm(&u, 0.0, &g) - g.l2_norm(&u)).abs() < 1e-12);
        assert_eq!(hs_norm(&vec![0.0; 241], 0.5, &g), 0.0);
        assert!(hs_norm(&u, 0.6, &g) >= g.l2_norm(&u));
    }

    #[test]
    fn hs_norm_of_oscillation_grows_with_order() {
        let g = grid(3.0, 241);
        let u: Vec<f64> = g
            .points()
            .iter()
            .map(|x| (-(x * x)).exp() * (6.0 * x).sin())
            .collect();
        assert!(hs_norm(&u, 0.75, &g) > hs_norm(&u, 0.25, &g));
    }

    fn hyp1f1(a: f64, b: f64, z: f64) -> f64 {
        let (mut term, mut acc) = (1.0, 1.0);
        for n in 0..200 {
            let nf = n as f64;
            term *= (a + nf) / (b + nf) * z / (nf + 1.0);
            acc += term;
            if term.abs() < 1e-17 * acc.abs() {
                break;
            }
        }
        acc
    }

    #[test]
    fn reference_matches_gaussian_closed_form() {
        // (-Δ)^s e^{-x²} = 4^s Γ(1/2+s)/√π ₁F₁(1/2+s; 1/2; -x²).
        let g = grid(10.0, 1024);
        for s in [0.3, 0.5, 0.75, 0.9] {
            let r = FourierReference::new(s, 1 << 16).apply(|x| (-(x * x)).exp(), &g);
            let mid = g.n_points / 2;
            let x = g.x(mid);
            let exact = 4f64.powf(s) * gamma(0.5 + s) / std::f64::consts::PI.sqrt()
                * hyp1f1(0.5 + s, 0.5, -x * x);
            assert!(
                (r[mid] - exact).abs() < 1e-6 * exact,
                "s={s}: {} vs {exact}",
                r[mid]
            );
        }
    }

    #[test]
    fn ext_norm_basic_properties() {
        let g = grid(3.0, 241);
        let tg = TimeGrid::new(1.0, 32).unwrap();
        let op = FracOperator::assemble(&g, 0.5).unwrap();
        let spec = BumpSpec {
            center: 1.7,
            radius: 0.25,
            t_on: 0.1,
            t_off: 0.9,
            amplitude: 1.0,
        };
        let f = spec.sample(&g, &tg).unwrap();
        let n1 = ext_norm(&f, &op, &tg).unwrap();
        let n2 = ext_norm(&f.scaled(-3.0), &op, &tg).unwrap();
        assert!(n1 > 0.0);
        assert!((n2 - 3.0 * n1).abs() < 1e-12 * n2);
        assert_eq!(
            ext_norm(&SpaceTimeField::zeros_like(&g, &tg), &op, &tg).unwrap(),
            0.0
        );
        let mut bad = f.clone();
        bad.values[120] = 1.0;
        assert_eq!(ext_norm(&bad, &op, &tg).unwrap_err().kind(), "SupportError");
    }
}
