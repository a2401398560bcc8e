//! Lyapunov-type stability of rough equations: the dissipativity hypothesis
//! `⟨v, b(v)⟩ ≤ C₁ - C₂‖v‖²`, the one-period bound
//! `‖y₁‖² ≤ e^{-C₂/2}‖y₀‖² + C(1 + ‖x‖_γ^μ)` with `μ = 8/(3γ-1)`, and the
//! block recursion for `z = ½‖y‖²`.
//!
//! The theory only asserts that the constants exist. They are fitted here on
//! calibration drivers and then checked on fresh ones.

use crate::grid::{fmt17, GridError, IndexRange, TimeGrid};
use crate::grid::GridPath;
use crate::rde::{davie_solve, RdeError, VectorFieldPair};
use crate::roughpath::{rough_norm, RoughPath, RoughPathError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error(transparent)]
    Rde(#[from] RdeError),
    #[error(transparent)]
    RoughPath(#[from] RoughPathError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("γ = {0} must lie in (1/3, 1/2)")]
    Gamma(f64),
    #[error("block length {tau} exceeds T₁ = {t1}")]
    TauTooLarge { tau: f64, t1: f64 },
    #[error("block length {0} is not a positive multiple of the grid step")]
    TauOffGrid(f64),
    #[error("calibration failed: {0}")]
    Calibration(String),
}

fn check_gamma(gamma: f64) -> Result<(), LyapunovError> {
    if gamma > 1.0 / 3.0 && gamma < 0.5 {
        Ok(())
    } else {
        Err(LyapunovError::Gamma(gamma))
    }
}

/// `μ = 8/(3γ-1)`.
pub fn lyapunov_exponent(gamma: f64) -> f64 {
    8.0 / (3.0 * gamma - 1.0)
}

/// Constants of the dissipativity hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H2Constants {
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct H2Report {
    /// `max ⟨v, b(v)⟩ - C₁ + C₂‖v‖²` over the probes.
    pub max_violation: f64,
    pub worst_point: Vec<f64>,
    pub pass: bool,
}

/// Probes `⟨v, b(v)⟩ ≤ C₁ - C₂‖v‖²` on the grid with `points` nodes per axis
/// of the box `[-radius, radius]^n`.
pub fn check_h2(vf: &VectorFieldPair, radius: f64, points: usize, h2: H2Constants) -> H2Report {
    let n = vf.state_dim;
    let points = points.max(2);
    let total = points.pow(n as u32);
    let mut v = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut worst = (f64::NEG_INFINITY, vec![0.0; n]);
    let mut scale: f64 = 1.0;
    for idx in 0..total {
        let mut r = idx;
        for c in v.iter_mut() {
            *c = -radius + 2.0 * radius * (r % points) as f64 / (points - 1) as f64;
            r /= points;
        }
        vf.drift(&v, &mut b);
        let vb: f64 = v.iter().zip(&b).map(|(x, y)| x * y).sum();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let viol = vb - h2.c1 + h2.c2 * vv;
        scale = scale.max(vb.abs()).max(h2.c2 * vv);
        if viol > worst.0 {
            worst = (viol, v.clone());
        }
    }
    H2Report { max_violation: worst.0, worst_point: worst.1, pass: worst.0 <= 1e-12 * scale }
}

/// One evaluation of the one-period inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    pub y0_norm2: f64,
    pub y1_norm2: f64,
    /// `‖x‖_γ` on `[0, 1]`.
    pub driver_norm: f64,
    pub mu: f64,
    pub c: f64,
    /// `‖y₁‖² - e^{-C₂/2}‖y₀‖² - C(1 + ‖x‖_γ^μ)`.
    pub residual: f64,
    /// `z = ½‖y‖²` at every grid point.
    pub z: Vec<f64>,
}

impl LyapunovReport {
    pub fn holds(&self) -> bool {
        self.residual <= 0.0
    }

    fn with_constant(mut self, c: f64, c2: f64) -> Self {
        self.c = c;
        self.residual = lyapunov_residual(self.y0_norm2, self.y1_norm2, self.driver_norm, self.mu, c, c2);
        self
    }
}

fn lyapunov_residual(y0: f64, y1: f64, norm: f64, mu: f64, c: f64, c2: f64) -> f64 {
    // ‖x‖^μ overflows for large norms; the bound then holds trivially.
    let growth = 1.0 + norm.powf(mu);
    let bound = if growth.is_finite() && c > 0.0 { c * growth } else if c > 0.0 { f64::INFINITY } else { 0.0 };
    y1 - (-c2 / 2.0).exp() * y0 - bound
}

fn unit_range(x: &RoughPath) -> IndexRange {
    IndexRange::new(0, x.grid().steps())
}

/// Davie solution over the window of `x` (normally `[0, 1]`) and the
/// one-period inequality with constant `c`.
pub fn lyapunov_check(
    vf: &VectorFieldPair,
    x: &RoughPath,
    y0: &[f64],
    gamma: f64,
    h2: H2Constants,
    c: f64,
) -> Result<LyapunovReport, LyapunovError> {
    check_gamma(gamma)?;
    let y = davie_solve(vf, x, y0)?;
    let driver_norm = rough_norm(x, gamma, unit_range(x))?;
    let z: Vec<f64> = (0..y.len()).map(|i| 0.5 * y.value(i).iter().map(|v| v * v).sum::<f64>()).collect();
    let y0_norm2 = 2.0 * z[0];
    let y1_norm2 = 2.0 * z[z.len() - 1];
    let mu = lyapunov_exponent(gamma);
    let residual = lyapunov_residual(y0_norm2, y1_norm2, driver_norm, mu, c, h2.c2);
    Ok(LyapunovReport { y0_norm2, y1_norm2, driver_norm, mu, c, residual, z })
}

/// Result of fitting `C` on calibration reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovFit {
    pub c: f64,
    /// Envelope `‖y₁‖² - e^{-C₂/2}‖y₀‖² ≤ A(1 + ‖x‖^p)` fitted on the sample.
    pub envelope_a: f64,
    pub envelope_p: f64,
    pub mu: f64,
}

/// Two-stage fit. First the calibration excesses are enveloped by
/// `A(1 + ‖x‖^p)` with the rough-path growth exponent `p = 2/γ`; then `C` is
/// the smallest constant with `A(1 + r^p) ≤ C(1 + r^μ)` for all `r ≥ 0`, so
/// drivers whose norm was not seen during calibration are covered as well.
pub fn fit_lyapunov_constant(reports: &[LyapunovReport], gamma: f64, h2: H2Constants) -> Result<LyapunovFit, LyapunovError> {
    check_gamma(gamma)?;
    if reports.is_empty() {
        return Err(LyapunovError::Calibration("no calibration reports".into()));
    }
    let p = 2.0 / gamma;
    let mu = lyapunov_exponent(gamma);
    let a = reports
        .iter()
        .map(|r| (r.y1_norm2 - (-h2.c2 / 2.0).exp() * r.y0_norm2).max(0.0) / (1.0 + r.driver_norm.powf(p)))
        .fold(0.0, f64::max);
    // (1 + r^p)/(1 + r^μ) is at most 2 and decays fast beyond r = 1.
    let ratio_sup = (0..=20_000)
        .map(|i| {
            let r = i as f64 * 1e-4 * 2.0;
            (1.0 + r.powf(p)) / (1.0 + r.powf(mu))
        })
        .fold(0.0, f64::max);
    Ok(LyapunovFit { c: a * ratio_sup, envelope_a: a, envelope_p: p, mu })
}

/// Re-evaluates reports with a new constant.
pub fn revalidate(reports: &[LyapunovReport], c: f64, h2: H2Constants) -> Vec<LyapunovReport> {
    reports.iter().cloned().map(|r| r.with_constant(c, h2.c2)).collect()
}

/// `seed,norm_x,y0sq,y1sq,residual`.
pub fn reports_csv(seeds: &[u64], reports: &[LyapunovReport]) -> String {
    let mut s = String::from("seed,norm_x,y0sq,y1sq,residual\n");
    for (seed, r) in seeds.iter().zip(reports) {
        s.push_str(&format!(
            "{seed},{},{},{},{}\n",
            fmt17(r.driver_norm),
            fmt17(r.y0_norm2),
            fmt17(r.y1_norm2),
            fmt17(r.residual)
        ));
    }
    s
}

/// Constants of the local remainder bound (`c₀`), of the one-step bound
/// before absorption (`c₄`) and of the block recursion (`c₅`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConstants {
    pub c0: f64,
    pub c4: f64,
    pub c5: f64,
}

/// `κ = ½(1/3 + γ)`.
pub fn kappa(gamma: f64) -> f64 {
    0.5 * (1.0 / 3.0 + gamma)
}

/// `T₀ = min(1, (c₀(1 + ‖x‖))^{-1/(γ-κ)})`.
pub fn t0(c0: f64, norm: f64, gamma: f64) -> f64 {
    let base = c0 * (1.0 + norm);
    if base <= 0.0 {
        return 1.0;
    }
    base.powf(-1.0 / (gamma - kappa(gamma))).min(1.0)
}

/// `T₁ = min(T₀, 2/C₂, (c₄(1 + ‖x‖³))^{-1/(3γ-1)})`.
pub fn t1(consts: &BlockConstants, norm: f64, gamma: f64, c2: f64) -> f64 {
    let third = if consts.c4 > 0.0 {
        (consts.c4 * (1.0 + norm.powi(3))).powf(-1.0 / (3.0 * gamma - 1.0))
    } else {
        f64::INFINITY
    };
    t0(consts.c0, norm, gamma).min(2.0 / c2).min(third)
}

/// Largest power-of-two multiple of the grid step not exceeding `limit`.
pub fn dyadic_block(grid: &TimeGrid, limit: f64) -> Option<f64> {
    let dt = grid.dt();
    if limit < dt * (1.0 - 1e-12) {
        return None;
    }
    let mut tau = dt;
    while 2.0 * tau <= limit * (1.0 + 1e-12) && 2.0 * tau <= grid.span() {
        tau *= 2.0;
    }
    Some(tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub tau: f64,
    pub t0: f64,
    pub t1: f64,
    pub driver_norm: f64,
    /// `z` at the block ends `kτ ∧ 1`, starting with `z_0`.
    pub z_blocks: Vec<f64>,
    /// `z_{k+1} - (1 - C₂τ/2) z_k - c₅(1 + ‖x‖²) τ^{2γ-1}` per block.
    pub residuals: Vec<f64>,
}

impl BlockReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn block_ends(grid: &TimeGrid, tau: f64) -> Result<Vec<usize>, LyapunovError> {
    let m = tau / grid.dt();
    if !(m >= 1.0 - 1e-9) || (m - m.round()).abs() > 1e-9 {
        return Err(LyapunovError::TauOffGrid(tau));
    }
    let m = m.round() as usize;
    let mut ends: Vec<usize> = (0..).map(|k| k * m).take_while(|i| *i < grid.steps()).collect();
    ends.push(grid.steps());
    Ok(ends)
}

fn z_of(y: &GridPath, i: usize) -> f64 {
    0.5 * y.value(i).iter().map(|v| v * v).sum::<f64>()
}

/// Block recursion on `[0, 1]` with block length `tau`; rejects `tau > T₁`.
pub fn block_recursion_check(
    vf: &VectorFieldPair,
    x: &RoughPath,
    y0: &[f64],
    tau: f64,
    gamma: f64,
    h2: H2Constants,
    consts: &BlockConstants,
) -> Result<BlockReport, LyapunovError> {
    check_gamma(gamma)?;
    let norm = rough_norm(x, gamma, unit_range(x))?;
    let (t0v, t1v) = (t0(consts.c0, norm, gamma), t1(consts, norm, gamma, h2.c2));
    if tau > t1v * (1.0 + 1e-12) {
        return Err(LyapunovError::TauTooLarge { tau, t1: t1v });
    }
    let ends = block_ends(x.grid(), tau)?;
    let y = davie_solve(vf, x, y0)?;
    let z_blocks: Vec<f64> = ends.iter().map(|i| z_of(&y, *i)).collect();
    let slack = consts.c5 * (1.0 + norm * norm) * tau.powf(2.0 * gamma - 1.0);
    let residuals = z_blocks.windows(2).map(|w| w[1] - (1.0 - h2.c2 * tau / 2.0) * w[0] - slack).collect();
    Ok(BlockReport { tau, t0: t0v, t1: t1v, driver_norm: norm, z_blocks, residuals })
}

/// `N[R; C^{3κ}]` on `[lo, hi]` for `R_st = δy - b(y_s)δt - σ(y_s)δx - (Dσ·σ)(y_s)x²`,
/// with the areas accumulated along each row by Chen's relation.
fn block_remainder_norm(y: &GridPath, x: &RoughPath, vf: &VectorFieldPair, gamma: f64, lo: usize, hi: usize) -> f64 {
    let (n, d) = (vf.state_dim, vf.noise_dim);
    let dt = x.grid().dt();
    let mu = 3.0 * kappa(gamma);
    let (mut b, mut s, mut so) = (vec![0.0; n], vec![0.0; n * d], vec![0.0; n * d * d]);
    let (mut inc, mut area, mut r) = (vec![0.0; d], vec![0.0; d * d], vec![0.0; n]);
    let mut worst: f64 = 0.0;
    for si in lo..hi {
        let ys = y.value(si);
        vf.drift(ys, &mut b);
        vf.diffusion(ys, &mut s);
        vf.second_order(ys, &mut so);
        inc.iter_mut().for_each(|v| *v = 0.0);
        area.iter_mut().for_each(|v| *v = 0.0);
        for ti in si + 1..=hi {
            let (xa, xb) = (x.path().value(ti - 1), x.path().value(ti));
            let cell = x.cell_area(ti - 1);
            for p in 0..d {
                for q in 0..d {
                    area[p * d + q] += cell[p * d + q] + inc[p] * (xb[q] - xa[q]);
                }
            }
            for p in 0..d {
                inc[p] += xb[p] - xa[p];
            }
            let delta = (ti - si) as f64 * dt;
            let yt = y.value(ti);
            for p in 0..n {
                let mut v = yt[p] - ys[p] - b[p] * delta;
                for j in 0..d {
                    v -= s[p * d + j] * inc[j];
                    for k in 0..d {
                        v -= so[(p * d + j) * d + k] * area[k * d + j];
                    }
                }
                r[p] = v;
            }
            worst = worst.max(crate::grid::norm(&r) / delta.powf(mu));
        }
    }
    worst
}

/// Per-driver statistics used to fit [`BlockConstants`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCalibration {
    pub driver_norm: f64,
    pub taus: Vec<f64>,
    /// `max_k N[R; C^{3κ}(block k)] / (1 + ‖y_{kτ}‖)` for each τ.
    pub remainder_ratio: Vec<f64>,
    /// Smallest `c₄` making the one-step bound hold on all blocks, per τ.
    pub c4_needed: Vec<f64>,
    /// `max_k [z_{k+1} - (1 - C₂τ/2) z_k] / ((1 + ‖x‖²) τ^{2γ-1})`, per τ.
    pub c5_needed: Vec<f64>,
}

/// Measures the calibration statistics of one driver for all dyadic block
/// lengths up to `max_tau`.
pub fn block_calibration(
    vf: &VectorFieldPair,
    x: &RoughPath,
    y0: &[f64],
    gamma: f64,
    h2: H2Constants,
    max_tau: f64,
) -> Result<BlockCalibration, LyapunovError> {
    check_gamma(gamma)?;
    let grid = *x.grid();
    let norm = rough_norm(x, gamma, unit_range(x))?;
    let y = davie_solve(vf, x, y0)?;
    let mut taus = Vec::new();
    let mut tau = grid.dt();
    while tau <= max_tau.min(1.0) * (1.0 + 1e-12) {
        taus.push(tau);
        tau *= 2.0;
    }
    let (mut rr, mut c4, mut c5) = (Vec::new(), Vec::new(), Vec::new());
    for &tau in &taus {
        let ends = block_ends(&grid, tau)?;
        let (mut r_worst, mut c4_worst, mut c5_worst) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
        for w in ends.windows(2) {
            let ys = crate::grid::norm(y.value(w[0]));
            if w[1] - w[0] >= 2 {
                r_worst = r_worst.max(block_remainder_norm(&y, x, vf, gamma, w[0], w[1]) / (1.0 + ys));
            }
            let (zk, zn) = (z_of(&y, w[0]), z_of(&y, w[1]));
            let excess = zn - (1.0 - h2.c2 * tau) * zk - h2.c1 * tau;
            let bracket = norm * tau.powf(gamma) * (1.0 + zk.sqrt())
                + h2.c2 / 4.0 * tau.powf(3.0 * gamma) * (1.0 + norm.powi(3)) * (1.0 + zk);
            if excess > 0.0 {
                c4_worst = c4_worst.max(excess / bracket);
            }
            let lhs = zn - (1.0 - h2.c2 * tau / 2.0) * zk;
            c5_worst = c5_worst.max(lhs / ((1.0 + norm * norm) * tau.powf(2.0 * gamma - 1.0)));
        }
        rr.push(r_worst);
        c4.push(c4_worst);
        c5.push(c5_worst.max(0.0));
    }
    Ok(BlockCalibration { driver_norm: norm, taus, remainder_ratio: rr, c4_needed: c4, c5_needed: c5 })
}

fn needed_at(cal: &BlockCalibration, limit: f64, values: &[f64]) -> Option<f64> {
    cal.taus.iter().rposition(|t| *t <= limit * (1.0 + 1e-12)).map(|i| values[i])
}

/// Smallest positive `c` (on a log scale) such that `ok(c)` holds.
fn smallest_passing(ok: impl Fn(f64) -> bool) -> Option<f64> {
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    if !ok(hi.exp()) {
        return None;
    }
    if ok(lo.exp()) {
        return Some(lo.exp());
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ok(mid.exp()) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi.exp())
}

/// Fits `c₀`, `c₄` as the smallest constants for which the remainder and
/// one-step bounds hold at the largest admissible dyadic block of every
/// calibration driver, then `c₅` as `safety` times the largest recursion
/// excess at that block length.
pub fn fit_block_constants(
    cals: &[BlockCalibration],
    gamma: f64,
    h2: H2Constants,
    safety: f64,
) -> Result<BlockConstants, LyapunovError> {
    check_gamma(gamma)?;
    if cals.is_empty() {
        return Err(LyapunovError::Calibration("no calibration drivers".into()));
    }
    let c0 = smallest_passing(|c0| {
        cals.iter().all(|cal| needed_at(cal, t0(c0, cal.driver_norm, gamma), &cal.remainder_ratio).map_or(true, |r| r <= c0))
    })
    .ok_or_else(|| LyapunovError::Calibration("no c0 satisfies the remainder bound".into()))?;
    let c4 = smallest_passing(|c4| {
        let k = BlockConstants { c0, c4, c5: 0.0 };
        cals.iter().all(|cal| needed_at(cal, t1(&k, cal.driver_norm, gamma, h2.c2), &cal.c4_needed).map_or(true, |r| r <= c4))
    })
    .ok_or_else(|| LyapunovError::Calibration("no c4 satisfies the one-step bound".into()))?;
    let partial = BlockConstants { c0, c4, c5: 0.0 };
    let c5 = cals
        .iter()
        .filter_map(|cal| needed_at(cal, t1(&partial, cal.driver_norm, gamma, h2.c2), &cal.c5_needed))
        .fold(0.0, f64::max);
    Ok(BlockConstants { c0, c4, c5: safety * c5 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_driver(level: u32) -> RoughPath {
        RoughPath::linear_cells(GridPath::zeros(TimeGrid::unit(level), 1))
    }

    fn decay() -> VectorFieldPair {
        VectorFieldPair::linear_drift(1, 1, vec![-1.0])
    }

    #[test]
    fn h2_examples() {
        let exact = check_h2(&decay(), 5.0, 101, H2Constants { c1: 0.0, c2: 1.0 });
        assert!(exact.pass);
        assert!(exact.max_violation.abs() < 1e-12);
        // b = 1 - v: v - v² + v²/2 peaks at 1/2.
        let shifted = VectorFieldPair::scalar(|v| 1.0 - v, |_| -1.0, |_| 0.0, |_| 0.0, |_| 0.0);
        assert!(check_h2(&shifted, 5.0, 1001, H2Constants { c1: 1.0, c2: 0.5 }).pass);
        assert!(check_h2(&shifted, 5.0, 1001, H2Constants { c1: 0.5, c2: 0.5 }).pass);
        assert!(!check_h2(&shifted, 5.0, 1001, H2Constants { c1: 0.49, c2: 0.5 }).pass);
        let anti = VectorFieldPair::linear_drift(1, 1, vec![1.0]);
        for (c1, c2) in [(0.0, 0.0), (10.0, 0.1), (100.0, 1.0)] {
            assert!(!check_h2(&anti, 100.0, 201, H2Constants { c1, c2 }).pass);
        }
        assert!(check_h2(&VectorFieldPair::dissipative_sine(), 50.0, 2001, H2Constants { c1: 0.0, c2: 1.0 }).pass);
    }

    #[test]
    fn zero_noise_decay_and_scaling() {
        let x = zero_driver(10);
        let h2 = H2Constants { c1: 0.0, c2: 1.0 };
        let r = lyapunov_check(&decay(), &x, &[3.0], 0.35, h2, 0.0).unwrap();
        assert!((r.y1_norm2 - 9.0 * (-2.0f64).exp()).abs() < 1e-2);
        assert!(r.holds());
        assert_eq!(r.driver_norm, 0.0);
        let r2 = lyapunov_check(&decay(), &x, &[6.0], 0.35, h2, 0.0).unwrap();
        assert!((r2.y1_norm2 - 4.0 * r.y1_norm2).abs() < 1e-12 * r2.y1_norm2);
    }

    #[test]
    fn t_formulas() {
        assert_eq!(t0(0.0, 5.0, 0.4), 1.0);
        assert_eq!(t0(0.5, 0.0, 0.4), 1.0);
        let g = 0.4;
        let want = (2.0f64 * 3.0).powf(-1.0 / (g - kappa(g)));
        assert!((t0(2.0, 2.0, g) - want).abs() < 1e-15);
        let k = BlockConstants { c0: 0.1, c4: 0.5, c5: 1.0 };
        assert_eq!(t1(&k, 0.0, 0.4, 4.0), 0.5);
        assert!(t1(&k, 3.0, 0.4, 1.0) < t1(&k, 1.0, 0.4, 1.0));
        assert_eq!(dyadic_block(&TimeGrid::unit(8), 0.3), Some(0.25));
        assert_eq!(dyadic_block(&TimeGrid::unit(8), 1e-3), None);
    }

    #[test]
    fn block_recursion_deterministic_cases() {
        let x = zero_driver(8);
        let h2 = H2Constants { c1: 0.0, c2: 1.0 };
        let k = BlockConstants { c0: 1.0, c4: 1.0, c5: 0.0 };
        for tau in [1.0 / 256.0, 1.0 / 16.0, 0.5, 1.0] {
            let rep = block_recursion_check(&decay(), &x, &[2.0], tau, 0.4, h2, &k).unwrap();
            assert!(rep.max_residual() <= 0.0, "tau {tau}: {:?}", rep.residuals);
        }
        let k5 = BlockConstants { c5: 0.7, ..k };
        let rep = block_recursion_check(&decay(), &x, &[0.0], 0.125, 0.4, h2, &k5).unwrap();
        let want = -0.7 * 0.125f64.powf(2.0 * 0.4 - 1.0);
        assert!(rep.z_blocks.iter().all(|z| *z == 0.0));
        assert!(rep.residuals.iter().all(|r| (r - want).abs() < 1e-15));
        let tight = BlockConstants { c0: 1.0, c4: 1.0, c5: 0.0 };
        let err = block_recursion_check(&decay(), &x, &[1.0], 1.0, 0.4, H2Constants { c1: 0.0, c2: 4.0 }, &tight);
        assert!(matches!(err, Err(LyapunovError::TauTooLarge { .. })));
        assert!(matches!(
            block_recursion_check(&decay(), &x, &[1.0], 0.003, 0.4, h2, &k),
            Err(LyapunovError::TauOffGrid(_))
        ));
    }

    #[test]
    fn fit_covers_calibration_set() {
        let h2 = H2Constants { c1: 0.0, c2: 1.0 };
        let mk = |y1: f64, norm: f64| LyapunovReport { y0_norm2: 0.0, y1_norm2: y1, driver_norm: norm, mu: lyapunov_exponent(0.35), c: 0.0, residual: 0.0, z: vec![] };
        let reps = vec![mk(4.0, 0.9), mk(30.0, 2.0), mk(1.0, 0.2)];
        let fit = fit_lyapunov_constant(&reps, 0.35, h2).unwrap();
        let checked = revalidate(&reps, fit.c, h2);
        assert!(checked.iter().all(|r| r.holds()));
        assert!(fit.c <= 2.0 * fit.envelope_a + 1e-12);
    }

    #[test]
    fn streamed_remainder_matches_diagnostics() {
        let grid = TimeGrid::unit(6);
        let x = RoughPath::linear_cells(GridPath::from_fn(grid, 1, |t, o| o[0] = (9.0 * t).sin() + 0.3 * (41.0 * t).cos()).unwrap());
        let vf = VectorFieldPair::dissipative_sine();
        let y = davie_solve(&vf, &x, &[0.4]).unwrap();
        let want = crate::rde::remainder_diagnostics(&y, &x, &vf, 0.4, IndexRange::new(8, 40)).unwrap().r.value;
        let got = block_remainder_norm(&y, &x, &vf, 0.4, 8, 40);
        assert!((got - want).abs() <= 1e-12 * want.max(1e-300), "{got} vs {want}");
    }
}
