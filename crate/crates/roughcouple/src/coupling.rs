//! Three-step coupling (hit, glue, wait) of two solutions of a scalar
//! equation `dY = b(Y)dt + σ(Y)dX` driven by fBm, and estimation of the tail
//! of the coalescence time.
//!
//! Both solutions live on one uniform global grid of spacing `Δ = 2^{-level}`.
//! They share the Wiener past before 0 and the noise during a burn-in of
//! length `burn_in`; the coupled Wiener path is `dW̃ = dW + G` with `G = g_W Δ`
//! and `G = 0` before the coupling origin. The fBm increments are evaluated
//! exactly on the grid, `X_i = D⁰_i + α_H Δ^{H-1/2} Σ_{k<i} c_{i-k} ΔW_k`, so the
//! inversion of a target fBm drift into a Wiener drift is a triangular
//! Toeplitz solve with the Liouville weights `c`.

use crate::fbm::{alpha_h_numeric, check_hurst, liouville_weights, Convolver, DriftFunction, FbmEngine, FbmError, PastGrid, WienerPath};
use crate::fraccalc::{admissibility_integral, default_t_grid, AdmissibilityReport, CellDrift, FracError, TransformConstants};
use crate::grid::{fmt17, GridError, TimeGrid};
use crate::rde::{davie_scalar, solve_hitting_driver, CutoffFunction, RdeError, VectorFieldPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("parameter {name} = {value} is invalid: {reason}")]
    Config { name: &'static str, value: f64, reason: &'static str },
    #[error(transparent)]
    Fbm(#[from] FbmError),
    #[error(transparent)]
    Rde(#[from] RdeError),
    #[error(transparent)]
    Frac(#[from] FracError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("window of {len} increments does not match the expected {expected}")]
    Window { len: usize, expected: usize },
    #[error("all {0} traces are censored")]
    AllCensored(usize),
}

/// Parameters of the scheme. Times are in units of the equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub hurst: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub varsigma: f64,
    pub epsilon: f64,
    /// Admissibility bound `K`.
    pub k_bound: f64,
    pub c2: f64,
    pub c3: f64,
    /// When set, `c₂ = C^{1/(2α)}` overrides `c2`.
    pub c2_constant: Option<f64>,
    /// Cells per unit time are `2^level`.
    pub level: u32,
    /// Points of the ξ-grid of the hitting system.
    pub xi_points: usize,
    /// Relative hit tolerance; Step 1 succeeds when `|Y - Ỹ| ≤ hit_tol (1+|Y|)`.
    pub hit_tol: f64,
    /// Absolute residual accepted by the terminal shooting correction.
    pub shoot_tol: f64,
    pub shoot_iterations: usize,
    pub horizon: f64,
    pub burn_in: f64,
    pub past_window: f64,
    /// Width of the past resolved at the grid spacing.
    pub past_uniform: f64,
    pub y0: f64,
    pub y0_tilde: f64,
    /// Upper end of the `t`-integral in the admissibility check.
    pub t_max: f64,
    /// Keep the normalised Step-1 increments of `W` and `W̃`.
    pub record_increments: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            hurst: 0.4,
            gamma: 0.35,
            alpha: 0.125,
            beta: 1.5,
            varsigma: 1.1,
            epsilon: 0.01,
            k_bound: 20.0,
            c2: 1.0,
            c3: 2.0,
            c2_constant: None,
            level: 6,
            xi_points: 33,
            hit_tol: 1e-6,
            shoot_tol: 1e-12,
            shoot_iterations: 40,
            horizon: 200.0,
            burn_in: 20.0,
            past_window: 1024.0,
            past_uniform: 8.0,
            y0: 1.0,
            y0_tilde: 0.0,
            t_max: 1024.0,
            record_increments: false,
        }
    }
}

fn bad(name: &'static str, value: f64, reason: &'static str) -> CouplingError {
    CouplingError::Config { name, value, reason }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<(), CouplingError> {
        if check_hurst(self.hurst).is_err() {
            return Err(bad("hurst", self.hurst, "must lie in (1/3, 1/2)"));
        }
        let h = self.hurst;
        if !(self.gamma > 1.0 / 3.0 && self.gamma < h) {
            return Err(bad("gamma", self.gamma, "must lie in (1/3, H)"));
        }
        if !(self.alpha > 0.0 && self.alpha < h) {
            return Err(bad("alpha", self.alpha, "must lie in (0, H)"));
        }
        if !(self.beta > 1.0 / (1.0 - 2.0 * self.alpha)) {
            return Err(bad("beta", self.beta, "must exceed 1/(1-2 alpha)"));
        }
        if !(self.varsigma > 1.0) {
            return Err(bad("varsigma", self.varsigma, "must exceed 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(bad("epsilon", self.epsilon, "must lie in (0, 1)"));
        }
        if !(self.k_bound > 0.0) {
            return Err(bad("k_bound", self.k_bound, "must be positive"));
        }
        if let Some(c) = self.c2_constant {
            if !(c >= 1.0) || !c.is_finite() {
                return Err(bad("c2_constant", c, "must be a finite value >= 1"));
            }
        } else if !(self.c2 > 0.0) {
            return Err(bad("c2", self.c2, "must be positive"));
        }
        if !(self.c3 >= 2.0 * self.effective_c2()) {
            return Err(bad("c3", self.c3, "must be at least 2 c2"));
        }
        if !(1..=12).contains(&self.level) {
            return Err(bad("level", self.level as f64, "must lie in 1..=12"));
        }
        if self.xi_points < 2 {
            return Err(bad("xi_points", self.xi_points as f64, "needs at least 2 points"));
        }
        if !(self.hit_tol > 0.0) {
            return Err(bad("hit_tol", self.hit_tol, "must be positive"));
        }
        if !(self.shoot_tol > 0.0) {
            return Err(bad("shoot_tol", self.shoot_tol, "must be positive"));
        }
        if !(self.horizon >= 1.0) {
            return Err(bad("horizon", self.horizon, "must be at least 1"));
        }
        if !(self.burn_in >= 0.0) {
            return Err(bad("burn_in", self.burn_in, "must be nonnegative"));
        }
        if !(self.past_window > 0.0) {
            return Err(bad("past_window", self.past_window, "must be positive"));
        }
        if !(self.past_uniform > 0.0 && self.past_uniform <= self.past_window) {
            return Err(bad("past_uniform", self.past_uniform, "must lie in (0, past_window]"));
        }
        if !(self.t_max > 1.0) {
            return Err(bad("t_max", self.t_max, "must exceed 1"));
        }
        if !self.y0.is_finite() || !self.y0_tilde.is_finite() {
            return Err(bad("y0", self.y0, "initial conditions must be finite"));
        }
        Ok(())
    }

    pub fn effective_c2(&self) -> f64 {
        match self.c2_constant {
            Some(c) => c.powf(1.0 / (2.0 * self.alpha)),
            None => self.c2,
        }
    }

    /// `Δ₃(ℓ, k) = c₃ ς^k 2^{βℓ}`.
    pub fn delta3(&self, ell: u32, k: usize) -> f64 {
        self.c3 * self.varsigma.powi(k as i32) * 2f64.powf(self.beta * ell as f64)
    }
}

/// Everything shared by the replicas of one run.
pub struct CouplingSetup {
    config: SchemeConfig,
    vf: VectorFieldPair,
    phi: CutoffFunction,
    constants: TransformConstants,
    alpha_h: f64,
    grid: TimeGrid,
    past: PastGrid,
    unit: usize,
    start: usize,
    end: usize,
    scale: f64,
    /// `c_m`, Liouville weights.
    weights: Vec<f64>,
    /// Inverse power series of `a_m = c_{m+1}`.
    inverse: Vec<f64>,
    /// `(n+1)^{H-1/2} - n^{H-1/2}`, derivative weights of uniform cells.
    dweights: Vec<f64>,
}

impl CouplingSetup {
    pub fn new(config: SchemeConfig, vf: VectorFieldPair) -> Result<Self, CouplingError> {
        let constants = TransformConstants::calibrate(config.hurst)?;
        Self::with_constants(config, vf, constants)
    }

    pub fn with_constants(config: SchemeConfig, vf: VectorFieldPair, constants: TransformConstants) -> Result<Self, CouplingError> {
        config.validate()?;
        if vf.state_dim != 1 || vf.noise_dim != 1 {
            return Err(RdeError::NotScalar.into());
        }
        let h = config.hurst;
        let unit = 1usize << config.level;
        let dt = 1.0 / unit as f64;
        let start = (config.burn_in * unit as f64).round() as usize;
        let end = start + (config.horizon * unit as f64).round() as usize;
        // One spare unit so that a Step-1 window opened before the horizon fits.
        let span_units = ((end + unit) as f64 * dt).ceil().max(1.0) as u64;
        let span = span_units.next_power_of_two() as f64;
        let grid_level = config.level + span.log2().round() as u32;
        let grid = TimeGrid::new(grid_level, 0.0, span)?;
        let past = PastGrid::new(dt, config.past_uniform, config.past_window)?;
        let alpha_h = alpha_h_numeric(h, dt.min(1.0 / 64.0), config.past_window)?;
        let len = grid.steps() + 2;
        let weights = liouville_weights(h, len + 1);
        let inverse = inverse_series(&weights[1..], len);
        let q = h - 0.5;
        let dweights = (0..len + past.uniform_cells()).map(|n| ((n + 1) as f64).powf(q) - (n as f64).powf(q)).collect();
        let phi = CutoffFunction::for_k(config.k_bound, 1);
        Ok(Self {
            scale: alpha_h * dt.powf(h - 0.5),
            config,
            vf,
            phi,
            constants,
            alpha_h,
            grid,
            past,
            unit,
            start,
            end,
            weights,
            inverse,
            dweights,
        })
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn constants(&self) -> &TransformConstants {
        &self.constants
    }

    pub fn alpha_h(&self) -> f64 {
        self.alpha_h
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    /// Cells per unit time.
    pub fn unit_cells(&self) -> usize {
        self.unit
    }

    /// Grid index of the coupling origin.
    pub fn origin_index(&self) -> usize {
        self.start
    }

    /// Grid index of the horizon.
    pub fn horizon_index(&self) -> usize {
        self.end
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Time of grid index `i` relative to the coupling origin.
    pub fn rel_time(&self, i: usize) -> f64 {
        (i as f64 - self.start as f64) * self.dt()
    }

    /// `scale Σ_{k<p+i} c_{p+i-k} inc_k` for `i = 0..=win.len()`, where
    /// `inc = hist ++ win` and `p = hist.len()`.
    fn fbm_rows(&self, hist: &[f64], win: &[f64]) -> Vec<f64> {
        let (p, l) = (hist.len(), win.len());
        let c = &self.weights;
        if (p + l) * (l + 1) <= 4_000_000 {
            let mut out = Vec::with_capacity(l + 1);
            for i in 0..=l {
                let top = p + i;
                let mut s = 0.0;
                for (k, v) in hist.iter().enumerate() {
                    s += c[top - k] * v;
                }
                for (k, v) in win[..i].iter().enumerate() {
                    s += c[i - k] * v;
                }
                out.push(self.scale * s);
            }
            out
        } else {
            let inc: Vec<f64> = hist.iter().chain(win).copied().collect();
            let full = Convolver::new().convolve(&inc, &c[..=p + l], p + l + 1);
            full[p..].iter().map(|v| self.scale * v).collect()
        }
    }

    /// Increments `G` with `scale Σ_{k≤j} c_{j+1-k} G_k = r_j`.
    fn solve_increments(&self, r: &[f64]) -> Vec<f64> {
        let l = r.len();
        let b = &self.inverse;
        let out = if l <= 1024 {
            (0..l).map(|j| (0..=j).map(|i| b[j - i] * r[i]).sum::<f64>()).collect::<Vec<_>>()
        } else {
            Convolver::new().convolve(r, &b[..l], l)
        };
        out.into_iter().map(|v| v / self.scale).collect()
    }

    /// `sup_{t∈(0,1]} t^{1-γ} |D^{(τ)}'(t)|` for the Wiener path with past
    /// increments `past_inc` and grid increments `inc` before `τ = inc.len()`.
    fn past_derivative_norm(&self, past_inc: &[f64], inc: &[f64]) -> f64 {
        let ng = self.past.geometric_cells();
        let (geo, uni_past) = past_inc.split_at(ng);
        let dt = self.dt();
        let h = self.config.hurst;
        let q = h - 0.5;
        let tau = inc.len() as f64 * dt;
        let sd = self.alpha_h * dt.powf(h - 1.5);
        let mut best: f64 = 0.0;
        for i in 1..=self.unit {
            let t = i as f64 * dt;
            // Uniform cells: the one ending m cells before τ has weight e_{i+m}.
            let mut s = 0.0;
            for (m, v) in inc.iter().rev().chain(uni_past.iter().rev()).enumerate() {
                s += self.dweights[i - 1 + m + 1] * v;
            }
            let mut d = sd * s;
            for (g, v) in geo.iter().enumerate() {
                let (a, b) = self.past.cell(g);
                d += self.alpha_h * ((t + tau - a).powf(q) - (t + tau - b).powf(q)) / (b - a) * v;
            }
            best = best.max(t.powf(1.0 - self.config.gamma) * d.abs());
        }
        best
    }
}

/// `b` with `Σ_{i≤n} a_i b_{n-i} = δ_{n0}` for `n < len`.
fn inverse_series(a: &[f64], len: usize) -> Vec<f64> {
    let mut b = vec![0.0; len];
    b[0] = 1.0 / a[0];
    for n in 1..len {
        let s: f64 = (1..=n).map(|k| a[k] * b[n - k]).sum();
        b[n] = -s / a[0];
    }
    b
}

/// Log of `exp(∫ g dw - ½∫|g|²)` for cell values `g` against increments `dw`.
pub fn girsanov_log(g: &[f64], dw: &[f64], dt: f64) -> f64 {
    g.iter().zip(dw).map(|(g, w)| g * w - 0.5 * g * g * dt).sum()
}

/// `(D, log D)` with `D = exp(∫ g dw - ½∫|g|²)`, left-point sums on the cells of `g`.
pub fn girsanov_density(g: &DriftFunction, w: &WienerPath) -> Result<(f64, f64), CouplingError> {
    if g.dim != w.dim() {
        return Err(FbmError::Dimension { expected: w.dim(), got: g.dim }.into());
    }
    let fg = w.future_grid();
    let support = || FbmError::DriftSupport { start: g.grid.origin(), end: g.grid.end() };
    let start = fg.index_of(g.grid.origin()).ok_or_else(support)?;
    if (g.grid.dt() - fg.dt()).abs() > 1e-12 * fg.dt() || start + g.grid.steps() > fg.steps() {
        return Err(support().into());
    }
    let d = w.dim();
    let dw = &w.future_increments()[start * d..(start + g.grid.steps()) * d];
    let log = girsanov_log(&g.cells, dw, g.grid.dt());
    Ok((log.exp(), log))
}

/// State of one replica.
#[derive(Debug, Clone)]
pub struct SystemState {
    pos: usize,
    pub y: f64,
    pub y_tilde: f64,
    pub k: usize,
    past_inc: Vec<f64>,
    d0: Vec<f64>,
    dw: Vec<f64>,
    drift: Vec<f64>,
}

impl SystemState {
    /// Samples the past, runs `Ỹ` through the burn-in and places `Y` at the
    /// coupling origin.
    pub fn initial(setup: &CouplingSetup, rng: &mut ChaCha8Rng) -> Result<Self, CouplingError> {
        let past_inc: Vec<f64> = (0..setup.past.cells())
            .map(|c| {
                let (a, b) = setup.past.cell(c);
                let z: f64 = StandardNormal.sample(rng);
                (b - a).sqrt() * z
            })
            .collect();
        Self::with_past(setup, past_inc, rng)
    }

    /// As [`SystemState::initial`] with a given past (`past.cells()` increments).
    pub fn with_past(setup: &CouplingSetup, past_inc: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<Self, CouplingError> {
        let zero = vec![0.0; setup.grid.steps()];
        let w = WienerPath::from_increments(1, setup.past.clone(), past_inc.clone(), setup.grid, zero)?;
        let mut engine = FbmEngine::with_alpha(setup.config.hurst, setup.alpha_h, setup.past.clone(), setup.grid)?;
        let d0 = engine.scenario(&w)?.d.into_values();
        let mut st = Self { pos: 0, y: setup.config.y0, y_tilde: setup.config.y0_tilde, k: 0, past_inc, d0, dw: Vec::new(), drift: Vec::new() };
        let burn = setup.start;
        if burn > 0 {
            let w = sample_increments(rng, burn, setup.dt());
            let xt = st.x_tilde_window(setup, &w);
            st.y_tilde = *davie_scalar(&setup.vf, &xt, setup.dt(), st.y_tilde)?.last().expect("nonempty");
            st.dw.extend_from_slice(&w);
            st.drift.resize(burn, 0.0);
            st.pos = burn;
        }
        st.y = setup.config.y0;
        Ok(st)
    }

    /// Current grid index.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn w_increments(&self) -> &[f64] {
        &self.dw
    }

    /// `G = g_W Δ` per committed cell.
    pub fn drift_increments(&self) -> &[f64] {
        &self.drift
    }

    pub fn w_tilde_increments(&self) -> Vec<f64> {
        self.dw.iter().zip(&self.drift).map(|(a, b)| a + b).collect()
    }

    /// `true` when `Y = Ỹ` and no drift has been applied yet.
    pub fn already_glued(&self) -> bool {
        self.y == self.y_tilde && self.drift.iter().all(|g| *g == 0.0)
    }

    /// `X` on `[pos, pos + w.len()]` for the candidate window increments `w`.
    pub fn x_window(&self, setup: &CouplingSetup, w: &[f64]) -> Vec<f64> {
        let rows = setup.fbm_rows(&self.dw, w);
        rows.iter().enumerate().map(|(i, r)| self.d0[self.pos + i] + r).collect()
    }

    /// `X̃` on `[pos, pos + v.len()]` for candidate `W̃` increments `v`.
    pub fn x_tilde_window(&self, setup: &CouplingSetup, v: &[f64]) -> Vec<f64> {
        let hist = self.w_tilde_increments();
        let rows = setup.fbm_rows(&hist, v);
        rows.iter().enumerate().map(|(i, r)| self.d0[self.pos + i] + r).collect()
    }

    /// `X̃ - X` generated by the drift history alone on `[pos, pos + len]`.
    pub fn shadow(&self, setup: &CouplingSetup, len: usize) -> Vec<f64> {
        setup.fbm_rows(&self.drift, &vec![0.0; len])
    }

    /// Drift history `g_W` relative to the current time.
    pub fn drift_history(&self, setup: &CouplingSetup) -> CellDrift {
        let dt = setup.dt();
        let lo = setup.start.min(self.pos);
        let vals: Vec<f64> = self.drift[lo..self.pos].iter().map(|g| g / dt).collect();
        if vals.is_empty() {
            return CellDrift::zero();
        }
        CellDrift::uniform(-((self.pos - lo) as f64) * dt, dt, vals)
    }

    /// Appends a window, evolving both solutions on their own drivers.
    fn commit(&mut self, setup: &CouplingSetup, w: &[f64], g: &[f64]) -> Result<(), CouplingError> {
        let dt = setup.dt();
        let x = self.x_window(setup, w);
        let v: Vec<f64> = w.iter().zip(g).map(|(a, b)| a + b).collect();
        let xt = self.x_tilde_window(setup, &v);
        self.y = *davie_scalar(&setup.vf, &x, dt, self.y)?.last().expect("nonempty");
        self.y_tilde = *davie_scalar(&setup.vf, &xt, dt, self.y_tilde)?.last().expect("nonempty");
        self.dw.extend_from_slice(w);
        self.drift.extend_from_slice(g);
        self.pos += w.len();
        Ok(())
    }
}

fn sample_increments(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> Vec<f64> {
    let sd = dt.sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

/// Outcome of the two admissibility conditions at the current time.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityCheck {
    pub admissible: bool,
    pub drift: AdmissibilityReport,
    pub y_abs: f64,
    pub y_tilde_abs: f64,
    pub d_norm_w: f64,
    pub d_norm_w_tilde: f64,
}

impl AdmissibilityCheck {
    pub fn position_sum(&self) -> f64 {
        self.y_abs + self.y_tilde_abs + self.d_norm_w + self.d_norm_w_tilde
    }
}

pub fn check_admissible(setup: &CouplingSetup, state: &SystemState) -> Result<AdmissibilityCheck, CouplingError> {
    let cfg = &setup.config;
    let drift = admissibility_integral(&state.drift_history(setup), &setup.constants, cfg.alpha, &default_t_grid(), cfg.t_max)?;
    let d_norm_w = setup.past_derivative_norm(&state.past_inc, &state.dw);
    let d_norm_w_tilde = if state.drift.iter().all(|g| *g == 0.0) {
        d_norm_w
    } else {
        setup.past_derivative_norm(&state.past_inc, &state.w_tilde_increments())
    };
    let mut out = AdmissibilityCheck { admissible: false, drift, y_abs: state.y.abs(), y_tilde_abs: state.y_tilde.abs(), d_norm_w, d_norm_w_tilde };
    out.admissible = out.drift.admissible() && out.position_sum() <= cfg.k_bound;
    Ok(out)
}

/// Image of a Step-1 window under Λ or Λ̄.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaImage {
    /// Increments of the image path on the window.
    pub image: Vec<f64>,
    /// Wiener drift `g_W` per cell (units 1/time).
    pub drift: Vec<f64>,
    /// fBm drift of the hitting system per cell.
    pub g_x: Vec<f64>,
    /// Terminal shooting constant added to `g_X`.
    pub shoot: f64,
    /// `|y_1(1) - y_1(0)|` of the hitting system.
    pub hit_gap: f64,
    /// The hitting system failed and the identity was used.
    pub identity: bool,
}

impl LambdaImage {
    fn identity(w: &[f64]) -> Self {
        Self { image: w.to_vec(), drift: vec![0.0; w.len()], g_x: vec![0.0; w.len()], shoot: 0.0, hit_gap: 0.0, identity: true }
    }

    pub fn l2_squared(&self, dt: f64) -> f64 {
        self.drift.iter().map(|g| g * g).sum::<f64>() * dt
    }
}

/// Secant iteration from `0` and `1e-3`.
fn secant(mut f: impl FnMut(f64) -> Option<f64>, tol: f64, iterations: usize) -> Option<f64> {
    let (mut c0, mut f0) = (0.0, f(0.0)?);
    if f0.abs() <= tol {
        return Some(0.0);
    }
    let (mut c1, mut f1) = (1e-3, f(1e-3)?);
    for _ in 0..iterations {
        if f1.abs() <= tol {
            return Some(c1);
        }
        let den = f1 - f0;
        if den == 0.0 || !den.is_finite() {
            return None;
        }
        let c2 = c1 - f1 * (c1 - c0) / den;
        (c0, f0) = (c1, f1);
        c1 = c2;
        f1 = f(c1)?;
    }
    (f1.abs() <= tol).then_some(c1)
}

fn end_value(vf: &VectorFieldPair, x: &[f64], dt: f64, y0: f64) -> Option<f64> {
    davie_scalar(vf, x, dt, y0).ok().and_then(|v| v.last().copied())
}

fn add_cumulative(x: &[f64], g: &[f64], c: f64, dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    out.push(x[0]);
    for i in 0..g.len() {
        acc += (g[i] + c) * dt;
        out.push(x[i + 1] + acc);
    }
    out
}

/// Wiener increments producing the fBm drift `Φ_{j+1} = Σ_{l≤j} phi_l Δ` on
/// top of the shadow `s` of a history with sign `sign`.
fn invert_window(setup: &CouplingSetup, phi: &[f64], shadow: &[f64], sign: f64) -> Vec<f64> {
    let dt = setup.dt();
    let mut acc = 0.0;
    let r: Vec<f64> = phi
        .iter()
        .enumerate()
        .map(|(j, p)| {
            acc += p * dt;
            acc + sign * (shadow[0] - shadow[j + 1])
        })
        .collect();
    setup.solve_increments(&r)
}

/// `Λ(w)`: the `W̃` window making `Ỹ` hit `Y` at the end of the unit window.
pub fn lambda_map(setup: &CouplingSetup, state: &SystemState, w: &[f64]) -> Result<LambdaImage, CouplingError> {
    let n = setup.unit;
    if w.len() != n {
        return Err(CouplingError::Window { len: w.len(), expected: n });
    }
    let cfg = &setup.config;
    let dt = setup.dt();
    let x = state.x_window(setup, w);
    let grid = TimeGrid::new(cfg.level, 0.0, 1.0)?;
    let sol = match solve_hitting_driver(&setup.vf, state.y, state.y_tilde, &x, grid, &setup.phi, cfg.xi_points, false) {
        Ok(s) => s,
        Err(_) => return Ok(LambdaImage::identity(w)),
    };
    let Some(y_end) = end_value(&setup.vf, &x, dt, state.y) else {
        return Ok(LambdaImage::identity(w));
    };
    let gx = sol.drift.clone();
    let tol = cfg.shoot_tol * (1.0 + y_end.abs());
    let shoot = secant(|c| end_value(&setup.vf, &add_cumulative(&x, &gx, c, dt), dt, state.y_tilde).map(|v| v - y_end), tol, cfg.shoot_iterations)
        .filter(|c| c.abs() <= cfg.k_bound)
        .unwrap_or(0.0);
    let phi: Vec<f64> = gx.iter().map(|g| g + shoot).collect();
    let g = invert_window(setup, &phi, &state.shadow(setup, n), 1.0);
    Ok(LambdaImage {
        image: w.iter().zip(&g).map(|(a, b)| a + b).collect(),
        drift: g.iter().map(|v| v / dt).collect(),
        g_x: gx,
        shoot,
        hit_gap: sol.hit_gap(),
        identity: false,
    })
}

/// `Λ̄(v)`: the `W` window whose image under `Λ` is `v`, built from the
/// inverse hitting system driven by `X̃(v)`.
pub fn lambda_inverse(setup: &CouplingSetup, state: &SystemState, v: &[f64]) -> Result<LambdaImage, CouplingError> {
    let n = setup.unit;
    if v.len() != n {
        return Err(CouplingError::Window { len: v.len(), expected: n });
    }
    let cfg = &setup.config;
    let dt = setup.dt();
    let xt = state.x_tilde_window(setup, v);
    let grid = TimeGrid::new(cfg.level, 0.0, 1.0)?;
    let Some(yt_end) = end_value(&setup.vf, &xt, dt, state.y_tilde) else {
        return Ok(LambdaImage::identity(v));
    };
    let tilted = |c: f64| -> Vec<f64> { xt.iter().enumerate().map(|(i, x)| x - c * i as f64 * dt).collect() };
    let inverse_drift = |c: f64| -> Option<Vec<f64>> {
        solve_hitting_driver(&setup.vf, state.y, state.y_tilde, &tilted(c), grid, &setup.phi, cfg.xi_points, true).ok().map(|s| s.drift)
    };
    let tol = cfg.shoot_tol * (1.0 + yt_end.abs());
    let residual = |c: f64| -> Option<f64> {
        let g = inverse_drift(c)?;
        end_value(&setup.vf, &add_cumulative(&tilted(c), &g, 0.0, dt), dt, state.y).map(|y| y - yt_end)
    };
    let shoot = secant(residual, tol, cfg.shoot_iterations).filter(|c| c.abs() <= cfg.k_bound).unwrap_or(0.0);
    let Some(gbar) = inverse_drift(shoot) else {
        return Ok(LambdaImage::identity(v));
    };
    let sol_gap = solve_hitting_driver(&setup.vf, state.y, state.y_tilde, &tilted(shoot), grid, &setup.phi, cfg.xi_points, true)
        .map(|s| s.hit_gap())
        .unwrap_or(f64::NAN);
    let phi: Vec<f64> = gbar.iter().map(|g| g - shoot).collect();
    let g = invert_window(setup, &phi, &state.shadow(setup, n), -1.0);
    Ok(LambdaImage {
        image: v.iter().zip(&g).map(|(a, b)| a + b).collect(),
        drift: g.iter().map(|x| x / dt).collect(),
        g_x: gbar,
        shoot,
        hit_gap: sol_gap,
        identity: false,
    })
}

/// Branch taken by the Step-1 sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Lambda,
    LambdaBar,
    Identity,
    /// Inadmissible state: no attempt, `g_W = 0` on the window.
    Skipped,
}

impl Branch {
    pub fn label(&self) -> &'static str {
        match self {
            Branch::Lambda => "lambda",
            Branch::LambdaBar => "lambda_bar",
            Branch::Identity => "identity",
            Branch::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step1Outcome {
    pub branch: Branch,
    pub success: bool,
    /// `log D` of `Λ` and `Λ̄` at the sampled `w`.
    pub log_d1: f64,
    pub log_d2: f64,
    pub gx_sup: f64,
    /// `∫|g_W|²` of the applied drift.
    pub gw_l2: f64,
    pub hit_gap: f64,
    pub shoot: f64,
    pub gap: f64,
    /// Normalised window increments of `W` and `W̃`.
    pub w: Vec<f64>,
    pub w_tilde: Vec<f64>,
}

/// Step 1 at the current time. Draws `w`, computes `D₁ = D_Λ(w)` and
/// `D₂ = D_Λ̄(w)`, routes to `Λ(w)` with probability `½ min(1, D₁)`, to
/// `Λ̄(w)` with probability `½ min(1, D₂)`, and to `w` otherwise.
pub fn step1_attempt(setup: &CouplingSetup, state: &mut SystemState, rng: &mut ChaCha8Rng) -> Result<Step1Outcome, CouplingError> {
    let dt = setup.dt();
    let n = setup.unit;
    let w = sample_increments(rng, n, dt);
    let lam = lambda_map(setup, state, &w)?;
    let bar = lambda_inverse(setup, state, &w)?;
    let neg = |g: &[f64]| g.iter().map(|v| -v).collect::<Vec<_>>();
    let log_d1 = girsanov_log(&neg(&lam.drift), &w, dt);
    let log_d2 = girsanov_log(&neg(&bar.drift), &w, dt);
    let rho1 = 0.5 * log_d1.exp().min(1.0);
    let rho2 = 0.5 * log_d2.exp().min(1.0);
    let u: f64 = rng.random();
    let (branch, img) = if u < rho1 {
        (Branch::Lambda, &lam)
    } else if u < rho1 + rho2 {
        (Branch::LambdaBar, &bar)
    } else {
        (Branch::Identity, &lam)
    };
    let g: Vec<f64> = match branch {
        Branch::Identity => vec![0.0; n],
        _ => img.drift.iter().map(|v| v * dt).collect(),
    };
    let gx_sup = match branch {
        Branch::Identity => 0.0,
        _ => img.g_x.iter().fold(0.0f64, |m, v| m.max((v + img.shoot).abs())),
    };
    let gw_l2 = g.iter().map(|v| v * v).sum::<f64>() / dt;
    state.commit(setup, &w, &g)?;
    let gap = (state.y - state.y_tilde).abs();
    let success = gap <= setup.config.hit_tol * (1.0 + state.y.abs());
    if success {
        state.y_tilde = state.y;
    }
    let (w_rec, wt_rec) = if setup.config.record_increments {
        let s = dt.sqrt();
        (w.iter().map(|v| v / s).collect(), w.iter().zip(&g).map(|(a, b)| (a + b) / s).collect())
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Step1Outcome {
        branch,
        success,
        log_d1,
        log_d2,
        gx_sup,
        gw_l2,
        hit_gap: img.hit_gap,
        shoot: if branch == Branch::Identity { 0.0 } else { img.shoot },
        gap,
        w: w_rec,
        w_tilde: wt_rec,
    })
}

/// Inadmissible trial: `g_W = 0` over the unit window.
pub fn skip_window(setup: &CouplingSetup, state: &mut SystemState, rng: &mut ChaCha8Rng) -> Result<(), CouplingError> {
    let n = setup.unit.min(setup.grid.steps() - state.pos);
    let w = sample_increments(rng, n, setup.dt());
    state.commit(setup, &w, &vec![0.0; n])
}

/// The gluing drift: the `G` that keeps `X̃ - X` constant from the current
/// time up to `len` cells later, given the drift history.
pub fn step2_increments(setup: &CouplingSetup, state: &SystemState, len: usize) -> Vec<f64> {
    if state.drift.iter().all(|g| *g == 0.0) {
        return vec![0.0; len];
    }
    let s = state.shadow(setup, len);
    invert_window(setup, &vec![0.0; len], &s, 1.0)
}

/// Success probability `2Φ(-m/2)` of the maximal coupling of `N(0,1)` and `N(m,1)`.
pub fn step2_success_probability(l2_norm: f64) -> f64 {
    erfc(0.5 * l2_norm / std::f64::consts::SQRT_2)
}

/// Interval of one Step-2 trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Step2Interval {
    pub ell: u32,
    pub start: f64,
    pub end: f64,
    pub l2_norm: f64,
    pub success: bool,
}

/// Runs Step 2 from the current time. Returns the intervals tried; the
/// last one failed unless the horizon was reached.
pub fn step2_run(setup: &CouplingSetup, state: &mut SystemState, rng: &mut ChaCha8Rng) -> Result<Vec<Step2Interval>, CouplingError> {
    let dt = setup.dt();
    let total = setup.end.saturating_sub(state.pos);
    let gs = step2_increments(setup, state, total);
    let mut out = Vec::new();
    let mut offset = 0;
    let mut ell = 1u32;
    let c2 = setup.config.effective_c2();
    while state.pos < setup.end {
        let len = ((c2 * 2f64.powi(ell as i32) / dt).round() as usize).max(1).min(setup.end - state.pos);
        let g = &gs[offset..offset + len];
        let w = sample_increments(rng, len, dt);
        let m2: f64 = g.iter().map(|v| v * v).sum::<f64>() / dt;
        let m = m2.sqrt();
        let start = setup.rel_time(state.pos);
        let (success, applied) = if m == 0.0 {
            (true, g.to_vec())
        } else {
            // U = ⟨ξ, v̂⟩ with ξ = w/√Δ and v = g/√Δ.
            let u_proj: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (dt * m);
            let accept = (-u_proj * m - 0.5 * m2).exp().min(1.0);
            let r: f64 = rng.random();
            if r < accept {
                (true, g.to_vec())
            } else {
                (false, g.iter().map(|v| -2.0 * u_proj * v / m).collect())
            }
        };
        state.commit(setup, &w, &applied)?;
        if success {
            state.y_tilde = state.y;
        }
        out.push(Step2Interval { ell, start, end: setup.rel_time(state.pos), l2_norm: m, success });
        if !success {
            break;
        }
        offset += len;
        ell += 1;
    }
    Ok(out)
}

/// Step 3: waits `Δ₃(ℓ, k)` (rounded up to the grid, cut at the horizon)
/// with `g_W = 0`. Returns the duration applied.
pub fn step3_wait(setup: &CouplingSetup, state: &mut SystemState, ell: u32, rng: &mut ChaCha8Rng) -> Result<f64, CouplingError> {
    let d = setup.config.delta3(ell, state.k);
    let cells = ((d / setup.dt()).ceil() as usize).min(setup.end.saturating_sub(state.pos));
    if cells > 0 {
        let w = sample_increments(rng, cells, setup.dt());
        state.commit(setup, &w, &vec![0.0; cells])?;
    }
    Ok(d)
}

/// One trial of the scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub k: usize,
    pub tau_km1: f64,
    pub admissible: bool,
    pub admissibility_value: f64,
    pub position_sum: f64,
    pub step1: Step1Outcome,
    /// Step-2 intervals tried (empty when Step 1 failed).
    pub step2: Vec<Step2Interval>,
    /// Level at which Step 2 failed; `None` if it was not reached or never failed.
    pub step2_failed_at: Option<u32>,
    pub delta3: Option<f64>,
}

impl TrialRecord {
    pub fn csv_row(&self) -> String {
        let step1 = match (self.step1.branch, self.step1.success) {
            (Branch::Skipped, _) => "skipped",
            (_, true) => "success",
            (_, false) => "fail",
        };
        let ell = match (&self.step2_failed_at, self.step1.success) {
            (Some(l), _) => l.saturating_sub(1).to_string(),
            (None, true) => "inf".to_string(),
            (None, false) => String::new(),
        };
        format!("{},{},{},{},{},{}", self.k, fmt17(self.tau_km1), self.admissible, step1, ell, fmt17(self.delta3.unwrap_or(0.0)))
    }
}

/// Record of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTrace {
    pub replica: u64,
    pub seed: u64,
    pub trials: Vec<TrialRecord>,
    /// Coalescence time relative to the coupling origin.
    pub tau_inf: Option<f64>,
    pub censored: bool,
    pub horizon: f64,
    /// Largest `|Y - Ỹ|` after the final hit.
    pub glue_gap: f64,
    pub final_y: f64,
    pub final_y_tilde: f64,
}

impl CouplingTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,tau_km1,admissible,step1,stepsucceeded_upto_ell,delta3\n");
        for t in &self.trials {
            s.push_str(&t.csv_row());
            s.push('\n');
        }
        s
    }

    /// `(time, censored)` for tail estimation.
    pub fn sample(&self) -> TailSample {
        match self.tau_inf {
            Some(t) if !self.censored => TailSample { time: t, censored: false },
            _ => TailSample { time: self.horizon, censored: true },
        }
    }

    /// Pooled normalised Step-1 increments of `W` and `W̃`.
    pub fn pooled_increments(&self) -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for t in &self.trials {
            a.extend_from_slice(&t.step1.w);
            b.extend_from_slice(&t.step1.w_tilde);
        }
        (a, b)
    }
}

/// RNG of replica `index`: the stream `index` of the master seed.
pub fn replica_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs trials until the solutions are glued up to the horizon or the
/// horizon censors the replica.
pub fn run_scheme(setup: &CouplingSetup, seed: u64, replica: u64) -> Result<CouplingTrace, CouplingError> {
    let mut rng = replica_rng(seed, replica);
    let mut state = SystemState::initial(setup, &mut rng)?;
    run_from_state(setup, &mut state, &mut rng, seed, replica)
}

pub fn run_from_state(
    setup: &CouplingSetup,
    state: &mut SystemState,
    rng: &mut ChaCha8Rng,
    seed: u64,
    replica: u64,
) -> Result<CouplingTrace, CouplingError> {
    let mut trials = Vec::new();
    let mut tau_inf = None;
    let mut glue_gap = 0.0;
    while state.pos < setup.end && tau_inf.is_none() {
        state.k += 1;
        let tau_km1 = setup.rel_time(state.pos);
        let glued_start = state.already_glued();
        let adm = check_admissible(setup, state)?;
        let mut rec = TrialRecord {
            k: state.k,
            tau_km1,
            admissible: adm.admissible,
            admissibility_value: adm.drift.value,
            position_sum: adm.position_sum(),
            step1: Step1Outcome {
                branch: Branch::Skipped,
                success: false,
                log_d1: 0.0,
                log_d2: 0.0,
                gx_sup: 0.0,
                gw_l2: 0.0,
                hit_gap: 0.0,
                shoot: 0.0,
                gap: (state.y - state.y_tilde).abs(),
                w: Vec::new(),
                w_tilde: Vec::new(),
            },
            step2: Vec::new(),
            step2_failed_at: None,
            delta3: None,
        };
        if !adm.admissible {
            skip_window(setup, state, rng)?;
            rec.delta3 = Some(step3_wait(setup, state, 0, rng)?);
            trials.push(rec);
            continue;
        }
        rec.step1 = step1_attempt(setup, state, rng)?;
        if !rec.step1.success {
            rec.delta3 = Some(step3_wait(setup, state, 0, rng)?);
            trials.push(rec);
            continue;
        }
        let hit_time = setup.rel_time(state.pos);
        let hit_index = state.pos;
        rec.step2 = step2_run(setup, state, rng)?;
        match rec.step2.last() {
            Some(iv) if !iv.success => {
                rec.step2_failed_at = Some(iv.ell);
                rec.delta3 = Some(step3_wait(setup, state, iv.ell, rng)?);
            }
            _ => {
                if hit_index <= setup.end {
                    tau_inf = Some(if glued_start { tau_km1 } else { hit_time });
                    glue_gap = (state.y - state.y_tilde).abs();
                }
            }
        }
        trials.push(rec);
    }
    let censored = tau_inf.map_or(true, |t| t > setup.config.horizon);
    Ok(CouplingTrace {
        replica,
        seed,
        trials,
        tau_inf,
        censored,
        horizon: setup.config.horizon,
        glue_gap,
        final_y: state.y,
        final_y_tilde: state.y_tilde,
    })
}

/// Runs `replicas` independent replicas on up to `threads` threads. The
/// result is ordered by replica and independent of `threads`.
pub fn run_replicas(setup: &CouplingSetup, seed: u64, replicas: u64, threads: usize) -> Result<Vec<CouplingTrace>, CouplingError> {
    let threads = threads.max(1).min(replicas.max(1) as usize);
    if threads == 1 {
        return (0..replicas).map(|r| run_scheme(setup, seed, r)).collect();
    }
    let results: Vec<Result<Vec<CouplingTrace>, CouplingError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || (0..replicas).filter(|r| *r as usize % threads == t).map(|r| run_scheme(setup, seed, r)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("replica thread panicked")).collect()
    });
    let mut all = Vec::with_capacity(replicas as usize);
    for r in results {
        all.extend(r?);
    }
    all.sort_by_key(|t| t.replica);
    Ok(all)
}

/// `C²` estimate: the largest `∫_0^∞ (1+t)^{2α} |g_S|²` after a Step-1
/// success over pilot replicas, times `safety`. `None` when no pilot hit.
pub fn estimate_c2_constant(setup: &CouplingSetup, seed: u64, pilots: u64, safety: f64) -> Result<Option<f64>, CouplingError> {
    let dt = setup.dt();
    let alpha = setup.config.alpha;
    let mut best: Option<f64> = None;
    for r in 0..pilots {
        let mut rng = replica_rng(seed, r);
        let mut state = SystemState::initial(setup, &mut rng)?;
        state.k = 1;
        if !check_admissible(setup, &state)?.admissible {
            continue;
        }
        if !step1_attempt(setup, &mut state, &mut rng)?.success {
            continue;
        }
        let len = setup.end.saturating_sub(state.pos);
        let gs = step2_increments(setup, &state, len);
        let v: f64 = gs.iter().enumerate().map(|(i, g)| (1.0 + (i as f64 + 0.5) * dt).powf(2.0 * alpha) * g * g / dt).sum();
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    Ok(best.map(|b| (safety * b).max(1.0)))
}

/// Survival time of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSample {
    pub time: f64,
    pub censored: bool,
}

/// Kaplan–Meier survival, the TV bound `2 S(t)` and a log-log slope fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub t: Vec<f64>,
    pub survival: Vec<f64>,
    pub tv_bound: Vec<f64>,
    pub slope: Option<f64>,
    /// Half-width of the 95% interval of the slope.
    pub slope_ci: Option<f64>,
    pub fit_points: usize,
    pub uncensored: usize,
    pub total: usize,
    /// Fewer than 30 uncensored samples.
    pub low_count: bool,
    pub note: &'static str,
}

impl TailEstimate {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,survival,tv_bound\n");
        for i in 0..self.t.len() {
            s.push_str(&format!("{},{},{}\n", fmt17(self.t[i]), fmt17(self.survival[i]), fmt17(self.tv_bound[i])));
        }
        s
    }
}

pub fn estimate_tail(samples: &[TailSample], t_grid: &[f64]) -> Result<TailEstimate, CouplingError> {
    let uncensored = samples.iter().filter(|s| !s.censored).count();
    if uncensored == 0 {
        return Err(CouplingError::AllCensored(samples.len()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.censored.cmp(&b.censored)));
    // Product-limit steps (time, survival after time).
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut at_risk = sorted.len() as f64;
    let mut surv = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let mut deaths = 0.0;
        let mut leaving = 0.0;
        while i < sorted.len() && sorted[i].time == t {
            if !sorted[i].censored {
                deaths += 1.0;
            }
            leaving += 1.0;
            i += 1;
        }
        if deaths > 0.0 {
            surv *= 1.0 - deaths / at_risk;
            steps.push((t, surv));
        }
        at_risk -= leaving;
    }
    let survival: Vec<f64> = t_grid
        .iter()
        .map(|&t| steps.iter().take_while(|(s, _)| *s <= t).last().map_or(1.0, |(_, v)| *v))
        .collect();
    let pts: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(&survival)
        .filter(|(t, s)| **t > 0.0 && **s > 0.0 && **s < 1.0)
        .map(|(t, s)| (t.ln(), s.ln()))
        .collect();
    let (slope, slope_ci) = if pts.len() >= 3 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let b = sxy / sxx;
        let rss: f64 = pts.iter().map(|p| (p.1 - my - b * (p.0 - mx)).powi(2)).sum();
        let se = (rss / (n - 2.0) / sxx).sqrt();
        (Some(b), Some(1.96 * se))
    } else {
        (None, None)
    };
    Ok(TailEstimate {
        t: t_grid.to_vec(),
        tv_bound: survival.iter().map(|s| 2.0 * s).collect(),
        survival,
        slope,
        slope_ci,
        fit_points: pts.len(),
        uncensored,
        total: samples.len(),
        low_count: uncensored < 30,
        note: "finite-horizon slope; the asymptotic exponent is not identifiable from a finite horizon",
    })
}

/// Synthetic survival times with `P(τ > t) = t^{-a}` for `t ≥ 1`.
pub fn pareto_samples(a: f64, n: usize, seed: u64) -> Vec<TailSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = 1.0 - rng.random::<f64>();
            TailSample { time: u.powf(-1.0 / a), censored: false }
        })
        .collect()
}

/// Summary of a run as JSON.
pub fn summary_json(config: &SchemeConfig, traces: &[CouplingTrace], tail: Option<&TailEstimate>) -> String {
    #[derive(Serialize)]
    struct Replica {
        replica: u64,
        tau_inf: Option<f64>,
        censored: bool,
        trials: usize,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a SchemeConfig,
        replicas: Vec<Replica>,
        uncensored_fraction: f64,
        tail: Option<&'a TailEstimate>,
    }
    let replicas: Vec<Replica> = traces
        .iter()
        .map(|t| Replica { replica: t.replica, tau_inf: t.tau_inf, censored: t.censored, trials: t.trials.len() })
        .collect();
    let unc = traces.iter().filter(|t| !t.censored).count() as f64 / traces.len().max(1) as f64;
    serde_json::to_string_pretty(&Summary { config, replicas, uncensored_fraction: unc, tail }).expect("plain data serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SchemeConfig {
        SchemeConfig { horizon: 8.0, burn_in: 2.0, level: 5, past_window: 64.0, past_uniform: 2.0, ..SchemeConfig::default() }
    }

    fn setup(config: SchemeConfig) -> CouplingSetup {
        CouplingSetup::with_constants(config, VectorFieldPair::dissipative_sine(), TransformConstants::closed_form(0.4)).unwrap()
    }

    #[test]
    fn delta3_formula() {
        let cfg = SchemeConfig { c3: 4.0, varsigma: 1.5, beta: 3.0, ..SchemeConfig::default() };
        assert!((cfg.delta3(1, 2) - 72.0).abs() < 1e-12);
        let cfg = SchemeConfig { c3: 4.0, varsigma: 2.0, ..SchemeConfig::default() };
        assert!((cfg.delta3(0, 1) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn config_ranges() {
        assert!(SchemeConfig::default().validate().is_ok());
        assert!(SchemeConfig { gamma: 0.45, ..SchemeConfig::default() }.validate().is_err());
        assert!(SchemeConfig { beta: 1.2, ..SchemeConfig::default() }.validate().is_err());
        assert!(SchemeConfig { c3: 1.5, ..SchemeConfig::default() }.validate().is_err());
        let auto = SchemeConfig { c2_constant: Some(2.0), alpha: 0.25, beta: 2.5, c3: 8.0, ..SchemeConfig::default() };
        assert!((auto.effective_c2() - 4.0).abs() < 1e-12);
        assert!(auto.validate().is_ok());
    }

    #[test]
    fn inverse_series_inverts() {
        let c = liouville_weights(0.4, 50);
        let b = inverse_series(&c[1..], 40);
        for n in 0..40 {
            let s: f64 = (0..=n).map(|i| c[i + 1] * b[n - i]).sum();
            assert!((s - if n == 0 { 1.0 } else { 0.0 }).abs() < 1e-12, "n={n}: {s}");
        }
    }

    #[test]
    fn fbm_rows_direct_matches_fft() {
        let s = setup(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hist = sample_increments(&mut rng, 300, s.dt());
        let win = sample_increments(&mut rng, 40, s.dt());
        let direct = s.fbm_rows(&hist, &win);
        let inc: Vec<f64> = hist.iter().chain(&win).copied().collect();
        let full = Convolver::new().convolve(&inc, &s.weights[..=340], 341);
        for (i, d) in direct.iter().enumerate() {
            assert!((d - s.scale * full[300 + i]).abs() < 1e-10);
        }
    }

    #[test]
    fn state_fbm_matches_engine() {
        let s = setup(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = SystemState::initial(&s, &mut rng).unwrap();
        let mut inc = st.dw.clone();
        inc.resize(s.grid.steps(), 0.0);
        let w = WienerPath::from_increments(1, s.past.clone(), st.past_inc.clone(), s.grid, inc).unwrap();
        let x = FbmEngine::with_alpha(0.4, s.alpha_h, s.past.clone(), s.grid).unwrap().scenario(&w).unwrap().x;
        let mut st0 = st.clone();
        st0.pos = 0;
        st0.dw.clear();
        let xs = st0.x_window(&s, &st.dw);
        for (i, v) in xs.iter().enumerate() {
            assert!((v - x.value(i)[0]).abs() < 1e-9, "i={i}");
        }
    }

    #[test]
    fn past_norm_matches_past_component() {
        let s = setup(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let st = SystemState::initial(&s, &mut rng).unwrap();
        let mut inc = st.dw.clone();
        inc.resize(s.grid.steps(), 0.0);
        let w = WienerPath::from_increments(1, s.past.clone(), st.past_inc.clone(), s.grid, inc).unwrap();
        let tg = TimeGrid::new(s.config.level, 0.0, 1.0).unwrap();
        let (_, dp) = crate::fbm::past_component(&w, 0.4, s.alpha_h, s.grid.point(st.pos), &tg).unwrap();
        let want = crate::fbm::d_singular_norm(&dp, s.config.gamma).unwrap().value;
        let got = s.past_derivative_norm(&st.past_inc, &st.dw);
        assert!((got - want).abs() < 1e-9 * (1.0 + want), "{got} vs {want}");
    }

    #[test]
    fn fresh_state_is_admissible() {
        let s = setup(SchemeConfig { y0: 0.0, y0_tilde: 0.0, burn_in: 0.0, ..small_config() });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = SystemState::with_past(&s, vec![0.0; s.past.cells()], &mut rng).unwrap();
        let a = check_admissible(&s, &st).unwrap();
        assert!(a.admissible);
        assert_eq!(a.position_sum(), 0.0);
        assert_eq!(a.drift.value, 0.0);
        let mut far = st.clone();
        far.y = s.config.k_bound + 1.0;
        assert!(!check_admissible(&s, &far).unwrap().admissible);
    }

    #[test]
    fn equal_states_give_identity_and_immediate_glue() {
        let s = setup(SchemeConfig { y0: 0.3, y0_tilde: 0.3, burn_in: 0.0, ..small_config() });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = SystemState::initial(&s, &mut rng).unwrap();
        let w = sample_increments(&mut rng, s.unit, s.dt());
        let lam = lambda_map(&s, &st, &w).unwrap();
        assert!(lam.image.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-14));
        let bar = lambda_inverse(&s, &st, &w).unwrap();
        assert!(bar.image.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-14));
        let tr = run_scheme(&s, 11, 0).unwrap();
        assert_eq!(tr.tau_inf, Some(0.0));
        assert!(!tr.censored);
        assert_eq!(tr.glue_gap, 0.0);
    }

    #[test]
    fn lambda_round_trip() {
        let s = setup(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = SystemState::initial(&s, &mut rng).unwrap();
        let w = sample_increments(&mut rng, s.unit, s.dt());
        let lam = lambda_map(&s, &st, &w).unwrap();
        assert!(!lam.identity);
        let back = lambda_inverse(&s, &st, &lam.image).unwrap();
        let err = back.image.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "round trip {err}");
        let cancel = back.drift.iter().zip(&lam.drift).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        assert!(cancel < 1e-6, "{cancel}");
    }

    #[test]
    fn lambda_branch_hits() {
        let s = setup(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let st = SystemState::initial(&s, &mut rng).unwrap();
        let w = sample_increments(&mut rng, s.unit, s.dt());
        let lam = lambda_map(&s, &st, &w).unwrap();
        let mut a = st.clone();
        let g: Vec<f64> = lam.drift.iter().map(|v| v * s.dt()).collect();
        a.commit(&s, &w, &g).unwrap();
        assert!((a.y - a.y_tilde).abs() < 1e-9, "{} vs {}", a.y, a.y_tilde);
    }

    #[test]
    fn step2_keeps_solutions_glued() {
        let s = setup(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut st = SystemState::initial(&s, &mut rng).unwrap();
        let w = sample_increments(&mut rng, s.unit, s.dt());
        let lam = lambda_map(&s, &st, &w).unwrap();
        let g: Vec<f64> = lam.drift.iter().map(|v| v * s.dt()).collect();
        st.commit(&s, &w, &g).unwrap();
        st.y_tilde = st.y;
        let len = 3 * s.unit;
        let gs = step2_increments(&s, &st, len);
        let w2 = sample_increments(&mut rng, len, s.dt());
        let x = st.x_window(&s, &w2);
        let v: Vec<f64> = w2.iter().zip(&gs).map(|(a, b)| a + b).collect();
        let xt = st.x_tilde_window(&s, &v);
        let d0 = xt[0] - x[0];
        for (a, b) in x.iter().zip(&xt) {
            assert!((b - a - d0).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_overlap() {
        assert_eq!(step2_success_probability(0.0), 1.0);
        let p = step2_success_probability(2.0);
        assert!((p - 0.317_310_507_862_914_2).abs() < 1e-9, "{p}");
    }

    #[test]
    fn girsanov_single_cell() {
        let grid = TimeGrid::new(1, 0.0, 2.0).unwrap();
        let past = PastGrid::new(1.0, 1.0, 1.0).unwrap();
        let w = WienerPath::from_increments(1, past, vec![0.0], grid, vec![1.0, 0.0]).unwrap();
        let (d, l) = girsanov_density(&DriftFunction::zeros(grid, 1), &w).unwrap();
        assert_eq!((d, l), (1.0, 0.0));
        let (d, _) = girsanov_density(&DriftFunction::constant(grid, &[0.7]), &w).unwrap();
        assert!((d - (0.7f64 - 0.49).exp()).abs() < 1e-14);
    }

    #[test]
    fn tail_all_zero_and_monotone() {
        let z: Vec<TailSample> = (0..10).map(|_| TailSample { time: 0.0, censored: false }).collect();
        let t = [0.5, 1.0, 2.0];
        let e = estimate_tail(&z, &t).unwrap();
        assert!(e.survival.iter().all(|s| *s == 0.0));
        assert!(e.tv_bound.iter().all(|s| *s == 0.0));
        let p = pareto_samples(0.5, 500, 1);
        let grid: Vec<f64> = (0..12).map(|k| 2f64.powi(k)).collect();
        let e = estimate_tail(&p, &grid).unwrap();
        assert!(e.survival.windows(2).all(|w| w[1] <= w[0]));
        let c: Vec<TailSample> = (0..4).map(|_| TailSample { time: 1.0, censored: true }).collect();
        assert!(matches!(estimate_tail(&c, &t), Err(CouplingError::AllCensored(4))));
    }

    #[test]
    fn replay_is_deterministic() {
        let s = setup(small_config());
        let a = run_scheme(&s, 77, 3).unwrap();
        let b = run_scheme(&s, 77, 3).unwrap();
        assert_eq!(a, b);
        let many = run_replicas(&s, 77, 4, 2).unwrap();
        assert_eq!(many[3], a);
    }
}
