//! Two-sided Wiener paths and the Mandelbrot–Van Ness fBm
//! `X_t = α_H ∫ [(t-r)_+^{H-1/2} - (-r)_+^{H-1/2}] dW_r`, split into the past
//! component `D` (increments before 0) and the innovation `Z` (after 0).
//!
//! Every kernel is integrated exactly over each cell against the piecewise
//! constant density `ΔW / |cell|`, which is the same as integrating by parts
//! against the piecewise-linear Wiener path. On the uniform part of the grid
//! the sums are Toeplitz/Hankel products evaluated with FFTs.

use crate::grid::{ekgamma_norm, DerivativeSamples, GridError, GridPath, NormReport, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use statrs::function::gamma::gamma;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FbmError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("Hurst parameter {0} outside (1/3, 1/2)")]
    Hurst(f64),
    #[error("window must be positive (got {0})")]
    Window(f64),
    #[error("derivative of the past component requested at t = {0}; only t > 0 is allowed")]
    DerivativeAtZero(f64),
    #[error("time origin {0} is not a point of the future grid")]
    OriginOffGrid(f64),
    #[error("drift support [{start}, {end}] is not aligned with the Wiener grid")]
    DriftSupport { start: f64, end: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

pub fn check_hurst(h: f64) -> Result<(), FbmError> {
    if h > 1.0 / 3.0 && h < 0.5 {
        Ok(())
    } else {
        Err(FbmError::Hurst(h))
    }
}

/// Normalisation making `E|X_t - X_s|^2 = |t-s|^{2H}` in continuous time.
pub fn alpha_h_closed_form(h: f64) -> f64 {
    (2.0 * h * (std::f64::consts::PI * h).sin() * gamma(2.0 * h)).sqrt() / gamma(h + 0.5)
}

/// Cells on `(-T_past, 0]`: `uniform` cells of width `dt` next to 0, then
/// widths doubling outwards until `T_past` is covered.
#[derive(Debug, Clone, PartialEq)]
pub struct PastGrid {
    edges: Vec<f64>,
    uniform: usize,
    dt: f64,
}

impl PastGrid {
    pub fn new(dt: f64, uniform_span: f64, t_past: f64) -> Result<Self, FbmError> {
        if !(dt > 0.0) || !(t_past > 0.0) || uniform_span < 0.0 {
            return Err(FbmError::Window(dt.min(t_past)));
        }
        let uniform = ((uniform_span.min(t_past) / dt).round() as usize).max(1);
        let mut rev = vec![0.0];
        for m in 1..=uniform {
            rev.push(-(m as f64) * dt);
        }
        let mut left = -(uniform as f64) * dt;
        let mut w = 2.0 * dt;
        while left > -t_past + 1e-12 {
            left = (left - w).max(-t_past);
            rev.push(left);
            w *= 2.0;
        }
        rev.reverse();
        Ok(Self { edges: rev, uniform, dt })
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    /// Cell `k` in increasing time order.
    pub fn cell(&self, k: usize) -> (f64, f64) {
        (self.edges[k], self.edges[k + 1])
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Number of width-`dt` cells adjacent to 0.
    pub fn uniform_cells(&self) -> usize {
        self.uniform
    }

    pub fn geometric_cells(&self) -> usize {
        self.cells() - self.uniform
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_past(&self) -> f64 {
        -self.edges[0]
    }
}

/// Sampling windows for [`sample_wiener`].
#[derive(Debug, Clone, PartialEq)]
pub struct WienerSpec {
    pub dim: usize,
    /// Length of the truncated past, `T_past`.
    pub past_window: f64,
    /// Length of the near past resolved at the future spacing; defaults to
    /// the future window.
    pub past_uniform_span: Option<f64>,
    pub future_window: f64,
    pub level: u32,
}

impl WienerSpec {
    pub fn new(dim: usize, past_window: f64, future_window: f64, level: u32) -> Self {
        Self { dim, past_window, past_uniform_span: None, future_window, level }
    }

    pub fn future_grid(&self) -> Result<TimeGrid, FbmError> {
        Ok(TimeGrid::new(self.level, 0.0, self.future_window)?)
    }

    pub fn past_grid(&self) -> Result<PastGrid, FbmError> {
        let g = self.future_grid()?;
        PastGrid::new(g.dt(), self.past_uniform_span.unwrap_or(self.future_window), self.past_window)
    }
}

/// Increments of a two-sided Wiener path on a past grid and a future grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    dim: usize,
    past: PastGrid,
    past_increments: Vec<f64>,
    future: TimeGrid,
    future_increments: Vec<f64>,
    seed: Option<u64>,
}

impl WienerPath {
    pub fn from_increments(
        dim: usize,
        past: PastGrid,
        past_increments: Vec<f64>,
        future: TimeGrid,
        future_increments: Vec<f64>,
    ) -> Result<Self, FbmError> {
        if past_increments.len() != past.cells() * dim {
            return Err(FbmError::Dimension { expected: past.cells() * dim, got: past_increments.len() });
        }
        if future_increments.len() != future.steps() * dim {
            return Err(FbmError::Dimension { expected: future.steps() * dim, got: future_increments.len() });
        }
        Ok(Self { dim, past, past_increments, future, future_increments, seed: None })
    }

    /// Fresh Gaussian increments from `rng`.
    pub fn sample<R: Rng + ?Sized>(spec: &WienerSpec, rng: &mut R) -> Result<Self, FbmError> {
        if !(spec.past_window > 0.0) {
            return Err(FbmError::Window(spec.past_window));
        }
        if !(spec.future_window > 0.0) {
            return Err(FbmError::Window(spec.future_window));
        }
        let future = spec.future_grid()?;
        let past = spec.past_grid()?;
        let mut past_increments = Vec::with_capacity(past.cells() * spec.dim);
        for k in 0..past.cells() {
            let (a, b) = past.cell(k);
            let sd = (b - a).sqrt();
            for _ in 0..spec.dim {
                let z: f64 = StandardNormal.sample(rng);
                past_increments.push(sd * z);
            }
        }
        let sd = future.dt().sqrt();
        let future_increments = (0..future.steps() * spec.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            })
            .collect();
        Ok(Self { dim: spec.dim, past, past_increments, future, future_increments, seed: None })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn past(&self) -> &PastGrid {
        &self.past
    }

    pub fn future_grid(&self) -> &TimeGrid {
        &self.future
    }

    pub fn past_increments(&self) -> &[f64] {
        &self.past_increments
    }

    pub fn future_increments(&self) -> &[f64] {
        &self.future_increments
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `W` on the future grid, `W_0 = 0`.
    pub fn future_path(&self) -> GridPath {
        let d = self.dim;
        let mut v = vec![0.0; self.future.len() * d];
        for i in 0..self.future.steps() {
            for k in 0..d {
                v[(i + 1) * d + k] = v[i * d + k] + self.future_increments[i * d + k];
            }
        }
        GridPath::new(self.future, d, v).expect("finite Wiener path")
    }

    /// `W` at the past edges (increasing time, last value `W_0 = 0`).
    pub fn past_values(&self) -> Vec<f64> {
        let d = self.dim;
        let n = self.past.cells();
        let mut v = vec![0.0; (n + 1) * d];
        for c in (0..n).rev() {
            for k in 0..d {
                v[c * d + k] = v[(c + 1) * d + k] - self.past_increments[c * d + k];
            }
        }
        v
    }
}

/// Draws a Wiener path from `seed`; identical seeds give identical paths.
pub fn sample_wiener(seed: u64, spec: &WienerSpec) -> Result<WienerPath, FbmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WienerPath::sample(spec, &mut rng)?;
    w.seed = Some(seed);
    Ok(w)
}

/// `[(t-a)^p - (t-b)^p] / p` for `p = H + 1/2`, i.e. `∫_a^b (t-r)^{H-1/2} dr`.
#[inline]
fn kint(h: f64, t: f64, a: f64, b: f64) -> f64 {
    let p = h + 0.5;
    ((t - a).max(0.0).powf(p) - (t - b).max(0.0).powf(p)) / p
}

/// `(t-a)^{H-1/2} - (t-b)^{H-1/2}`, i.e. `(H-1/2) ∫_a^b (t-r)^{H-3/2} dr`.
#[inline]
fn kder(h: f64, t: f64, a: f64, b: f64) -> f64 {
    let q = h - 0.5;
    (t - a).powf(q) - (t - b).powf(q)
}

/// α_H such that the discretised `X_1` has unit variance, using the cell
/// integrals of a past grid of spacing `dt` truncated at `t_past`.
pub fn alpha_h_numeric(h: f64, dt: f64, t_past: f64) -> Result<f64, FbmError> {
    check_hurst(h)?;
    let steps = (1.0 / dt).round() as usize;
    let dt = 1.0 / steps as f64;
    let past = PastGrid::new(dt, 1.0, t_past)?;
    let mut var = 0.0;
    for k in 0..past.cells() {
        let (a, b) = past.cell(k);
        let v = kint(h, 1.0, a, b) - kint(h, 0.0, a, b);
        var += v * v / (b - a);
    }
    for k in 0..steps {
        let (a, b) = (k as f64 * dt, (k + 1) as f64 * dt);
        let v = kint(h, 1.0, a, b);
        var += v * v / dt;
    }
    Ok(1.0 / var.sqrt())
}

/// Linear convolutions by FFT with cached plans.
pub(crate) struct Convolver {
    planner: FftPlanner<f64>,
}

impl Convolver {
    pub(crate) fn new() -> Self {
        Self { planner: FftPlanner::new() }
    }

    /// Spectrum of `a` zero-padded to `len`.
    pub(crate) fn spectrum(&mut self, a: &[f64], len: usize) -> Vec<Complex<f64>> {
        let fft = self.planner.plan_fft_forward(len);
        let mut buf: Vec<Complex<f64>> = a.iter().map(|v| Complex::new(*v, 0.0)).collect();
        buf.resize(len, Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        buf
    }

    /// `(a * k)_i` for `i < out`, with `k_hat` the spectrum of `k` at `len`.
    pub(crate) fn apply(&mut self, a: &[f64], k_hat: &[Complex<f64>], out: usize) -> Vec<f64> {
        let len = k_hat.len();
        let mut buf = self.spectrum(a, len);
        for (x, y) in buf.iter_mut().zip(k_hat) {
            *x *= *y;
        }
        let inv: Arc<dyn rustfft::Fft<f64>> = self.planner.plan_fft_inverse(len);
        inv.process(&mut buf);
        let s = 1.0 / len as f64;
        buf.iter().take(out).map(|c| c.re * s).collect()
    }

    pub(crate) fn convolve(&mut self, a: &[f64], k: &[f64], out: usize) -> Vec<f64> {
        let len = (a.len() + k.len()).next_power_of_two();
        let k_hat = self.spectrum(k, len);
        self.apply(a, &k_hat, out)
    }
}

/// `c_m = [m^{H+1/2} - (m-1)^{H+1/2}] / (H+1/2)`, with `c_0 = 0`.
pub fn liouville_weights(h: f64, len: usize) -> Vec<f64> {
    let p = h + 0.5;
    (0..len).map(|m| if m == 0 { 0.0 } else { ((m as f64).powf(p) - ((m - 1) as f64).powf(p)) / p }).collect()
}

/// `ε_k = (k+1)^{H-1/2} - k^{H-1/2}` for `k >= 1`, with `ε_0 = 0`.
fn derivative_weights(h: f64, len: usize) -> Vec<f64> {
    let q = h - 0.5;
    (0..len).map(|k| if k == 0 { 0.0 } else { ((k + 1) as f64).powf(q) - (k as f64).powf(q) }).collect()
}

/// The fBm and its decomposition on the future grid of a Wiener sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FbmScenario {
    pub w: WienerPath,
    pub h: f64,
    pub alpha_h: f64,
    pub x: GridPath,
    pub d: GridPath,
    pub z: GridPath,
    /// `D'` at the future grid points `t_i`, `i >= 1`.
    pub dprime: DerivativeSamples,
    pub origin_shift: f64,
    /// Standard deviation of the omitted far-past contribution to `D_T`
    /// at the end `T` of the window.
    pub truncation_sd: f64,
}

/// Precomputed kernels for one `(H, past grid, future grid)` layout.
pub struct FbmEngine {
    h: f64,
    alpha_h: f64,
    past: PastGrid,
    future: TimeGrid,
    conv: Convolver,
    c_hat: Vec<Complex<f64>>,
    eps_hat: Vec<Complex<f64>>,
    c_const: Vec<f64>,
    geo_d: Vec<f64>,
    geo_dp: Vec<f64>,
}

impl FbmEngine {
    pub fn new(h: f64, past: PastGrid, future: TimeGrid) -> Result<Self, FbmError> {
        check_hurst(h)?;
        let dt = future.dt();
        if (past.dt() - dt).abs() > 1e-12 * dt {
            return Err(FbmError::Window(past.dt()));
        }
        let alpha_h = alpha_h_numeric(h, dt.min(1.0 / 64.0), past.t_past())?;
        Self::with_alpha(h, alpha_h, past, future)
    }

    pub fn with_alpha(h: f64, alpha_h: f64, past: PastGrid, future: TimeGrid) -> Result<Self, FbmError> {
        let n = future.steps();
        let l = past.uniform_cells();
        let kl = l + n + 2;
        let len = (kl + l.max(n) + 1).next_power_of_two();
        let mut conv = Convolver::new();
        let c = liouville_weights(h, kl);
        let c_hat = conv.spectrum(&c, len);
        let eps = derivative_weights(h, kl);
        let eps_hat = conv.spectrum(&eps, len);
        let c_const = c[1..=l].to_vec();
        let ng = past.geometric_cells();
        let mut geo_d = vec![0.0; (n + 1) * ng];
        let mut geo_dp = vec![0.0; (n + 1) * ng];
        for i in 0..=n {
            let t = future.point(i);
            for g in 0..ng {
                let (a, b) = past.cell(g);
                let w = b - a;
                geo_d[i * ng + g] = alpha_h * (kint(h, t, a, b) - kint(h, 0.0, a, b)) / w;
                if i > 0 {
                    geo_dp[i * ng + g] = alpha_h * kder(h, t, a, b) / w;
                }
            }
        }
        Ok(Self { h, alpha_h, past, future, conv, c_hat, eps_hat, c_const, geo_d, geo_dp })
    }

    pub fn alpha_h(&self) -> f64 {
        self.alpha_h
    }

    pub fn hurst(&self) -> f64 {
        self.h
    }

    pub fn future_grid(&self) -> &TimeGrid {
        &self.future
    }

    pub fn past_grid(&self) -> &PastGrid {
        &self.past
    }

    /// `Z` for future increments `dw` (one component): `α_H dt^{H-1/2} Σ c_{i-k} ΔW_k`.
    pub fn innovation(&mut self, dw: &[f64]) -> Vec<f64> {
        let n = self.future.steps();
        let scale = self.alpha_h * self.future.dt().powf(self.h - 0.5);
        // out[i] = Σ_k ΔW_k c_{i-k}; c_0 = 0 drops k = i.
        let out = self.conv.apply(dw, &self.c_hat, n + 1);
        (0..=n).map(|i| scale * out[i]).collect()
    }

    /// `(D, D')` on the future grid for the past increments of one component
    /// (increasing time order, as stored in [`WienerPath`]).
    fn past_parts(&mut self, past_inc: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.future.steps();
        let l = self.past.uniform_cells();
        let ng = self.past.geometric_cells();
        let dt = self.future.dt();
        let (geo, uni) = past_inc.split_at(ng);
        // uni[l-1-m] is the cell [-(m+1)dt, -m dt].
        let hank = self.conv.apply(uni, &self.c_hat, l + n + 1);
        let hank_d = self.conv.apply(uni, &self.eps_hat, l + n + 1);
        let cst: f64 = (0..l).map(|m| uni[l - 1 - m] * self.c_const[m]).sum();
        let sd = self.alpha_h * dt.powf(self.h - 0.5);
        let sdp = self.alpha_h * dt.powf(self.h - 1.5);
        let mut d = vec![0.0; n + 1];
        let mut dp = vec![0.0; n + 1];
        for i in 0..=n {
            // Σ_m ΔW_m c_{i+m+1} sits at index i + l of the convolution.
            let mut v = sd * (hank[i + l] - cst);
            let mut p = if i > 0 { sdp * hank_d[i + l - 1] } else { 0.0 };
            let row = &self.geo_d[i * ng..(i + 1) * ng];
            let rowp = &self.geo_dp[i * ng..(i + 1) * ng];
            for g in 0..ng {
                v += row[g] * geo[g];
                p += rowp[g] * geo[g];
            }
            d[i] = v;
            dp[i] = p;
        }
        d[0] = 0.0;
        (d, dp)
    }

    pub fn scenario(&mut self, w: &WienerPath) -> Result<FbmScenario, FbmError> {
        if w.past() != &self.past || w.future_grid() != &self.future {
            return Err(FbmError::Window(w.future_grid().span()));
        }
        let dim = w.dim();
        let n = self.future.steps();
        let mut dv = vec![0.0; (n + 1) * dim];
        let mut zv = vec![0.0; (n + 1) * dim];
        let mut dpv = vec![0.0; n * dim];
        for k in 0..dim {
            let past: Vec<f64> = w.past_increments().iter().skip(k).step_by(dim).copied().collect();
            let fut: Vec<f64> = w.future_increments().iter().skip(k).step_by(dim).copied().collect();
            let (d, dp) = self.past_parts(&past);
            let z = self.innovation(&fut);
            for i in 0..=n {
                dv[i * dim + k] = d[i];
                zv[i * dim + k] = z[i];
                if i > 0 {
                    dpv[(i - 1) * dim + k] = dp[i];
                }
            }
        }
        zv[..dim].iter_mut().for_each(|v| *v = 0.0);
        let xv: Vec<f64> = dv.iter().zip(&zv).map(|(a, b)| a + b).collect();
        let times = (1..=n).map(|i| self.future.point(i)).collect();
        let t_end = self.future.end();
        let tp = self.past.t_past();
        let truncation_sd = self.alpha_h
            * (0.5 - self.h)
            * t_end
            * (tp.powf(2.0 * self.h - 2.0) / (2.0 - 2.0 * self.h)).sqrt();
        Ok(FbmScenario {
            w: w.clone(),
            h: self.h,
            alpha_h: self.alpha_h,
            x: GridPath::new(self.future, dim, xv)?,
            d: GridPath::new(self.future, dim, dv)?,
            z: GridPath::new(self.future, dim, zv)?,
            dprime: DerivativeSamples { times, dim, orders: vec![dpv] },
            origin_shift: 0.0,
            truncation_sd,
        })
    }
}

/// An engine bundled with the Wiener layout it was built for, so that seeds
/// map directly to fBm scenarios.
pub struct FbmSampler {
    engine: FbmEngine,
    spec: WienerSpec,
}

impl FbmSampler {
    pub fn new(h: f64, spec: WienerSpec) -> Result<Self, FbmError> {
        let engine = FbmEngine::new(h, spec.past_grid()?, spec.future_grid()?)?;
        Ok(Self { engine, spec })
    }

    pub fn spec(&self) -> &WienerSpec {
        &self.spec
    }

    pub fn engine(&mut self) -> &mut FbmEngine {
        &mut self.engine
    }

    pub fn sample(&mut self, seed: u64) -> Result<FbmScenario, FbmError> {
        let w = sample_wiener(seed, &self.spec)?;
        self.engine.scenario(&w)
    }
}

/// One-off construction of the fBm from a Wiener sample.
pub fn fbm_from_wiener(w: &WienerPath, h: f64) -> Result<FbmScenario, FbmError> {
    FbmEngine::new(h, w.past().clone(), *w.future_grid())?.scenario(w)
}

/// Shifted past component seen from origin `tau` (a future grid point):
/// `D^{(τ)}_t = α_H ∫_{-∞}^τ [(t+τ-r)^{H-1/2} - (τ-r)^{H-1/2}] dW_r` and its
/// derivative, on `t_grid` (usually `[0, 1]`). The derivative samples skip `t = 0`.
pub fn past_component(
    w: &WienerPath,
    h: f64,
    alpha_h: f64,
    tau: f64,
    t_grid: &TimeGrid,
) -> Result<(GridPath, DerivativeSamples), FbmError> {
    check_hurst(h)?;
    if t_grid.origin() < 0.0 {
        return Err(FbmError::DerivativeAtZero(t_grid.origin()));
    }
    let fg = w.future_grid();
    let k_tau = fg.index_of(tau).ok_or(FbmError::OriginOffGrid(tau))?;
    let dim = w.dim();
    let mut cells: Vec<(f64, f64, usize, bool)> = (0..w.past().cells())
        .map(|c| {
            let (a, b) = w.past().cell(c);
            (a, b, c, true)
        })
        .collect();
    cells.extend((0..k_tau).map(|k| (fg.point(k), fg.point(k + 1), k, false)));
    let mut d = vec![0.0; t_grid.len() * dim];
    let mut ts = Vec::new();
    let mut dp = Vec::new();
    for i in 0..t_grid.len() {
        let t = t_grid.point(i);
        let mut dvec = vec![0.0; dim];
        let mut pvec = vec![0.0; dim];
        for &(a, b, idx, past) in &cells {
            let inc = if past { &w.past_increments()[idx * dim..(idx + 1) * dim] } else { &w.future_increments()[idx * dim..(idx + 1) * dim] };
            let width = b - a;
            let kd = (kint(h, t + tau, a, b) - kint(h, tau, a, b)) / width;
            let kp = if t > 0.0 { kder(h, t + tau, a, b) / width } else { 0.0 };
            for k in 0..dim {
                dvec[k] += alpha_h * kd * inc[k];
                pvec[k] += alpha_h * kp * inc[k];
            }
        }
        d[i * dim..(i + 1) * dim].copy_from_slice(&dvec);
        if t > 0.0 {
            ts.push(t);
            dp.extend(pvec);
        }
    }
    Ok((GridPath::new(*t_grid, dim, d)?, DerivativeSamples { times: ts, dim, orders: vec![dp] }))
}

/// `sup_{t∈(0,1]} t^{1-γ} |D'(t)|` on the sample times.
pub fn d_singular_norm(dprime: &DerivativeSamples, gamma: f64) -> Result<NormReport, FbmError> {
    Ok(ekgamma_norm(dprime, 1, gamma)?)
}

/// Liouville transform `D_X^+ w(t) = α_H ∫_0^t (t-r)^{H-1/2} dw_r` of a path
/// with `w(0) = 0`, exact for `w` linear between grid points.
pub fn dx_plus(w: &GridPath, h: f64, alpha_h: f64) -> Result<GridPath, FbmError> {
    check_hurst(h)?;
    let grid = *w.grid();
    let n = grid.steps();
    let dim = w.dim();
    let c = liouville_weights(h, n + 1);
    let mut conv = Convolver::new();
    let scale = alpha_h * grid.dt().powf(h - 0.5);
    let mut out = vec![0.0; (n + 1) * dim];
    for k in 0..dim {
        let inc: Vec<f64> = (0..n).map(|i| w.value(i + 1)[k] - w.value(i)[k]).collect();
        let z = conv.convolve(&inc, &c, n + 1);
        for i in 1..=n {
            out[i * dim + k] = scale * z[i];
        }
    }
    Ok(GridPath::new(grid, dim, out)?)
}

/// A drift that is constant on each cell of its grid, in units of 1/time.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftFunction {
    pub grid: TimeGrid,
    pub dim: usize,
    /// `steps * dim` values, cell-major.
    pub cells: Vec<f64>,
}

impl DriftFunction {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, dim, cells: vec![0.0; grid.steps() * dim] }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let cells = (0..grid.steps()).flat_map(|_| value.iter().copied()).collect();
        Self { grid, dim: value.len(), cells }
    }

    /// Left-point samples of `f`.
    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64, &mut [f64])) -> Self {
        let mut cells = vec![0.0; grid.steps() * dim];
        for (i, c) in cells.chunks_exact_mut(dim).enumerate() {
            f(grid.point(i), c);
        }
        Self { grid, dim, cells }
    }

    pub fn negate(&self) -> Self {
        Self { grid: self.grid, dim: self.dim, cells: self.cells.iter().map(|v| -v).collect() }
    }

    pub fn l2_squared(&self) -> f64 {
        self.cells.iter().map(|v| v * v).sum::<f64>() * self.grid.dt()
    }
}

/// `dW̃ = dW + g dt` on the future cells covered by `g`.
pub fn apply_drift(w: &WienerPath, g: &DriftFunction) -> Result<WienerPath, FbmError> {
    if g.dim != w.dim() {
        return Err(FbmError::Dimension { expected: w.dim(), got: g.dim });
    }
    let fg = w.future_grid();
    let support = FbmError::DriftSupport { start: g.grid.origin(), end: g.grid.end() };
    if (g.grid.dt() - fg.dt()).abs() > 1e-12 * fg.dt() {
        return Err(support);
    }
    let start = fg.index_of(g.grid.origin()).ok_or(support.clone())?;
    if start + g.grid.steps() > fg.steps() {
        return Err(support);
    }
    let mut out = w.clone();
    let dt = fg.dt();
    let dim = w.dim();
    for (k, v) in g.cells.iter().enumerate() {
        let cell = start + k / dim;
        out.future_increments[cell * dim + k % dim] += v * dt;
    }
    out.seed = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_alpha_matches_closed_form() {
        for h in [0.35, 0.4, 0.45] {
            let a = alpha_h_numeric(h, 1.0 / 1024.0, 1024.0).unwrap();
            let b = alpha_h_closed_form(h);
            assert!((a - b).abs() < 2e-3 * b, "h={h}: {a} vs {b}");
        }
    }

    #[test]
    fn past_grid_layout() {
        let p = PastGrid::new(0.125, 1.0, 64.0).unwrap();
        assert_eq!(p.uniform_cells(), 8);
        assert_eq!(p.edges()[0], -64.0);
        assert_eq!(*p.edges().last().unwrap(), 0.0);
        for w in p.edges().windows(2) {
            assert!(w[1] > w[0]);
        }
        let (a, b) = p.cell(p.cells() - 1);
        assert_eq!((a, b), (-0.125, 0.0));
    }

    #[test]
    fn same_seed_same_path() {
        let spec = WienerSpec::new(2, 16.0, 1.0, 5);
        assert_eq!(sample_wiener(7, &spec).unwrap(), sample_wiener(7, &spec).unwrap());
        assert_ne!(sample_wiener(7, &spec).unwrap(), sample_wiener(8, &spec).unwrap());
    }

    fn linear_past(spec: &WienerSpec) -> WienerPath {
        let past = spec.past_grid().unwrap();
        let inc: Vec<f64> = (0..past.cells()).map(|c| past.cell(c).1 - past.cell(c).0).collect();
        let fut = spec.future_grid().unwrap();
        WienerPath::from_increments(1, past, inc, fut, vec![0.0; fut.steps()]).unwrap()
    }

    fn linear_truncated(h: f64, alpha: f64, t: f64, tp: f64) -> f64 {
        let p = h + 0.5;
        alpha * ((t + tp).powf(p) - t.powf(p) - tp.powf(p)) / p
    }

    #[test]
    fn linear_past_gives_closed_form() {
        let h = 0.4;
        let spec = WienerSpec::new(1, 1024.0, 1.0, 6);
        let w = linear_past(&spec);
        let s = fbm_from_wiener(&w, h).unwrap();
        for i in [1usize, 7, 32, 64] {
            let t = s.d.grid().point(i);
            let want = linear_truncated(h, s.alpha_h, t, 1024.0);
            assert!((s.d.value(i)[0] - want).abs() < 1e-10, "t={t}: {} vs {want}", s.d.value(i)[0]);
        }
        // The truncated closed form approaches -α_H t^{H+1/2}/(H+1/2) as T_past grows.
        let p = h + 0.5;
        let far = linear_truncated(h, 1.0, 1.0, 1e12);
        assert!((far + 1.0 / p).abs() < 0.1);
        let (dt, dps) = past_component(&w, h, s.alpha_h, 0.0, &TimeGrid::unit(6)).unwrap();
        for i in 0..65 {
            assert!((dt.value(i)[0] - s.d.value(i)[0]).abs() < 1e-10);
        }
        for (k, t) in dps.times.iter().enumerate() {
            let want = s.alpha_h * ((t + 1024.0).powf(h - 0.5) - t.powf(h - 0.5));
            assert!((dps.orders[0][k] - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn zero_wiener_gives_zero_paths() {
        let spec = WienerSpec::new(1, 32.0, 1.0, 5);
        let past = spec.past_grid().unwrap();
        let fut = spec.future_grid().unwrap();
        let w = WienerPath::from_increments(1, past.clone(), vec![0.0; past.cells()], fut, vec![0.0; 32]).unwrap();
        let s = fbm_from_wiener(&w, 0.4).unwrap();
        assert_eq!(s.x.sup_norm(), 0.0);
        assert_eq!(s.d.sup_norm(), 0.0);
        assert_eq!(s.z.sup_norm(), 0.0);
        let (d, dp) = past_component(&w, 0.4, s.alpha_h, 0.5, &TimeGrid::unit(4)).unwrap();
        assert_eq!(d.sup_norm(), 0.0);
        assert!(dp.orders[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn x_is_d_plus_z_and_fft_matches_direct_sums() {
        let spec = WienerSpec::new(2, 256.0, 1.0, 6);
        let w = sample_wiener(11, &spec).unwrap();
        let s = fbm_from_wiener(&w, 0.4).unwrap();
        for i in 0..65 {
            for k in 0..2 {
                assert_eq!(s.x.value(i)[k], s.d.value(i)[k] + s.z.value(i)[k]);
            }
        }
        assert_eq!(s.x.value(0), &[0.0, 0.0]);
        let (d, dp) = past_component(&w, 0.4, s.alpha_h, 0.0, s.d.grid()).unwrap();
        for i in 0..65 {
            for k in 0..2 {
                assert!((d.value(i)[k] - s.d.value(i)[k]).abs() < 1e-11);
            }
        }
        for (a, b) in dp.orders[0].iter().zip(&s.dprime.orders[0]) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        // Innovation through dx_plus of the future path.
        let z = dx_plus(&w.future_path(), 0.4, s.alpha_h).unwrap();
        for i in 0..65 {
            for k in 0..2 {
                assert!((z.value(i)[k] - s.z.value(i)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_past_component_contains_the_recent_future() {
        let spec = WienerSpec::new(1, 64.0, 2.0, 7);
        let w = sample_wiener(5, &spec).unwrap();
        let s = fbm_from_wiener(&w, 0.4).unwrap();
        // X_{τ+t} - X_τ = D^{(τ)}_t + (innovation after τ).
        let tau = 1.0;
        let (d, _) = past_component(&w, 0.4, s.alpha_h, tau, &TimeGrid::unit(6)).unwrap();
        let fut = w.future_path();
        let tail: Vec<f64> = (64..=128).map(|i| fut.value(i)[0] - fut.value(64)[0]).collect();
        let tail = GridPath::scalar(TimeGrid::unit(6), tail).unwrap();
        let zt = dx_plus(&tail, 0.4, s.alpha_h).unwrap();
        for i in 0..=64 {
            let lhs = s.x.value(64 + i)[0] - s.x.value(64)[0];
            let rhs = d.value(i)[0] + zt.value(i)[0];
            assert!((lhs - rhs).abs() < 1e-10, "i={i}");
        }
    }

    #[test]
    fn dx_plus_of_identity() {
        let h = 0.4;
        let a = alpha_h_closed_form(h);
        let grid = TimeGrid::unit(7);
        let w = GridPath::from_fn(grid, 1, |t, o| o[0] = t).unwrap();
        let z = dx_plus(&w, h, a).unwrap();
        for i in 0..grid.len() {
            let t = grid.point(i);
            let want = a * t.powf(h + 0.5) / (h + 0.5);
            assert!((z.value(i)[0] - want).abs() < 1e-12);
        }
        assert_eq!(dx_plus(&GridPath::zeros(grid, 1), h, a).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn drift_group_action() {
        let spec = WienerSpec::new(1, 8.0, 1.0, 4);
        let w = sample_wiener(1, &spec).unwrap();
        let zero = DriftFunction::zeros(TimeGrid::unit(4), 1);
        assert_eq!(apply_drift(&w, &zero).unwrap().future_increments(), w.future_increments());
        let one = DriftFunction::constant(TimeGrid::unit(4), &[1.0]);
        let shifted = apply_drift(&w, &one).unwrap();
        let d = shifted.future_path().last()[0] - w.future_path().last()[0];
        assert!((d - 1.0).abs() < 1e-14);
        let g = DriftFunction::from_fn(TimeGrid::unit(4), 1, |t, o| o[0] = (3.0 * t).sin());
        let back = apply_drift(&apply_drift(&w, &g).unwrap(), &g.negate()).unwrap();
        for (a, b) in back.future_increments().iter().zip(w.future_increments()) {
            assert!((a - b).abs() < 1e-15);
        }
        let off = DriftFunction::zeros(TimeGrid::new(4, 0.5, 1.0).unwrap(), 1);
        assert!(apply_drift(&w, &off).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(check_hurst(0.3).is_err());
        assert!(check_hurst(0.5).is_err());
        let spec = WienerSpec::new(1, 8.0, 1.0, 4);
        let w = sample_wiener(1, &spec).unwrap();
        assert!(matches!(
            past_component(&w, 0.4, 1.0, 0.3, &TimeGrid::unit(3)),
            Err(FbmError::OriginOffGrid(_))
        ));
    }
}
