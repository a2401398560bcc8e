//! Acceptance checks of the engine, one function per property, shared by
//! the `verify` subcommand and the acceptance test.

use crate::coupling::{
    check_admissible, estimate_tail, lambda_inverse, lambda_map, pareto_samples, replica_rng, run_replicas, CouplingError, CouplingSetup,
    CouplingTrace, SchemeConfig, SystemState, TailEstimate,
};
use crate::fbm::{FbmError, FbmSampler, WienerSpec};
use crate::fraccalc::{gw_to_gx, gx_to_gw_cells, h_transform, CellDrift, FracError, TransformConstants};
use crate::grid::{sewing_check, GridError, GridPath, Increment2, IndexRange, TimeGrid};
use crate::lyapunov::{fit_lyapunov_constant, lyapunov_check, H2Constants, LyapunovError};
use crate::rde::{davie_scalar, solve_hitting_driver, CutoffFunction, RdeError, VectorFieldPair};
use crate::roughpath::{chen_defect, lift_piecewise_linear, rough_norm_parts, RoughPath, RoughPathError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Fbm(#[from] FbmError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    RoughPath(#[from] RoughPathError),
    #[error(transparent)]
    Rde(#[from] RdeError),
    #[error(transparent)]
    Frac(#[from] FracError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!("[{}] {:>2} {:<28} {} ({:.1} s)", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.detail, self.seconds)
    }
}

fn timed(id: u32, name: &'static str, f: impl FnOnce() -> Result<(bool, String), VerifyError>) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { id, name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// 1. Chen defect of lifted fBm (H = 0.4, d = 2, level 9 from level 13).
pub fn chen_relation(seed: u64) -> Check {
    timed(1, "chen relation", || {
        let mut s = FbmSampler::new(0.4, WienerSpec::new(2, 64.0, 1.0, 13))?;
        let mut worst: f64 = 0.0;
        for k in 0..100 {
            let x = s.sample(seed.wrapping_add(k))?.x;
            let rp = lift_piecewise_linear(&x, 9)?;
            let sup = x.sup_norm();
            worst = worst.max(chen_defect(&rp) / (1.0 + sup * sup));
        }
        Ok((worst <= 1e-10, format!("max defect/(1+|x|^2) = {worst:.3e} (bound 1e-10)")))
    })
}

/// 2. Lévy-area scaling `E|A_{0,t}|² ∝ t^{4H}` over `t = 2^{-k}`, k = 2..7.
pub fn levy_area_scaling(seed: u64) -> Check {
    timed(2, "levy area scaling", || {
        let h = 0.4;
        let mut s = FbmSampler::new(h, WienerSpec::new(2, 64.0, 1.0, 12))?;
        let mut m2 = [0.0; 6];
        let n = 2000;
        for k in 0..n {
            let x = s.sample(seed.wrapping_add(k))?.x;
            let rp = lift_piecewise_linear(&x, 7)?;
            for (slot, kk) in (2..=7).enumerate() {
                let a = rp.area(0, 1 << (7 - kk));
                let levy = 0.5 * (a[1] - a[2]);
                m2[slot] += levy * levy / n as f64;
            }
        }
        let lx: Vec<f64> = (2..=7).map(|k| -(k as f64) * 2f64.ln()).collect();
        let ly: Vec<f64> = m2.iter().map(|v| v.ln()).collect();
        let slope = least_squares_slope(&lx, &ly);
        Ok(((slope - 4.0 * h).abs() <= 0.15, format!("slope {slope:.4} (target {:.2} ± 0.15)", 4.0 * h)))
    })
}

/// 3. `Cov(X_{1/2}, X_1) = 1/2` at H = 0.4.
pub fn fbm_covariance(seed: u64) -> Check {
    timed(3, "fbm covariance", || {
        let mut s = FbmSampler::new(0.4, WienerSpec::new(1, 64.0, 1.0, 6))?;
        let n = 10_000;
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let x = s.sample(seed.wrapping_add(k))?.x;
            let (a, b) = (x.value(32)[0], x.value(64)[0]);
            sa += a;
            sb += b;
            sab += a * b;
        }
        let nf = n as f64;
        let cov = (sab - sa * sb / nf) / (nf - 1.0);
        Ok(((cov - 0.5).abs() <= 0.02, format!("cov {cov:.4} (target 0.5 ± 0.02)")))
    })
}

/// 4. Davie scheme for `dy = y dx`, `x = sin t`, at level 12.
pub fn davie_benchmark() -> Check {
    timed(4, "davie benchmark", || {
        let grid = TimeGrid::unit(12);
        let x: Vec<f64> = grid.points().iter().map(|t| t.sin()).collect();
        let y = davie_scalar(&VectorFieldPair::linear_multiplicative(), &x, grid.dt(), 1.0)?;
        let err = (y[y.len() - 1] - 1f64.sin().exp()).abs();
        Ok((err <= 1e-3, format!("|y1 - e^sin1| = {err:.3e} (bound 1e-3)")))
    })
}

/// 5. Self-convergence of the Davie scheme on fBm drivers, levels 7..=11
/// against level 13.
pub fn self_convergence(seed: u64) -> Check {
    timed(5, "self convergence", || {
        let vf = VectorFieldPair::dissipative_sine();
        let mut s = FbmSampler::new(0.4, WienerSpec::new(1, 64.0, 1.0, 13))?;
        let levels: Vec<u32> = (7..=11).collect();
        let mut err = vec![0.0; levels.len()];
        for k in 0..20 {
            let x = s.sample(seed.wrapping_add(k))?.x.component(0);
            let reference = *davie_scalar(&vf, &x, 1.0 / 8192.0, 0.5)?.last().expect("nonempty");
            for (slot, n) in levels.iter().enumerate() {
                let stride = 1usize << (13 - n);
                let xc: Vec<f64> = x.iter().step_by(stride).copied().collect();
                let y = davie_scalar(&vf, &xc, stride as f64 / 8192.0, 0.5)?;
                err[slot] += (y[y.len() - 1] - reference).abs() / 20.0;
            }
        }
        let lx: Vec<f64> = levels.iter().map(|n| *n as f64).collect();
        let ly: Vec<f64> = err.iter().map(|e| e.log2()).collect();
        let order = -least_squares_slope(&lx, &ly);
        let monotone = err.windows(2).all(|w| w[1] < w[0]);
        Ok((order >= 0.5 && monotone, format!("order {order:.3} (≥ 0.5), monotone {monotone}, errors {:?}", err.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>())))
    })
}

fn fbm_drivers(seeds: std::ops::Range<u64>, level: u32) -> Result<Vec<GridPath>, VerifyError> {
    let mut s = FbmSampler::new(0.4, WienerSpec::new(1, 64.0, 1.0, level))?;
    seeds.map(|k| Ok(s.sample(k)?.x)).collect()
}

/// 6. Lyapunov bound: fit on 100 drivers, validate on 100 fresh ones.
pub fn lyapunov_validation(seed: u64) -> Check {
    timed(6, "lyapunov bound", || {
        let vf = VectorFieldPair::dissipative_sine();
        let h2 = H2Constants { c1: 0.0, c2: 1.0 };
        let gamma = 0.35;
        let cal = fbm_drivers(seed..seed + 100, 9)?
            .into_iter()
            .map(|x| lyapunov_check(&vf, &RoughPath::linear_cells(x), &[0.0], gamma, h2, 0.0))
            .collect::<Result<Vec<_>, _>>()?;
        let fit = fit_lyapunov_constant(&cal, gamma, h2)?;
        let fresh = fbm_drivers(seed + 1000..seed + 1100, 9)?
            .into_iter()
            .map(|x| lyapunov_check(&vf, &RoughPath::linear_cells(x), &[0.0], gamma, h2, fit.c))
            .collect::<Result<Vec<_>, _>>()?;
        let passed = fresh.iter().filter(|r| r.holds()).count();
        Ok((passed == 100, format!("{passed}/100 fresh paths, C = {:.4e}", fit.c)))
    })
}

/// 7. Hitting system: analytic case, empirical `M̂` for scaled fBm drivers,
/// and the order of the tangent identity in ξ.
pub fn hitting(seed: u64) -> Check {
    timed(7, "hitting system", || {
        let flat = VectorFieldPair::scalar(|_| 0.0, |_| 0.0, |_| 1.0, |_| 0.0, |_| 0.0);
        let grid = TimeGrid::unit(7);
        let phi = CutoffFunction::new(100.0, 1);
        let s = solve_hitting_driver(&flat, 0.0, 1.0, &vec![0.0; grid.len()], grid, &phi, 33, false)?;
        let mut analytic: f64 = s.hit_gap();
        for i in 0..grid.len() {
            for k in 0..33 {
                analytic = analytic.max((s.y_at(i, k) - k as f64 / 32.0 * (1.0 - grid.point(i))).abs());
            }
        }
        let analytic_ok = analytic <= 1e-8;

        let vf = VectorFieldPair::dissipative_sine();
        let level = 8;
        let grid = TimeGrid::unit(level);
        let phi = CutoffFunction::for_k(20.0, 1);
        let gamma = 0.35;
        let norm_of = |x: &GridPath| -> Result<(f64, f64), VerifyError> {
            let p = rough_norm_parts(&RoughPath::linear_cells(x.clone()), gamma, IndexRange::new(0, grid.steps()))?;
            Ok((p.path_term, p.area_term))
        };
        let gap_of = |x: &[f64]| -> f64 {
            solve_hitting_driver(&vf, 0.5, -0.5, x, grid, &phi, 33, false).map(|s| s.hit_gap()).unwrap_or(f64::INFINITY)
        };
        let pilot = fbm_drivers(seed..seed + 100, level)?;
        let mut m_hat = None;
        for eps in [1.0, 0.5, 0.25, 0.125, 0.0625] {
            let scaled: Vec<GridPath> = pilot.iter().map(|x| x.scale(eps)).collect();
            if scaled.iter().all(|x| gap_of(&x.component(0)) <= 1e-3) {
                let mut m: f64 = 0.0;
                for x in &scaled {
                    let (p, a) = norm_of(x)?;
                    m = m.max(p + a);
                }
                m_hat = Some((eps, m));
                break;
            }
        }
        let Some((eps, m_hat)) = m_hat else {
            return Ok((false, "no scale with 100/100 pilot hits".into()));
        };
        let mut worst: f64 = 0.0;
        for x in fbm_drivers(seed + 5000..seed + 5100, level)? {
            let (p, a) = norm_of(&x)?;
            let theta = (m_hat / (p + a)).min(1.0);
            worst = worst.max(gap_of(&x.scale(theta).component(0)));
        }
        let gap_ok = worst <= 1e-3;

        let x = pilot[0].scale(eps).component(0);
        let mut errs = Vec::new();
        for m in [17usize, 33] {
            let s = solve_hitting_driver(&vf, 0.5, -0.5, &x, grid, &phi, m, false)?;
            let h = 1.0 / (m - 1) as f64;
            let mut e: f64 = 0.0;
            for i in 0..grid.len() {
                let t = grid.point(i);
                for k in 1..m - 1 {
                    let dy = (s.y_at(i, k + 1) - s.y_at(i, k - 1)) / (2.0 * h);
                    e = e.max((dy - s.j_at(i, k) * (1.0 - t)).abs());
                }
            }
            errs.push(e);
        }
        let order = (errs[0] / errs[1]).log2();
        let order_ok = order >= 1.8;
        Ok((
            analytic_ok && gap_ok && order_ok,
            format!("analytic {analytic:.1e}; M̂ = {m_hat:.3} (scale {eps}), fresh max gap {worst:.2e}; tangent order {order:.3}"),
        ))
    })
}

fn lambda_setup(level: u32) -> Result<CouplingSetup, VerifyError> {
    let cfg = SchemeConfig { level, horizon: 2.0, burn_in: 2.0, past_window: 256.0, past_uniform: 2.0, ..SchemeConfig::default() };
    Ok(CouplingSetup::new(cfg, VectorFieldPair::dissipative_sine())?)
}

/// 8. `Λ̄(Λ(w)) = w` on 100 admissible states at level 9.
pub fn lambda_inversion(seed: u64) -> Check {
    timed(8, "lambda inversion", || {
        let setup = lambda_setup(9)?;
        let dt = setup.dt();
        let (mut found, mut tried) = (0, 0u64);
        let (mut worst, mut cancel, mut identity): (f64, f64, usize) = (0.0, 0.0, 0);
        while found < 100 && tried < 400 {
            let mut rng = replica_rng(seed, tried);
            tried += 1;
            let mut st = SystemState::initial(&setup, &mut rng)?;
            st.y = rng.random_range(-2.0..2.0);
            if !check_admissible(&setup, &st)?.admissible {
                continue;
            }
            found += 1;
            let sd = dt.sqrt();
            let w: Vec<f64> = (0..setup.unit_cells())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect();
            let lam = lambda_map(&setup, &st, &w)?;
            identity += lam.identity as usize;
            let back = lambda_inverse(&setup, &st, &lam.image)?;
            worst = worst.max(back.image.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            cancel = cancel.max(back.drift.iter().zip(&lam.drift).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max));
        }
        Ok((
            found == 100 && worst <= 1e-5,
            format!("{found} states, max |Λ̄Λw - w| = {worst:.2e} (bound 1e-5), max |g + ḡ| = {cancel:.2e}, identity fallbacks {identity}"),
        ))
    })
}

/// 9. `E[D] = 1` for a fixed bounded drift over 10⁴ Wiener samples.
pub fn girsanov_mean(seed: u64) -> Check {
    timed(9, "girsanov mean", || {
        let grid = TimeGrid::unit(6);
        let g: Vec<f64> = (0..grid.steps()).map(|i| 0.25 + 0.5 * (2.0 * PI * grid.point(i)).sin()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = grid.dt().sqrt();
        let n = 10_000;
        let mut mean = 0.0;
        for _ in 0..n {
            let dw: Vec<f64> = (0..grid.steps())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect();
            mean += crate::coupling::girsanov_log(&g, &dw, grid.dt()).exp() / n as f64;
        }
        Ok(((mean - 1.0).abs() <= 0.03, format!("E[D] = {mean:.4} (1 ± 0.03)")))
    })
}

/// 10. `g_X → g_W → g_X` round trip and the concatenated-drift check.
pub fn drift_calculus() -> Check {
    timed(10, "drift calculus inversion", || {
        let k = TransformConstants::calibrate(0.4)?;
        let n = 2048;
        let target = |t: f64| (PI * t).sin();
        let gx = CellDrift::from_fn(0.0, 1.0, n, target);
        let gw = gx_to_gw_cells(&gx, &k);
        let ts: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let back = gw_to_gx(&gw, &k, &ts, 1.0 / n as f64)?;
        let round = ts.iter().zip(&back).map(|(t, b)| (b - target(*t)).abs()).fold(0.0, f64::max);
        let n = 1024;
        let past = CellDrift::uniform(-2.0, 0.25, vec![0.5, -1.0, 2.0, 1.0, -0.5, 0.3, 1.5, -2.0]);
        let gx = CellDrift::from_fn(0.0, 1.0, n, target);
        let mids: Vec<f64> = gx.edges().windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let plus = h_transform(&past, &gx, &k, &mids)?;
        let glued = past.concat(&CellDrift::new(gx.edges().to_vec(), plus)?)?;
        let got = gw_to_gx(&glued, &k, &ts, 1.0 / n as f64)?;
        let concat = ts.iter().zip(&got).map(|(t, g)| (g - target(*t)).abs()).fold(0.0, f64::max);
        Ok((round <= 1e-4 && concat <= 1e-3, format!("round trip {round:.2e} (1e-4), concatenated {concat:.2e} (1e-3)")))
    })
}

/// Random two-parameter increments `a(t-s)^{3/2}(1+s) + b(t-s)² + c δψ`
/// with `ψ(t) = sin(ωt + φ)`; the sewing ratio is taken with α = λ = 1,
/// μ₁ = μ₂ = 3/2.
fn random_increment(grid: TimeGrid, rng: &mut ChaCha8Rng) -> Increment2 {
    let a: f64 = rng.random_range(-1.0..1.0);
    let b: f64 = rng.random_range(-1.0..1.0);
    let c: f64 = rng.random_range(-1.0..1.0);
    let om: f64 = rng.random_range(0.5..6.0);
    let ph: f64 = rng.random_range(0.0..2.0 * PI);
    let pts = grid.points();
    let psi: Vec<f64> = pts.iter().map(|t| (om * t + ph).sin()).collect();
    let n = pts.len();
    let p15: Vec<f64> = (0..n).map(|k| (k as f64 * grid.dt()).powf(1.5)).collect();
    Increment2::from_fn(grid, 1, |i, j, o| {
        let h = pts[j] - pts[i];
        o[0] = a * p15[j - i] * (1.0 + pts[i]) + b * h * h + c * (psi[j] - psi[i]);
    })
}

/// 11. Sewing oracle: the largest ratio at level 10 stays within 1.5 times
/// the largest ratio at level 4 over 1000 random increments.
pub fn sewing_oracle(seed: u64) -> Check {
    timed(11, "sewing oracle", || {
        let mut worst = [0.0f64; 2];
        for (slot, level) in [4u32, 10].into_iter().enumerate() {
            let grid = TimeGrid::unit(level);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let g = random_increment(grid, &mut rng);
                let r = sewing_check(&g, 1.0, 1.0, 1.5, 1.5)?;
                worst[slot] = worst[slot].max(if r.violation { f64::INFINITY } else { r.ratio });
            }
        }
        Ok((worst[1] <= 1.5 * worst[0], format!("max ratio n=4 {:.4}, n=10 {:.4} (≤ 1.5x)", worst[0], worst[1])))
    })
}

/// The end-to-end coupling experiment: 200 replicas, H = 0.4, horizon 200.
pub fn coupling_experiment(seed: u64, replicas: u64, threads: usize) -> Result<(CouplingSetup, Vec<CouplingTrace>), VerifyError> {
    let cfg = SchemeConfig { record_increments: true, ..SchemeConfig::default() };
    let setup = CouplingSetup::new(cfg, VectorFieldPair::dissipative_sine())?;
    let traces = run_replicas(&setup, seed, replicas, threads)?;
    Ok((setup, traces))
}

/// `t = 2^{k/2}` up to the horizon.
pub fn tail_grid(horizon: f64) -> Vec<f64> {
    (0..).map(|k| 2f64.powf(k as f64 / 2.0)).take_while(|t| *t <= horizon).collect()
}

fn pooled_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// 12. Pooled Step-1 increments of `W` and `W̃` are standard Gaussian.
pub fn marginal_laws(traces: &[CouplingTrace], seconds: f64) -> Check {
    let mut c = timed(12, "coupling marginals", || {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for t in traces {
            let (x, y) = t.pooled_increments();
            a.extend(x);
            b.extend(y);
        }
        if a.len() < 10_000 {
            return Ok((false, format!("only {} pooled increments", a.len())));
        }
        let n = a.len() as f64;
        let bound = 3.0 / n.sqrt();
        let (ma, va) = pooled_stats(&a);
        let (mb, vb) = pooled_stats(&b);
        let ok = ma.abs() <= bound && mb.abs() <= bound && (va - 1.0).abs() <= 0.05 && (vb - 1.0).abs() <= 0.05;
        Ok((ok, format!("N = {n}, W mean {ma:.4} var {va:.4}, W̃ mean {mb:.4} var {vb:.4} (|mean| ≤ {bound:.4}, var 1 ± 0.05)")))
    });
    c.seconds += seconds;
    c
}

/// 13. End-to-end run plus the synthetic check of the tail estimator.
pub fn end_to_end(traces: &[CouplingTrace], horizon: f64, seconds: f64) -> (Check, Option<TailEstimate>) {
    let mut tail = None;
    let mut c = timed(13, "end-to-end coupling", || {
        let n = traces.len();
        let unc = traces.iter().filter(|t| !t.censored).count();
        let samples: Vec<_> = traces.iter().map(|t| t.sample()).collect();
        let est = estimate_tail(&samples, &tail_grid(horizon))?;
        let monotone = est.survival.windows(2).all(|w| w[1] <= w[0]);
        let grid: Vec<f64> = (0..=20).map(|k| 2f64.powi(2 * k)).collect();
        let synth = estimate_tail(&pareto_samples(0.125, 10_000, 8), &grid)?;
        let ps = synth.slope.unwrap_or(f64::NAN);
        let ok = 2 * unc >= n && monotone && (ps + 0.125).abs() <= 0.03;
        let detail = format!(
            "{unc}/{n} uncensored, survival nonincreasing {monotone}, Pareto(1/8) slope {ps:.4} (-0.125 ± 0.03), measured slope {} (reported)",
            est.slope.map_or("n/a".to_string(), |s| format!("{s:.3} ± {:.3}", est.slope_ci.unwrap_or(f64::NAN)))
        );
        tail = Some(est);
        Ok((ok, detail))
    });
    c.seconds += seconds;
    (c, tail)
}

/// All checks in order.
pub fn run_all(seed: u64, threads: usize) -> Vec<Check> {
    let mut out = vec![
        chen_relation(seed),
        levy_area_scaling(seed),
        fbm_covariance(seed),
        davie_benchmark(),
        self_convergence(seed),
        lyapunov_validation(seed),
        hitting(seed),
        lambda_inversion(seed),
        girsanov_mean(seed),
        drift_calculus(),
        sewing_oracle(seed),
    ];
    let t = Instant::now();
    match coupling_experiment(seed, 200, threads) {
        Ok((setup, traces)) => {
            let secs = t.elapsed().as_secs_f64();
            out.push(marginal_laws(&traces, secs));
            out.push(end_to_end(&traces, setup.config().horizon, 0.0).0);
        }
        Err(e) => {
            for (id, name) in [(12, "coupling marginals"), (13, "end-to-end coupling")] {
                out.push(Check { id, name, passed: false, detail: format!("error: {e}"), seconds: 0.0 });
            }
        }
    }
    out
}
