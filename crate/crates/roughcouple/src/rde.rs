//! Davie-type schemes: the rough SDE `dy = b(y) dt + σ(y) dx`, the abstract
//! singular equation `dy = B(y) dh + Σ(y) dz`, and the functional hitting
//! system on a ξ-grid that steers two solutions together at time 1.

use crate::grid::{holder_norm, GridError, GridPath, Increment2, IndexRange, NormReport, TimeGrid};
use crate::roughpath::RoughPath;
use std::sync::Arc;
use thiserror::Error;

/// States with a norm above this are reported as a blow-up.
pub const BLOWUP_NORM: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RdeError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("numerical blow-up at step {step}; last finite state {last:?}")]
    BlowUp { step: usize, last: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("driver grid differs from the solver grid")]
    GridMismatch,
    #[error("ξ-grid needs at least 2 points (got {0})")]
    XiGrid(usize),
    #[error("the hitting system needs scalar fields with a second derivative of σ")]
    NotScalar,
    #[error("σ vanishes at {0}; the hitting drift needs σ invertible")]
    Singular(f64),
}

pub type Field = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Drift `b`, diffusion `σ` and their Jacobians.
///
/// Layouts: `σ` is `n x d` row-major (`σ^i_j` at `i*d + j`); `Dσ` stores
/// `∂_l σ^i_j` at `(i*d + j)*n + l`; `D²σ` stores `∂_k ∂_l σ^i_j` at
/// `((i*d + j)*n + k)*n + l`.
#[derive(Clone)]
pub struct VectorFieldPair {
    pub state_dim: usize,
    pub noise_dim: usize,
    b: Field,
    db: Field,
    sigma: Field,
    dsigma: Field,
    d2sigma: Option<Field>,
}

impl std::fmt::Debug for VectorFieldPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorFieldPair")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .finish_non_exhaustive()
    }
}

impl VectorFieldPair {
    pub fn new(state_dim: usize, noise_dim: usize, b: Field, db: Field, sigma: Field, dsigma: Field) -> Self {
        Self { state_dim, noise_dim, b, db, sigma, dsigma, d2sigma: None }
    }

    pub fn with_second_derivative(mut self, d2sigma: Field) -> Self {
        self.d2sigma = Some(d2sigma);
        self
    }

    /// Scalar fields from real functions.
    pub fn scalar(
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        db: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dsigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            1,
            1,
            Arc::new(move |v, o| o[0] = b(v[0])),
            Arc::new(move |v, o| o[0] = db(v[0])),
            Arc::new(move |v, o| o[0] = sigma(v[0])),
            Arc::new(move |v, o| o[0] = dsigma(v[0])),
        )
        .with_second_derivative(Arc::new(move |v, o| o[0] = d2sigma(v[0])))
    }

    /// `b = -y`, `σ = 2 + sin y`.
    pub fn dissipative_sine() -> Self {
        Self::scalar(|y| -y, |_| -1.0, |y| 2.0 + y.sin(), |y| y.cos(), |y| -y.sin())
    }

    /// `b = 0`, `σ = y`.
    pub fn linear_multiplicative() -> Self {
        Self::scalar(|_| 0.0, |_| 0.0, |y| y, |_| 1.0, |_| 0.0)
    }

    /// `b = 0` and a constant `n x d` diffusion matrix.
    pub fn constant_diffusion(n: usize, d: usize, sigma: Vec<f64>) -> Self {
        assert_eq!(sigma.len(), n * d);
        Self::new(
            n,
            d,
            Arc::new(|_, o| o.iter_mut().for_each(|x| *x = 0.0)),
            Arc::new(|_, o| o.iter_mut().for_each(|x| *x = 0.0)),
            Arc::new(move |_, o| o.copy_from_slice(&sigma)),
            Arc::new(|_, o| o.iter_mut().for_each(|x| *x = 0.0)),
        )
        .with_second_derivative(Arc::new(|_, o| o.iter_mut().for_each(|x| *x = 0.0)))
    }

    /// Linear drift `b(v) = A v` with `σ = 0`.
    pub fn linear_drift(n: usize, d: usize, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), n * n);
        let a2 = a.clone();
        Self::new(
            n,
            d,
            Arc::new(move |v, o| {
                for i in 0..n {
                    o[i] = (0..n).map(|k| a[i * n + k] * v[k]).sum();
                }
            }),
            Arc::new(move |_, o| o.copy_from_slice(&a2)),
            Arc::new(|_, o| o.iter_mut().for_each(|x| *x = 0.0)),
            Arc::new(|_, o| o.iter_mut().for_each(|x| *x = 0.0)),
        )
        .with_second_derivative(Arc::new(|_, o| o.iter_mut().for_each(|x| *x = 0.0)))
    }

    pub fn drift(&self, v: &[f64], out: &mut [f64]) {
        (self.b)(v, out)
    }

    pub fn drift_jacobian(&self, v: &[f64], out: &mut [f64]) {
        (self.db)(v, out)
    }

    pub fn diffusion(&self, v: &[f64], out: &mut [f64]) {
        (self.sigma)(v, out)
    }

    pub fn diffusion_jacobian(&self, v: &[f64], out: &mut [f64]) {
        (self.dsigma)(v, out)
    }

    pub fn diffusion_hessian(&self, v: &[f64], out: &mut [f64]) -> bool {
        match &self.d2sigma {
            Some(f) => {
                f(v, out);
                true
            }
            None => false,
        }
    }

    /// `(Dσ_j)(v)(σ_k(v))` at `(i*d + j)*d + k`.
    pub fn second_order(&self, v: &[f64], out: &mut [f64]) {
        let (n, d) = (self.state_dim, self.noise_dim);
        let mut s = vec![0.0; n * d];
        let mut js = vec![0.0; n * d * n];
        self.diffusion(v, &mut s);
        self.diffusion_jacobian(v, &mut js);
        second_order_from(n, d, &s, &js, out);
    }

    fn scalar_parts(&self, y: f64) -> [f64; 5] {
        let (mut b, mut db, mut s, mut ds, mut d2s) = ([0.0], [0.0], [0.0], [0.0], [0.0]);
        (self.b)(&[y], &mut b);
        (self.db)(&[y], &mut db);
        (self.sigma)(&[y], &mut s);
        (self.dsigma)(&[y], &mut ds);
        if let Some(f) = &self.d2sigma {
            f(&[y], &mut d2s);
        }
        [b[0], db[0], s[0], ds[0], d2s[0]]
    }

    /// Largest central-difference mismatch of `Db`, `Dσ` (and `D²σ` when
    /// present) at `probe` with step `h`.
    pub fn jacobian_check(&self, probe: &[f64], h: f64) -> f64 {
        let (n, d) = (self.state_dim, self.noise_dim);
        let mut worst: f64 = 0.0;
        let mut jb = vec![0.0; n * n];
        let mut js = vec![0.0; n * d * n];
        let mut hs = vec![0.0; n * d * n * n];
        self.drift_jacobian(probe, &mut jb);
        self.diffusion_jacobian(probe, &mut js);
        let has_h = self.diffusion_hessian(probe, &mut hs);
        for l in 0..n {
            let mut p = probe.to_vec();
            let mut m = probe.to_vec();
            p[l] += h;
            m[l] -= h;
            let (mut bp, mut bm) = (vec![0.0; n], vec![0.0; n]);
            self.drift(&p, &mut bp);
            self.drift(&m, &mut bm);
            for i in 0..n {
                worst = worst.max(((bp[i] - bm[i]) / (2.0 * h) - jb[i * n + l]).abs());
            }
            let (mut sp, mut sm) = (vec![0.0; n * d], vec![0.0; n * d]);
            self.diffusion(&p, &mut sp);
            self.diffusion(&m, &mut sm);
            for ij in 0..n * d {
                worst = worst.max(((sp[ij] - sm[ij]) / (2.0 * h) - js[ij * n + l]).abs());
            }
            if has_h {
                let (mut jp, mut jm) = (vec![0.0; n * d * n], vec![0.0; n * d * n]);
                self.diffusion_jacobian(&p, &mut jp);
                self.diffusion_jacobian(&m, &mut jm);
                for ij in 0..n * d {
                    for k in 0..n {
                        let fd = (jp[ij * n + k] - jm[ij * n + k]) / (2.0 * h);
                        worst = worst.max((fd - hs[(ij * n + k) * n + l]).abs());
                    }
                }
            }
        }
        worst
    }
}

fn second_order_from(n: usize, d: usize, s: &[f64], js: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..d {
            for k in 0..d {
                out[(i * d + j) * d + k] = (0..n).map(|l| js[(i * d + j) * n + l] * s[l * d + k]).sum();
            }
        }
    }
}

fn check_state(step: usize, prev: &[f64], next: &[f64]) -> Result<(), RdeError> {
    let nrm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !nrm.is_finite() || nrm > BLOWUP_NORM {
        return Err(RdeError::BlowUp { step, last: prev.to_vec() });
    }
    Ok(())
}

/// Davie scheme `δy = b(y)δt + σ(y)δx + (Dσ·σ)(y) x²` on the grid of `x`.
pub fn davie_solve(vf: &VectorFieldPair, x: &RoughPath, y0: &[f64]) -> Result<GridPath, RdeError> {
    let (n, d) = (vf.state_dim, vf.noise_dim);
    if x.dim() != d {
        return Err(RdeError::Dimension { expected: d, got: x.dim() });
    }
    if y0.len() != n {
        return Err(RdeError::Dimension { expected: n, got: y0.len() });
    }
    let grid = *x.grid();
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.len() * n);
    out.extend_from_slice(y0);
    let (mut b, mut s, mut js, mut so) = (vec![0.0; n], vec![0.0; n * d], vec![0.0; n * d * n], vec![0.0; n * d * d]);
    let mut y = y0.to_vec();
    let mut next = vec![0.0; n];
    for i in 0..grid.steps() {
        let (xa, xb) = (x.path().value(i), x.path().value(i + 1));
        let area = x.cell_area(i);
        vf.drift(&y, &mut b);
        vf.diffusion(&y, &mut s);
        vf.diffusion_jacobian(&y, &mut js);
        second_order_from(n, d, &s, &js, &mut so);
        for p in 0..n {
            let mut v = y[p] + b[p] * dt;
            for j in 0..d {
                v += s[p * d + j] * (xb[j] - xa[j]);
                for k in 0..d {
                    v += so[(p * d + j) * d + k] * area[k * d + j];
                }
            }
            next[p] = v;
        }
        check_state(i, &y, &next)?;
        std::mem::swap(&mut y, &mut next);
        out.extend_from_slice(&y);
    }
    Ok(GridPath::new(grid, n, out)?)
}

/// Scalar Davie scheme for driver samples `x` with canonical areas `½ δx²`.
/// Agrees with [`davie_solve`] on the linear-cell lift of the same samples.
pub fn davie_scalar(vf: &VectorFieldPair, x: &[f64], dt: f64, y0: f64) -> Result<Vec<f64>, RdeError> {
    if vf.state_dim != 1 || vf.noise_dim != 1 {
        return Err(RdeError::NotScalar);
    }
    let mut out = Vec::with_capacity(x.len());
    out.push(y0);
    let mut y = y0;
    for i in 0..x.len().saturating_sub(1) {
        let [b, _, s, ds, _] = vf.scalar_parts(y);
        let dx = x[i + 1] - x[i];
        let next = y + b * dt + s * dx + ds * s * (0.5 * dx * dx);
        check_state(i, &[y], &[next])?;
        y = next;
        out.push(y);
    }
    Ok(out)
}

/// Coefficients of the singular scheme `δy = B(y)δh + Σ(y)δz + (DΣ·Σ)(y) z²`.
pub trait RoughFields {
    fn state_dim(&self) -> usize;
    /// Dimension of the smooth driver `h` (include time as a component if needed).
    fn smooth_dim(&self) -> usize;
    fn rough_dim(&self) -> usize;
    /// `n x smooth_dim`.
    fn smooth(&self, v: &[f64], out: &mut [f64]);
    /// `n x rough_dim`.
    fn rough(&self, v: &[f64], out: &mut [f64]);
    /// `(DΣ_j · Σ_k)(v)` at `(i*dz + j)*dz + k`.
    fn rough_second(&self, v: &[f64], out: &mut [f64]);
}

/// An SDE seen as a singular equation driven by `h = (t, h_1..h_d)` with
/// `B = [b | σ]` and `Σ = σ`.
pub struct SdeFields<'a>(pub &'a VectorFieldPair);

impl RoughFields for SdeFields<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim
    }
    fn smooth_dim(&self) -> usize {
        1 + self.0.noise_dim
    }
    fn rough_dim(&self) -> usize {
        self.0.noise_dim
    }
    fn smooth(&self, v: &[f64], out: &mut [f64]) {
        let (n, d) = (self.0.state_dim, self.0.noise_dim);
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n * d];
        self.0.drift(v, &mut b);
        self.0.diffusion(v, &mut s);
        for i in 0..n {
            out[i * (d + 1)] = b[i];
            out[i * (d + 1) + 1..(i + 1) * (d + 1)].copy_from_slice(&s[i * d..(i + 1) * d]);
        }
    }
    fn rough(&self, v: &[f64], out: &mut [f64]) {
        self.0.diffusion(v, out)
    }
    fn rough_second(&self, v: &[f64], out: &mut [f64]) {
        self.0.second_order(v, out)
    }
}

/// Singular Davie scheme; `h` must live on the grid of `z`.
pub fn singular_solve(f: &dyn RoughFields, h: &GridPath, z: &RoughPath, v0: &[f64]) -> Result<GridPath, RdeError> {
    let (n, dh, dz) = (f.state_dim(), f.smooth_dim(), f.rough_dim());
    if h.grid() != z.grid() {
        return Err(RdeError::GridMismatch);
    }
    if h.dim() != dh {
        return Err(RdeError::Dimension { expected: dh, got: h.dim() });
    }
    if z.dim() != dz {
        return Err(RdeError::Dimension { expected: dz, got: z.dim() });
    }
    if v0.len() != n {
        return Err(RdeError::Dimension { expected: n, got: v0.len() });
    }
    let grid = *z.grid();
    let mut out = Vec::with_capacity(grid.len() * n);
    out.extend_from_slice(v0);
    let (mut bm, mut sm, mut so) = (vec![0.0; n * dh], vec![0.0; n * dz], vec![0.0; n * dz * dz]);
    let mut y = v0.to_vec();
    let mut next = vec![0.0; n];
    for i in 0..grid.steps() {
        let (ha, hb) = (h.value(i), h.value(i + 1));
        let (za, zb) = (z.path().value(i), z.path().value(i + 1));
        let area = z.cell_area(i);
        f.smooth(&y, &mut bm);
        f.rough(&y, &mut sm);
        f.rough_second(&y, &mut so);
        for p in 0..n {
            let mut v = y[p];
            for j in 0..dh {
                v += bm[p * dh + j] * (hb[j] - ha[j]);
            }
            for j in 0..dz {
                v += sm[p * dz + j] * (zb[j] - za[j]);
                for k in 0..dz {
                    v += so[(p * dz + j) * dz + k] * area[k * dz + j];
                }
            }
            next[p] = v;
        }
        check_state(i, &y, &next)?;
        std::mem::swap(&mut y, &mut next);
        out.extend_from_slice(&y);
    }
    Ok(GridPath::new(grid, n, out)?)
}

/// Radial cutoff `φ(v) = v ψ(|v|)`: identity for `|v| <= C√d`, cubic blend
/// `1 - 3s² + 2s³` of `ψ` down to zero at `|v| = 2C√d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffFunction {
    pub plateau: f64,
    pub dim: usize,
}

impl CutoffFunction {
    pub fn new(plateau: f64, dim: usize) -> Self {
        Self { plateau, dim }
    }

    /// The default plateau `C(K) = 4K`.
    pub fn for_k(k: f64, dim: usize) -> Self {
        Self::new(4.0 * k, dim)
    }

    pub fn inner_radius(&self) -> f64 {
        self.plateau * (self.dim as f64).sqrt()
    }

    pub fn outer_radius(&self) -> f64 {
        2.0 * self.inner_radius()
    }

    /// `(ψ(r), ψ'(r))`.
    fn profile(&self, r: f64) -> (f64, f64) {
        let (a, b) = (self.inner_radius(), self.outer_radius());
        if r <= a {
            (1.0, 0.0)
        } else if r >= b {
            (0.0, 0.0)
        } else {
            let s = (r - a) / (b - a);
            (1.0 - 3.0 * s * s + 2.0 * s * s * s, (-6.0 * s + 6.0 * s * s) / (b - a))
        }
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (p, _) = self.profile(r);
        for (o, x) in out.iter_mut().zip(v) {
            *o = p * x;
        }
    }

    /// `Dφ(v)[u] = ψ u + v ψ'(|v|) ⟨v, u⟩ / |v|`.
    pub fn derivative(&self, v: &[f64], u: &[f64], out: &mut [f64]) {
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (p, dp) = self.profile(r);
        let vu: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        let c = if r > 0.0 { dp * vu / r } else { 0.0 };
        for k in 0..out.len() {
            out[k] = p * u[k] + c * v[k];
        }
    }

    fn scalar(&self, v: f64) -> (f64, f64) {
        let (p, dp) = self.profile(v.abs());
        (p * v, p + dp * v.abs())
    }
}

/// Time-step data of the scalar hitting system.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingState {
    pub xi: Vec<f64>,
    pub y: Vec<f64>,
    pub j: Vec<f64>,
    pub time_index: usize,
}

impl HittingState {
    /// `y(ξ) = (1-ξ)a₀ + ξa₁`, `j ≡ a₁ - a₀`.
    pub fn initial(a0: f64, a1: f64, m: usize) -> Result<Self, RdeError> {
        if m < 2 {
            return Err(RdeError::XiGrid(m));
        }
        let xi: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
        let y = xi.iter().map(|x| (1.0 - x) * a0 + x * a1).collect();
        Ok(Self { xi, y, j: vec![a1 - a0; m], time_index: 0 })
    }
}

/// Full trajectory of the hitting system and its drift.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingSolution {
    pub grid: TimeGrid,
    pub m: usize,
    /// `(N+1) x m`, time-major.
    pub y: Vec<f64>,
    pub j: Vec<f64>,
    /// Drift per cell, evaluated at the left point: `-σ(y_t(1))^{-1} ∫ φ(j_t)`
    /// for the direct system and `+σ(ȳ_t(1))^{-1} ∫ φ(j̄_t)` for the inverse one.
    pub drift: Vec<f64>,
    pub inverse: bool,
}

impl HittingSolution {
    pub fn y_at(&self, i: usize, k: usize) -> f64 {
        self.y[i * self.m + k]
    }

    pub fn j_at(&self, i: usize, k: usize) -> f64 {
        self.j[i * self.m + k]
    }

    /// `t ↦ y_t(ξ_k)`.
    pub fn y_path(&self, k: usize) -> GridPath {
        let v = (0..self.grid.len()).map(|i| self.y_at(i, k)).collect();
        GridPath::scalar(self.grid, v).expect("finite hitting state")
    }

    /// `|y_1(0) - y_1(1)|`.
    pub fn hit_gap(&self) -> f64 {
        let n = self.grid.steps();
        (self.y_at(n, 0) - self.y_at(n, self.m - 1)).abs()
    }

    /// `sup_{t, ξ} |y| + |j|`.
    pub fn state_sup(&self) -> f64 {
        self.y.iter().zip(&self.j).map(|(a, b)| a.abs() + b.abs()).fold(0.0, f64::max)
    }

    pub fn drift_sup(&self) -> f64 {
        self.drift.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    pub fn state(&self, i: usize) -> HittingState {
        let m = self.m;
        HittingState {
            xi: (0..m).map(|k| k as f64 / (m - 1) as f64).collect(),
            y: self.y[i * m..(i + 1) * m].to_vec(),
            j: self.j[i * m..(i + 1) * m].to_vec(),
            time_index: i,
        }
    }

    /// CSV rows `t,xi,y1,j1`.
    pub fn to_csv(&self) -> String {
        use crate::grid::fmt17;
        let mut s = String::from("t,xi,y1,j1\n");
        for i in 0..self.grid.len() {
            for k in 0..self.m {
                let xi = k as f64 / (self.m - 1) as f64;
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt17(self.grid.point(i)),
                    fmt17(xi),
                    fmt17(self.y_at(i, k)),
                    fmt17(self.j_at(i, k))
                ));
            }
        }
        s
    }
}

/// Cumulative trapezoid `∫_0^{ξ_k} f`.
fn cumulative_trapezoid(f: &[f64], out: &mut [f64]) {
    let h = 1.0 / (f.len() - 1) as f64;
    out[0] = 0.0;
    for k in 1..f.len() {
        out[k] = out[k - 1] + 0.5 * h * (f[k - 1] + f[k]);
    }
}

/// Scalar hitting system driven by samples `x = h + z` (canonical areas `½δx²`).
///
/// The tangent `j` is advanced first and the `y`-equation uses
/// `∫_0^ξ φ(j_{i+1})`, which makes `∂_ξ y = j (1-t)` hold exactly in time on
/// the plateau of φ. With `inverse` the drift `σ(ȳ(ξ))σ(ȳ(1))^{-1}∫φ(j̄)` of
/// the auxiliary system is folded into the driver increment.
pub fn solve_hitting_driver(
    vf: &VectorFieldPair,
    a0: f64,
    a1: f64,
    x: &[f64],
    grid: TimeGrid,
    phi: &CutoffFunction,
    m: usize,
    inverse: bool,
) -> Result<HittingSolution, RdeError> {
    if vf.state_dim != 1 || vf.noise_dim != 1 || vf.d2sigma.is_none() {
        return Err(RdeError::NotScalar);
    }
    if x.len() != grid.len() {
        return Err(RdeError::Dimension { expected: grid.len(), got: x.len() });
    }
    let st = HittingState::initial(a0, a1, m)?;
    let n = grid.steps();
    let dt = grid.dt();
    let mut ys = Vec::with_capacity((n + 1) * m);
    let mut js = Vec::with_capacity((n + 1) * m);
    let mut drift = Vec::with_capacity(n);
    let (mut y, mut j) = (st.y, st.j);
    ys.extend_from_slice(&y);
    js.extend_from_slice(&j);
    let mut pj = vec![0.0; m];
    let mut cum = vec![0.0; m];
    let mut jn = vec![0.0; m];
    let mut parts = vec![[0.0; 5]; m];
    for i in 0..n {
        for k in 0..m {
            pj[k] = phi.scalar(j[k]).0;
            parts[k] = vf.scalar_parts(y[k]);
        }
        cumulative_trapezoid(&pj, &mut cum);
        let s1 = parts[m - 1][2];
        if s1 == 0.0 {
            return Err(RdeError::Singular(y[m - 1]));
        }
        let g = if inverse { cum[m - 1] / s1 } else { -cum[m - 1] / s1 };
        drift.push(g);
        let dx = x[i + 1] - x[i] + if inverse { g * dt } else { 0.0 };
        let a2 = 0.5 * dx * dx;
        for k in 0..m {
            let [_, db, s, ds, d2s] = parts[k];
            let (p, dp) = phi.scalar(j[k]);
            jn[k] = j[k] + db * p * dt + ds * p * dx + (d2s * s * p + ds * dp * ds * p) * a2;
        }
        for k in 0..m {
            pj[k] = phi.scalar(jn[k]).0;
        }
        cumulative_trapezoid(&pj, &mut cum);
        let prev: Vec<f64> = y.clone();
        for k in 0..m {
            let [b, _, s, ds, _] = parts[k];
            y[k] += (b - cum[k]) * dt + s * dx + ds * s * a2;
        }
        check_state(i, &prev, &y)?;
        check_state(i, &j, &jn)?;
        std::mem::swap(&mut j, &mut jn);
        ys.extend_from_slice(&y);
        js.extend_from_slice(&j);
    }
    Ok(HittingSolution { grid, m, y: ys, j: js, drift, inverse })
}

fn hitting_driver(h: &GridPath, z: &RoughPath) -> Result<Vec<f64>, RdeError> {
    if h.grid() != z.grid() {
        return Err(RdeError::GridMismatch);
    }
    if h.dim() != 1 || z.dim() != 1 {
        return Err(RdeError::NotScalar);
    }
    Ok(h.values().iter().zip(z.path().values()).map(|(a, b)| a + b).collect())
}

/// The hitting system `Ψ` for the past drift `h` and rough innovation `z`.
pub fn solve_hitting(
    vf: &VectorFieldPair,
    a0: f64,
    a1: f64,
    h: &GridPath,
    z: &RoughPath,
    phi: &CutoffFunction,
    m: usize,
) -> Result<HittingSolution, RdeError> {
    let x = hitting_driver(h, z)?;
    solve_hitting_driver(vf, a0, a1, &x, *z.grid(), phi, m, false)
}

/// The auxiliary system `Ψ̄`.
pub fn solve_hitting_inverse(
    vf: &VectorFieldPair,
    a0: f64,
    a1: f64,
    h: &GridPath,
    z: &RoughPath,
    phi: &CutoffFunction,
    m: usize,
) -> Result<HittingSolution, RdeError> {
    let x = hitting_driver(h, z)?;
    solve_hitting_driver(vf, a0, a1, &x, *z.grid(), phi, m, true)
}

/// Product-state fields of the scalar hitting system for [`singular_solve`]:
/// state `(y(ξ_0..), j(ξ_0..))`, smooth driver `(t, h)`, rough driver `z`.
pub struct HittingFields<'a> {
    pub vf: &'a VectorFieldPair,
    pub phi: CutoffFunction,
    pub m: usize,
}

impl HittingFields<'_> {
    fn split<'v>(&self, v: &'v [f64]) -> (&'v [f64], &'v [f64]) {
        v.split_at(self.m)
    }
}

/// `b = 0, σ = 1, h = 0, z = 0` fields of the product system at a state.
pub fn build_hitting_fields(vf: &VectorFieldPair, phi: CutoffFunction, m: usize) -> Result<HittingFields<'_>, RdeError> {
    if m < 2 {
        return Err(RdeError::XiGrid(m));
    }
    if vf.state_dim != 1 || vf.noise_dim != 1 || vf.d2sigma.is_none() {
        return Err(RdeError::NotScalar);
    }
    Ok(HittingFields { vf, phi, m })
}

impl RoughFields for HittingFields<'_> {
    fn state_dim(&self) -> usize {
        2 * self.m
    }
    fn smooth_dim(&self) -> usize {
        2
    }
    fn rough_dim(&self) -> usize {
        1
    }
    fn smooth(&self, v: &[f64], out: &mut [f64]) {
        let m = self.m;
        let (y, j) = self.split(v);
        let pj: Vec<f64> = j.iter().map(|x| self.phi.scalar(*x).0).collect();
        let mut cum = vec![0.0; m];
        cumulative_trapezoid(&pj, &mut cum);
        for k in 0..m {
            let [b, db, s, ds, _] = self.vf.scalar_parts(y[k]);
            out[2 * k] = b - cum[k];
            out[2 * k + 1] = s;
            out[2 * (m + k)] = db * pj[k];
            out[2 * (m + k) + 1] = ds * pj[k];
        }
    }
    fn rough(&self, v: &[f64], out: &mut [f64]) {
        let m = self.m;
        let (y, j) = self.split(v);
        for k in 0..m {
            let [_, _, s, ds, _] = self.vf.scalar_parts(y[k]);
            out[k] = s;
            out[m + k] = ds * self.phi.scalar(j[k]).0;
        }
    }
    fn rough_second(&self, v: &[f64], out: &mut [f64]) {
        let m = self.m;
        let (y, j) = self.split(v);
        for k in 0..m {
            let [_, _, s, ds, d2s] = self.vf.scalar_parts(y[k]);
            let (p, dp) = self.phi.scalar(j[k]);
            out[k] = ds * s;
            out[m + k] = d2s * s * p + ds * dp * ds * p;
        }
    }
}

/// Classical norms of the scheme remainders on one block.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderReport {
    /// `N[R; C^{3κ}]` with `κ = ½(1/3 + γ)`.
    pub r: NormReport,
    /// `N[Q; C^{2γ}]`.
    pub q: NormReport,
    /// `N[L; C^1]`.
    pub l: NormReport,
    /// `max |R_st|` without weights.
    pub r_max: f64,
}

/// `L`, `R`, `Q` of a Davie solution `y` of `vf` driven by `x`, on `block`.
pub fn remainder_diagnostics(
    y: &GridPath,
    x: &RoughPath,
    vf: &VectorFieldPair,
    gamma: f64,
    block: IndexRange,
) -> Result<RemainderReport, RdeError> {
    let (n, d) = (vf.state_dim, vf.noise_dim);
    if y.grid() != x.grid() {
        return Err(RdeError::GridMismatch);
    }
    let grid = *x.grid();
    let (mut b, mut s, mut so) = (vec![0.0; n], vec![0.0; n * d], vec![0.0; n * d * d]);
    let mut rr = Increment2::zeros(grid, n);
    let mut qq = Increment2::zeros(grid, n);
    let mut ll = Increment2::zeros(grid, n);
    let mut r_max: f64 = 0.0;
    for si in block.lo..=block.hi {
        let ys = y.value(si);
        vf.drift(ys, &mut b);
        vf.diffusion(ys, &mut s);
        vf.second_order(ys, &mut so);
        for ti in si + 1..=block.hi {
            let dx = x.increment(si, ti);
            let area = x.area(si, ti);
            let delta = grid.point(ti) - grid.point(si);
            let yt = y.value(ti);
            let (mut q, mut l, mut r) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for p in 0..n {
                let mut sd = 0.0;
                let mut sa = 0.0;
                for j in 0..d {
                    sd += s[p * d + j] * dx[j];
                    for k in 0..d {
                        sa += so[(p * d + j) * d + k] * area[k * d + j];
                    }
                }
                let dy = yt[p] - ys[p];
                q[p] = dy - sd;
                l[p] = dy - sd - sa;
                r[p] = l[p] - b[p] * delta;
            }
            r_max = r_max.max(crate::grid::norm(&r));
            rr.set(si, ti, &r);
            qq.set(si, ti, &q);
            ll.set(si, ti, &l);
        }
    }
    let kappa = 0.5 * (1.0 / 3.0 + gamma);
    Ok(RemainderReport {
        r: holder_norm(&rr, 3.0 * kappa, block)?,
        q: holder_norm(&qq, 2.0 * gamma, block)?,
        l: holder_norm(&ll, 1.0, block)?,
        r_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roughpath::lift_piecewise_linear;

    #[test]
    fn affine_case_is_exact() {
        let grid = TimeGrid::unit(8);
        let fine = GridPath::from_fn(grid.refine(10).unwrap(), 2, |t, o| {
            o[0] = (7.0 * t).sin();
            o[1] = t * t - (3.0 * t).cos();
        })
        .unwrap();
        let x = lift_piecewise_linear(&fine, 8).unwrap();
        let sig = vec![1.0, 2.0, -0.5, 0.25, 3.0, 1.5];
        let vf = VectorFieldPair::constant_diffusion(3, 2, sig.clone());
        let y0 = [0.3, -1.0, 2.0];
        let y = davie_solve(&vf, &x, &y0).unwrap();
        for i in 0..grid.len() {
            let dx = x.increment(0, i);
            for p in 0..3 {
                let want = y0[p] + sig[p * 2] * dx[0] + sig[p * 2 + 1] * dx[1];
                let got = y.value(i)[p];
                assert!((got - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0) * 16.0);
            }
        }
        let rep = remainder_diagnostics(&y, &x, &vf, 0.35, IndexRange::new(0, 32)).unwrap();
        assert!(rep.r_max < 1e-12);
    }

    #[test]
    fn smooth_driver_exponential() {
        let fine = GridPath::from_fn(TimeGrid::unit(14), 1, |t, o| o[0] = t.sin()).unwrap();
        let x = lift_piecewise_linear(&fine, 12).unwrap();
        let y = davie_solve(&VectorFieldPair::linear_multiplicative(), &x, &[1.0]).unwrap();
        assert!((y.last()[0] - 1f64.sin().exp()).abs() < 1e-3);
        let ys = davie_scalar(&VectorFieldPair::linear_multiplicative(), &x.path().component(0), x.grid().dt(), 1.0).unwrap();
        assert!((ys[ys.len() - 1] - y.last()[0]).abs() < 1e-14);
    }

    #[test]
    fn euler_decay() {
        for n in [4u32, 6, 8] {
            let grid = TimeGrid::unit(n);
            let x = RoughPath::linear_cells(GridPath::zeros(grid, 1));
            let vf = VectorFieldPair::linear_drift(1, 1, vec![-1.0]);
            let y = davie_solve(&vf, &x, &[1.0]).unwrap();
            assert!((y.last()[0] - (-1f64).exp()).abs() <= 2.0 * grid.dt());
            let rep = remainder_diagnostics(&y, &x, &vf, 0.35, grid.full()).unwrap();
            // R_st = y_s[(1-Δ)^k - 1 + kΔ] ≤ ½ (t-s)² sup|y|.
            assert!(rep.r_max <= 0.5 + 1e-12);
            let mut worst: f64 = 0.0;
            for s in 0..grid.len() {
                for t in s + 1..grid.len() {
                    let r = y.value(t)[0] - y.value(s)[0] + y.value(s)[0] * (grid.point(t) - grid.point(s));
                    worst = worst.max(r.abs() / (0.5 * (grid.point(t) - grid.point(s)).powi(2)));
                }
            }
            assert!(worst <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let vf = VectorFieldPair::scalar(|y| y * y, |y| 2.0 * y, |_| 0.0, |_| 0.0, |_| 0.0);
        let x = RoughPath::linear_cells(GridPath::zeros(TimeGrid::new(6, 0.0, 4.0).unwrap(), 1));
        match davie_solve(&vf, &x, &[10.0]) {
            Err(RdeError::BlowUp { last, .. }) => assert!(last[0].is_finite()),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let vf = VectorFieldPair::dissipative_sine();
        for p in [-2.0, 0.1, 1.7] {
            assert!(vf.jacobian_check(&[p], 1e-5) < 1e-8);
        }
    }

    #[test]
    fn singular_solver_degenerate_cases() {
        let grid = TimeGrid::unit(9);
        let fine = GridPath::from_fn(grid, 1, |t, o| o[0] = (5.0 * t).sin() * t).unwrap();
        let x = RoughPath::linear_cells(fine);
        let vf = VectorFieldPair::dissipative_sine();
        let direct = davie_solve(&vf, &x, &[0.4]).unwrap();
        let h = GridPath::from_fn(grid, 2, |t, o| {
            o[0] = t;
            o[1] = 0.0;
        })
        .unwrap();
        let sing = singular_solve(&SdeFields(&vf), &h, &x, &[0.4]).unwrap();
        for i in 0..grid.len() {
            assert!((direct.value(i)[0] - sing.value(i)[0]).abs() < 1e-14);
        }
    }

    struct Linear;
    impl RoughFields for Linear {
        fn state_dim(&self) -> usize {
            1
        }
        fn smooth_dim(&self) -> usize {
            1
        }
        fn rough_dim(&self) -> usize {
            1
        }
        fn smooth(&self, v: &[f64], out: &mut [f64]) {
            out[0] = v[0];
        }
        fn rough(&self, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn rough_second(&self, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    #[test]
    fn singular_derivative_at_origin() {
        let grid = TimeGrid::unit(14);
        let h = GridPath::from_fn(grid, 1, |t, o| o[0] = t.powf(0.9)).unwrap();
        let z = RoughPath::linear_cells(GridPath::zeros(grid, 1));
        let y = singular_solve(&Linear, &h, &z, &[1.0]).unwrap();
        assert!((y.last()[0] - 1f64.exp()).abs() < 1e-4);
    }

    #[test]
    fn cutoff_shape() {
        let phi = CutoffFunction::new(1.0, 2);
        let mut out = [0.0; 2];
        phi.apply(&[0.7, -0.7], &mut out);
        assert_eq!(out, [0.7, -0.7]);
        phi.apply(&[3.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
        phi.apply(&[1.0, 1.0], &mut out);
        assert_eq!(out, [1.0, 1.0]);
        // Directional derivative against central differences, and continuity
        // across both radii.
        let u = [0.3, -0.2];
        for r in [0.5, 1.2, 1.414, 1.415, 2.0, 2.8284, 2.8285, 3.5] {
            let v = [r * 0.8, r * 0.6];
            let mut d = [0.0; 2];
            phi.derivative(&v, &u, &mut d);
            let h = 1e-6;
            let (mut p, mut m) = ([0.0; 2], [0.0; 2]);
            phi.apply(&[v[0] + h * u[0], v[1] + h * u[1]], &mut p);
            phi.apply(&[v[0] - h * u[0], v[1] - h * u[1]], &mut m);
            for k in 0..2 {
                assert!(((p[k] - m[k]) / (2.0 * h) - d[k]).abs() < 1e-5, "r={r}");
            }
        }
    }

    #[test]
    fn hitting_analytic_case() {
        let vf = VectorFieldPair::scalar(|_| 0.0, |_| 0.0, |_| 1.0, |_| 0.0, |_| 0.0);
        let grid = TimeGrid::unit(7);
        let zero = vec![0.0; grid.len()];
        let phi = CutoffFunction::new(100.0, 1);
        let s = solve_hitting_driver(&vf, 0.0, 1.0, &zero, grid, &phi, 33, false).unwrap();
        for i in 0..grid.len() {
            let t = grid.point(i);
            for k in 0..33 {
                let xi = k as f64 / 32.0;
                assert!((s.y_at(i, k) - xi * (1.0 - t)).abs() < 1e-12);
                assert_eq!(s.j_at(i, k), 1.0);
            }
        }
        assert!(s.drift.iter().all(|g| (g + 1.0).abs() < 1e-14));
        assert!(s.hit_gap() < 1e-8);
        let sb = solve_hitting_driver(&vf, 0.0, 1.0, &zero, grid, &phi, 33, true).unwrap();
        for i in 0..grid.len() {
            assert!((sb.y_at(i, 32) - 1.0).abs() < 1e-12);
        }
        let same = solve_hitting_driver(&vf, 0.5, 0.5, &zero, grid, &phi, 9, false).unwrap();
        assert!(same.j.iter().all(|v| *v == 0.0));
        assert!(same.drift.iter().all(|v| *v == 0.0));
        let sb = solve_hitting_driver(&vf, 0.5, 0.5, &zero, grid, &phi, 9, true).unwrap();
        assert!(sb.drift.iter().all(|v| *v == 0.0));
    }

    fn rough_driver(n: u32) -> Vec<f64> {
        // A deterministic rough-looking driver: lacunary sum of dyadic sines.
        let grid = TimeGrid::unit(n);
        grid.points()
            .iter()
            .map(|t| (0..n).map(|k| 2f64.powf(-0.4 * k as f64) * (2f64.powi(k as i32) * 6.0 * t + k as f64).sin() * 0.3).sum())
            .collect()
    }

    #[test]
    fn hitting_on_rough_driver_and_inverse_identity() {
        let vf = VectorFieldPair::dissipative_sine();
        let grid = TimeGrid::unit(8);
        let x = rough_driver(8);
        let phi = CutoffFunction::new(80.0, 1);
        let s = solve_hitting_driver(&vf, 0.3, -0.4, &x, grid, &phi, 33, false).unwrap();
        // y(0) is the Davie solution started from a₀.
        let y0 = davie_scalar(&vf, &x, grid.dt(), 0.3).unwrap();
        for i in 0..grid.len() {
            assert!((s.y_at(i, 0) - y0[i]).abs() < 1e-13);
        }
        assert!(s.hit_gap() < 1e-3, "gap {}", s.hit_gap());
        // Ψ̄ on x + ∫g reproduces Ψ on x.
        let mut xt = x.clone();
        for i in 0..grid.steps() {
            xt[i + 1] = xt[i] + (x[i + 1] - x[i]) + s.drift[i] * grid.dt();
        }
        let sb = solve_hitting_driver(&vf, 0.3, -0.4, &xt, grid, &phi, 33, true).unwrap();
        for (a, b) in sb.y.iter().zip(&s.y) {
            assert!((a - b).abs() < 1e-11);
        }
        for (a, b) in sb.drift.iter().zip(&s.drift) {
            assert!((a + b).abs() < 1e-11);
        }
    }

    #[test]
    fn tangent_identity_order_in_xi() {
        let vf = VectorFieldPair::dissipative_sine();
        let grid = TimeGrid::unit(7);
        let x = rough_driver(7);
        let phi = CutoffFunction::new(80.0, 1);
        let mut errs = Vec::new();
        for m in [17usize, 33] {
            let s = solve_hitting_driver(&vf, 0.5, -0.5, &x, grid, &phi, m, false).unwrap();
            let h = 1.0 / (m - 1) as f64;
            let mut worst: f64 = 0.0;
            for i in 0..grid.len() {
                let t = grid.point(i);
                for k in 1..m - 1 {
                    let dy = (s.y_at(i, k + 1) - s.y_at(i, k - 1)) / (2.0 * h);
                    worst = worst.max((dy - s.j_at(i, k) * (1.0 - t)).abs());
                }
            }
            errs.push(worst);
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order >= 1.8, "errors {errs:?}");
    }

    #[test]
    fn product_fields_formulas() {
        let vf = VectorFieldPair::scalar(|_| 0.0, |_| 0.0, |_| 1.0, |_| 0.0, |_| 0.0);
        let hf = build_hitting_fields(&vf, CutoffFunction::new(10.0, 1), 5).unwrap();
        let v: Vec<f64> = (0..10).map(|k| 0.1 * k as f64).collect();
        let mut sm = vec![0.0; 20];
        hf.smooth(&v, &mut sm);
        let mut cum = vec![0.0; 5];
        cumulative_trapezoid(&v[5..], &mut cum);
        for k in 0..5 {
            assert_eq!(sm[2 * k], -cum[k]);
            assert_eq!(sm[2 * k + 1], 1.0);
            assert_eq!(sm[2 * (5 + k)], 0.0);
        }
        let mut so = vec![1.0; 10];
        hf.rough_second(&v, &mut so);
        assert!(so.iter().all(|x| *x == 0.0));

        // DΣ·Σ against a central difference of Σ along Σ.
        let vf = VectorFieldPair::dissipative_sine();
        let hf = build_hitting_fields(&vf, CutoffFunction::new(0.5, 1), 4).unwrap();
        let v = [0.2, -0.3, 0.9, 1.4, 0.1, 0.45, 0.7, -0.95];
        let (mut s, mut so) = (vec![0.0; 8], vec![0.0; 8]);
        hf.rough(&v, &mut s);
        hf.rough_second(&v, &mut so);
        let h = 1e-6;
        let vp: Vec<f64> = v.iter().zip(&s).map(|(a, b)| a + h * b).collect();
        let vm: Vec<f64> = v.iter().zip(&s).map(|(a, b)| a - h * b).collect();
        let (mut sp, mut sn) = (vec![0.0; 8], vec![0.0; 8]);
        hf.rough(&vp, &mut sp);
        hf.rough(&vm, &mut sn);
        for k in 0..8 {
            assert!(((sp[k] - sn[k]) / (2.0 * h) - so[k]).abs() < 1e-6, "k={k}");
        }
    }

    #[test]
    fn explicit_product_scheme_tracks_the_semi_implicit_one() {
        let vf = VectorFieldPair::dissipative_sine();
        let phi = CutoffFunction::new(80.0, 1);
        let mut gaps = Vec::new();
        for n in [8u32, 10] {
            let grid = TimeGrid::unit(n);
            let x: Vec<f64> = grid.points().iter().map(|t| 0.5 * (3.0 * t).sin()).collect();
            let s = solve_hitting_driver(&vf, 0.3, -0.4, &x, grid, &phi, 9, false).unwrap();
            let hf = build_hitting_fields(&vf, phi, 9).unwrap();
            let h = GridPath::from_fn(grid, 2, |t, o| {
                o[0] = t;
                o[1] = 0.0;
            })
            .unwrap();
            let z = RoughPath::linear_cells(GridPath::scalar(grid, x.clone()).unwrap());
            let mut v0 = s.state(0).y;
            v0.extend(s.state(0).j);
            let e = singular_solve(&hf, &h, &z, &v0).unwrap();
            let last = e.last();
            let gap = (0..9).map(|k| (last[k] - s.y_at(grid.steps(), k)).abs()).fold(0.0, f64::max);
            gaps.push(gap);
        }
        assert!(gaps[1] < gaps[0] / 2.0, "{gaps:?}");
    }
}
