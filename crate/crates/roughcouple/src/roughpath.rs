//! Level-2 rough paths over dyadic grids.
//!
//! Areas come from the piecewise-linear interpolation of a finer sampling of
//! the path, are computed exactly cell by cell, and are propagated to longer
//! intervals with Chen's relation `x²_st = x²_su + x²_ut + δx_su ⊗ δx_ut`.
//! Up to level [`DENSE_LEVEL_MAX`] every pair is tabulated; above it only the
//! cell areas are kept and longer intervals are rebuilt on demand.

use crate::grid::{norm, GridError, GridPath, IndexRange, TimeGrid};
use thiserror::Error;

/// Largest grid level for which all pair areas are stored.
pub const DENSE_LEVEL_MAX: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoughPathError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("sub-level {sub} is below grid level {level}")]
    SubLevel { sub: u32, level: u32 },
    #[error("fine path window [{fine_start}, {fine_end}] differs from the coarse window")]
    Window { fine_start: f64, fine_end: f64 },
    #[error("non-finite area on pair ({0}, {1})")]
    Overflow(usize, usize),
    #[error("non-finite drift derivative at t = {0}")]
    NonFiniteDrift(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum AreaStore {
    /// `(N+1)^2` entries of `d*d` values, `(i, j)` at `(i*(N+1)+j)*d*d`.
    Dense(Vec<f64>),
    /// One `d*d` block per cell.
    Cells(Vec<f64>),
}

/// A grid path together with its level-2 area `x²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughPath {
    path: GridPath,
    cells: Vec<f64>,
    store: AreaStore,
    lift_resolution: u32,
    fine: Option<GridPath>,
}

impl RoughPath {
    /// Builds a rough path from cell areas (`steps * d * d` values).
    pub fn from_cell_areas(path: GridPath, cells: Vec<f64>, lift_resolution: u32) -> Result<Self, RoughPathError> {
        let d = path.dim();
        let steps = path.grid().steps();
        if cells.len() != steps * d * d {
            return Err(GridError::DimensionMismatch { expected: steps * d * d, got: cells.len() }.into());
        }
        if let Some(k) = cells.iter().position(|v| !v.is_finite()) {
            let c = k / (d * d);
            return Err(RoughPathError::Overflow(c, c + 1));
        }
        let store = if path.grid().level() <= DENSE_LEVEL_MAX {
            AreaStore::Dense(chen_table(&path, &cells))
        } else {
            AreaStore::Cells(cells.clone())
        };
        Ok(Self { path, cells, store, lift_resolution, fine: None })
    }

    /// Scalar (or any) path whose areas are the symmetric `½ δx ⊗ δx`; the
    /// canonical lift of a path that is linear on every cell.
    pub fn linear_cells(path: GridPath) -> Self {
        let d = path.dim();
        let mut cells = vec![0.0; path.grid().steps() * d * d];
        for i in 0..path.grid().steps() {
            let (a, b) = (path.value(i), path.value(i + 1));
            let c = &mut cells[i * d * d..(i + 1) * d * d];
            for p in 0..d {
                for q in 0..d {
                    c[p * d + q] = 0.5 * (b[p] - a[p]) * (b[q] - a[q]);
                }
            }
        }
        let level = path.grid().level();
        Self::from_cell_areas(path, cells, level).expect("finite linear areas")
    }

    pub fn path(&self) -> &GridPath {
        &self.path
    }

    pub fn grid(&self) -> &TimeGrid {
        self.path.grid()
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    pub fn lift_resolution(&self) -> u32 {
        self.lift_resolution
    }

    /// The finer sampling the areas were built from, when kept.
    pub fn fine_path(&self) -> Option<&GridPath> {
        self.fine.as_ref()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.store, AreaStore::Dense(_))
    }

    /// Area on cell `[t_i, t_{i+1}]`, row-major `d x d`.
    pub fn cell_area(&self, i: usize) -> &[f64] {
        let dd = self.dim() * self.dim();
        &self.cells[i * dd..(i + 1) * dd]
    }

    pub fn cell_areas(&self) -> &[f64] {
        &self.cells
    }

    pub fn increment(&self, i: usize, j: usize) -> Vec<f64> {
        let (a, b) = (self.path.value(i), self.path.value(j));
        a.iter().zip(b).map(|(x, y)| y - x).collect()
    }

    /// Area `x²_{t_i t_j}` for `i <= j`.
    pub fn area(&self, i: usize, j: usize) -> Vec<f64> {
        let d = self.dim();
        match &self.store {
            AreaStore::Dense(t) => {
                let n = self.grid().len();
                let k = (i * n + j) * d * d;
                t[k..k + d * d].to_vec()
            }
            AreaStore::Cells(_) => {
                let mut acc = vec![0.0; d * d];
                let xi = self.path.value(i).to_vec();
                for k in i..j {
                    let (a, b) = (self.path.value(k), self.path.value(k + 1));
                    let c = self.cell_area(k);
                    for p in 0..d {
                        for q in 0..d {
                            acc[p * d + q] += c[p * d + q] + (a[p] - xi[p]) * (b[q] - a[q]);
                        }
                    }
                }
                acc
            }
        }
    }

    /// Restriction of the rough path to a coarser level (areas via Chen).
    pub fn coarsen(&self, level: u32) -> Result<RoughPath, RoughPathError> {
        let stride = 1usize << (self.grid().level().checked_sub(level).ok_or(RoughPathError::SubLevel {
            sub: self.grid().level(),
            level,
        })?);
        let path = self.path.coarsen(level)?;
        let mut cells = Vec::with_capacity(path.grid().steps() * self.dim() * self.dim());
        for i in 0..path.grid().steps() {
            cells.extend(self.area(i * stride, (i + 1) * stride));
        }
        let mut rp = RoughPath::from_cell_areas(path, cells, self.lift_resolution)?;
        rp.fine = self.fine.clone();
        Ok(rp)
    }

    /// CSV `s,t,a11,...,add` over all pairs `s < t` on grids up to level 8,
    /// consecutive pairs otherwise.
    pub fn area_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("s,t");
        for p in 0..d {
            for q in 0..d {
                out.push_str(&format!(",a{}{}", p + 1, q + 1));
            }
        }
        out.push('\n');
        let g = *self.grid();
        let all = g.level() <= 8;
        for i in 0..g.steps() {
            let hi = if all { g.steps() } else { i + 1 };
            for j in i + 1..=hi {
                out.push_str(&format!("{},{}", crate::grid::fmt17(g.point(i)), crate::grid::fmt17(g.point(j))));
                for v in self.area(i, j) {
                    out.push(',');
                    out.push_str(&crate::grid::fmt17(v));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn chen_table(path: &GridPath, cells: &[f64]) -> Vec<f64> {
    let d = path.dim();
    let dd = d * d;
    let n = path.len();
    let mut t = vec![0.0; n * n * dd];
    for i in 0..n {
        let xi = path.value(i);
        for j in i..n - 1 {
            let (a, b) = (path.value(j), path.value(j + 1));
            let c = &cells[j * dd..(j + 1) * dd];
            let src = (i * n + j) * dd;
            let dst = src + dd;
            for p in 0..d {
                for q in 0..d {
                    t[dst + p * d + q] = t[src + p * d + q] + c[p * d + q] + (a[p] - xi[p]) * (b[q] - a[q]);
                }
            }
        }
    }
    t
}

/// Canonical lift of the piecewise-linear interpolation of `fine`, read on the
/// coarser grid of level `level` over the same window. The returned rough
/// path keeps `fine` for later cross-integral computations.
pub fn lift_piecewise_linear(fine: &GridPath, level: u32) -> Result<RoughPath, RoughPathError> {
    let sub = fine.grid().level();
    if sub < level {
        return Err(RoughPathError::SubLevel { sub, level });
    }
    let grid = TimeGrid::new(level, fine.grid().origin(), fine.grid().span())?;
    let d = fine.dim();
    let dd = d * d;
    let stride = 1usize << (sub - level);
    let mut cells = vec![0.0; grid.steps() * dd];
    for k in 0..grid.steps() {
        let base = fine.value(k * stride);
        let c = &mut cells[k * dd..(k + 1) * dd];
        for m in k * stride..(k + 1) * stride {
            let (a, b) = (fine.value(m), fine.value(m + 1));
            for p in 0..d {
                let lead = a[p] - base[p] + 0.5 * (b[p] - a[p]);
                for q in 0..d {
                    c[p * d + q] += lead * (b[q] - a[q]);
                }
            }
        }
        // Exact symmetric part; the sum above only matches it to rounding.
        let (a, b) = (fine.value(k * stride), fine.value((k + 1) * stride));
        for p in 0..d {
            for q in p..d {
                let sym = (b[p] - a[p]) * (b[q] - a[q]);
                let anti = 0.5 * (c[p * d + q] - c[q * d + p]);
                c[p * d + q] = 0.5 * sym + anti;
                c[q * d + p] = 0.5 * sym - anti;
            }
        }
    }
    let path = fine.coarsen(level)?;
    let mut rp = RoughPath::from_cell_areas(path, cells, sub)?;
    rp.fine = Some(fine.clone());
    Ok(rp)
}

/// `max_{s<u<t} ‖x²_st - x²_su - x²_ut - δx_su ⊗ δx_ut‖`. Above the dense
/// level the triples are taken on a stride-subsampled grid of at most
/// `2^DENSE_LEVEL_MAX + 1` points.
pub fn chen_defect(rp: &RoughPath) -> f64 {
    let d = rp.dim();
    let dd = d * d;
    let g = rp.grid();
    let stride = 1usize << g.level().saturating_sub(DENSE_LEVEL_MAX).min(g.level());
    let idx: Vec<usize> = (0..=g.steps()).step_by(stride).collect();
    let m = idx.len();
    // Per component tables over the retained points: `row[pq][s*m + u]` is
    // `x²_su` and `col[pq][t*m + u]` is `x²_ut`, so the u-loop is contiguous.
    let mut row = vec![vec![0.0; m * m]; dd];
    let mut col = vec![vec![0.0; m * m]; dd];
    for a in 0..m {
        for b in a..m {
            let v = rp.area(idx[a], idx[b]);
            for c in 0..dd {
                row[c][a * m + b] = v[c];
                col[c][b * m + a] = v[c];
            }
        }
    }
    let xs: Vec<Vec<f64>> = (0..d).map(|p| idx.iter().map(|i| rp.path().value(*i)[p]).collect()).collect();
    let mut worst = 0.0f64;
    let mut acc = vec![0.0; m];
    for s in 0..m {
        for t in s + 2..m {
            let len = t - s - 1;
            let acc = &mut acc[..len];
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..d {
                for q in 0..d {
                    let pq = p * d + q;
                    let c = row[pq][s * m + t];
                    let rows = &row[pq][s * m + s + 1..s * m + t];
                    let cols = &col[pq][t * m + s + 1..t * m + t];
                    let xp = &xs[p][s + 1..t];
                    let xq = &xs[q][s + 1..t];
                    let (xps, xqt) = (xs[p][s], xs[q][t]);
                    for k in 0..len {
                        let r = c - rows[k] - cols[k] - (xp[k] - xps) * (xqt - xq[k]);
                        acc[k] += r * r;
                    }
                }
            }
            let best = acc.iter().fold(0.0f64, |a, b| if *b > a { *b } else { a });
            worst = worst.max(best.sqrt());
        }
    }
    worst
}

/// Both terms of `‖x‖_{γ;I} = N[x; C^γ_1] + N[x²; C^{2γ}_2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoughNorm {
    pub path_term: f64,
    pub area_term: f64,
}

impl RoughNorm {
    pub fn value(&self) -> f64 {
        self.path_term + self.area_term
    }
}

/// Homogeneous rough-path norm on an index range, streamed row by row so it
/// works for cell-only storage too.
pub fn rough_norm_parts(rp: &RoughPath, gamma: f64, range: IndexRange) -> Result<RoughNorm, RoughPathError> {
    let g = *rp.grid();
    if range.hi <= range.lo || range.hi > g.steps() {
        return Err(GridError::GridTooSmall { lo: range.lo, hi: range.hi }.into());
    }
    let d = rp.dim();
    let len = range.hi - range.lo + 1;
    let p1: Vec<f64> = (0..len).map(|k| (k as f64 * g.dt()).powf(gamma)).collect();
    let p2: Vec<f64> = p1.iter().map(|v| v * v).collect();
    let mut path_term = 0.0f64;
    let mut area_term = 0.0f64;
    let mut acc = vec![0.0; d * d];
    let mut inc = vec![0.0; d];
    for i in range.lo..range.hi {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let xi = rp.path().value(i);
        for j in i + 1..=range.hi {
            let (a, b) = (rp.path().value(j - 1), rp.path().value(j));
            let c = rp.cell_area(j - 1);
            for p in 0..d {
                for q in 0..d {
                    acc[p * d + q] += c[p * d + q] + (a[p] - xi[p]) * (b[q] - a[q]);
                }
                inc[p] = b[p] - xi[p];
            }
            path_term = path_term.max(norm(&inc) / p1[j - i]);
            area_term = area_term.max(norm(&acc) / p2[j - i]);
        }
    }
    Ok(RoughNorm { path_term, area_term })
}

pub fn rough_norm(rp: &RoughPath, gamma: f64, range: IndexRange) -> Result<f64, RoughPathError> {
    Ok(rough_norm_parts(rp, gamma, range)?.value())
}

/// A smooth-away-from-zero drift path `g` with derivative `g'` available at
/// any time; `g'` may blow up like `t^{γ-1}` at the window origin.
pub trait SmoothDrift {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, out: &mut [f64]);
    fn derivative(&self, t: f64, out: &mut [f64]);
}

/// Drift given by closures.
pub struct FnDrift<F, G> {
    pub dim: usize,
    pub value: F,
    pub derivative: G,
}

impl<F: Fn(f64, &mut [f64]), G: Fn(f64, &mut [f64])> SmoothDrift for FnDrift<F, G> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64, out: &mut [f64]) {
        (self.value)(t, out)
    }
    fn derivative(&self, t: f64, out: &mut [f64]) {
        (self.derivative)(t, out)
    }
}

pub(crate) const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// Canonical lift of `z + g` for a rough path `z` (which must keep its fine
/// sampling) and a drift `g` with `g(origin) = 0`. Cross integrals use the
/// midpoint rule on the fine grid; on the first fine cell the substitution
/// `u = r^{1/γ}` with Gauss–Legendre nodes absorbs a `u^{γ-1}` singularity.
pub fn lift_with_drift(rp_z: &RoughPath, g: &dyn SmoothDrift, gamma: f64) -> Result<RoughPath, RoughPathError> {
    let d = rp_z.dim();
    if g.dim() != d {
        return Err(GridError::DimensionMismatch { expected: d, got: g.dim() }.into());
    }
    let grid = *rp_z.grid();
    let fine = rp_z.fine.clone().unwrap_or_else(|| rp_z.path.clone());
    let fg = *fine.grid();
    let stride = 1usize << (fg.level() - grid.level());
    let h = fg.dt();
    let origin = grid.origin();
    let dd = d * d;

    let mut gv = vec![0.0; fg.len() * d];
    for i in 0..fg.len() {
        g.value(fg.point(i), &mut gv[i * d..(i + 1) * d]);
    }
    let gval = |i: usize| &gv[i * d..(i + 1) * d];

    // For each fine cell: ∫ (z_u - z_left) ⊗ g'(u) du and ∫ (g_u - g_left) ⊗ g'(u) du,
    // with z linear on the fine cell.
    let mut zz = vec![0.0; dd];
    let mut gg = vec![0.0; dd];
    let mut gp = vec![0.0; d];
    let mut gu = vec![0.0; d];
    let mut cells = rp_z.cells.clone();
    for k in 0..grid.steps() {
        let base = k * stride;
        let mut cz = vec![0.0; dd];
        let mut cg = vec![0.0; dd];
        for m in base..base + stride {
            zz.iter_mut().for_each(|v| *v = 0.0);
            gg.iter_mut().for_each(|v| *v = 0.0);
            let (za, zb) = (fine.value(m), fine.value(m + 1));
            let t0 = fg.point(m);
            let mut quad = |u: f64, w: f64| -> Result<(), RoughPathError> {
                g.derivative(u, &mut gp);
                g.value(u, &mut gu);
                if gp.iter().any(|v| !v.is_finite()) {
                    return Err(RoughPathError::NonFiniteDrift(u));
                }
                let frac = (u - t0) / h;
                for p in 0..d {
                    let zp = za[p] + frac * (zb[p] - za[p]) - fine.value(base)[p];
                    let gpp = gu[p] - gval(base)[p];
                    for q in 0..d {
                        zz[p * d + q] += w * zp * gp[q];
                        gg[p * d + q] += w * gpp * gp[q];
                    }
                }
                Ok(())
            };
            if m == 0 && (t0 - origin).abs() < 1e-15 {
                // u = r^{1/γ}: du = r^{1/γ - 1} dr / γ on r ∈ [0, h^γ].
                let rmax = h.powf(gamma);
                for (x, w) in GL8 {
                    let r = 0.5 * rmax * (x + 1.0);
                    let u = origin + r.powf(1.0 / gamma);
                    let jac = r.powf(1.0 / gamma - 1.0) / gamma;
                    quad(u, 0.5 * rmax * w * jac)?;
                }
            } else {
                quad(t0 + 0.5 * h, h)?;
            }
            for v in 0..dd {
                cz[v] += zz[v];
                cg[v] += gg[v];
            }
        }
        let (z0, z1) = (fine.value(base), fine.value(base + stride));
        let (g0, g1) = (gval(base).to_vec(), gval(base + stride).to_vec());
        let c = &mut cells[k * dd..(k + 1) * dd];
        for p in 0..d {
            for q in 0..d {
                let dgp = g1[p] - g0[p];
                let dzq = z1[q] - z0[q];
                // ∫δz^p dg^q + ∫δg^p dz^q, the second by parts.
                c[p * d + q] += cz[p * d + q] + dgp * dzq - cz[q * d + p];
            }
        }
        // ∫ δg ⊗ dg: exact symmetric part, quadrature for the antisymmetric one.
        for p in 0..d {
            for q in p..d {
                let sym = (g1[p] - g0[p]) * (g1[q] - g0[q]);
                let anti = 0.5 * (cg[p * d + q] - cg[q * d + p]);
                c[p * d + q] += 0.5 * sym + anti;
                if q != p {
                    c[q * d + p] += 0.5 * sym - anti;
                }
            }
        }
    }
    let mut values = rp_z.path.values().to_vec();
    for i in 0..grid.len() {
        for p in 0..d {
            values[i * d + p] += gval(i * stride)[p];
        }
    }
    let path = GridPath::new(grid, d, values)?;
    let mut fine_sum = fine.values().to_vec();
    for (v, w) in fine_sum.iter_mut().zip(&gv) {
        *v += w;
    }
    let mut rp = RoughPath::from_cell_areas(path, cells, rp_z.lift_resolution)?;
    rp.fine = Some(GridPath::new(fg, d, fine_sum)?);
    Ok(rp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_path(level: u32, d: usize, f: impl Fn(f64, &mut [f64])) -> GridPath {
        GridPath::from_fn(TimeGrid::unit(level), d, f).unwrap()
    }

    #[test]
    fn line_area_is_half_outer_square() {
        let fine = sample_path(6, 2, |t, o| {
            o[0] = t;
            o[1] = 2.0 * t;
        });
        let rp = lift_piecewise_linear(&fine, 1).unwrap();
        let a = rp.area(0, 1);
        let want = [0.125, 0.25, 0.25, 0.5];
        for k in 0..4 {
            assert!((a[k] - want[k]).abs() < 1e-15, "{a:?}");
        }
    }

    #[test]
    fn circle_area_matches_closed_form() {
        let pi = std::f64::consts::PI;
        let fine = GridPath::from_fn(TimeGrid::new(14, 0.0, pi).unwrap(), 2, |t, o| {
            o[0] = t.cos();
            o[1] = t.sin();
        })
        .unwrap();
        let rp = lift_piecewise_linear(&fine, 4).unwrap();
        let a = rp.area(0, 16);
        // ∫ (cos u - 1) cos u du over [0, π].
        assert!((a[1] - pi / 2.0).abs() < 1e-7, "{}", a[1]);
    }

    #[test]
    fn chen_holds_and_detects_a_fault() {
        let fine = sample_path(9, 2, |t, o| {
            o[0] = (7.0 * t).sin() + t;
            o[1] = (3.0 * t * t).cos();
        });
        let rp = lift_piecewise_linear(&fine, 5).unwrap();
        let sup = fine.sup_norm();
        assert!(chen_defect(&rp) <= 1e-12 * (1.0 + sup * sup));
        // Corrupting the dense table in one entry must show up.
        let mut bad = rp.clone();
        if let AreaStore::Dense(t) = &mut bad.store {
            let n = 33;
            t[(3 * n + 20) * 4 + 1] += 1.0;
        }
        assert!(chen_defect(&bad) >= 1.0);
    }

    #[test]
    fn cell_storage_agrees_with_dense_storage() {
        let fine = sample_path(12, 2, |t, o| {
            o[0] = (9.0 * t).sin();
            o[1] = (4.0 * t).cos() * t;
        });
        let big = lift_piecewise_linear(&fine, 11).unwrap();
        assert!(!big.is_dense());
        let small = big.coarsen(6).unwrap();
        assert!(small.is_dense());
        let a = big.area(32, 1024);
        let b = small.area(1, 32);
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
        assert!(chen_defect(&big) < 1e-12);
    }

    #[test]
    fn rough_norm_examples() {
        let zero = lift_piecewise_linear(&GridPath::zeros(TimeGrid::unit(5), 1), 3).unwrap();
        assert_eq!(rough_norm(&zero, 0.4, zero.grid().full()).unwrap(), 0.0);
        let line = lift_piecewise_linear(&sample_path(6, 1, |t, o| o[0] = t), 6).unwrap();
        let parts = rough_norm_parts(&line, 0.4, line.grid().full()).unwrap();
        assert!((parts.path_term - 1.0).abs() < 1e-12);
        assert!((parts.area_term - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rough_norm_matches_brute_force() {
        let fine = sample_path(8, 2, |t, o| {
            o[0] = (20.0 * t).sin() * 0.3 + t.sqrt();
            o[1] = (11.0 * t).cos();
        });
        let rp = lift_piecewise_linear(&fine, 5).unwrap();
        let g = *rp.grid();
        let (mut p1, mut p2) = (0.0f64, 0.0f64);
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                let h = g.point(j) - g.point(i);
                p1 = p1.max(norm(&rp.increment(i, j)) / h.powf(0.35));
                p2 = p2.max(norm(&rp.area(i, j)) / h.powf(0.7));
            }
        }
        let parts = rough_norm_parts(&rp, 0.35, g.full()).unwrap();
        assert!((parts.path_term - p1).abs() < 1e-12 * p1);
        assert!((parts.area_term - p2).abs() < 1e-12 * p2);
    }

    #[test]
    fn drift_lift_degenerate_cases() {
        let fine = sample_path(8, 1, |t, o| o[0] = (5.0 * t).sin());
        let rp = lift_piecewise_linear(&fine, 4).unwrap();
        let zero = FnDrift { dim: 1, value: |_t: f64, o: &mut [f64]| o[0] = 0.0, derivative: |_t: f64, o: &mut [f64]| o[0] = 0.0 };
        let same = lift_with_drift(&rp, &zero, 0.4).unwrap();
        assert_eq!(same.cell_areas(), rp.cell_areas());
        assert_eq!(same.path().values(), rp.path().values());

        let z0 = lift_piecewise_linear(&GridPath::zeros(TimeGrid::unit(8), 1), 4).unwrap();
        let line = FnDrift { dim: 1, value: |t: f64, o: &mut [f64]| o[0] = t, derivative: |_t: f64, o: &mut [f64]| o[0] = 1.0 };
        let l = lift_with_drift(&z0, &line, 0.4).unwrap();
        let g = *l.grid();
        for i in 0..g.len() {
            for j in i..g.len() {
                let h = g.point(j) - g.point(i);
                assert!((l.area(i, j)[0] - 0.5 * h * h).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn drift_lift_matches_lift_of_the_sum() {
        // With a smooth drift both routes converge to the same areas.
        let z = |t: f64| [(6.0 * t).sin(), t * t];
        let gf = |t: f64| [t.powf(0.9), (2.0 * t).sin()];
        let za = sample_path(14, 2, |t, o| o.copy_from_slice(&z(t)));
        let sum = sample_path(14, 2, |t, o| {
            let (a, b) = (z(t), gf(t));
            o[0] = a[0] + b[0];
            o[1] = a[1] + b[1];
        });
        let rz = lift_piecewise_linear(&za, 4).unwrap();
        let drift = FnDrift {
            dim: 2,
            value: move |t: f64, o: &mut [f64]| o.copy_from_slice(&gf(t)),
            derivative: |t: f64, o: &mut [f64]| {
                o[0] = if t > 0.0 { 0.9 * t.powf(-0.1) } else { f64::INFINITY };
                o[1] = 2.0 * (2.0 * t).cos();
            },
        };
        let a = lift_with_drift(&rz, &drift, 0.9).unwrap();
        let b = lift_piecewise_linear(&sum, 4).unwrap();
        for i in 0..16 {
            for k in 0..4 {
                assert!((a.cell_area(i)[k] - b.cell_area(i)[k]).abs() < 1e-6, "cell {i} comp {k}");
            }
        }
        assert!(chen_defect(&a) < 1e-12);
    }

    proptest! {
        #[test]
        fn symmetric_part_identity_is_exact(vals in proptest::collection::vec(-3f64..3.0, 2 * 65)) {
            let fine = GridPath::new(TimeGrid::unit(6), 2, vals).unwrap();
            let rp = lift_piecewise_linear(&fine, 3).unwrap();
            let g = *rp.grid();
            for i in 0..g.len() {
                for j in i..g.len() {
                    let a = rp.area(i, j);
                    let dx = rp.increment(i, j);
                    for p in 0..2 {
                        for q in 0..2 {
                            let lhs = a[p * 2 + q] + a[q * 2 + p];
                            let rhs = dx[p] * dx[q];
                            prop_assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + rhs.abs()));
                        }
                    }
                }
            }
        }

        #[test]
        fn chen_defect_is_rounding_only(vals in proptest::collection::vec(-5f64..5.0, 2 * 129)) {
            let fine = GridPath::new(TimeGrid::unit(7), 2, vals).unwrap();
            let rp = lift_piecewise_linear(&fine, 4).unwrap();
            let s = fine.sup_norm();
            prop_assert!(chen_defect(&rp) <= 1e-10 * (1.0 + s * s));
        }
    }
}
