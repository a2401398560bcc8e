//! Dyadic time grids, discrete increments and Hölder-type seminorms.
//!
//! Paths live on uniform grids `t_i = origin + i * span / 2^n`. Two-parameter
//! increments are stored densely over all ordered pairs; three-parameter
//! increments are only ever produced as `δg` of a two-parameter one, so they
//! are exposed through a lazy view and the triple norms stream over `g`
//! directly. The singular seminorms measure `s` from the grid origin.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid too small: index range [{lo}, {hi}] holds fewer than 2 points")]
    GridTooSmall { lo: usize, hi: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value at grid index {index}")]
    NonFinite { index: usize },
    #[error("missing derivative samples of order {0}")]
    MissingDerivative(usize),
    #[error("derivative samples must avoid t <= 0 (found t = {0})")]
    DerivativeAtOrigin(f64),
    #[error("empty window")]
    EmptyWindow,
    #[error("malformed csv: {0}")]
    Csv(String),
}

/// Uniform dyadic grid with `2^level + 1` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    level: u32,
    origin: f64,
    span: f64,
}

impl TimeGrid {
    pub fn new(level: u32, origin: f64, span: f64) -> Result<Self, GridError> {
        if level == 0 || level > 24 {
            return Err(GridError::InvalidGrid(format!("level {level} outside 1..=24")));
        }
        if !(span > 0.0) || !span.is_finite() || !origin.is_finite() {
            return Err(GridError::InvalidGrid(format!("origin {origin}, span {span}")));
        }
        Ok(Self { level, origin, span })
    }

    /// The grid `{i / 2^level}` on `[0, 1]`.
    pub fn unit(level: u32) -> Self {
        Self::new(level, 0.0, 1.0).expect("unit grid level in range")
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn end(&self) -> f64 {
        self.origin + self.span
    }

    /// Number of cells, `2^level`.
    pub fn steps(&self) -> usize {
        1usize << self.level
    }

    /// Number of points, `2^level + 1`.
    pub fn len(&self) -> usize {
        self.steps() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.span / self.steps() as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.origin + self.span * (i as f64 / self.steps() as f64)
    }

    /// Time of point `i` measured from the origin.
    pub fn offset(&self, i: usize) -> f64 {
        self.span * (i as f64 / self.steps() as f64)
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn full(&self) -> IndexRange {
        IndexRange { lo: 0, hi: self.steps() }
    }

    /// Same window at a finer level.
    pub fn refine(&self, sub_level: u32) -> Result<Self, GridError> {
        if sub_level < self.level {
            return Err(GridError::InvalidGrid(format!(
                "sub-level {sub_level} below grid level {}",
                self.level
            )));
        }
        Self::new(sub_level, self.origin, self.span)
    }

    /// Index of `t` if it is a grid point (up to a relative 1e-9 of a cell).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.origin) / self.dt();
        let r = x.round();
        if (x - r).abs() < 1e-9 && r >= 0.0 && (r as usize) <= self.steps() {
            Some(r as usize)
        } else {
            None
        }
    }
}

/// Inclusive range of grid indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexRange {
    pub lo: usize,
    pub hi: usize,
}

impl IndexRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    fn check(&self, grid: &TimeGrid) -> Result<(), GridError> {
        if self.hi <= self.lo || self.hi > grid.steps() {
            return Err(GridError::GridTooSmall { lo: self.lo, hi: self.hi });
        }
        Ok(())
    }

    pub fn contains(&self, other: &IndexRange) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

/// A `d`-dimensional path sampled on a [`TimeGrid`], stored point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl GridPath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self, GridError> {
        if dim == 0 {
            return Err(GridError::InvalidGrid("dimension 0".into()));
        }
        if values.len() != grid.len() * dim {
            return Err(GridError::DimensionMismatch { expected: grid.len() * dim, got: values.len() });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index: k / dim });
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, dim, values: vec![0.0; grid.len() * dim] }
    }

    /// Samples `f(t, out)` at every grid point.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Result<Self, GridError> {
        let mut values = vec![0.0; grid.len() * dim];
        for (i, chunk) in values.chunks_exact_mut(dim).enumerate() {
            f(grid.point(i), chunk);
        }
        Self::new(grid, dim, values)
    }

    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self, GridError> {
        Self::new(grid, 1, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(self.dim).copied().collect()
    }

    pub fn last(&self) -> &[f64] {
        self.value(self.grid.steps())
    }

    /// `max_i ‖f_{t_i}‖`.
    pub fn sup_norm(&self) -> f64 {
        self.values.chunks_exact(self.dim).map(norm).fold(0.0, f64::max)
    }

    pub fn zip_with(&self, other: &GridPath, f: impl Fn(f64, f64) -> f64) -> Result<GridPath, GridError> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(GridError::DimensionMismatch { expected: self.values.len(), got: other.values.len() });
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect();
        GridPath::new(self.grid, self.dim, values)
    }

    pub fn add(&self, other: &GridPath) -> Result<GridPath, GridError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridPath) -> Result<GridPath, GridError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> GridPath {
        GridPath { grid: self.grid, dim: self.dim, values: self.values.iter().map(|v| c * v).collect() }
    }

    /// Restriction to a coarser dyadic level on the same window.
    pub fn coarsen(&self, level: u32) -> Result<GridPath, GridError> {
        if level > self.grid.level() {
            return Err(GridError::InvalidGrid(format!("cannot coarsen level {} to {level}", self.grid.level())));
        }
        let grid = TimeGrid::new(level, self.grid.origin(), self.grid.span())?;
        let stride = 1usize << (self.grid.level() - level);
        let mut values = Vec::with_capacity(grid.len() * self.dim);
        for i in 0..grid.len() {
            values.extend_from_slice(self.value(i * stride));
        }
        GridPath::new(grid, self.dim, values)
    }

    /// CSV with header `t,x1,...,xd` at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for k in 0..self.dim {
            out.push_str(&format!(",x{}", k + 1));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&fmt17(self.grid.point(i)));
            for v in self.value(i) {
                out.push(',');
                out.push_str(&fmt17(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<GridPath, GridError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| GridError::Csv("missing header".into()))?;
        let dim = header.split(',').count().saturating_sub(1);
        if dim == 0 || !header.starts_with('t') {
            return Err(GridError::Csv(format!("bad header `{header}`")));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(GridError::Csv(format!("row {row} has {} fields", fields.len())));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| GridError::Csv(format!("row {row}: {e}")));
            times.push(parse(fields[0])?);
            for f in &fields[1..] {
                values.push(parse(f)?);
            }
        }
        let steps = times.len().saturating_sub(1);
        if steps < 2 || !steps.is_power_of_two() {
            return Err(GridError::Csv(format!("{} rows is not 2^n + 1", times.len())));
        }
        let grid = TimeGrid::new(steps.trailing_zeros(), times[0], times[steps] - times[0])?;
        for (i, t) in times.iter().enumerate() {
            if (t - grid.point(i)).abs() > 1e-12 * (1.0 + t.abs()) {
                return Err(GridError::Csv(format!("row {i}: time {t} off the uniform grid")));
            }
        }
        GridPath::new(grid, dim, values)
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Two-parameter increment on all ordered grid pairs. Each entry holds
/// `width` numbers (`d` for vectors, `d*d` for matrices, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Increment2 {
    grid: TimeGrid,
    width: usize,
    n: usize,
    data: Vec<f64>,
}

impl Increment2 {
    pub fn zeros(grid: TimeGrid, width: usize) -> Self {
        let n = grid.len();
        Self { grid, width, n, data: vec![0.0; n * n * width] }
    }

    /// Fills entry `(i, j)` via `f(i, j, out)` for every pair `i <= j`;
    /// entries with `i > j` stay zero unless set explicitly.
    pub fn from_fn(grid: TimeGrid, width: usize, mut f: impl FnMut(usize, usize, &mut [f64])) -> Self {
        let mut g = Self::zeros(grid, width);
        for i in 0..g.n {
            for j in i..g.n {
                let k = (i * g.n + j) * width;
                f(i, j, &mut g.data[k..k + width]);
            }
        }
        g
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.n + j) * self.width;
        &self.data[k..k + self.width]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = (i * self.n + j) * self.width;
        &mut self.data[k..k + self.width]
    }

    pub fn set(&mut self, i: usize, j: usize, v: &[f64]) {
        self.get_mut(i, j).copy_from_slice(v);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Component `c` as a dense row-major `n x n` table and its transpose.
    fn component_tables(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut row = vec![0.0; n * n];
        let mut col = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = self.data[(i * n + j) * self.width + c];
                row[i * n + j] = v;
                col[j * n + i] = v;
            }
        }
        (row, col)
    }
}

/// Lazy view of `δg_{sut} = g_{st} - g_{su} - g_{ut}`.
#[derive(Debug, Clone, Copy)]
pub struct Increment3<'a> {
    g: &'a Increment2,
}

impl<'a> Increment3<'a> {
    pub fn grid(&self) -> &TimeGrid {
        &self.g.grid
    }

    pub fn width(&self) -> usize {
        self.g.width
    }

    pub fn get(&self, s: usize, u: usize, t: usize, out: &mut [f64]) {
        let (a, b, c) = (self.g.get(s, t), self.g.get(s, u), self.g.get(u, t));
        for k in 0..out.len() {
            out[k] = a[k] - b[k] - c[k];
        }
    }

    pub fn norm_at(&self, s: usize, u: usize, t: usize) -> f64 {
        let mut buf = vec![0.0; self.g.width];
        self.get(s, u, t, &mut buf);
        norm(&buf)
    }
}

/// Which grid indices realise a supremum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgMax {
    None,
    Point(usize),
    Pair(usize, usize),
    Triple(usize, usize, usize),
    Derivative { order: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormReport {
    pub value: f64,
    pub arg: ArgMax,
}

impl NormReport {
    pub fn zero() -> Self {
        Self { value: 0.0, arg: ArgMax::None }
    }

    fn offer(&mut self, value: f64, arg: ArgMax) {
        if value > self.value {
            self.value = value;
            self.arg = arg;
        }
    }

    pub fn max(self, other: NormReport) -> NormReport {
        if other.value > self.value {
            other
        } else {
            self
        }
    }
}

/// The two branches of a singular seminorm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularNormReport {
    /// `sup ‖g_st‖ / |t-s|^α`.
    pub plain: NormReport,
    /// `sup_{s>0} ‖g_st‖ / (|t-s|^μ s^{β-1})`.
    pub weighted: NormReport,
}

impl SingularNormReport {
    pub fn value(&self) -> f64 {
        self.plain.value.max(self.weighted.value)
    }

    pub fn best(&self) -> NormReport {
        self.plain.max(self.weighted)
    }
}

pub fn delta1(f: &GridPath) -> Increment2 {
    let d = f.dim();
    let mut g = Increment2::zeros(*f.grid(), d);
    for i in 0..f.len() {
        for j in 0..f.len() {
            let (a, b) = (f.value(i), f.value(j));
            let e = g.get_mut(i, j);
            for k in 0..d {
                e[k] = b[k] - a[k];
            }
        }
    }
    g
}

pub fn delta2(g: &Increment2) -> Increment3<'_> {
    Increment3 { g }
}

fn pow_table(grid: &TimeGrid, len: usize, mu: f64) -> Vec<f64> {
    (0..len).map(|k| (k as f64 * grid.dt()).powf(mu)).collect()
}

/// `sup_{s<t} ‖g_st‖ / |t-s|^μ` over the index range.
pub fn holder_norm(g: &Increment2, mu: f64, range: IndexRange) -> Result<NormReport, GridError> {
    range.check(g.grid())?;
    let pw = pow_table(g.grid(), range.hi - range.lo + 1, mu);
    let mut rep = NormReport::zero();
    for i in range.lo..range.hi {
        for j in i + 1..=range.hi {
            rep.offer(norm(g.get(i, j)) / pw[j - i], ArgMax::Pair(i, j));
        }
    }
    Ok(rep)
}

/// Both branches of the singular seminorm `N[g; C^{α,μ}_{2;β}]`.
pub fn singular_norm(
    g: &Increment2,
    alpha: f64,
    mu: f64,
    beta: f64,
    range: IndexRange,
) -> Result<SingularNormReport, GridError> {
    range.check(g.grid())?;
    let grid = g.grid();
    let len = range.hi - range.lo + 1;
    let pa = pow_table(grid, len, alpha);
    let pm = pow_table(grid, len, mu);
    let mut plain = NormReport::zero();
    let mut weighted = NormReport::zero();
    for i in range.lo..range.hi {
        // s^{1-β} vanishes at s = 0 unless β = 1, where the branch is classical.
        let sw = grid.offset(i).powf(1.0 - beta);
        for j in i + 1..=range.hi {
            let v = norm(g.get(i, j));
            plain.offer(v / pa[j - i], ArgMax::Pair(i, j));
            if sw > 0.0 {
                weighted.offer(v * sw / pm[j - i], ArgMax::Pair(i, j));
            }
        }
    }
    Ok(SingularNormReport { plain, weighted })
}

#[inline(always)]
fn max_abs_residual(c: f64, a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            let v = (c - x[l] - y[l]).abs();
            acc[l] = if v > acc[l] { v } else { acc[l] };
        }
    }
    let mut m = acc.iter().fold(0.0f64, |x, y| x.max(*y));
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        m = m.max((c - x - y).abs());
    }
    m
}

/// `max_{s<u<t} ‖δg_sut‖` for every pair `(s, t)` in the range, as a dense
/// table indexed like the pair `(s - lo, t - lo)`.
fn triple_max_table(g: &Increment2, range: IndexRange) -> Vec<f64> {
    let n = g.n;
    let len = range.hi - range.lo + 1;
    let mut out = vec![0.0; len * len];
    if g.width == 1 {
        let (row, col) = g.component_tables(0);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            unsafe { scalar_table_avx512(&row, &col, n, range, &mut out) };
            return out;
        }
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { scalar_table_avx2(&row, &col, n, range, &mut out) };
            return out;
        }
        scalar_table(&row, &col, n, range, &mut out);
        return out;
    }
    let tables: Vec<_> = (0..g.width).map(|c| g.component_tables(c)).collect();
    let mut acc = vec![0.0; len];
    for s in range.lo..range.hi {
        for t in s + 2..=range.hi {
            let m = t - s - 1;
            acc[..m].iter_mut().for_each(|v| *v = 0.0);
            for (row, col) in &tables {
                let c = row[s * n + t];
                let a = &row[s * n + s + 1..s * n + t];
                let b = &col[t * n + s + 1..t * n + t];
                for k in 0..m {
                    let r = c - a[k] - b[k];
                    acc[k] += r * r;
                }
            }
            let best = acc[..m].iter().fold(0.0f64, |x, y| if *y > x { *y } else { x });
            out[(s - range.lo) * len + (t - range.lo)] = best.sqrt();
        }
    }
    out
}

#[inline(always)]
fn scalar_table(row: &[f64], col: &[f64], n: usize, range: IndexRange, out: &mut [f64]) {
    let len = range.hi - range.lo + 1;
    // Tiles of (s, t) keep the rows and columns they touch in cache.
    const TILE: usize = 32;
    for s0 in (range.lo..range.hi).step_by(TILE) {
        for t0 in (s0..=range.hi).step_by(TILE) {
            for s in s0..(s0 + TILE).min(range.hi) {
                for t in (s + 2).max(t0)..(t0 + TILE).min(range.hi + 1) {
                    let a = &row[s * n + s + 1..s * n + t];
                    let b = &col[t * n + s + 1..t * n + t];
                    out[(s - range.lo) * len + (t - range.lo)] = max_abs_residual(row[s * n + t], a, b);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn scalar_table_avx512(row: &[f64], col: &[f64], n: usize, range: IndexRange, out: &mut [f64]) {
    scalar_table(row, col, n, range, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn scalar_table_avx2(row: &[f64], col: &[f64], n: usize, range: IndexRange, out: &mut [f64]) {
    scalar_table(row, col, n, range, out)
}

fn argmax_u(g: &Increment2, s: usize, t: usize) -> usize {
    let view = delta2(g);
    (s + 1..t)
        .max_by(|a, b| view.norm_at(s, *a, t).total_cmp(&view.norm_at(s, *b, t)))
        .unwrap_or(s)
}

/// Both branches of `N[δg; C^{α,μ}_{3;β}]`, streamed over the pairs of `g`.
pub fn singular_norm3(
    g: &Increment2,
    alpha: f64,
    mu: f64,
    beta: f64,
    range: IndexRange,
) -> Result<SingularNormReport, GridError> {
    range.check(g.grid())?;
    let grid = g.grid();
    let len = range.hi - range.lo + 1;
    let table = triple_max_table(g, range);
    let pa = pow_table(grid, len, alpha);
    let pm = pow_table(grid, len, mu);
    let mut plain = (0.0, (0, 0));
    let mut weighted = (0.0, (0, 0));
    for s in range.lo..range.hi {
        let sw = grid.offset(s).powf(1.0 - beta);
        for t in s + 2..=range.hi {
            let m = table[(s - range.lo) * len + (t - range.lo)];
            let p = m / pa[t - s];
            if p > plain.0 {
                plain = (p, (s, t));
            }
            if sw > 0.0 {
                let w = m * sw / pm[t - s];
                if w > weighted.0 {
                    weighted = (w, (s, t));
                }
            }
        }
    }
    let to_report = |(value, (s, t)): (f64, (usize, usize))| {
        if value > 0.0 {
            NormReport { value, arg: ArgMax::Triple(s, argmax_u(g, s, t), t) }
        } else {
            NormReport::zero()
        }
    };
    Ok(SingularNormReport { plain: to_report(plain), weighted: to_report(weighted) })
}

/// `sup_{s,t<=0} ‖x_t - x_s‖ / (|t-s|^γ (1+|t|+|s|)^{1/2})` over the index
/// range of a path sampled on a past window. Only a lower bound of the norm
/// on the whole half-line.
pub fn weighted_past_norm(x: &GridPath, gamma: f64, range: IndexRange) -> Result<NormReport, GridError> {
    if x.grid().end() > 1e-12 {
        return Err(GridError::InvalidGrid(format!("past window must end at or before 0, ends at {}", x.grid().end())));
    }
    if range.hi <= range.lo || range.hi > x.grid().steps() {
        return Err(GridError::EmptyWindow);
    }
    let grid = x.grid();
    let pw = pow_table(grid, range.hi - range.lo + 1, gamma);
    let mut rep = NormReport::zero();
    let mut diff = vec![0.0; x.dim()];
    for i in range.lo..range.hi {
        for j in i + 1..=range.hi {
            let (a, b) = (x.value(i), x.value(j));
            for k in 0..diff.len() {
                diff[k] = b[k] - a[k];
            }
            let w = pw[j - i] * (1.0 + grid.point(i).abs() + grid.point(j).abs()).sqrt();
            rep.offer(norm(&diff) / w, ArgMax::Pair(i, j));
        }
    }
    Ok(rep)
}

/// Derivative samples `f^{(ℓ)}(t)` for `ℓ = 1..=orders.len()` on times in `(0, ∞)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeSamples {
    pub times: Vec<f64>,
    pub dim: usize,
    /// `orders[ℓ-1]` holds `f^{(ℓ)}` point-major, `times.len() * dim` values.
    pub orders: Vec<Vec<f64>>,
}

impl DerivativeSamples {
    pub fn first_order(times: Vec<f64>, dim: usize, values: Vec<f64>) -> Self {
        Self { times, dim, orders: vec![values] }
    }
}

/// `|||f|||_{k;γ} = max_{1<=ℓ<=k} sup_t t^{ℓ-γ} ‖f^{(ℓ)}(t)‖` on the sample times.
pub fn ekgamma_norm(f: &DerivativeSamples, k: usize, gamma: f64) -> Result<NormReport, GridError> {
    if let Some(t) = f.times.iter().find(|t| !(**t > 0.0)) {
        return Err(GridError::DerivativeAtOrigin(*t));
    }
    let mut rep = NormReport::zero();
    for order in 1..=k {
        let vals = f.orders.get(order - 1).ok_or(GridError::MissingDerivative(order))?;
        if vals.len() != f.times.len() * f.dim {
            return Err(GridError::DimensionMismatch { expected: f.times.len() * f.dim, got: vals.len() });
        }
        for (i, t) in f.times.iter().enumerate() {
            let v = norm(&vals[i * f.dim..(i + 1) * f.dim]);
            if !v.is_finite() {
                return Err(GridError::NonFinite { index: i });
            }
            rep.offer(t.powf(order as f64 - gamma) * v, ArgMax::Derivative { order, index: i });
        }
    }
    Ok(rep)
}

/// Both sides of the discrete singular sewing bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SewingReport {
    /// `N[G; C^{α, μ1∧μ2}_{2;λ}]`.
    pub lhs: f64,
    /// `M^{α,μ1}_λ[G]`, the single-step term.
    pub single_step: f64,
    /// `N[δG; C^{α,μ2}_{3;λ}]`.
    pub defect: f64,
    pub ratio: f64,
    /// Set when the right-hand side vanishes while the left does not.
    pub violation: bool,
}

/// `M^{α,μ}_λ[G]`: max of the single-step ratios (the weighted branch skips `t_0`).
pub fn single_step_norm(g: &Increment2, alpha: f64, mu: f64, lambda: f64) -> f64 {
    let grid = g.grid();
    let dt = grid.dt();
    let mut m = 0.0f64;
    for i in 0..grid.steps() {
        let v = norm(g.get(i, i + 1));
        m = m.max(v / dt.powf(alpha));
        if i >= 1 {
            m = m.max(v * grid.offset(i).powf(1.0 - lambda) / dt.powf(mu));
        }
    }
    m
}

pub fn sewing_check(g: &Increment2, alpha: f64, lambda: f64, mu1: f64, mu2: f64) -> Result<SewingReport, GridError> {
    if !(0.0 < alpha && alpha <= lambda && lambda <= 1.0 && mu1 >= 1.0 && mu2 > 1.0) {
        return Err(GridError::InvalidGrid(format!(
            "sewing exponents need 0 < α <= λ <= 1, μ1 >= 1, μ2 > 1 (got {alpha}, {lambda}, {mu1}, {mu2})"
        )));
    }
    let range = g.grid().full();
    let lhs = singular_norm(g, alpha, mu1.min(mu2), lambda, range)?.value();
    let single_step = single_step_norm(g, alpha, mu1, lambda);
    let defect = singular_norm3(g, alpha, mu2, lambda, range)?.value();
    let rhs = single_step + defect;
    let (ratio, violation) = match (lhs > 0.0, rhs > 0.0) {
        (false, _) => (0.0, false),
        (true, true) => (lhs / rhs, false),
        (true, false) => (f64::INFINITY, true),
    };
    Ok(SewingReport { lhs, single_step, defect, ratio, violation })
}
