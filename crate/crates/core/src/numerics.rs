//! Dense vectors and matrices, seeded randomness, and finite-difference oracles.
//!
//! Everything is `f64`. Matrices are row-major. Arithmetic helpers are
//! infallible on well-shaped inputs; fallible entry points return
//! [`DnhError::Shape`] on mismatched dimensions and [`DnhError::NumericDomain`]
//! when a non-finite value would escape.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DnhError, Result};

/// Variance floor used whenever a Gaussian is moment-matched from samples.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(DnhError::Shape("vector must have dim >= 1".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(DnhError::NumericDomain("non-finite vector entry".into()));
        }
        Ok(Vector(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Vector::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    pub fn hadamard(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    pub fn concat(parts: &[&Vector]) -> Vector {
        Vector(parts.iter().flat_map(|p| p.0.iter().copied()).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_dim(&self, dim: usize, what: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(DnhError::Shape(format!(
                "{what}: expected dim {dim}, got {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(DnhError::Shape("matrix dims must be positive".into()));
        }
        if rows * cols != data.len() {
            return Err(DnhError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DnhError::NumericDomain("non-finite matrix entry".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(DnhError::Shape("ragged rows".into()));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Matrix::zeros(d, d);
        for i in 0..d {
            m.data[i * d + i] = 1.0;
        }
        m
    }

    pub fn scaled_identity(d: usize, s: f64) -> Self {
        Matrix::identity(d).scale(s)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub(crate) fn ensure_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(DnhError::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// `self · v`. Panics on mismatched dims; use [`Matrix::try_matvec`] at boundaries.
    pub fn matvec(&self, v: &Vector) -> Vector {
        debug_assert_eq!(self.cols, v.dim());
        let x = v.as_slice();
        Vector(
            self.data
                .chunks_exact(self.cols)
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    pub fn try_matvec(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.cols {
            return Err(DnhError::Shape(format!(
                "matvec: {}x{} matrix with dim-{} vector",
                self.rows,
                self.cols,
                v.dim()
            )));
        }
        Ok(self.matvec(v))
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &Vector) -> Vector {
        debug_assert_eq!(self.rows, v.dim());
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.data.chunks_exact(self.cols).zip(v.as_slice()) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        Vector(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// In-place `self += s · other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// In-place `self += s · u vᵀ`.
    pub fn add_outer(&mut self, u: &Vector, v: &Vector, s: f64) {
        debug_assert_eq!(self.rows, u.dim());
        debug_assert_eq!(self.cols, v.dim());
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u.as_slice()) {
            let c = s * ui;
            for (a, vj) in row.iter_mut().zip(v.as_slice()) {
                *a += c * vj;
            }
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `u vᵀ`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut m = Matrix::zeros(u.dim(), v.dim());
    m.add_outer(u, v, 1.0);
    m
}

/// Central finite-difference gradient of `f` at `x`.
///
/// Coordinate `i` is perturbed by `h · max(1, |x_i|)` so large coordinates get
/// proportionally large steps.
pub fn central_fd<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(DnhError::InvalidParameter(format!("fd step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vector::zeros(x.dim());
    for i in 0..x.dim() {
        let xi = x[i];
        let step = h * xi.abs().max(1.0);
        probe[i] = xi + step;
        let up = f(&probe);
        probe[i] = xi - step;
        let down = f(&probe);
        probe[i] = xi;
        if !up.is_finite() || !down.is_finite() {
            return Err(DnhError::NumericDomain(format!(
                "non-finite objective while differencing coordinate {i}"
            )));
        }
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// KL(N(mu1, diag var1) ‖ N(mu2, diag var2)).
pub fn gaussian_kl(mu1: &Vector, var1: &Vector, mu2: &Vector, var2: &Vector) -> Result<f64> {
    let d = mu1.dim();
    for (v, name) in [(var1, "var1"), (mu2, "mu2"), (var2, "var2")] {
        v.ensure_dim(d, name)?;
    }
    let mut kl = 0.0;
    for i in 0..d {
        let (v1, v2) = (var1[i], var2[i]);
        if !(v1 > 0.0) || !(v2 > 0.0) {
            return Err(DnhError::InvalidParameter(format!(
                "variances must be positive (dim {i}: {v1}, {v2})"
            )));
        }
        let dm = mu1[i] - mu2[i];
        kl += 0.5 * ((v2 / v1).ln() + (v1 + dm * dm) / v2 - 1.0);
    }
    // Rounding can push an exact zero slightly negative.
    Ok(kl.max(0.0))
}

/// Moment-matched diagonal Gaussian of a sample set, with [`VARIANCE_FLOOR`] applied.
pub fn diagonal_moments<'a, I>(samples: I, dim: usize) -> (Vector, Vector)
where
    I: IntoIterator<Item = &'a Vector> + Clone,
{
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for s in samples.clone() {
        n += 1;
        for (m, x) in mean.iter_mut().zip(s.as_slice()) {
            *m += x;
        }
    }
    let nf = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; dim];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s.as_slice()).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / nf).max(VARIANCE_FLOOR));
    (Vector(mean), Vector(var))
}

/// Seeded generator with a portable, serializable state.
///
/// Backed by ChaCha8 (a counter-mode stream cipher), so a given seed yields
/// the same sequence on every platform. Normal draws use the ziggurat sampler
/// from `rand_distr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream `stream` of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_vector(&mut self, dim: usize, std: f64) -> Vector {
        Vector((0..dim).map(|_| std * self.standard_normal()).collect())
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| std * self.standard_normal()).collect(),
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// One draw from N(mean, var). `var == 0` returns `mean` exactly but still
/// advances the generator.
pub fn normal_sample(rng: &mut RngState, mean: f64, var: f64) -> Result<f64> {
    if !(var >= 0.0) || !var.is_finite() {
        return Err(DnhError::InvalidParameter(format!("variance must be >= 0, got {var}")));
    }
    let z = rng.standard_normal();
    if var == 0.0 {
        return Ok(mean);
    }
    Ok(mean + var.sqrt() * z)
}

/// Ordinary least-squares fit `y ≈ slope·x + intercept`, plus the standard error of the slope.
pub(crate) fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let se = if xs.len() > 2 && sxx > 0.0 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    (slope, intercept, se)
}
