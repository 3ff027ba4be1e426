//! Topographic group-sparse regularization of the routing distribution.
//!
//! The dense routing vector `z` (length `n`) is laid out row-major on an
//! `r x c` grid with `r * c = n` and `r` as close to `c` as the divisors of
//! `n` allow. The squared map is smoothed with a normalised `h x h` Gaussian
//! window using valid cross-correlation, and the regularizer is the sum of
//! the square roots of the smoothed values:
//!
//! ```text
//! R(z) = sum_p sqrt(eps + sum_{u,v} F[u,v] * Z[p + (u,v)]^2)
//! ```
//!
//! Each valid window position is one group; overlapping groups tie
//! neighbouring experts together, so mass that concentrates in one
//! neighbourhood is cheaper than the same mass spread around the grid.
//! `eps` keeps the square root differentiable at an all-zero window.

use crate::tensor::Matrix;
use crate::{Error, Result};

/// Smoothing constant used by the training loop.
pub const DEFAULT_EPS: f64 = 1e-12;

/// `(r, c)` with `r` the largest divisor of `n` not exceeding `sqrt(n)`.
pub fn near_square_shape(n: usize) -> (usize, usize) {
    assert!(n >= 1, "near_square_shape of zero");
    let mut r = (n as f64).sqrt() as usize;
    // guard against sqrt rounding either way
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    while n % r != 0 {
        r -= 1;
    }
    (r, n / r)
}

/// The routing vector viewed as a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TopographicMap {
    pub values: Matrix,
}

impl TopographicMap {
    pub fn from_vector(z: &[f64]) -> Self {
        let (r, c) = near_square_shape(z.len());
        Self {
            values: Matrix::from_vec(r, c, z.to_vec()).expect("r * c = n"),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }
}

/// Normalised `h x h` lowpass window.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFilter {
    size: usize,
    sigma: f64,
    weights: Matrix,
}

impl GaussianFilter {
    /// Rotationally symmetric Gaussian, `exp(-(u^2 + v^2) / (2 sigma^2))`
    /// normalised to unit sum.
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::config(format!("filter size must be odd, got {size}")));
        }
        if !(sigma > 0.0) {
            return Err(Error::config(format!("filter sigma must be positive, got {sigma}")));
        }
        let half = (size / 2) as f64;
        let mut weights = Matrix::from_fn(size, size, |r, c| {
            let (u, v) = (r as f64 - half, c as f64 - half);
            (-(u * u + v * v) / (2.0 * sigma * sigma)).exp()
        });
        let total: f64 = weights.as_slice().iter().sum();
        weights.as_mut_slice().iter_mut().for_each(|w| *w /= total);
        Ok(Self { size, sigma, weights })
    }

    /// Box filter, every weight `1/h^2`. This is the infinite-sigma limit.
    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::config(format!("filter size must be odd, got {size}")));
        }
        let w = 1.0 / (size * size) as f64;
        Ok(Self {
            size,
            sigma: f64::INFINITY,
            weights: Matrix::from_fn(size, size, |_, _| w),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }
}

fn check_fit(n: usize, filter: &GaussianFilter) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::shape("empty routing vector"));
    }
    let (r, c) = near_square_shape(n);
    let h = filter.size;
    if h > r || h > c {
        let hint = if r == 1 && n > 1 {
            " (n is prime, so the map degenerates to a single row; choose a composite expert count)"
        } else {
            ""
        };
        return Err(Error::shape(format!(
            "{h}x{h} filter does not fit the {r}x{c} map of {n} experts{hint}"
        )));
    }
    Ok((r, c))
}

/// `R(z)` for one routing vector.
pub fn group_sparse_reg(z: &[f64], filter: &GaussianFilter, eps: f64) -> Result<f64> {
    let (r, c) = check_fit(z.len(), filter)?;
    let h = filter.size;
    let f = filter.weights.as_slice();
    let mut total = 0.0;
    for pr in 0..=r - h {
        for pc in 0..=c - h {
            total += window_energy(z, c, pr, pc, h, f, eps).sqrt();
        }
    }
    Ok(total)
}

#[inline]
fn window_energy(z: &[f64], cols: usize, pr: usize, pc: usize, h: usize, f: &[f64], eps: f64) -> f64 {
    let mut acc = eps;
    for u in 0..h {
        let zrow = &z[(pr + u) * cols + pc..(pr + u) * cols + pc + h];
        let frow = &f[u * h..(u + 1) * h];
        for (fw, zv) in frow.iter().zip(zrow) {
            acc += fw * zv * zv;
        }
    }
    acc
}

/// `dR/dz`, flattened in the same order as `z`.
pub fn group_sparse_reg_grad(z: &[f64], filter: &GaussianFilter, eps: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; z.len()];
    group_sparse_reg_with_grad(z, filter, eps, &mut grad)?;
    Ok(grad)
}

/// `R(z)`, with `dR/dz` written to `grad`.
///
/// `dR/dZ[a,b] = Z[a,b] * sum_{p covers (a,b)} F[(a,b) - p] / sqrt(eps + P~[p])`.
pub fn group_sparse_reg_with_grad(
    z: &[f64],
    filter: &GaussianFilter,
    eps: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let (r, c) = check_fit(z.len(), filter)?;
    if grad.len() != z.len() {
        return Err(Error::shape("gradient buffer length differs from z"));
    }
    let h = filter.size;
    let f = filter.weights.as_slice();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for pr in 0..=r - h {
        for pc in 0..=c - h {
            let s = window_energy(z, c, pr, pc, h, f, eps).sqrt();
            total += s;
            // s == 0 only with eps == 0 and an all-zero window, where the
            // z factor below zeroes the contribution anyway.
            let inv = if s > 0.0 { 1.0 / s } else { 0.0 };
            for u in 0..h {
                let g = &mut grad[(pr + u) * c + pc..(pr + u) * c + pc + h];
                for (gv, fw) in g.iter_mut().zip(&f[u * h..(u + 1) * h]) {
                    *gv += fw * inv;
                }
            }
        }
    }
    for (g, zv) in grad.iter_mut().zip(z) {
        *g *= zv;
    }
    Ok(total)
}

/// Index groups over a vector, overlap allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    /// Groups over a vector of length `n`; every index must be covered.
    pub fn new(groups: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut covered = vec![false; n];
        for g in &groups {
            for &i in g {
                if i >= n {
                    return Err(Error::config(format!("group index {i} out of range for length {n}")));
                }
                covered[i] = true;
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::config(format!("index {i} belongs to no group")));
        }
        Ok(Self { groups })
    }

    /// All `h x h` valid windows of an `r x c` row-major grid.
    pub fn sliding_windows(rows: usize, cols: usize, h: usize) -> Result<Self> {
        if h == 0 || h > rows || h > cols {
            return Err(Error::shape(format!("{h}x{h} window on {rows}x{cols} grid")));
        }
        let mut groups = Vec::new();
        for pr in 0..=rows - h {
            for pc in 0..=cols - h {
                groups.push(
                    (0..h)
                        .flat_map(|u| (0..h).map(move |v| (pr + u) * cols + pc + v))
                        .collect(),
                );
            }
        }
        Self::new(groups, rows * cols)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

/// `(sum_i ||z_{G_i}||_p^q)^(1/q)`, with `p >= 1` and `0 < q <= 1`.
pub fn lpq_norm(z: &[f64], partition: &GroupPartition, p: f64, q: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::config(format!("p must be >= 1, got {p}")));
    }
    if q == 0.0 {
        return Err(Error::config("q = 0 (group counting limit) is not supported"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("q must lie in (0, 1], got {q}")));
    }
    let mut total = 0.0;
    for g in &partition.groups {
        let mut acc = 0.0;
        for &i in g {
            let v = *z
                .get(i)
                .ok_or_else(|| Error::shape(format!("group index {i} beyond vector length {}", z.len())))?;
            acc += v.abs().powf(p);
        }
        total += acc.powf(1.0 / p).powf(q);
    }
    Ok(total.powf(1.0 / q))
}

/// Power-law decay of the filter width over training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    pub sigma0: f64,
    pub sigma_min: f64,
    pub gamma: f64,
    pub total_iters: u64,
}

impl SigmaSchedule {
    pub fn new(sigma0: f64, sigma_min: f64, gamma: f64, total_iters: u64) -> Result<Self> {
        if !(sigma_min > 0.0) || !(sigma0 >= sigma_min) || !sigma0.is_finite() {
            return Err(Error::config(format!(
                "sigma schedule needs sigma0 >= sigma_min > 0 (sigma0={sigma0}, sigma_min={sigma_min})"
            )));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::config(format!("gamma must be >= 0, got {gamma}")));
        }
        if total_iters == 0 {
            return Err(Error::config("sigma schedule needs at least one iteration"));
        }
        Ok(Self {
            sigma0,
            sigma_min,
            gamma,
            total_iters,
        })
    }

    /// Fixed sigma for every iteration.
    pub fn constant(sigma: f64, total_iters: u64) -> Result<Self> {
        Self::new(sigma, sigma, 0.0, total_iters)
    }

    /// `sigma0 - (sigma0 - sigma_min) (t/T)^gamma`, with `0^0 = 1`. Past `T`
    /// the schedule stays at `sigma_min`.
    pub fn sigma_at(&self, t: u64) -> f64 {
        if t >= self.total_iters || self.gamma == 0.0 {
            return self.sigma_min;
        }
        let frac = t as f64 / self.total_iters as f64;
        let s = self.sigma0 - (self.sigma0 - self.sigma_min) * frac.powf(self.gamma);
        s.clamp(self.sigma_min, self.sigma0)
    }
}
