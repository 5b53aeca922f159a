//! Stationary isotropic covariance in the deformed plane, and its variogram.
//!
//! The field has covariance `sigma2 * exp(-h / phi)` between distinct sites,
//! where `h` is the distance between their deformed coordinates, plus a nugget
//! `nugget` on the diagonal. Differences of the field therefore have variogram
//!
//! ```text
//! g(h) = Var(Z_i - Z_j) = 2 nugget + 2 sigma2 (1 - exp(-h / phi)),   h > 0,
//! ```
//!
//! which is the exponential [`VariogramModel`] with intercept `a = 2 nugget`,
//! partial sill `b = 2 sigma2` and range `r = phi`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::Point;
use crate::deformation::SpatialMap;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, dist};

/// Number of equal-width distance bins used by [`fit_variogram`].
pub const VARIOGRAM_BINS: usize = 15;

/// Variogram inversion saturates at this many ranges.
pub const INVERSE_RANGE_CLAMP: f64 = 3.0;

/// Partial sill, range and nugget of the exponential covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    pub sigma2: f64,
    pub phi: f64,
    pub nugget: f64,
}

impl CovParams {
    pub fn new(sigma2: f64, phi: f64, nugget: f64) -> Result<Self> {
        let p = Self {
            sigma2,
            phi,
            nugget,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Argument(format!(
                "sigma2 must be > 0, got {}",
                self.sigma2
            )));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Argument(format!(
                "phi must be > 0, got {}",
                self.phi
            )));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::Argument(format!(
                "nugget must be >= 0, got {}",
                self.nugget
            )));
        }
        Ok(())
    }

    /// Marginal variance `sigma2 + nugget`.
    pub fn total_variance(&self) -> f64 {
        self.sigma2 + self.nugget
    }

    /// Covariance between two distinct sites at deformed distance `h`.
    pub fn cross(&self, h: f64) -> f64 {
        self.sigma2 * (-h / self.phi).exp()
    }
}

/// Exponential correlation `exp(-h / phi)`.
pub fn correlation(h: f64, params: &CovParams) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(Error::Argument(format!("distance must be >= 0, got {h}")));
    }
    Ok((-h / params.phi).exp())
}

/// Covariance matrix from already deformed coordinates, without a definiteness check.
pub(crate) fn covariance_from_coords(coords: &[Point], params: &CovParams) -> DMatrix<f64> {
    let n = coords.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = params.total_variance();
        for j in 0..i {
            let v = params.cross(dist(coords[i], coords[j]));
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// `C_ij = sigma2 exp(-|f(x_i) - f(x_j)| / phi) + nugget 1{i = j}`.
///
/// Fails with a numerical error when the matrix does not admit a Cholesky factor.
pub fn covariance_matrix(
    sites: &[Point],
    map: &dyn SpatialMap,
    params: &CovParams,
) -> Result<DMatrix<f64>> {
    params.check()?;
    let coords = map.apply_all(sites)?;
    let c = covariance_from_coords(&coords, params);
    cholesky(c.clone(), "covariance matrix")?;
    Ok(c)
}

/// Sample covariance of the rows of an `n x T` replicate matrix (divisor `T - 1`).
pub fn sample_covariance(replicates: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = replicates.ncols();
    if t < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 replicates, got {t}"
        )));
    }
    let mut centered = replicates.clone();
    for mut row in centered.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    Ok(&centered * centered.transpose() / (t - 1) as f64)
}

/// Symmetric matrix of sample dispersions `d2_ij = s_ii + s_jj - 2 s_ij`.
#[derive(Clone, Debug, PartialEq)]
pub struct DispersionMatrix(DMatrix<f64>);

impl DispersionMatrix {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Wrap an explicit matrix, enforcing symmetry, a zero diagonal and non-negativity.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Argument("dispersion matrix must be square".into()));
        }
        let n = m.nrows();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                    return Err(Error::Argument(format!(
                        "dispersions not symmetric at ({i}, {j})"
                    )));
                }
                let v = m[(i, j)].max(0.0);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(Self(out))
    }

    /// Upper-triangle entries `(i, j, d2)` with `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j, self.0[(i, j)])))
    }
}

/// Dispersions of an `n x T` replicate matrix.
pub fn sample_dispersions(replicates: &DMatrix<f64>) -> Result<DispersionMatrix> {
    let s = sample_covariance(replicates)?;
    let n = s.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = (s[(i, i)] + s[(j, j)] - 2.0 * s[(i, j)]).max(0.0);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(DispersionMatrix(d))
}

/// Exponential variogram `g(h) = a + b (1 - exp(-h / r))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl VariogramModel {
    pub fn eval(&self, h: f64) -> f64 {
        self.nugget + self.sill * (1.0 - (-h / self.range).exp())
    }

    /// Variogram of field differences implied by a covariance model.
    pub fn from_cov(cov: &CovParams) -> Self {
        Self {
            nugget: 2.0 * cov.nugget,
            sill: 2.0 * cov.sigma2,
            range: cov.phi,
        }
    }

    /// Inverse of [`Self::from_cov`].
    pub fn to_cov(&self) -> CovParams {
        CovParams {
            sigma2: self.sill / 2.0,
            phi: self.range,
            nugget: self.nugget / 2.0,
        }
    }

    /// Largest distance returned by [`variogram_inverse`].
    pub fn max_distance(&self) -> f64 {
        INVERSE_RANGE_CLAMP * self.range
    }
}

/// Distance at which the variogram reaches `d2`, clamped to `[0, 3 r]`.
pub fn variogram_inverse(g: &VariogramModel, d2: f64) -> f64 {
    let h_max = g.max_distance();
    if !(d2 > g.nugget) {
        return 0.0;
    }
    if d2 >= g.eval(h_max) {
        return h_max;
    }
    (-g.range * (1.0 - (d2 - g.nugget) / g.sill).ln()).clamp(0.0, h_max)
}

/// Result of a weighted least-squares variogram fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariogramFit {
    pub model: VariogramModel,
    /// Weighted residual sum of squares at the solution.
    pub residual: f64,
    pub bins_used: usize,
}

#[derive(Clone, Copy, Debug)]
struct Bin {
    h: f64,
    gamma: f64,
    count: f64,
}

fn bin_pairs(pairs: &[(f64, f64)]) -> Vec<Bin> {
    let h_max = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    let width = h_max / VARIOGRAM_BINS as f64;
    let mut acc = vec![(0.0, 0.0, 0usize); VARIOGRAM_BINS];
    for &(h, d2) in pairs {
        let k = ((h / width) as usize).min(VARIOGRAM_BINS - 1);
        acc[k].0 += h;
        acc[k].1 += d2;
        acc[k].2 += 1;
    }
    acc.into_iter()
        .filter(|a| a.2 > 0)
        .map(|(h, g, c)| Bin {
            h: h / c as f64,
            gamma: g / c as f64,
            count: c as f64,
        })
        .collect()
}

/// Cressie-weighted objective and the best `(a, b)` for a fixed range.
fn fit_fixed_range(bins: &[Bin], range: f64) -> (f64, f64, f64) {
    let basis: Vec<f64> = bins.iter().map(|b| 1.0 - (-b.h / range).exp()).collect();
    let mut weights: Vec<f64> = bins
        .iter()
        .map(|b| b.count / b.gamma.max(1e-300).powi(2))
        .collect();
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..8 {
        // weighted normal equations for gamma ~ a + b * basis
        let (mut sw, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((bin, &x), &w) in bins.iter().zip(&basis).zip(&weights) {
            sw += w;
            sx += w * x;
            sxx += w * x * x;
            sy += w * bin.gamma;
            sxy += w * x * bin.gamma;
        }
        let det = sw * sxx - sx * sx;
        (a, b) = if det.abs() > 1e-300 {
            ((sxx * sy - sx * sxy) / det, (sw * sxy - sx * sy) / det)
        } else {
            (0.0, sxy / sxx.max(1e-300))
        };
        if a < 0.0 {
            a = 0.0;
            b = sxy / sxx.max(1e-300);
        }
        b = b.max(0.0);
        let next: Vec<f64> = bins
            .iter()
            .zip(&basis)
            .map(|(bin, &x)| bin.count / (a + b * x).max(1e-12 * bin.gamma.max(1e-300)).powi(2))
            .collect();
        weights = next;
    }
    let obj = bins
        .iter()
        .zip(&basis)
        .map(|(bin, &x)| {
            let g = (a + b * x).max(1e-300);
            bin.count * ((bin.gamma - g) / g).powi(2)
        })
        .sum();
    (obj, a, b)
}

/// Fit `a + b (1 - exp(-h / r))` to `(h, d2)` pairs by Cressie-weighted least
/// squares over 15 equal-width distance bins.
pub fn fit_variogram(pairs: &[(f64, f64)]) -> Result<VariogramFit> {
    if pairs.len() < 3 {
        return Err(Error::Fit(format!(
            "need at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if pairs
        .iter()
        .any(|p| !(p.0.is_finite() && p.1.is_finite() && p.0 >= 0.0))
    {
        return Err(Error::Fit(
            "pairs must be finite with nonnegative distance".into(),
        ));
    }
    let h_min = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let h_max = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(h_max > h_min) || h_max <= 0.0 {
        return Err(Error::Fit("all distances are equal".into()));
    }
    let bins = bin_pairs(pairs);
    if bins.len() < 3 {
        return Err(Error::Fit(format!(
            "only {} nonempty distance bins",
            bins.len()
        )));
    }
    let mean_gamma = bins.iter().map(|b| b.gamma * b.count).sum::<f64>()
        / bins.iter().map(|b| b.count).sum::<f64>();
    if !(mean_gamma > 0.0) {
        return Err(Error::Fit("all dispersions are zero".into()));
    }

    // coarse scan over log(range), then golden-section refinement
    let (lo, hi) = ((h_max * 1e-3).ln(), (h_max * 1e2).ln());
    let steps = 80;
    let eval = |lr: f64| fit_fixed_range(&bins, lr.exp()).0;
    let grid: Vec<f64> = (0..=steps)
        .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
        .collect();
    let best = (0..=steps)
        .min_by(|&i, &j| eval(grid[i]).total_cmp(&eval(grid[j])))
        .expect("nonempty scan");
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (eval(c), eval(d));
    while (b - a).abs() > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d);
        }
    }
    let range = (0.5 * (a + b)).exp();
    let (residual, nugget, sill) = fit_fixed_range(&bins, range);
    let model = VariogramModel {
        nugget,
        sill,
        range,
    };
    let (first, last) = (bins[0].h, bins[bins.len() - 1].h);
    if !(model.eval(last) - model.eval(first) > 1e-6 * mean_gamma) {
        return Err(Error::Fit(
            "fitted variogram is flat: no spatial structure".into(),
        ));
    }
    Ok(VariogramFit {
        model,
        residual,
        bins_used: bins.len(),
    })
}
