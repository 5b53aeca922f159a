//! Alternating estimation of the deformation and the covariance parameters.
//!
//! Each outer iteration refits the deformation coefficients to coordinates
//! obtained by classical scaling of the inverted variogram, optionally climbs
//! the Gaussian replicate log-likelihood jointly in the coefficients and the
//! covariance parameters, fixes the gauge against the geographic sites, and
//! then maximizes the log-likelihood over `(sigma2, phi, nugget)` with the map
//! held fixed.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};

use crate::basis::{design_matrix, DesignMatrix, KnotGrid, Point};
use crate::covariance::{
    covariance_from_coords, sample_dispersions, variogram_inverse, CovParams, DispersionMatrix,
    VariogramModel,
};
use crate::deformation::{
    corner_constraints, default_epsilon, validate, CoefPair, DeformationMap, SpatialMap,
};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky, procrustes, rms_spread, ProcrustesScale, Similarity};
use crate::scaling::{classical_mds, configuration_stress, sg_initialize, SgOptions};
use crate::smoothers::{default_ridge, fit_bspline_constrained, BsplineSmoother, ConstrainedFit};

/// Replicated observations at fixed sites.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sites: Vec<Point>,
    /// `n x T`, one column per period.
    replicates: DMatrix<f64>,
    ids: Vec<String>,
    times: Vec<String>,
}

impl Dataset {
    /// Sites get ids `0..n` and periods `0..T`.
    pub fn new(sites: Vec<Point>, replicates: DMatrix<f64>) -> Result<Self> {
        let ids = (0..sites.len()).map(|i| i.to_string()).collect();
        let times = (0..replicates.ncols()).map(|t| t.to_string()).collect();
        Self::with_labels(sites, replicates, ids, times)
    }

    pub fn with_labels(
        sites: Vec<Point>,
        replicates: DMatrix<f64>,
        ids: Vec<String>,
        times: Vec<String>,
    ) -> Result<Self> {
        let (n, t) = replicates.shape();
        if sites.len() != n || ids.len() != n {
            return Err(Error::Data(format!(
                "{} sites and {} ids for {n} replicate rows",
                sites.len(),
                ids.len()
            )));
        }
        if times.len() != t {
            return Err(Error::Data(format!(
                "{} time labels for {t} columns",
                times.len()
            )));
        }
        if n < 4 {
            return Err(Error::Data(format!("need at least 4 sites, got {n}")));
        }
        if t < 2 {
            return Err(Error::Data(format!("need at least 2 periods, got {t}")));
        }
        if sites
            .iter()
            .any(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::Data("site coordinates must be finite".into()));
        }
        if replicates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("observations must be finite".into()));
        }
        Ok(Self {
            sites,
            replicates,
            ids,
            times,
        })
    }

    pub fn n(&self) -> usize {
        self.sites.len()
    }

    pub fn t(&self) -> usize {
        self.replicates.ncols()
    }

    pub fn sites(&self) -> &[Point] {
        &self.sites
    }

    pub fn replicates(&self) -> &DMatrix<f64> {
        &self.replicates
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn times(&self) -> &[String] {
        &self.times
    }

    pub fn site_means(&self) -> Vec<f64> {
        self.replicates.row_iter().map(|r| r.mean()).collect()
    }

    /// Replicates with each site's mean removed.
    pub fn centered(&self) -> DMatrix<f64> {
        let mut z = self.replicates.clone();
        for mut row in z.row_iter_mut() {
            let m = row.mean();
            row.add_scalar_mut(-m);
        }
        z
    }

    pub fn dispersions(&self) -> Result<DispersionMatrix> {
        sample_dispersions(&self.replicates)
    }
}

/// Gaussian log-likelihood of the columns of `z`, i.i.d. `N(0, c)`.
pub(crate) fn gaussian_loglik(c: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<f64> {
    let (n, t) = z.shape();
    let chol = cholesky(c.clone(), "covariance matrix")?;
    let logdet = chol_logdet(&chol);
    let w = chol
        .l()
        .solve_lower_triangular(z)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let quad = w.norm_squared();
    Ok(-0.5 * t as f64 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet) - 0.5 * quad)
}

/// Log-likelihood of the site-centered replicates under the deformed covariance.
pub fn loglik(dataset: &Dataset, map: &dyn SpatialMap, cov: &CovParams) -> Result<f64> {
    cov.check()?;
    let coords = map.apply_all(dataset.sites())?;
    gaussian_loglik(&covariance_from_coords(&coords, cov), &dataset.centered())
}

/// Result of [`step_cov`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovStep {
    pub cov: CovParams,
    pub loglik: f64,
    /// The optimizer did not improve on the starting parameters.
    pub warning: bool,
}

struct CovObjective<'a> {
    coords: &'a [Point],
    z: &'a DMatrix<f64>,
    lower: [f64; 3],
    upper: [f64; 3],
}

impl CovObjective<'_> {
    fn params(&self, p: &[f64]) -> CovParams {
        let v: Vec<f64> = (0..3)
            .map(|k| p[k].clamp(self.lower[k], self.upper[k]).exp())
            .collect();
        CovParams {
            sigma2: v[0],
            phi: v[1],
            nugget: v[2],
        }
    }
}

impl CostFunction for CovObjective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let cov = self.params(p);
        let c = covariance_from_coords(self.coords, &cov);
        // out-of-box parameters are penalized so the simplex moves back inside
        let excess: f64 = (0..3)
            .map(|k| (p[k] - p[k].clamp(self.lower[k], self.upper[k])).abs())
            .sum();
        Ok(match gaussian_loglik(&c, self.z) {
            Ok(ll) => -ll + excess * (1.0 + ll.abs()),
            Err(_) => f64::MAX,
        })
    }
}

/// Maximize the log-likelihood over `(sigma2, phi, nugget)` with the map fixed.
///
/// Nelder-Mead on log parameters, with `phi` boxed to `[1e-4, 10]` times the
/// diameter of the deformed sites and the variances to `[1e-10, 1e3]` times the
/// mean sample variance. Never returns parameters worse than `cov_init`.
pub fn step_cov(dataset: &Dataset, map: &dyn SpatialMap, cov_init: &CovParams) -> Result<CovStep> {
    cov_init.check()?;
    let coords = map.apply_all(dataset.sites())?;
    let z = dataset.centered();
    let init_ll = gaussian_loglik(&covariance_from_coords(&coords, cov_init), &z)?;

    let mut diameter = 0.0f64;
    for (i, a) in coords.iter().enumerate() {
        for b in &coords[..i] {
            diameter = diameter.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    if !(diameter > 0.0) {
        return Err(Error::Degenerate("deformed sites coincide".into()));
    }
    let var = (z.norm_squared() / z.len() as f64).max(f64::MIN_POSITIVE);
    let lower = [
        (1e-10 * var).ln(),
        (1e-4 * diameter).ln(),
        (1e-10 * var).ln(),
    ];
    let upper = [(1e3 * var).ln(), (10.0 * diameter).ln(), (1e3 * var).ln()];
    let start: Vec<f64> = [
        cov_init.sigma2,
        cov_init.phi,
        cov_init.nugget.max(1e-6 * var),
    ]
    .iter()
    .enumerate()
    .map(|(k, v)| v.ln().clamp(lower[k], upper[k]))
    .collect();
    let mut simplex = vec![start.clone()];
    for k in 0..3 {
        let mut v = start.clone();
        v[k] += if v[k] + 0.5 <= upper[k] { 0.5 } else { -0.5 };
        simplex.push(v);
    }

    let problem = CovObjective {
        coords: &coords,
        z: &z,
        lower,
        upper,
    };
    let best = NelderMead::new(simplex)
        .with_sd_tolerance(1e-10)
        .ok()
        .and_then(|solver| {
            Executor::new(problem, solver)
                .configure(|s| s.max_iters(600))
                .run()
                .ok()
        })
        .and_then(|res| {
            let state = res.state();
            state
                .get_best_param()
                .cloned()
                .map(|p| (p, state.get_best_cost()))
        });

    let objective = CovObjective {
        coords: &coords,
        z: &z,
        lower,
        upper,
    };
    if let Some((p, _)) = best {
        let cov = objective.params(&p);
        if cov.check().is_ok() {
            if let Ok(ll) = gaussian_loglik(&covariance_from_coords(&coords, &cov), &z) {
                if ll > init_ll {
                    return Ok(CovStep {
                        cov,
                        loglik: ll,
                        warning: false,
                    });
                }
            }
        }
    }
    Ok(CovStep {
        cov: *cov_init,
        loglik: init_ll,
        warning: true,
    })
}

/// Result of [`step_coords`].
#[derive(Clone, Debug)]
pub struct CoordStep {
    pub coef: CoefPair,
    /// Target coordinates the coefficients were fitted to.
    pub targets: Vec<Point>,
    /// Scale applied to the scaled coordinates to match the previous fit;
    /// `phi` must be multiplied by it to keep the covariance unchanged.
    pub scale: f64,
    pub fit: ConstrainedFit,
}

/// Refit the coefficients to coordinates from classical scaling of `g^-1(d2)`.
///
/// The scaled configuration is brought onto `previous` (the current fitted
/// coordinates) by a similarity transform, reflection allowed, so the targets
/// stay in the gauge of the current map.
pub fn step_coords(
    dataset: &Dataset,
    dispersions: &DispersionMatrix,
    cov: &CovParams,
    grid: &KnotGrid,
    epsilon: f64,
    ridge: f64,
    previous: &[Point],
) -> Result<CoordStep> {
    let n = dataset.n();
    let g = VariogramModel::from_cov(cov);
    let mut h = DMatrix::zeros(n, n);
    for (i, j, d2) in dispersions.pairs() {
        let v = variogram_inverse(&g, d2);
        h[(i, j)] = v;
        h[(j, i)] = v;
    }
    let mds = classical_mds(&h)?;
    let t = procrustes(
        mds.configuration.coords(),
        previous,
        ProcrustesScale::MatchSpread,
        true,
    )?;
    let targets: Vec<Point> = mds
        .configuration
        .coords()
        .iter()
        .map(|p| t.apply(*p))
        .collect();
    let fit = fit_bspline_constrained(grid, dataset.sites(), &targets, epsilon, ridge)?;
    validate(grid, &fit.coef, epsilon)?;
    Ok(CoordStep {
        coef: fit.coef.clone(),
        targets,
        scale: t.scale,
        fit,
    })
}

/// Result of [`step_likelihood`].
#[derive(Clone, Debug)]
pub struct LikelihoodStep {
    pub coef: CoefPair,
    pub cov: CovParams,
    pub loglik: f64,
    pub iterations: usize,
}

/// Log-likelihood and its gradient with respect to
/// `[vec(Theta1); vec(Theta2); ln sigma2; ln nugget]`.
struct JointLikelihood {
    w: DesignMatrix,
    /// `Z Z^T` of the centered replicates.
    scatter: DMatrix<f64>,
    t: f64,
    p: usize,
    /// Held fixed: it sets the scale of the coordinates.
    phi: f64,
}

impl JointLikelihood {
    fn unpack(&self, z: &[f64]) -> (Vec<Point>, CovParams) {
        let p = self.p;
        let f1 = self.w.mul_vec(&z[..p]);
        let f2 = self.w.mul_vec(&z[p..2 * p]);
        let coords = f1.into_iter().zip(f2).map(|(a, b)| [a, b]).collect();
        let cov = CovParams {
            sigma2: z[2 * p].exp(),
            phi: self.phi,
            nugget: z[2 * p + 1].exp(),
        };
        (coords, cov)
    }

    fn eval(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        let p = self.p;
        let (coords, cov) = self.unpack(z);
        if cov.check().is_err() {
            return None;
        }
        let n = coords.len();
        let c = covariance_from_coords(&coords, &cov);
        let chol = c.clone().cholesky()?;
        let logdet = chol_logdet(&chol);
        let cinv = chol.inverse();
        let cs = &cinv * &self.scatter;
        let ll = -0.5 * self.t * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet)
            - 0.5 * cs.trace();
        if !ll.is_finite() {
            return None;
        }
        // d ll = 1/2 tr(M dC)
        let m = &cs * &cinv - &cinv * self.t;
        let mut gy = vec![[0.0; 2]; n];
        let mut g_sigma = 0.0;
        for i in 0..n {
            g_sigma += 0.5 * m[(i, i)] * cov.sigma2;
            for j in 0..i {
                let (dx, dy) = (coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]);
                let h = dx.hypot(dy);
                let cij = c[(i, j)];
                g_sigma += m[(i, j)] * cij;
                if h > 0.0 {
                    let k = -m[(i, j)] * cij / (cov.phi * h);
                    gy[i][0] += k * dx;
                    gy[i][1] += k * dy;
                    gy[j][0] -= k * dx;
                    gy[j][1] -= k * dy;
                }
            }
        }
        let g_nugget = 0.5 * cov.nugget * m.trace();
        let g1: Vec<f64> = gy.iter().map(|g| g[0]).collect();
        let g2: Vec<f64> = gy.iter().map(|g| g[1]).collect();
        let mut grad: Vec<f64> = self
            .w
            .tr_mul_vec(&g1)
            .into_iter()
            .chain(self.w.tr_mul_vec(&g2))
            .collect();
        grad.extend([g_sigma, g_nugget]);
        debug_assert_eq!(grad.len(), 2 * p + 2);
        // minimize the negative log-likelihood
        Some((-ll, grad.into_iter().map(|g| -g).collect()))
    }
}

/// Objective returning the value and gradient, or `None` outside its domain.
type ValueGrad<'a> = &'a dyn Fn(&[f64]) -> Option<(f64, Vec<f64>)>;

/// Minimize `f(z) - mu sum ln(c_m(z) - epsilon)` over a decreasing sequence of
/// `mu` with BFGS, keeping every iterate strictly inside the corner constraints.
/// The constraints act on the first `2 K1 K2` entries of `z`.
fn barrier_bfgs(
    f: ValueGrad<'_>,
    grid: &KnotGrid,
    epsilon: f64,
    z0: Vec<f64>,
    max_iter: usize,
) -> (Vec<f64>, usize) {
    let p = grid.n_basis();
    let constraints = corner_constraints(grid);
    let dim = z0.len();
    let barrier = |z: &[f64], mu: f64| -> Option<(f64, Vec<f64>)> {
        let (fv, mut g) = f(z)?;
        let coef = CoefPair::from_vecs(grid, &z[..p], &z[p..2 * p]);
        let mut b = 0.0;
        for k in &constraints {
            let s = k.evaluate(&coef) - epsilon;
            if !(s > 0.0) {
                return None;
            }
            b -= s.ln();
            let (g1, g2) = k.gradient(&coef);
            for (q, &i) in k.indices().iter().enumerate() {
                g[i] -= mu * g1[q] / s;
                g[p + i] -= mu * g2[q] / s;
            }
        }
        Some((fv + mu * b, g))
    };

    let mut z = z0;
    let Some((f0, _)) = f(&z) else {
        return (z, 0);
    };
    let mut best = (z.clone(), f0);
    let mut iterations = 0;
    let mut mu = 1e-4 * f0.abs().max(1.0) / constraints.len() as f64;
    for _ in 0..3 {
        let Some((mut val, mut grad)) = barrier(&z, mu) else {
            break;
        };
        let mut h = DMatrix::<f64>::identity(dim, dim);
        let mut first = true;
        for _ in 0..max_iter {
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !(gnorm > 1e-10) {
                break;
            }
            let gv = DVector::from_column_slice(&grad);
            let mut d = -(&h * &gv);
            let mut slope = d.dot(&gv);
            if !(slope < 0.0) {
                h = DMatrix::identity(dim, dim);
                d = -gv.clone();
                slope = -gnorm * gnorm;
                first = true;
            }
            let mut step = if first { 1e-2 / gnorm } else { 1.0 };
            let mut accepted = None;
            for _ in 0..50 {
                let trial: Vec<f64> = z.iter().zip(d.iter()).map(|(a, b)| a + step * b).collect();
                if let Some((tv, tg)) = barrier(&trial, mu) {
                    if tv <= val + 1e-4 * step * slope {
                        accepted = Some((trial, tv, tg));
                        break;
                    }
                }
                step *= 0.5;
            }
            iterations += 1;
            let Some((trial, tv, tg)) = accepted else {
                break;
            };
            let s = DVector::from_iterator(dim, trial.iter().zip(&z).map(|(a, b)| a - b));
            let y = DVector::from_iterator(dim, tg.iter().zip(&grad).map(|(a, b)| a - b));
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                if first {
                    h = DMatrix::identity(dim, dim) * (sy / y.dot(&y));
                }
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                    - (&hy * s.transpose() + &s * hy.transpose()) * rho;
                first = false;
            }
            let decrease = val - tv;
            z = trial;
            val = tv;
            grad = tg;
            if let Some((fv, _)) = f(&z) {
                if fv < best.1 {
                    best = (z.clone(), fv);
                }
            }
            if decrease <= 1e-12 * val.abs().max(1.0) {
                break;
            }
        }
        mu *= 1e-2;
    }
    (best.0, iterations)
}

/// Maximize the log-likelihood jointly over the coefficients, `sigma2` and the
/// nugget, keeping every corner value at or above `epsilon`.
///
/// `phi` is held fixed: scaling the map and `phi` together leaves the
/// likelihood unchanged, so freeing both would let the coordinates drift in
/// scale and void the margin.
///
/// Starts from `(coef, cov)`, which must satisfy the constraints strictly;
/// the returned likelihood is never below the starting one.
pub fn step_likelihood(
    dataset: &Dataset,
    grid: &KnotGrid,
    coef: &CoefPair,
    cov: &CovParams,
    epsilon: f64,
    max_iter: usize,
) -> Result<LikelihoodStep> {
    cov.check()?;
    let z = dataset.centered();
    let problem = JointLikelihood {
        w: design_matrix(grid, dataset.sites())?,
        scatter: &z * z.transpose(),
        t: dataset.t() as f64,
        p: grid.n_basis(),
        phi: cov.phi,
    };
    let start_ll = loglik(
        dataset,
        &DeformationMap::new(grid.clone(), coef.clone())?,
        cov,
    )?;
    let mut z0: Vec<f64> = coef.vec1().iter().chain(coef.vec2()).copied().collect();
    let var = (z.norm_squared() / z.len() as f64).max(f64::MIN_POSITIVE);
    z0.extend([cov.sigma2.ln(), cov.nugget.max(1e-8 * var).ln()]);
    let (best, iterations) = barrier_bfgs(&|v| problem.eval(v), grid, epsilon, z0, max_iter);
    let p = grid.n_basis();
    let new_coef = CoefPair::from_vecs(grid, &best[..p], &best[p..2 * p]);
    let (_, new_cov) = problem.unpack(&best);
    let ll = loglik(
        dataset,
        &DeformationMap::new(grid.clone(), new_coef.clone())?,
        &new_cov,
    );
    match ll {
        Ok(ll) if ll >= start_ll && validate(grid, &new_coef, epsilon).is_ok() => {
            Ok(LikelihoodStep {
                coef: new_coef,
                cov: new_cov,
                loglik: ll,
                iterations,
            })
        }
        _ => Ok(LikelihoodStep {
            coef: coef.clone(),
            cov: *cov,
            loglik: start_ll,
            iterations,
        }),
    }
}

/// Fitted deformed coordinates `(W vec(Theta1), W vec(Theta2))` at the sites.
pub fn fitted_coords(grid: &KnotGrid, coef: &CoefPair, sites: &[Point]) -> Result<Vec<Point>> {
    let w = design_matrix(grid, sites)?;
    let f1 = w.mul_vec(coef.vec1());
    let f2 = w.mul_vec(coef.vec2());
    Ok(f1.into_iter().zip(f2).map(|(a, b)| [a, b]).collect())
}

/// Fix the shift, rotation and scale of the map: the fitted coordinates are
/// moved by a proper rotation, uniform scale and translation so that their
/// centroid and RMS spread equal those of the sites.
///
/// Returns the transformed coefficients and the applied transform; `phi` must
/// be multiplied by its scale to leave the covariance unchanged.
pub fn normalize_gauge(
    grid: &KnotGrid,
    coef: &CoefPair,
    sites: &[Point],
) -> Result<(CoefPair, Similarity)> {
    let fitted = fitted_coords(grid, coef, sites)?;
    if !(rms_spread(&fitted) > 1e-12 * rms_spread(sites).max(f64::MIN_POSITIVE)) {
        return Err(Error::Gauge("fitted coordinates coincide".into()));
    }
    let t = procrustes(&fitted, sites, ProcrustesScale::MatchSpread, false)
        .map_err(|e| Error::Gauge(e.to_string()))?;
    Ok((coef.transformed(&t), t))
}

/// Controls for [`fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub k1: usize,
    pub k2: usize,
    /// Corner margin; defaults to [`default_epsilon`].
    pub epsilon: Option<f64>,
    /// Relative log-likelihood change that ends the outer loop.
    pub tol: f64,
    pub max_outer: usize,
    /// Ridge penalty; defaults to [`default_ridge`].
    pub ridge: Option<f64>,
    pub init: SgOptions,
    /// Add the joint likelihood ascent to every outer iteration.
    pub likelihood_step: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k1: 4,
            k2: 4,
            epsilon: None,
            tol: 1e-6,
            max_outer: 20,
            ridge: None,
            init: SgOptions::default(),
            likelihood_step: true,
        }
    }
}

impl FitConfig {
    pub fn square(k: usize) -> Self {
        Self {
            k1: k,
            k2: k,
            ..Self::default()
        }
    }
}

/// Per-iteration record of a fit. Index 0 is the initialization.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    pub loglik: Vec<f64>,
    /// Stress of the fitted coordinates against the dispersions.
    pub stress: Vec<f64>,
    /// Smallest corner value of the map.
    pub margin: Vec<f64>,
    /// Stress sequence of the initialization loop.
    pub init_stress: Vec<f64>,
    /// Covariance steps that kept their starting parameters.
    pub cov_warnings: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Outer iteration whose model was returned.
    pub best_iteration: usize,
}

/// Fitted deformation and covariance model.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformModel {
    pub grid: KnotGrid,
    pub coef: CoefPair,
    pub cov: CovParams,
    pub epsilon: f64,
    /// Training sites.
    pub sites: Vec<Point>,
    pub site_means: Vec<f64>,
    /// Mean used for Kriging: the average of the site means.
    pub mean: f64,
    pub diagnostics: Diagnostics,
}

impl DeformModel {
    pub fn map(&self) -> DeformationMap {
        DeformationMap::new(self.grid.clone(), self.coef.clone())
            .expect("model coefficients match grid")
    }

    /// Deformed coordinates of the training sites.
    pub fn fitted_coords(&self) -> Vec<Point> {
        fitted_coords(&self.grid, &self.coef, &self.sites).expect("training sites lie in the grid")
    }

    /// Model covariance between the training sites.
    pub fn covariance(&self) -> DMatrix<f64> {
        covariance_from_coords(&self.fitted_coords(), &self.cov)
    }

    /// Smallest corner value of the Jacobian determinant.
    pub fn min_jacobian(&self) -> f64 {
        crate::deformation::min_jacobian(&self.map())
    }
}

struct Current {
    coef: CoefPair,
    cov: CovParams,
    loglik: f64,
    margin: f64,
    stress: f64,
}

fn wrap(iteration: usize, best: Option<DeformModel>) -> impl FnOnce(Error) -> Error {
    move |e| Error::Estimation {
        iteration,
        source: Box::new(e),
        best: best.map(Box::new),
    }
}

/// Normalize the gauge of `coef`, co-scaling `phi`. When shrinking would push a
/// corner below `epsilon`, only the rigid part of the transform is applied.
fn gauge_step(
    grid: &KnotGrid,
    coef: &CoefPair,
    phi: f64,
    sites: &[Point],
    epsilon: f64,
) -> Result<(CoefPair, f64, f64)> {
    let (mut out, mut t) = normalize_gauge(grid, coef, sites)?;
    let margin = match validate(grid, &out, epsilon) {
        Ok(m) => m,
        Err(_) => {
            let fitted = fitted_coords(grid, coef, sites)?;
            t = procrustes(&fitted, sites, ProcrustesScale::Fixed, false)
                .map_err(|e| Error::Gauge(e.to_string()))?;
            out = coef.transformed(&t);
            validate(grid, &out, epsilon)?
        }
    };
    Ok((out, phi * t.scale, margin))
}

/// Estimate the deformation and covariance parameters.
///
/// Initialization runs [`sg_initialize`] with the constrained B-spline
/// smoother; the affine fit of the sites is kept instead when its likelihood is
/// higher. Each outer iteration then
///
/// 1. refits the coefficients to scaled coordinates with [`step_coords`];
/// 2. if `config.likelihood_step` is set, runs [`step_likelihood`] from the
///    better of the previous and the refitted model;
/// 3. fixes the gauge with [`normalize_gauge`] and updates the covariance
///    parameters with [`step_cov`].
///
/// The loop stops when the relative log-likelihood change falls below
/// `config.tol` or after `config.max_outer` iterations. The model with the
/// highest log-likelihood is returned; every iterate satisfies the corner
/// constraints.
pub fn fit(dataset: &Dataset, config: &FitConfig) -> Result<DeformModel> {
    let sites = dataset.sites();
    let grid = KnotGrid::bounding(sites, config.k1, config.k2)?;
    let epsilon = config.epsilon.unwrap_or_else(|| default_epsilon(&grid));
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    if !(config.tol >= 0.0) {
        return Err(Error::Argument(format!(
            "tol must be >= 0, got {}",
            config.tol
        )));
    }
    let ridge = config
        .ridge
        .unwrap_or_else(|| default_ridge(&grid, dataset.n()));
    let dispersions = dataset.dispersions()?;
    let d2: Vec<f64> = dispersions.pairs().map(|(_, _, v)| v).collect();
    let site_means = dataset.site_means();
    let mean = site_means.iter().sum::<f64>() / site_means.len() as f64;

    let mut diag = Diagnostics::default();
    let model = |cur: &Current, diag: &Diagnostics| DeformModel {
        grid: grid.clone(),
        coef: cur.coef.clone(),
        cov: cur.cov,
        epsilon,
        sites: sites.to_vec(),
        site_means: site_means.clone(),
        mean,
        diagnostics: diag.clone(),
    };
    // gauge fixing followed by the covariance update
    let finish = |coef: &CoefPair, cov: CovParams, warnings: &mut usize| -> Result<Current> {
        let (coef, phi, margin) = gauge_step(&grid, coef, cov.phi, sites, epsilon)?;
        let map = DeformationMap::new(grid.clone(), coef.clone())?;
        let cs = step_cov(dataset, &map, &CovParams { phi, ..cov })?;
        *warnings += cs.warning as usize;
        let stress = configuration_stress(&d2, &fitted_coords(&grid, &coef, sites)?)?;
        Ok(Current {
            coef,
            cov: cs.cov,
            loglik: cs.loglik,
            margin,
            stress,
        })
    };

    let smoother = BsplineSmoother {
        grid: grid.clone(),
        epsilon,
        ridge: Some(ridge),
    };
    let mut warnings = 0;
    let init = (|| -> Result<Current> {
        let sg = sg_initialize(&dispersions, sites, &smoother, config.init)?;
        diag.init_stress = sg.stress.clone();
        let start = smoother.fit(sites, sg.configuration.coords())?;
        let mut cov0 = sg.variogram.to_cov();
        cov0.sigma2 = cov0.sigma2.max(1e-8);
        cov0.phi = cov0.phi.max(1e-8);
        let from_sg = finish(&start.coef, cov0, &mut warnings)?;
        let affine = finish(&CoefPair::identity(&grid), cov0, &mut warnings)?;
        Ok(if affine.loglik > from_sg.loglik {
            affine
        } else {
            from_sg
        })
    })()
    .map_err(wrap(0, None))?;
    diag.cov_warnings = warnings;

    let record = |diag: &mut Diagnostics, cur: &Current| {
        diag.loglik.push(cur.loglik);
        diag.margin.push(cur.margin);
        diag.stress.push(cur.stress);
    };
    record(&mut diag, &init);
    let mut best = model(&init, &diag);
    let mut best_ll = init.loglik;
    let mut current = init;

    for k in 1..=config.max_outer {
        diag.iterations = k;
        let mut warnings = 0;
        let step = (|| -> Result<Current> {
            let previous = fitted_coords(&grid, &current.coef, sites)?;
            let cs = step_coords(
                dataset,
                &dispersions,
                &current.cov,
                &grid,
                epsilon,
                ridge,
                &previous,
            )?;
            let mut cov = current.cov;
            cov.phi *= cs.scale;
            let refit = finish(&cs.coef, cov, &mut warnings)?;
            if !config.likelihood_step {
                return Ok(refit);
            }
            let from = if refit.loglik > current.loglik {
                &refit
            } else {
                &current
            };
            let ls = step_likelihood(dataset, &grid, &from.coef, &from.cov, epsilon, 200)?;
            finish(&ls.coef, ls.cov, &mut warnings)
        })()
        .map_err(|e| {
            let mut b = best.clone();
            b.diagnostics = diag.clone();
            wrap(k, Some(b))(e)
        })?;
        diag.cov_warnings += warnings;

        record(&mut diag, &step);
        let change =
            (step.loglik - current.loglik).abs() / current.loglik.abs().max(f64::MIN_POSITIVE);
        if step.loglik > best_ll {
            best_ll = step.loglik;
            best = model(&step, &diag);
            diag.best_iteration = k;
        }
        current = step;
        if change < config.tol {
            diag.converged = true;
            break;
        }
    }

    best.diagnostics = diag;
    Ok(best)
}
