//! Gaussian random field simulation and Kriging under a deformed covariance.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::Point;
use crate::covariance::{covariance_matrix, CovParams};
use crate::deformation::SpatialMap;
use crate::error::{Error, Result};
use crate::estimation::DeformModel;
use crate::linalg::{cholesky, dist};

/// Closed-form maps used as ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnalyticMap {
    Identity,
    /// Rotation about `center` by `strength * exp(-|x - center|^2 / (2 radius^2))` radians.
    Swirl {
        center: Point,
        strength: f64,
        radius: f64,
    },
}

impl AnalyticMap {
    pub fn swirl(center: Point, strength: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Argument(format!(
                "swirl radius must be > 0, got {radius}"
            )));
        }
        Ok(Self::Swirl {
            center,
            strength,
            radius,
        })
    }

    /// The swirl of the simulation study: center `(0.5, 0.5)`, 1.5 rad, radius 0.35.
    pub fn default_swirl() -> Self {
        Self::Swirl {
            center: [0.5, 0.5],
            strength: 1.5,
            radius: 0.35,
        }
    }

    pub fn eval(&self, x: Point) -> Point {
        match *self {
            Self::Identity => x,
            Self::Swirl {
                center,
                strength,
                radius,
            } => swirl(center, strength, radius, x),
        }
    }

    /// The inverse map; a swirl is undone by the swirl of opposite strength.
    pub fn inverse(&self) -> Self {
        match *self {
            Self::Identity => Self::Identity,
            Self::Swirl {
                center,
                strength,
                radius,
            } => Self::Swirl {
                center,
                strength: -strength,
                radius,
            },
        }
    }
}

impl SpatialMap for AnalyticMap {
    fn apply(&self, p: Point) -> Result<Point> {
        Ok(self.eval(p))
    }
}

/// Rotate `x` about `center` by an angle that decays as a Gaussian in the
/// distance to the center.
pub fn swirl(center: Point, strength: f64, radius: f64, x: Point) -> Point {
    let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
    let angle = strength * (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
    let (s, c) = angle.sin_cos();
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

/// `T` independent draws of the zero-mean field at `sites`, one per column.
pub fn simulate_grf(
    sites: &[Point],
    truth: &dyn SpatialMap,
    cov: &CovParams,
    t: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let c = covariance_matrix(sites, truth, cov)?;
    let l = cholesky(c, "covariance matrix")?.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = DMatrix::from_fn(sites.len(), t, |_, _| StandardNormal.sample(&mut rng));
    Ok(l * e)
}

/// Simple-Kriging predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Kriging {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

struct KrigingSystem {
    mean: DVector<f64>,
    /// Cross covariances `c*` (prediction x data).
    cross: DMatrix<f64>,
    /// `C^-1 c*^T`.
    weights: DMatrix<f64>,
    /// Prior covariance among the prediction sites, nugget on the diagonal.
    prior: DMatrix<f64>,
}

fn kriging_system(
    model: &DeformModel,
    data: &[f64],
    pred_sites: &[Point],
) -> Result<KrigingSystem> {
    let n = model.sites.len();
    if data.len() != n {
        return Err(Error::Data(format!(
            "{} observations for {n} sites",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("observations must be finite".into()));
    }
    let map = model.map();
    let dcoords = model.fitted_coords();
    let pcoords = map.apply_all(pred_sites)?;
    let cov = &model.cov;
    let m = pred_sites.len();

    let c = crate::covariance::covariance_from_coords(&dcoords, cov);
    let chol = cholesky(c, "data covariance")?;
    let cross = DMatrix::from_fn(m, n, |i, j| cov.cross(dist(pcoords[i], dcoords[j])));
    let weights = chol.solve(&cross.transpose());
    let resid = DVector::from_iterator(n, data.iter().map(|v| v - model.mean));
    let mean = DVector::from_element(m, model.mean) + weights.transpose() * resid;
    let mut prior = DMatrix::from_fn(m, m, |i, j| cov.cross(dist(pcoords[i], pcoords[j])));
    for i in 0..m {
        prior[(i, i)] = cov.total_variance();
    }
    Ok(KrigingSystem {
        mean,
        cross,
        weights,
        prior,
    })
}

/// Simple Kriging of the noise-free field at `pred_sites` from one period of
/// observations at the model's sites.
///
/// Cross covariances exclude the nugget; the variance is
/// `sigma2 + nugget - c*^T C^-1 c*`.
pub fn krige(model: &DeformModel, data: &[f64], pred_sites: &[Point]) -> Result<Kriging> {
    let sys = kriging_system(model, data, pred_sites)?;
    let total = model.cov.total_variance();
    let mut variance = Vec::with_capacity(pred_sites.len());
    for i in 0..pred_sites.len() {
        let v = total - sys.cross.row(i).dot(&sys.weights.column(i).transpose());
        if v < -1e-10 * total.max(1.0) {
            return Err(Error::Numerical(format!(
                "negative Kriging variance {v:.3e} at prediction site {i}"
            )));
        }
        variance.push(v.max(0.0));
    }
    Ok(Kriging {
        mean: sys.mean.iter().copied().collect(),
        variance,
    })
}

/// Draws from the conditional distribution of the field at `pred_sites` given
/// the data, one draw per column.
pub fn conditional_simulate(
    model: &DeformModel,
    data: &[f64],
    pred_sites: &[Point],
    n_draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let sys = kriging_system(model, data, pred_sites)?;
    let m = pred_sites.len();
    let mut cond = &sys.prior - &sys.cross * &sys.weights;
    cond = (&cond + cond.transpose()) * 0.5;
    let eig = cond.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| *v < -1e-8 * scale.max(1.0)) {
        return Err(Error::Numerical(
            "conditional covariance is not positive semidefinite".into(),
        ));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = DMatrix::from_fn(m, n_draws, |_, _| StandardNormal.sample(&mut rng));
    let mut draws = root * e;
    for mut col in draws.column_iter_mut() {
        col += &sys.mean;
    }
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::KnotGrid;
    use crate::covariance::sample_covariance;
    use crate::deformation::CoefPair;
    use crate::estimation::Diagnostics;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn model(sites: Vec<Point>, cov: CovParams, mean: f64) -> DeformModel {
        let grid = KnotGrid::unit_square(4).unwrap();
        DeformModel {
            coef: CoefPair::identity(&grid),
            grid,
            cov,
            epsilon: 1e-3,
            site_means: vec![mean; sites.len()],
            sites,
            mean,
            diagnostics: Diagnostics::default(),
        }
    }

    fn random_sites(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random(), rng.random()]).collect()
    }

    #[test]
    fn swirl_examples() {
        let c = [0.5, 0.5];
        assert_eq!(swirl(c, 1.5, 0.35, c), c);
        let x = [0.2, 0.9];
        assert_eq!(swirl(c, 0.0, 0.35, x), x);
        let m = AnalyticMap::default_swirl();
        let h = 1e-6;
        for p in random_sites(100, 1) {
            let f = |q: Point| m.eval(q);
            let a = f([p[0] + h, p[1]]);
            let b = f([p[0] - h, p[1]]);
            let cc = f([p[0], p[1] + h]);
            let d = f([p[0], p[1] - h]);
            let j =
                ((a[0] - b[0]) * (cc[1] - d[1]) - (a[1] - b[1]) * (cc[0] - d[0])) / (4.0 * h * h);
            assert_abs_diff_eq!(j, 1.0, epsilon = 1e-6);
            let back = m.inverse().eval(m.eval(p));
            assert_abs_diff_eq!(back[0], p[0], epsilon = 1e-10);
            assert_abs_diff_eq!(back[1], p[1], epsilon = 1e-10);
        }
        assert!(AnalyticMap::swirl(c, 1.0, 0.0).is_err());
    }

    #[test]
    fn simulation_is_seeded() {
        let sites = random_sites(6, 2);
        let cov = CovParams::new(1.0, 0.3, 0.1).unwrap();
        let a = simulate_grf(&sites, &AnalyticMap::Identity, &cov, 5, 7).unwrap();
        let b = simulate_grf(&sites, &AnalyticMap::Identity, &cov, 5, 7).unwrap();
        let c = simulate_grf(&sites, &AnalyticMap::Identity, &cov, 5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn simulation_matches_covariance() {
        let sites = random_sites(8, 3);
        let cov = CovParams::new(1.0, 0.3, 0.5).unwrap();
        let map = AnalyticMap::default_swirl();
        let z = simulate_grf(&sites, &map, &cov, 20000, 1).unwrap();
        let s = sample_covariance(&z).unwrap();
        let c = covariance_matrix(&sites, &map, &cov).unwrap();
        assert!((&s - &c).norm() / c.norm() < 0.05);
    }

    #[test]
    fn white_noise_limit() {
        let sites = random_sites(5, 4);
        let cov = CovParams::new(1e-12, 0.3, 1.0).unwrap();
        let z = simulate_grf(&sites, &AnalyticMap::Identity, &cov, 20000, 2).unwrap();
        let s = sample_covariance(&z).unwrap();
        for i in 0..5 {
            for j in 0..i {
                assert!(s[(i, j)].abs() < 0.05);
            }
        }
    }

    #[test]
    fn kriging_interpolates_without_nugget() {
        let sites = random_sites(6, 5);
        let cov = CovParams::new(2.0, 0.4, 0.0).unwrap();
        let m = model(sites.clone(), cov, 1.0);
        let data = [0.3, -1.2, 2.0, 0.7, 1.1, -0.4];
        let k = krige(&m, &data, &sites).unwrap();
        for ((m, v), d) in k.mean.iter().zip(&k.variance).zip(&data) {
            assert_abs_diff_eq!(*m, *d, epsilon = 1e-8);
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-8);
        }
        let draws = conditional_simulate(&m, &data, &sites[..2], 4, 1).unwrap();
        for d in 0..4 {
            assert_abs_diff_eq!(draws[(0, d)], data[0], epsilon = 1e-6);
            assert_abs_diff_eq!(draws[(1, d)], data[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn kriging_decorrelation_limit() {
        let sites: Vec<Point> = (0..5)
            .map(|k| [0.01 * k as f64, 0.02 * (k % 2) as f64])
            .collect();
        let cov = CovParams::new(1.5, 0.01, 0.5).unwrap();
        let m = model(sites, cov, 3.0);
        let k = krige(&m, &[1.0, 2.0, 5.0, 4.0, 0.0], &[[0.95, 0.95]]).unwrap();
        assert_abs_diff_eq!(k.mean[0], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(k.variance[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn kriging_matches_conditional_gaussian() {
        let sites = random_sites(5, 6);
        let pred = random_sites(3, 7);
        let cov = CovParams::new(1.2, 0.35, 0.15).unwrap();
        let m = model(sites.clone(), cov, 0.4);
        let data = [0.1, 0.9, -0.3, 1.4, 0.2];
        let k = krige(&m, &data, &pred).unwrap();
        // joint covariance of (noise-free field at pred, noisy data)
        let all: Vec<Point> = pred.iter().chain(&sites).copied().collect();
        let mut joint = DMatrix::from_fn(8, 8, |i, j| cov.cross(dist(all[i], all[j])));
        for i in 0..8 {
            joint[(i, i)] = cov.sigma2 + if i >= 3 { cov.nugget } else { 0.0 };
        }
        let s11 = joint.view((0, 0), (3, 3)).clone_owned();
        let s12 = joint.view((0, 3), (3, 5)).clone_owned();
        let s22inv = joint
            .view((3, 3), (5, 5))
            .clone_owned()
            .try_inverse()
            .unwrap();
        let r = DVector::from_iterator(5, data.iter().map(|v| v - 0.4));
        let mu = DVector::from_element(3, 0.4) + &s12 * &s22inv * r;
        let sig = s11 - &s12 * &s22inv * s12.transpose();
        for i in 0..3 {
            assert_abs_diff_eq!(k.mean[i], mu[i], epsilon = 1e-8);
            // the reported variance includes the nugget of a new observation
            assert_abs_diff_eq!(k.variance[i], sig[(i, i)] + cov.nugget, epsilon = 1e-8);
        }
    }

    #[test]
    fn conditional_draws_average_to_kriging_mean() {
        let sites = random_sites(6, 8);
        let pred = random_sites(4, 9);
        let cov = CovParams::new(1.0, 0.3, 0.2).unwrap();
        let m = model(sites, cov, 0.0);
        let data = [0.5, -0.2, 0.9, 0.0, 1.3, -0.8];
        let k = krige(&m, &data, &pred).unwrap();
        let draws = conditional_simulate(&m, &data, &pred, 10000, 3).unwrap();
        for i in 0..4 {
            let row = draws.row(i);
            let mean = row.mean();
            let sd = row.variance().sqrt();
            assert!((mean - k.mean[i]).abs() < 3.0 * sd / 100.0 + 1e-12);
        }
        let one = conditional_simulate(&m, &data, &pred, 1, 4).unwrap();
        assert_eq!(one, conditional_simulate(&m, &data, &pred, 1, 4).unwrap());
    }

    #[test]
    fn kriging_rejects_outside_domain() {
        let sites = random_sites(5, 10);
        let m = model(sites, CovParams::new(1.0, 0.3, 0.1).unwrap(), 0.0);
        assert!(krige(&m, &[0.0; 5], &[[1.5, 0.5]]).is_err());
        assert!(krige(&m, &[0.0; 4], &[[0.5, 0.5]]).is_err());
    }
}
