//! Multidimensional scaling used to initialize the deformation.
//!
//! Dispersions between sites are turned into an artificial planar
//! configuration whose interpoint distances are monotone in the dispersions.
//! [`sg_initialize`] alternates smoothing of the configuration as a function of
//! the geographic sites, a variogram fit on the smoothed distances, and classical
//! scaling of the inverted variogram.

use nalgebra::DMatrix;

use crate::basis::Point;
use crate::covariance::{fit_variogram, variogram_inverse, DispersionMatrix, VariogramModel};
use crate::error::{Error, Result};
use crate::linalg::{centroid, dist, procrustes, ProcrustesScale};
use crate::smoothers::CoordinateSmoother;

/// Artificial coordinates, centered at the origin unless explicitly aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Configuration {
    coords: Vec<Point>,
}

impl Configuration {
    /// Center `coords` and wrap them.
    pub fn centered(mut coords: Vec<Point>) -> Result<Self> {
        if coords
            .iter()
            .any(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::Numerical(
                "configuration has non-finite coordinates".into(),
            ));
        }
        let c = centroid(&coords);
        for p in &mut coords {
            p[0] -= c[0];
            p[1] -= c[1];
        }
        Ok(Self { coords })
    }

    pub(crate) fn from_aligned(coords: Vec<Point>) -> Self {
        Self { coords }
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<Point> {
        self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Interpoint distances for pairs `i < j` in row-major order.
    pub fn pair_distances(&self) -> Vec<f64> {
        pair_distances(&self.coords)
    }
}

pub(crate) fn pair_distances(coords: &[Point]) -> Vec<f64> {
    let n = coords.len();
    let mut out = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(dist(coords[i], coords[j]));
        }
    }
    out
}

/// Classical scaling result: the planar configuration and the two leading
/// eigenvalues of the double-centered Gram matrix.
#[derive(Clone, Debug)]
pub struct Mds {
    pub configuration: Configuration,
    pub eigenvalues: [f64; 2],
}

/// Classical (Torgerson) scaling of a distance matrix into the plane.
pub fn classical_mds(distances: &DMatrix<f64>) -> Result<Mds> {
    let n = distances.nrows();
    if !distances.is_square() || n < 2 {
        return Err(Error::Argument(
            "distance matrix must be square with n >= 2".into(),
        ));
    }
    let scale = distances.amax();
    for i in 0..n {
        if distances[(i, i)].abs() > 1e-12 * scale.max(1.0) {
            return Err(Error::Argument(format!("nonzero diagonal at {i}")));
        }
        for j in 0..i {
            let (a, b) = (distances[(i, j)], distances[(j, i)]);
            if a < 0.0 || (a - b).abs() > 1e-10 * scale.max(1.0) {
                return Err(Error::Argument(format!(
                    "distances must be symmetric and nonnegative, entry ({i}, {j})"
                )));
            }
        }
    }
    // B = -1/2 J D^2 J
    let mut b = distances.map(|d| -0.5 * d * d);
    let row_means: Vec<f64> = (0..n).map(|i| b.row(i).mean()).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] += grand - row_means[i] - row_means[j];
        }
    }
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let tol = 1e-12 * scale * scale * n as f64;
    if !(l1 > tol) {
        return Err(Error::Degenerate(format!(
            "leading eigenvalues are not positive ({l1:.3e}, {l2:.3e})"
        )));
    }
    let s1 = l1.sqrt();
    let s2 = l2.max(0.0).sqrt();
    let v1 = eig.eigenvectors.column(order[0]);
    let v2 = eig.eigenvectors.column(order[1]);
    let coords = (0..n).map(|i| [s1 * v1[i], s2 * v2[i]]).collect();
    Ok(Mds {
        configuration: Configuration::centered(coords)?,
        eigenvalues: [l1, l2],
    })
}

/// Least-squares monotone fit of `h` as a nondecreasing function of `d2`.
///
/// Pairs with equal `d2` share one fitted value. Output is in input order.
pub fn isotonic_fit(d2: &[f64], h: &[f64]) -> Vec<f64> {
    assert_eq!(d2.len(), h.len(), "isotonic_fit: length mismatch");
    let n = d2.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d2[i].total_cmp(&d2[j]));

    // blocks of (sum, weight, members end) seeded by ties
    struct Block {
        sum: f64,
        weight: f64,
        end: usize,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut k = 0;
    while k < n {
        let mut e = k;
        let mut sum = 0.0;
        while e < n && d2[order[e]] == d2[order[k]] {
            sum += h[order[e]];
            e += 1;
        }
        let mut b = Block {
            sum,
            weight: (e - k) as f64,
            end: e,
        };
        while let Some(prev) = blocks.last() {
            if prev.sum / prev.weight > b.sum / b.weight {
                let prev = blocks.pop().expect("nonempty");
                b.sum += prev.sum;
                b.weight += prev.weight;
            } else {
                break;
            }
        }
        blocks.push(b);
        k = e;
    }
    let mut out = vec![0.0; n];
    let mut start = 0;
    for b in blocks {
        let v = b.sum / b.weight;
        for &idx in &order[start..b.end] {
            out[idx] = v;
        }
        start = b.end;
    }
    out
}

/// `sqrt(sum (delta - h*)^2 / sum h*^2)`.
pub fn kruskal_stress(delta: &[f64], hstar: &[f64]) -> Result<f64> {
    if delta.len() != hstar.len() {
        return Err(Error::Argument("stress inputs differ in length".into()));
    }
    let den: f64 = hstar.iter().map(|h| h * h).sum();
    if !(den > 0.0) {
        return Err(Error::Argument(
            "all configuration distances are zero".into(),
        ));
    }
    let num: f64 = delta.iter().zip(hstar).map(|(d, h)| (d - h).powi(2)).sum();
    Ok((num / den).sqrt())
}

/// Stress of `coords` against the monotone regression on `d2`.
pub fn configuration_stress(d2: &[f64], coords: &[Point]) -> Result<f64> {
    let hstar = pair_distances(coords);
    let delta = isotonic_fit(d2, &hstar);
    kruskal_stress(&delta, &hstar)
}

/// Loop controls for [`sg_initialize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SgOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
        }
    }
}

/// Output of [`sg_initialize`].
#[derive(Clone, Debug)]
pub struct SgResult {
    /// Best configuration found, aligned to the sites (same centroid and spread).
    pub configuration: Configuration,
    /// The configuration smoothed as a function of the sites.
    pub smoothed: Vec<Point>,
    /// Variogram fitted on the smoothed interpoint distances.
    pub variogram: VariogramModel,
    /// Stress of every computed configuration, starting with the initial one.
    pub stress: Vec<f64>,
    /// Stress of each configuration that improved on the best so far; nonincreasing.
    pub accepted_stress: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn matrix_from_pairs(n: usize, vals: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            m[(i, j)] = vals[k];
            m[(j, i)] = vals[k];
            k += 1;
        }
    }
    m
}

fn align_to(coords: &[Point], reference: &[Point]) -> Result<Vec<Point>> {
    let t = procrustes(coords, reference, ProcrustesScale::MatchSpread, true)?;
    Ok(coords.iter().map(|p| t.apply(*p)).collect())
}

/// Iterative nonmetric initialization of the deformed coordinates.
///
/// 1. classical scaling of the dispersions after an isotonic rescaling onto the
///    geographic distances;
/// 2. smoothing of the configuration with `smoother`;
/// 3. variogram fit on the smoothed interpoint distances;
/// 4. classical scaling of the inverted variogram;
/// 5. repeat from 2 until the relative stress change drops below `tol`.
///
/// Every configuration is aligned to the sites (reflection allowed, spread
/// matched). The loop stops early, keeping the best configuration, after two
/// consecutive stress increases.
pub fn sg_initialize(
    dispersions: &DispersionMatrix,
    sites: &[Point],
    smoother: &dyn CoordinateSmoother,
    options: SgOptions,
) -> Result<SgResult> {
    let n = sites.len();
    if n < 4 {
        return Err(Error::Argument(format!("need at least 4 sites, got {n}")));
    }
    if dispersions.n() != n {
        return Err(Error::Argument(format!(
            "{} x {} dispersions for {n} sites",
            dispersions.n(),
            dispersions.n()
        )));
    }
    let d2: Vec<f64> = dispersions.pairs().map(|(_, _, v)| v).collect();

    let geo = pair_distances(sites);
    let delta = isotonic_fit(&d2, &geo);
    let mds = classical_mds(&matrix_from_pairs(n, &delta)).map_err(|e| e.at_iteration(0))?;
    let mut current = align_to(mds.configuration.coords(), sites)?;
    let mut current_stress = configuration_stress(&d2, &current)?;

    let smooth_and_fit = |coords: &[Point], k: usize| -> Result<(Vec<Point>, VariogramModel)> {
        let smoothed = smoother
            .smooth(sites, coords)
            .map_err(|e| e.at_iteration(k))?;
        let pairs: Vec<(f64, f64)> = pair_distances(&smoothed)
            .into_iter()
            .zip(d2.iter().copied())
            .collect();
        let fit = fit_variogram(&pairs).map_err(|e| e.at_iteration(k))?;
        Ok((smoothed, fit.model))
    };

    let (mut smoothed, mut variogram) = smooth_and_fit(&current, 1)?;
    let mut best = (current.clone(), smoothed.clone(), variogram, current_stress);
    let mut trace = vec![current_stress];
    let mut accepted = vec![current_stress];
    let mut increases = 0;
    let mut converged = false;
    let mut iterations = 0;

    for k in 1..=options.max_iter {
        iterations = k;
        let target: Vec<f64> = d2
            .iter()
            .map(|&v| variogram_inverse(&variogram, v))
            .collect();
        let mds = classical_mds(&matrix_from_pairs(n, &target)).map_err(|e| e.at_iteration(k))?;
        let next = align_to(mds.configuration.coords(), sites)?;
        let next_stress = configuration_stress(&d2, &next)?;
        trace.push(next_stress);

        let change = (current_stress - next_stress).abs() / current_stress.max(f64::MIN_POSITIVE);
        increases = if next_stress > current_stress {
            increases + 1
        } else {
            0
        };
        current = next;
        current_stress = next_stress;

        (smoothed, variogram) = smooth_and_fit(&current, k + 1)?;
        if current_stress <= best.3 {
            best = (current.clone(), smoothed.clone(), variogram, current_stress);
            accepted.push(current_stress);
        }
        if increases >= 2 {
            break;
        }
        if change < options.tol {
            converged = true;
            break;
        }
    }

    Ok(SgResult {
        configuration: Configuration::from_aligned(best.0),
        smoothed: best.1,
        variogram: best.2,
        stress: trace,
        accepted_stress: accepted,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{distance_matrix, procrustes_rms};
    use crate::smoothers::TpsSmoother;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pava_examples() {
        assert_eq!(
            isotonic_fit(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.9]),
            vec![0.1, 0.5, 0.9]
        );
        assert_eq!(isotonic_fit(&[1.0, 2.0], &[2.0, 1.0]), vec![1.5, 1.5]);
        let all_tied = isotonic_fit(&[4.0; 4], &[1.0, 2.0, 3.0, 6.0]);
        assert!(all_tied.iter().all(|v| (*v - 3.0).abs() < 1e-15));
        // unsorted input returns values in input order
        let out = isotonic_fit(&[3.0, 1.0, 2.0], &[0.0, 5.0, 4.0]);
        assert_eq!(out, vec![3.0, 3.0, 3.0]);
        let out = isotonic_fit(&[2.0, 1.0, 2.0], &[1.0, 2.0, 5.0]);
        assert_abs_diff_eq!(out[1], 2.0);
        assert_abs_diff_eq!(out[0], 3.0);
        assert_abs_diff_eq!(out[2], 3.0);
    }

    #[test]
    fn stress_examples() {
        assert_eq!(kruskal_stress(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(kruskal_stress(&[2.0], &[1.0]).unwrap(), 1.0);
        let a = kruskal_stress(&[1.0, 2.5, 2.0], &[1.2, 2.0, 2.2]).unwrap();
        let b = kruskal_stress(&[3.0, 7.5, 6.0], &[3.6, 6.0, 6.6]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        assert!(kruskal_stress(&[1.0], &[0.0]).is_err());
    }

    fn planar() -> Vec<Point> {
        vec![[0.0, 0.0], [1.0, 0.1], [0.4, 1.2], [1.3, 0.9], [0.7, 0.5]]
    }

    #[test]
    fn classical_mds_recovers_planar_points() {
        let pts = planar();
        let mds = classical_mds(&distance_matrix(&pts)).unwrap();
        assert!(procrustes_rms(mds.configuration.coords(), &pts, false) < 1e-8);
        let c = centroid(mds.configuration.coords());
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
    }

    #[test]
    fn classical_mds_degenerate_and_collinear() {
        assert!(matches!(
            classical_mds(&DMatrix::zeros(4, 4)),
            Err(Error::Degenerate(_))
        ));
        let line: Vec<Point> = (0..5).map(|k| [k as f64 * 0.3, k as f64 * 0.6]).collect();
        let mds = classical_mds(&distance_matrix(&line)).unwrap();
        assert!(mds.eigenvalues[1].abs() < 1e-10 * mds.eigenvalues[0]);
        assert!(mds.configuration.coords().iter().all(|p| p[1].abs() < 1e-6));
        let mut bad = distance_matrix(&planar());
        bad[(0, 1)] += 1.0;
        assert!(matches!(classical_mds(&bad), Err(Error::Argument(_))));
    }

    fn stationary_dispersions(sites: &[Point], g: &VariogramModel) -> DispersionMatrix {
        let n = sites.len();
        let m = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                g.eval(dist(sites[i], sites[j]))
            }
        });
        DispersionMatrix::from_matrix(m).unwrap()
    }

    fn unit_grid(m: usize) -> Vec<Point> {
        (0..m * m)
            .map(|k| {
                [
                    (k % m) as f64 / (m - 1) as f64,
                    (k / m) as f64 / (m - 1) as f64,
                ]
            })
            .collect()
    }

    #[test]
    fn sg_recovers_stationary_sites() {
        let sites = unit_grid(7);
        let g = VariogramModel {
            nugget: 0.2,
            sill: 2.0,
            range: 0.6,
        };
        let disp = stationary_dispersions(&sites, &g);
        let res = sg_initialize(
            &disp,
            &sites,
            &TpsSmoother { lambda: 0.0 },
            SgOptions::default(),
        )
        .unwrap();
        let rms = procrustes_rms(res.configuration.coords(), &sites, true);
        assert!(rms < 1e-2 * 2f64.sqrt(), "rms {rms}");
        assert!(res.accepted_stress.windows(2).all(|w| w[1] <= w[0]));
        let final_stress = *res.accepted_stress.last().unwrap();
        assert!(final_stress < 1e-3, "stress {final_stress}");
        // aligned to the sites: same centroid and spread
        let c = centroid(res.configuration.coords());
        let cs = centroid(&sites);
        assert_abs_diff_eq!(c[0], cs[0], epsilon = 1e-10);
        assert_abs_diff_eq!(c[1], cs[1], epsilon = 1e-10);
    }

    #[test]
    fn sg_zero_iterations_returns_initial_configuration() {
        let sites = unit_grid(5);
        let g = VariogramModel {
            nugget: 0.0,
            sill: 1.0,
            range: 0.5,
        };
        let disp = stationary_dispersions(&sites, &g);
        let opts = SgOptions {
            max_iter: 0,
            tol: 1e-6,
        };
        let res = sg_initialize(&disp, &sites, &TpsSmoother { lambda: 0.0 }, opts).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.stress.len(), 1);
        // step 1 alone: isotonic rescaling onto the exact geographic distances
        assert!(procrustes_rms(res.configuration.coords(), &sites, true) < 1e-8);
    }

    #[test]
    fn sg_rejects_small_or_mismatched_input() {
        let sites = unit_grid(2);
        let g = VariogramModel {
            nugget: 0.0,
            sill: 1.0,
            range: 0.5,
        };
        let disp = stationary_dispersions(&sites, &g);
        let s = TpsSmoother { lambda: 0.0 };
        assert!(sg_initialize(&disp, &sites[..3], &s, SgOptions::default()).is_err());
        let more = unit_grid(3);
        assert!(sg_initialize(&disp, &more, &s, SgOptions::default()).is_err());
    }
}
