//! Dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, Dyn, Matrix2, Vector2};

use crate::basis::Point;
use crate::error::{Error, Result};

pub(crate) fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// Natural log of the determinant from a Cholesky factor.
pub(crate) fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Solve a symmetric positive semidefinite system, adding a diagonal jitter
/// until the factorization succeeds.
pub(crate) fn solve_psd(mut m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let scale = (0..n)
        .map(|i| m[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..12 {
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(chol.solve(rhs));
        }
        let next = if jitter == 0.0 {
            1e-14 * scale
        } else {
            jitter * 10.0
        };
        for i in 0..n {
            m[(i, i)] += next - jitter;
        }
        jitter = next;
    }
    Err(Error::Numerical(
        "system is not positive semidefinite".into(),
    ))
}

pub(crate) fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (s1, s2) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [s1 / n, s2 / n]
}

/// Root-mean-square distance of `points` from their centroid.
pub(crate) fn rms_spread(points: &[Point]) -> f64 {
    let c = centroid(points);
    let ss: f64 = points
        .iter()
        .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
        .sum();
    (ss / points.len() as f64).sqrt()
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Pairwise Euclidean distances.
#[cfg(test)]
pub(crate) fn distance_matrix(points: &[Point]) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| dist(points[i], points[j]))
}

/// Similarity transform `x -> scale * R x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix2<f64>,
    pub scale: f64,
    pub translation: Vector2<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix2::identity(),
            scale: 1.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let v = self.rotation * Vector2::new(p[0], p[1]) * self.scale + self.translation;
        [v[0], v[1]]
    }
}

/// How the scale of a Procrustes fit is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProcrustesScale {
    /// Rigid motion only.
    Fixed,
    /// Least-squares optimal scale.
    LeastSquares,
    /// Scale that equalizes the RMS spread of source and target.
    MatchSpread,
}

/// Transform mapping `source` onto `target` in the least-squares sense.
///
/// The rotation is proper unless `allow_reflection` is set.
pub(crate) fn procrustes(
    source: &[Point],
    target: &[Point],
    scale: ProcrustesScale,
    allow_reflection: bool,
) -> Result<Similarity> {
    assert_eq!(source.len(), target.len());
    let cs = centroid(source);
    let ct = centroid(target);
    let mut cross = Matrix2::zeros();
    let mut ss = 0.0;
    for (s, t) in source.iter().zip(target) {
        let a = Vector2::new(s[0] - cs[0], s[1] - cs[1]);
        let b = Vector2::new(t[0] - ct[0], t[1] - ct[1]);
        cross += b * a.transpose();
        ss += a.norm_squared();
    }
    if ss <= f64::EPSILON * f64::EPSILON {
        return Err(Error::Degenerate("all source points coincide".into()));
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut d = Matrix2::identity();
    if !allow_reflection && (u * v_t).determinant() < 0.0 {
        d[(1, 1)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..2).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let s = match scale {
        ProcrustesScale::Fixed => 1.0,
        ProcrustesScale::LeastSquares => trace / ss,
        ProcrustesScale::MatchSpread => rms_spread(target) / rms_spread(source),
    };
    let rc = rotation * Vector2::new(cs[0], cs[1]) * s;
    Ok(Similarity {
        rotation,
        scale: s,
        translation: Vector2::new(ct[0], ct[1]) - rc,
    })
}

/// RMS residual after the best similarity (with reflection) alignment of `a` onto `b`.
pub fn procrustes_rms(a: &[Point], b: &[Point], with_scale: bool) -> f64 {
    let mode = if with_scale {
        ProcrustesScale::LeastSquares
    } else {
        ProcrustesScale::Fixed
    };
    match procrustes(a, b, mode, true) {
        Ok(t) => {
            let ss: f64 = a
                .iter()
                .zip(b)
                .map(|(p, q)| {
                    let m = t.apply(*p);
                    (m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2)
                })
                .sum();
            (ss / a.len() as f64).sqrt()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Least-squares line `y = intercept + slope x` and Pearson correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub correlation: f64,
}

pub fn regression(x: &[f64], y: &[f64]) -> Regression {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let slope = sxy / sxx;
    Regression {
        slope,
        intercept: my - slope * mx,
        correlation: sxy / (sxx * syy).sqrt(),
    }
}

/// Entries above the diagonal, row by row.
pub fn upper_entries(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| m[(i, j)]))
        .collect()
}
