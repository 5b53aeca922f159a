//! Degree-1 B-spline bases on equally spaced knots.
//!
//! Each axis of the rectangular domain carries `K` hat functions whose peaks sit
//! at the knots `min + m * tau`, `m = 0..K`. A coordinate belongs to the
//! half-open cell `[m * tau, (m + 1) * tau)`; the last cell is closed so the right
//! boundary is part of the domain. Derivatives follow the same membership rule,
//! which gives the right-hand derivative at interior knots and the left-hand
//! derivative at the right boundary.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane, `[x1, x2]`.
pub type Point = [f64; 2];

/// Relative slack allowed when a coordinate lands a rounding error outside the domain.
const BOUNDARY_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X1,
    X2,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X1 => 0,
            Axis::X2 => 1,
        }
    }
}

/// Rectangular domain with `k1 x k2` degree-1 basis functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    min: Point,
    max: Point,
    k: [usize; 2],
}

impl KnotGrid {
    pub fn new(min: Point, max: Point, k1: usize, k2: usize) -> Result<Self> {
        if k1 < 2 || k2 < 2 {
            return Err(Error::Argument(format!(
                "basis counts must be at least 2, got {k1} x {k2}"
            )));
        }
        for axis in 0..2 {
            if !(min[axis].is_finite() && max[axis].is_finite() && min[axis] < max[axis]) {
                return Err(Error::Argument(format!(
                    "axis {} bounds must be finite and strictly ordered, got [{}, {}]",
                    axis + 1,
                    min[axis],
                    max[axis]
                )));
            }
        }
        Ok(Self {
            min,
            max,
            k: [k1, k2],
        })
    }

    /// `[0, 1]^2` with `k` basis functions per axis.
    pub fn unit_square(k: usize) -> Result<Self> {
        Self::new([0.0, 0.0], [1.0, 1.0], k, k)
    }

    /// Smallest rectangle containing all `sites`.
    pub fn bounding(sites: &[Point], k1: usize, k2: usize) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Argument("no sites to bound".into()));
        }
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in sites {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self::new(min, max, k1, k2)
    }

    pub fn min(&self) -> Point {
        self.min
    }

    pub fn max(&self) -> Point {
        self.max
    }

    pub fn k1(&self) -> usize {
        self.k[0]
    }

    pub fn k2(&self) -> usize {
        self.k[1]
    }

    pub fn k(&self, axis: Axis) -> usize {
        self.k[axis.index()]
    }

    /// Knot spacing along `axis`.
    pub fn tau(&self, axis: Axis) -> f64 {
        let a = axis.index();
        (self.max[a] - self.min[a]) / (self.k[a] - 1) as f64
    }

    /// Position of knot `m` along `axis`.
    pub fn knot(&self, axis: Axis, m: usize) -> f64 {
        let a = axis.index();
        if m + 1 == self.k[a] {
            self.max[a]
        } else {
            self.min[a] + m as f64 * self.tau(axis)
        }
    }

    /// Total number of tensor-product basis functions.
    pub fn n_basis(&self) -> usize {
        self.k[0] * self.k[1]
    }

    /// Number of knot cells per axis, `(k1 - 1, k2 - 1)`.
    pub fn n_cells(&self) -> (usize, usize) {
        (self.k[0] - 1, self.k[1] - 1)
    }

    /// Column of `vec(Theta)` holding coefficient `(k1, k2)` (column-major).
    pub fn coef_index(&self, k1: usize, k2: usize) -> usize {
        k1 + self.k[0] * k2
    }

    pub fn diameter(&self) -> f64 {
        let d1 = self.max[0] - self.min[0];
        let d2 = self.max[1] - self.min[1];
        d1.hypot(d2)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.locate(Axis::X1, p[0]).is_ok() && self.locate(Axis::X2, p[1]).is_ok()
    }

    /// Cell index and local coordinate in `[0, 1]` of `x` along `axis`.
    pub fn locate(&self, axis: Axis, x: f64) -> Result<(usize, f64)> {
        let a = axis.index();
        let (lo, hi) = (self.min[a], self.max[a]);
        let slack = BOUNDARY_SLACK * (hi - lo);
        if !(x >= lo - slack && x <= hi + slack) {
            return Err(Error::Domain {
                axis: a + 1,
                value: x,
                min: lo,
                max: hi,
            });
        }
        let x = x.clamp(lo, hi);
        let tau = self.tau(axis);
        let cells = self.k[a] - 1;
        let cell = (((x - lo) / tau).floor() as usize).min(cells - 1);
        let s = ((x - lo) / tau - cell as f64).clamp(0.0, 1.0);
        Ok((cell, s))
    }
}

/// Values of all `K` basis functions of `axis` at `x`.
pub fn eval_basis(grid: &KnotGrid, axis: Axis, x: f64) -> Result<Vec<f64>> {
    let (cell, s) = grid.locate(axis, x)?;
    let mut out = vec![0.0; grid.k(axis)];
    out[cell] = 1.0 - s;
    out[cell + 1] = s;
    Ok(out)
}

/// Derivatives of all `K` basis functions of `axis` at `x`.
pub fn eval_basis_deriv(grid: &KnotGrid, axis: Axis, x: f64) -> Result<Vec<f64>> {
    let (cell, _) = grid.locate(axis, x)?;
    let inv_tau = 1.0 / grid.tau(axis);
    let mut out = vec![0.0; grid.k(axis)];
    out[cell] = -inv_tau;
    out[cell + 1] = inv_tau;
    Ok(out)
}

/// Row-sparse design matrix with at most four nonzeros per row.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Nonzero `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// `W v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.ncols);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, w)| w * v[c]).sum())
            .collect()
    }

    /// `W^T v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows.len());
        let mut out = vec![0.0; self.ncols];
        for (row, &vi) in self.rows.iter().zip(v) {
            for &(c, w) in row {
                out[c] += w * vi;
            }
        }
        out
    }

    /// `W^T W` as a dense matrix.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for row in &self.rows {
            for &(a, wa) in row {
                for &(b, wb) in row {
                    g[(a, b)] += wa * wb;
                }
            }
        }
        g
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                m[(i, c)] = w;
            }
        }
        m
    }
}

/// Tensor-product design matrix: row `i` is `b2(x_i2) ⊗ b1(x_i1)`.
pub fn design_matrix(grid: &KnotGrid, sites: &[Point]) -> Result<DesignMatrix> {
    let rows = sites
        .iter()
        .enumerate()
        .map(|(i, p)| design_row(grid, *p).map_err(|e| e.at_site(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignMatrix {
        ncols: grid.n_basis(),
        rows,
    })
}

fn design_row(grid: &KnotGrid, p: Point) -> Result<Vec<(usize, f64)>> {
    let (c1, s) = grid.locate(Axis::X1, p[0])?;
    let (c2, t) = grid.locate(Axis::X2, p[1])?;
    let mut row = Vec::with_capacity(4);
    for (d2, w2) in [(0, 1.0 - t), (1, t)] {
        for (d1, w1) in [(0, 1.0 - s), (1, s)] {
            let w = w1 * w2;
            if w != 0.0 {
                row.push((grid.coef_index(c1 + d1, c2 + d2), w));
            }
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid4() -> KnotGrid {
        KnotGrid::unit_square(4).unwrap()
    }

    #[test]
    fn left_endpoint_is_first_basis() {
        let b = eval_basis(&grid4(), Axis::X1, 0.0).unwrap();
        assert_eq!(b, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn first_knot_is_second_basis() {
        let g = grid4();
        let b = eval_basis(&g, Axis::X1, g.tau(Axis::X1)).unwrap();
        for (v, e) in b.iter().zip([0.0, 1.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn right_endpoint_closes_last_basis() {
        let b = eval_basis(&grid4(), Axis::X2, 1.0).unwrap();
        assert_abs_diff_eq!(b[3], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn derivative_in_first_and_second_cell() {
        let g = grid4();
        let d = eval_basis_deriv(&g, Axis::X1, 0.1).unwrap();
        for (v, e) in d.iter().zip([-3.0, 3.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
        let d = eval_basis_deriv(&g, Axis::X1, 0.5).unwrap();
        for (v, e) in d.iter().zip([0.0, -3.0, 3.0, 0.0]) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn derivative_uses_right_cell_at_knots_and_left_at_boundary() {
        let g = grid4();
        let d = eval_basis_deriv(&g, Axis::X1, 1.0 / 3.0).unwrap();
        assert!(d[1] < 0.0 && d[2] > 0.0);
        let d = eval_basis_deriv(&g, Axis::X1, 1.0).unwrap();
        assert!(d[2] < 0.0 && d[3] > 0.0);
    }

    #[test]
    fn out_of_domain_reports_axis_and_bounds() {
        let err = eval_basis(&grid4(), Axis::X2, 1.5).unwrap_err();
        match err {
            Error::Domain { axis, min, max, .. } => {
                assert_eq!(axis, 2);
                assert_eq!((min, max), (0.0, 1.0));
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = design_matrix(&grid4(), &[[0.5, 0.5], [-0.1, 0.2]]).unwrap_err();
        assert!(matches!(err, Error::SiteDomain { index: 1, .. }));
    }

    #[test]
    fn rectangular_grid_spacing() {
        let g = KnotGrid::new([-2.0, 10.0], [2.0, 13.0], 5, 4).unwrap();
        assert_abs_diff_eq!(g.tau(Axis::X1), 1.0);
        assert_abs_diff_eq!(g.tau(Axis::X2), 1.0);
        assert_abs_diff_eq!(g.knot(Axis::X1, 2), 0.0);
        assert!(KnotGrid::new([0.0, 0.0], [1.0, 1.0], 1, 3).is_err());
        assert!(KnotGrid::new([1.0, 0.0], [1.0, 1.0], 3, 3).is_err());
    }

    #[test]
    fn knot_intersection_row_is_one_hot() {
        let g = grid4();
        let w = design_matrix(&g, &[[2.0 / 3.0, 1.0 / 3.0]]).unwrap();
        let row = w.row(0);
        assert_eq!(row.len(), 1);
        assert_eq!(row[0].0, g.coef_index(2, 1));
        assert_abs_diff_eq!(row[0].1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cell_center_row_is_quarters() {
        let g = grid4();
        let w = design_matrix(&g, &[[0.5, 1.0 / 6.0]]).unwrap();
        let row = w.row(0);
        assert_eq!(row.len(), 4);
        for &(_, v) in row {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
        let cols: Vec<usize> = row.iter().map(|e| e.0).collect();
        assert_eq!(
            cols,
            vec![
                g.coef_index(1, 0),
                g.coef_index(2, 0),
                g.coef_index(1, 1),
                g.coef_index(2, 1)
            ]
        );
    }

    #[test]
    fn design_row_matches_kronecker_of_axis_bases() {
        let g = KnotGrid::new([0.0, 0.0], [2.0, 1.0], 5, 3).unwrap();
        let p = [1.37, 0.21];
        let b1 = eval_basis(&g, Axis::X1, p[0]).unwrap();
        let b2 = eval_basis(&g, Axis::X2, p[1]).unwrap();
        let dense = design_matrix(&g, &[p]).unwrap().to_dense();
        for k2 in 0..3 {
            for k1 in 0..5 {
                assert_abs_diff_eq!(
                    dense[(0, g.coef_index(k1, k2))],
                    b2[k2] * b1[k1],
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn sampled_partition_of_unity_and_linear_reproduction() {
        let g = KnotGrid::new([-1.0, 0.0], [3.0, 1.0], 7, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = rng.random_range(-1.0..=3.0);
            let b = eval_basis(&g, Axis::X1, x).unwrap();
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(b.iter().filter(|v| **v != 0.0).count() <= 2);
            let lin: f64 = (0..7).map(|m| g.knot(Axis::X1, m) * b[m]).sum();
            assert!((lin - x).abs() < 1e-12);
            let d = eval_basis_deriv(&g, Axis::X1, x).unwrap();
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
            assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 2);
        }
    }

    #[test]
    fn derivative_matches_central_difference_off_knots() {
        let g = KnotGrid::unit_square(6).unwrap();
        let tau = g.tau(Axis::X2);
        let theta: Vec<f64> = (0..6).map(|m| ((m * m) as f64).sin()).collect();
        let f = |x: f64| -> f64 {
            let b = eval_basis(&g, Axis::X2, x).unwrap();
            b.iter().zip(&theta).map(|(b, t)| b * t).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = rng.random_range(0.0..1.0);
            let frac = (x / tau).fract();
            if !(0.01..0.99).contains(&frac) {
                continue;
            }
            let h = 1e-7 * tau;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            let d = eval_basis_deriv(&g, Axis::X2, x).unwrap();
            let an: f64 = d.iter().zip(&theta).map(|(d, t)| d * t).sum();
            assert!((fd - an).abs() < 1e-6, "x={x} fd={fd} an={an}");
        }
    }

    #[test]
    fn sparse_products_match_dense() {
        let g = grid4();
        let sites = [[0.1, 0.2], [0.9, 0.95], [0.5, 0.5], [1.0, 0.0]];
        let w = design_matrix(&g, &sites).unwrap();
        let dense = w.to_dense();
        assert!(w
            .gram()
            .relative_eq(&(dense.transpose() * &dense), 1e-14, 1e-14));
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 1.0).collect();
        let wv = w.mul_vec(&v);
        let dv = &dense * nalgebra::DVector::from_vec(v);
        for (a, b) in wv.iter().zip(dv.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
        for i in 0..sites.len() {
            let s: f64 = w.row(i).iter().map(|e| e.1).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-14);
            assert!(w.row(i).len() <= 4);
        }
    }
}
