//! Tensor-product deformation maps and their non-folding constraints.
//!
//! A map `f = (f1, f2)` is stored as two `K1 x K2` coefficient matrices with
//! `f_l(x) = b1(x1)^T Theta_l b2(x2)`. Inside one knot cell only four
//! coefficients of each matrix are active and the Jacobian determinant is
//!
//! ```text
//! |J|(x) = vec(Theta1)^T A(x) vec(Theta2)
//! ```
//!
//! with `A` skew-symmetric and affine in `x`. Its minimum over a closed cell is
//! therefore attained at one of the four cell corners, so requiring the four
//! corner values of every cell to stay above a margin keeps `|J| > 0` on the
//! whole domain.

use nalgebra::DMatrix;

use crate::basis::{Axis, KnotGrid, Point};
use crate::error::{Error, Result};
use crate::linalg::Similarity;

/// Anything that maps geographic coordinates to deformed coordinates.
pub trait SpatialMap {
    fn apply(&self, p: Point) -> Result<Point>;

    fn apply_all(&self, sites: &[Point]) -> Result<Vec<Point>> {
        sites
            .iter()
            .enumerate()
            .map(|(i, p)| self.apply(*p).map_err(|e| e.at_site(i)))
            .collect()
    }
}

/// The pair of coefficient matrices `(Theta1, Theta2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefPair {
    pub theta1: DMatrix<f64>,
    pub theta2: DMatrix<f64>,
}

impl CoefPair {
    pub fn new(theta1: DMatrix<f64>, theta2: DMatrix<f64>) -> Result<Self> {
        if theta1.shape() != theta2.shape() {
            return Err(Error::Argument(format!(
                "coefficient shapes differ: {:?} vs {:?}",
                theta1.shape(),
                theta2.shape()
            )));
        }
        Ok(Self { theta1, theta2 })
    }

    pub fn zeros(grid: &KnotGrid) -> Self {
        let z = DMatrix::zeros(grid.k1(), grid.k2());
        Self {
            theta1: z.clone(),
            theta2: z,
        }
    }

    /// Coefficients sampled from `f` at the knot intersections.
    ///
    /// Bilinear maps (in particular affine ones) are reproduced exactly.
    pub fn from_fn(grid: &KnotGrid, f: impl Fn(Point) -> Point) -> Self {
        let mut c = Self::zeros(grid);
        for k2 in 0..grid.k2() {
            for k1 in 0..grid.k1() {
                let y = f([grid.knot(Axis::X1, k1), grid.knot(Axis::X2, k2)]);
                c.theta1[(k1, k2)] = y[0];
                c.theta2[(k1, k2)] = y[1];
            }
        }
        c
    }

    /// Coefficients of the identity map.
    pub fn identity(grid: &KnotGrid) -> Self {
        Self::from_fn(grid, |p| p)
    }

    /// Build from `vec(Theta1)` and `vec(Theta2)` (column-major).
    pub fn from_vecs(grid: &KnotGrid, v1: &[f64], v2: &[f64]) -> Self {
        Self {
            theta1: DMatrix::from_column_slice(grid.k1(), grid.k2(), v1),
            theta2: DMatrix::from_column_slice(grid.k1(), grid.k2(), v2),
        }
    }

    /// `vec(Theta1)`, column-major.
    pub fn vec1(&self) -> &[f64] {
        self.theta1.as_slice()
    }

    pub fn vec2(&self) -> &[f64] {
        self.theta2.as_slice()
    }

    pub fn matches(&self, grid: &KnotGrid) -> bool {
        self.theta1.shape() == (grid.k1(), grid.k2())
    }

    /// Coefficients of `t ∘ f`. Valid because the basis is a partition of unity.
    pub fn transformed(&self, t: &Similarity) -> Self {
        let mut out = self.clone();
        for idx in 0..self.theta1.len() {
            let y = t.apply([self.theta1[idx], self.theta2[idx]]);
            out.theta1[idx] = y[0];
            out.theta2[idx] = y[1];
        }
        out
    }

    pub fn swapped(&self) -> Self {
        Self {
            theta1: self.theta2.clone(),
            theta2: self.theta1.clone(),
        }
    }
}

/// A deformation map over a knot grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationMap {
    grid: KnotGrid,
    coef: CoefPair,
}

impl DeformationMap {
    pub fn new(grid: KnotGrid, coef: CoefPair) -> Result<Self> {
        if !coef.matches(&grid) {
            return Err(Error::Argument(format!(
                "coefficients are {:?}, grid expects {} x {}",
                coef.theta1.shape(),
                grid.k1(),
                grid.k2()
            )));
        }
        Ok(Self { grid, coef })
    }

    pub fn identity(grid: KnotGrid) -> Self {
        let coef = CoefPair::identity(&grid);
        Self { grid, coef }
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn coef(&self) -> &CoefPair {
        &self.coef
    }

    pub fn into_parts(self) -> (KnotGrid, CoefPair) {
        (self.grid, self.coef)
    }

    /// Active corner coefficients of the cell containing `x`, plus local coordinates.
    fn cell(&self, x: Point) -> Result<(usize, usize, f64, f64)> {
        let (i, s) = self.grid.locate(Axis::X1, x[0])?;
        let (j, t) = self.grid.locate(Axis::X2, x[1])?;
        Ok((i, j, s, t))
    }

    fn corner(&self, i: usize, j: usize) -> [f64; 2] {
        [self.coef.theta1[(i, j)], self.coef.theta2[(i, j)]]
    }

    /// `f(x)`.
    pub fn eval(&self, x: Point) -> Result<Point> {
        let (i, j, s, t) = self.cell(x)?;
        let (p00, p10) = (self.corner(i, j), self.corner(i + 1, j));
        let (p01, p11) = (self.corner(i, j + 1), self.corner(i + 1, j + 1));
        let w = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
        Ok([0, 1].map(|l| w[0] * p00[l] + w[1] * p10[l] + w[2] * p01[l] + w[3] * p11[l]))
    }

    /// Jacobian matrix `[[df1/dx1, df1/dx2], [df2/dx1, df2/dx2]]`.
    pub fn jacobian(&self, x: Point) -> Result<[[f64; 2]; 2]> {
        let (i, j, s, t) = self.cell(x)?;
        let (p00, p10) = (self.corner(i, j), self.corner(i + 1, j));
        let (p01, p11) = (self.corner(i, j + 1), self.corner(i + 1, j + 1));
        let tau1 = self.grid.tau(Axis::X1);
        let tau2 = self.grid.tau(Axis::X2);
        let d1 = [0, 1].map(|l| ((1.0 - t) * (p10[l] - p00[l]) + t * (p11[l] - p01[l])) / tau1);
        let d2 = [0, 1].map(|l| ((1.0 - s) * (p01[l] - p00[l]) + s * (p11[l] - p10[l])) / tau2);
        Ok([[d1[0], d2[0]], [d1[1], d2[1]]])
    }

    /// `|J|(x)`, using right-hand derivatives at interior knots.
    pub fn jacobian_det(&self, x: Point) -> Result<f64> {
        let j = self.jacobian(x)?;
        Ok(j[0][0] * j[1][1] - j[0][1] * j[1][0])
    }
}

impl SpatialMap for DeformationMap {
    fn apply(&self, p: Point) -> Result<Point> {
        self.eval(p)
    }
}

/// Position of the four active coefficients of a cell inside `vec(Theta)`,
/// ordered `(i, j), (i+1, j), (i, j+1), (i+1, j+1)`.
fn cell_indices(grid: &KnotGrid, i: usize, j: usize) -> [usize; 4] {
    [
        grid.coef_index(i, j),
        grid.coef_index(i + 1, j),
        grid.coef_index(i, j + 1),
        grid.coef_index(i + 1, j + 1),
    ]
}

/// Sparse skew-symmetric matrix `A(x)` with `|J|(x) = vec(Theta1)^T A vec(Theta2)`.
///
/// Only the 4 x 4 block on the active cell's coefficients is nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianForm {
    dim: usize,
    indices: [usize; 4],
    block: [[f64; 4]; 4],
}

impl JacobianForm {
    /// Block entries scaled by `1 / (tau1 tau2)`, from local cell coordinates `s, t`.
    fn at_local(grid: &KnotGrid, i: usize, j: usize, s: f64, t: f64) -> Self {
        let scale = 1.0 / (grid.tau(Axis::X1) * grid.tau(Axis::X2));
        let a = scale * (1.0 - t);
        let b = scale * (s - 1.0);
        let c = scale * (t - s);
        let d = scale * (1.0 - s - t);
        let e = scale * s;
        let f = scale * -t;
        Self {
            dim: grid.n_basis(),
            indices: cell_indices(grid, i, j),
            block: [
                [0.0, a, b, c],
                [-a, 0.0, d, e],
                [-b, -d, 0.0, f],
                [-c, -e, -f, 0.0],
            ],
        }
    }

    pub fn indices(&self) -> [usize; 4] {
        self.indices
    }

    pub fn block(&self) -> &[[f64; 4]; 4] {
        &self.block
    }

    /// `u^T A v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (p, &ip) in self.indices.iter().enumerate() {
            for (q, &iq) in self.indices.iter().enumerate() {
                acc += u[ip] * self.block[p][q] * v[iq];
            }
        }
        acc
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (p, &ip) in self.indices.iter().enumerate() {
            for (q, &iq) in self.indices.iter().enumerate() {
                m[(ip, iq)] = self.block[p][q];
            }
        }
        m
    }
}

/// Assemble `A(x)` for the cell containing `x`.
pub fn assemble_a(grid: &KnotGrid, x: Point) -> Result<JacobianForm> {
    let (i, s) = grid.locate(Axis::X1, x[0])?;
    let (j, t) = grid.locate(Axis::X2, x[1])?;
    Ok(JacobianForm::at_local(grid, i, j, s, t))
}

/// `|J|` at one corner of one cell, as a bilinear functional of the coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerConstraint {
    /// Cell index `(i, j)` along `(x1, x2)`.
    pub cell: (usize, usize),
    /// Corner offsets in `{0, 1}^2`; `(0, 0)` is the lower-left corner.
    pub corner: (usize, usize),
    form: JacobianForm,
}

impl CornerConstraint {
    pub fn evaluate(&self, coef: &CoefPair) -> f64 {
        self.form.bilinear(coef.vec1(), coef.vec2())
    }

    pub fn indices(&self) -> [usize; 4] {
        self.form.indices
    }

    /// Nonzero partial derivatives with respect to the active entries of
    /// `vec(Theta1)` and `vec(Theta2)`, aligned with [`Self::indices`].
    pub fn gradient(&self, coef: &CoefPair) -> ([f64; 4], [f64; 4]) {
        let (v1, v2) = (coef.vec1(), coef.vec2());
        let idx = self.form.indices;
        let blk = &self.form.block;
        let mut g1 = [0.0; 4];
        let mut g2 = [0.0; 4];
        for p in 0..4 {
            for q in 0..4 {
                g1[p] += blk[p][q] * v2[idx[q]];
                g2[q] += v1[idx[p]] * blk[p][q];
            }
        }
        (g1, g2)
    }

    pub fn form(&self) -> &JacobianForm {
        &self.form
    }
}

/// The four corner functionals of every cell, in row-major cell order.
pub fn corner_constraints(grid: &KnotGrid) -> Vec<CornerConstraint> {
    let (c1, c2) = grid.n_cells();
    let mut out = Vec::with_capacity(4 * c1 * c2);
    for i in 0..c1 {
        for j in 0..c2 {
            for (u, v) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                out.push(CornerConstraint {
                    cell: (i, j),
                    corner: (u, v),
                    form: JacobianForm::at_local(grid, i, j, u as f64, v as f64),
                });
            }
        }
    }
    out
}

/// Exact global minimum of `|J|` over the domain.
pub fn min_jacobian(map: &DeformationMap) -> f64 {
    corner_constraints(&map.grid)
        .iter()
        .map(|c| c.evaluate(&map.coef))
        .fold(f64::INFINITY, f64::min)
}

/// Constraint margin: `1e-3` times the median corner value of the identity map.
pub fn default_epsilon(grid: &KnotGrid) -> f64 {
    let id = CoefPair::identity(grid);
    let mut vals: Vec<f64> = corner_constraints(grid)
        .iter()
        .map(|c| c.evaluate(&id))
        .collect();
    vals.sort_by(f64::total_cmp);
    1e-3 * vals[vals.len() / 2]
}

/// Smallest corner value; fails if any corner falls below `epsilon - 1e-9`.
pub fn validate(grid: &KnotGrid, coef: &CoefPair, epsilon: f64) -> Result<f64> {
    let mut min = f64::INFINITY;
    let mut violated = Vec::new();
    for (m, c) in corner_constraints(grid).iter().enumerate() {
        let v = c.evaluate(coef);
        min = min.min(v);
        if v < epsilon - 1e-9 {
            violated.push(format!(
                "#{m} cell {:?} corner {:?} = {v:.3e}",
                c.cell, c.corner
            ));
        }
    }
    if violated.is_empty() {
        Ok(min)
    } else {
        let shown = violated.len().min(5);
        Err(Error::Infeasible(format!(
            "{} corner constraints below {epsilon:.3e}: {}",
            violated.len(),
            violated[..shown].join(", ")
        )))
    }
}
