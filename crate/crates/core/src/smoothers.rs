//! Coordinate smoothers: thin-plate splines and the constrained tensor-product
//! B-spline least-squares fit.

use nalgebra::{DMatrix, DVector};

use crate::basis::{design_matrix, DesignMatrix, KnotGrid, Point};
use crate::deformation::{corner_constraints, CoefPair, CornerConstraint};
use crate::error::{Error, Result};
use crate::linalg::{centroid, procrustes, solve_psd, ProcrustesScale};

/// Maps artificial coordinates, given at the sites, to smoothed coordinates.
pub trait CoordinateSmoother {
    fn smooth(&self, sites: &[Point], targets: &[Point]) -> Result<Vec<Point>>;
}

// ---------------------------------------------------------------------------
// thin-plate splines

fn tps_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Thin-plate spline `f_j(x) = alpha_j0 + alpha_j1 x1 + alpha_j2 x2 + sum_i theta_ij phi(|x - x_i|)`
/// with `phi(r) = r^2 log r`, one per output coordinate.
#[derive(Clone, Debug)]
pub struct TpsModel {
    pub alpha: [[f64; 3]; 2],
    pub theta: [Vec<f64>; 2],
    pub centers: Vec<Point>,
    pub lambda: f64,
}

impl TpsModel {
    pub fn eval(&self, x: Point) -> Point {
        let mut out = [0.0; 2];
        for (j, o) in out.iter_mut().enumerate() {
            let a = &self.alpha[j];
            *o = a[0] + a[1] * x[0] + a[2] * x[1];
            for (c, th) in self.centers.iter().zip(&self.theta[j]) {
                *o += th * tps_kernel((x[0] - c[0]).hypot(x[1] - c[1]));
            }
        }
        out
    }

    /// Analytic Jacobian determinant.
    pub fn jacobian_det(&self, x: Point) -> f64 {
        let mut g = [[0.0; 2]; 2];
        for (j, row) in g.iter_mut().enumerate() {
            row[0] = self.alpha[j][1];
            row[1] = self.alpha[j][2];
            for (c, th) in self.centers.iter().zip(&self.theta[j]) {
                let (dx, dy) = (x[0] - c[0], x[1] - c[1]);
                let r = dx.hypot(dy);
                if r > 0.0 {
                    let k = th * (2.0 * r.ln() + 1.0);
                    row[0] += k * dx;
                    row[1] += k * dy;
                }
            }
        }
        g[0][0] * g[1][1] - g[0][1] * g[1][0]
    }

    pub fn fitted(&self) -> Vec<Point> {
        self.centers.iter().map(|c| self.eval(*c)).collect()
    }
}

fn check_tps_sites(sites: &[Point], lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    if sites.len() < 3 {
        return Err(Error::Argument(
            "thin-plate spline needs at least 3 sites".into(),
        ));
    }
    let c = centroid(sites);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in sites {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let det = sxx * syy - sxy * sxy;
    if !(det > 1e-12 * (sxx + syy).powi(2)) {
        return Err(Error::Numerical(
            "thin-plate spline sites are collinear".into(),
        ));
    }
    Ok(())
}

/// The `(n + 3)` square system `[[K + n lambda I, P], [P^T, 0]]`.
fn tps_system(sites: &[Point], lambda: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = sites.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = tps_kernel((sites[i][0] - sites[j][0]).hypot(sites[i][1] - sites[j][1]));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let mut l = DMatrix::zeros(n + 3, n + 3);
    l.view_mut((0, 0), (n, n)).copy_from(&k);
    for i in 0..n {
        l[(i, i)] += n as f64 * lambda;
        let row = [1.0, sites[i][0], sites[i][1]];
        for (c, v) in row.iter().enumerate() {
            l[(i, n + c)] = *v;
            l[(n + c, i)] = *v;
        }
    }
    (l, k)
}

/// Fit a thin-plate spline to each target coordinate.
pub fn fit_tps(sites: &[Point], targets: &[Point], lambda: f64) -> Result<TpsModel> {
    check_tps_sites(sites, lambda)?;
    if targets.len() != sites.len() {
        return Err(Error::Argument("targets and sites differ in length".into()));
    }
    let n = sites.len();
    let (l, _) = tps_system(sites, lambda);
    let lu = l.lu();
    let mut alpha = [[0.0; 3]; 2];
    let mut theta = [Vec::new(), Vec::new()];
    for j in 0..2 {
        let mut rhs = DVector::zeros(n + 3);
        for i in 0..n {
            rhs[i] = targets[i][j];
        }
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular thin-plate spline system".into()))?;
        theta[j] = sol.rows(0, n).iter().copied().collect();
        alpha[j] = [sol[n], sol[n + 1], sol[n + 2]];
    }
    Ok(TpsModel {
        alpha,
        theta,
        centers: sites.to_vec(),
        lambda,
    })
}

/// Smoother (hat) matrix mapping targets at the sites to fitted values.
pub fn tps_hat_matrix(sites: &[Point], lambda: f64) -> Result<DMatrix<f64>> {
    check_tps_sites(sites, lambda)?;
    let n = sites.len();
    let (l, k) = tps_system(sites, lambda);
    let mut rhs = DMatrix::zeros(n + 3, n);
    for i in 0..n {
        rhs[(i, i)] = 1.0;
    }
    let sol = l
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular thin-plate spline system".into()))?;
    let mut kp = DMatrix::zeros(n, n + 3);
    kp.view_mut((0, 0), (n, n)).copy_from(&k);
    for i in 0..n {
        kp[(i, n)] = 1.0;
        kp[(i, n + 1)] = sites[i][0];
        kp[(i, n + 2)] = sites[i][1];
    }
    Ok(kp * sol)
}

/// Trace of the hat matrix.
pub fn tps_effective_dof(sites: &[Point], lambda: f64) -> Result<f64> {
    Ok(tps_hat_matrix(sites, lambda)?.trace())
}

/// Smoothing parameter giving `dof` effective degrees of freedom, by bisection
/// on `log(lambda)`.
pub fn tps_lambda_for_dof(sites: &[Point], dof: f64) -> Result<f64> {
    let n = sites.len() as f64;
    if !(dof > 3.0 && dof < n) {
        return Err(Error::Argument(format!(
            "target dof must lie in (3, {n}), got {dof}"
        )));
    }
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tps_effective_dof(sites, mid.exp())? > dof {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Thin-plate spline smoother with a fixed `lambda`.
#[derive(Clone, Copy, Debug)]
pub struct TpsSmoother {
    pub lambda: f64,
}

impl CoordinateSmoother for TpsSmoother {
    fn smooth(&self, sites: &[Point], targets: &[Point]) -> Result<Vec<Point>> {
        Ok(fit_tps(sites, targets, self.lambda)?.fitted())
    }
}

// ---------------------------------------------------------------------------
// constrained tensor-product B-spline fit

/// Ridge used when the grid has more basis functions than sites.
pub fn default_ridge(grid: &KnotGrid, n_sites: usize) -> f64 {
    if grid.n_basis() > n_sites {
        1e-8 * n_sites as f64
    } else {
        0.0
    }
}

/// Outcome of [`fit_bspline_constrained`].
#[derive(Clone, Debug)]
pub struct ConstrainedFit {
    pub coef: CoefPair,
    /// Objective at `coef`.
    pub objective: f64,
    /// Objective at the feasible starting point.
    pub start_objective: f64,
    /// Objective of every accepted iterate, starting point first; nonincreasing.
    pub trace: Vec<f64>,
    /// Smallest corner value at `coef`.
    pub min_corner: f64,
    pub newton_steps: usize,
    pub converged: bool,
}

struct LsProblem {
    w: DesignMatrix,
    /// `2 (W^T W + ridge I)`, shared by both coordinates.
    hess: DMatrix<f64>,
    wty: [Vec<f64>; 2],
    yty: f64,
    ridge: f64,
}

impl LsProblem {
    fn new(grid: &KnotGrid, sites: &[Point], targets: &[Point], ridge: f64) -> Result<Self> {
        let w = design_matrix(grid, sites)?;
        let mut hess = w.gram();
        for i in 0..hess.nrows() {
            hess[(i, i)] += ridge;
        }
        hess *= 2.0;
        let y1: Vec<f64> = targets.iter().map(|p| p[0]).collect();
        let y2: Vec<f64> = targets.iter().map(|p| p[1]).collect();
        let yty = y1.iter().chain(&y2).map(|v| v * v).sum();
        Ok(Self {
            wty: [w.tr_mul_vec(&y1), w.tr_mul_vec(&y2)],
            w,
            hess,
            yty,
            ridge,
        })
    }

    /// `|Y - (W v1, W v2)|_F^2 + ridge (|v1|^2 + |v2|^2)`, via the normal equations.
    fn objective(&self, z: &[f64]) -> f64 {
        let p = self.w.ncols();
        let mut f = self.yty;
        for l in 0..2 {
            let v = &z[l * p..(l + 1) * p];
            let wv = self.w.mul_vec(v);
            f += wv.iter().map(|x| x * x).sum::<f64>();
            f += self.ridge * v.iter().map(|x| x * x).sum::<f64>();
            f -= 2.0 * v.iter().zip(&self.wty[l]).map(|(a, b)| a * b).sum::<f64>();
        }
        f.max(0.0)
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let p = self.w.ncols();
        let mut g = vec![0.0; 2 * p];
        for l in 0..2 {
            let v = DVector::from_column_slice(&z[l * p..(l + 1) * p]);
            let hv = &self.hess * v;
            for i in 0..p {
                g[l * p + i] = hv[i] - 2.0 * self.wty[l][i];
            }
        }
        g
    }
}

/// Unconstrained least-squares coefficients (may fold).
pub fn fit_bspline_unconstrained(
    grid: &KnotGrid,
    sites: &[Point],
    targets: &[Point],
    ridge: f64,
) -> Result<CoefPair> {
    check_fit_inputs(sites, targets, ridge)?;
    let prob = LsProblem::new(grid, sites, targets, ridge)?;
    let p = grid.n_basis();
    let rhs = DMatrix::from_fn(p, 2, |i, l| 2.0 * prob.wty[l][i]);
    let sol = solve_psd(prob.hess.clone(), &rhs)?;
    Ok(CoefPair::from_vecs(
        grid,
        sol.column(0).as_slice(),
        sol.column(1).as_slice(),
    ))
}

fn check_fit_inputs(sites: &[Point], targets: &[Point], ridge: f64) -> Result<()> {
    if sites.len() != targets.len() {
        return Err(Error::Argument("targets and sites differ in length".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Argument(format!("ridge must be >= 0, got {ridge}")));
    }
    if targets
        .iter()
        .any(|p| !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(Error::Argument("targets must be finite".into()));
    }
    Ok(())
}

/// Affine least-squares fit of the targets, lifted to coefficients; falls back
/// to the best rotation, scaled to the target spread, when the affine part is not orientation
/// preserving with determinant above `2 epsilon`.
fn feasible_start(
    grid: &KnotGrid,
    sites: &[Point],
    targets: &[Point],
    epsilon: f64,
) -> Result<CoefPair> {
    if sites.len() >= 3 {
        let x = DMatrix::from_fn(sites.len(), 3, |i, c| match c {
            0 => 1.0,
            1 => sites[i][0],
            _ => sites[i][1],
        });
        let y = DMatrix::from_fn(sites.len(), 2, |i, c| targets[i][c]);
        let xtx = x.transpose() * &x;
        if let Some(chol) = xtx.clone().cholesky() {
            let beta = chol.solve(&(x.transpose() * y));
            let det = beta[(1, 0)] * beta[(2, 1)] - beta[(2, 0)] * beta[(1, 1)];
            if det >= 2.0 * epsilon {
                return Ok(CoefPair::from_fn(grid, |p| {
                    [
                        beta[(0, 0)] + beta[(1, 0)] * p[0] + beta[(2, 0)] * p[1],
                        beta[(0, 1)] + beta[(1, 1)] * p[0] + beta[(2, 1)] * p[1],
                    ]
                }));
            }
        }
    }
    let t = procrustes(sites, targets, ProcrustesScale::MatchSpread, false)
        .map_err(|e| Error::Infeasible(format!("no feasible start: {e}")))?;
    if !(t.scale * t.scale >= 2.0 * epsilon) {
        return Err(Error::Infeasible(format!(
            "no orientation-preserving start with Jacobian above {epsilon:.3e} (best scale {:.3e})",
            t.scale
        )));
    }
    Ok(CoefPair::identity(grid).transformed(&t))
}

struct Barrier<'a> {
    prob: &'a LsProblem,
    constraints: &'a [CornerConstraint],
    grid: &'a KnotGrid,
    epsilon: f64,
}

impl Barrier<'_> {
    fn coef(&self, z: &[f64]) -> CoefPair {
        let p = self.grid.n_basis();
        CoefPair::from_vecs(self.grid, &z[..p], &z[p..])
    }

    /// Slacks `c_m(z) - epsilon`.
    fn slacks(&self, z: &[f64]) -> Vec<f64> {
        let c = self.coef(z);
        self.constraints
            .iter()
            .map(|k| k.evaluate(&c) - self.epsilon)
            .collect()
    }

    fn value(&self, z: &[f64], mu: f64) -> Option<f64> {
        let slacks = self.slacks(z);
        if slacks.iter().any(|s| *s <= 0.0) {
            return None;
        }
        Some(self.prob.objective(z) - mu * slacks.iter().map(|s| s.ln()).sum::<f64>())
    }

    fn newton_system(&self, z: &[f64], mu: f64) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.grid.n_basis();
        let coef = self.coef(z);
        let mut grad = DVector::from_vec(self.prob.gradient(z));
        let mut hess = DMatrix::zeros(2 * p, 2 * p);
        hess.view_mut((0, 0), (p, p)).copy_from(&self.prob.hess);
        hess.view_mut((p, p), (p, p)).copy_from(&self.prob.hess);
        for k in self.constraints {
            let s = k.evaluate(&coef) - self.epsilon;
            let (g1, g2) = k.gradient(&coef);
            let idx = k.indices();
            let mut pos = [0usize; 8];
            let mut val = [0.0; 8];
            for q in 0..4 {
                pos[q] = idx[q];
                val[q] = g1[q];
                pos[4 + q] = p + idx[q];
                val[4 + q] = g2[q];
            }
            for a in 0..8 {
                grad[pos[a]] -= mu * val[a] / s;
                for b in 0..8 {
                    hess[(pos[a], pos[b])] += mu * val[a] * val[b] / (s * s);
                }
            }
            // curvature of the bilinear constraint itself
            let blk = k.form().block();
            for a in 0..4 {
                for b in 0..4 {
                    let v = mu * blk[a][b] / s;
                    hess[(idx[a], p + idx[b])] -= v;
                    hess[(p + idx[b], idx[a])] -= v;
                }
            }
        }
        (grad, hess)
    }

    /// Newton direction, regularized until the Hessian is positive definite.
    fn direction(&self, grad: &DVector<f64>, hess: DMatrix<f64>) -> Option<DVector<f64>> {
        let n = hess.nrows();
        let scale = (0..n)
            .map(|i| hess[(i, i)].abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        let mut shift = 1e-12 * scale;
        for _ in 0..40 {
            let mut h = hess.clone();
            for i in 0..n {
                h[(i, i)] += shift;
            }
            if let Some(chol) = h.cholesky() {
                return Some(-chol.solve(grad));
            }
            shift *= 10.0;
        }
        None
    }

    /// Damped Newton minimization of the barrier function at fixed `mu`.
    fn center(&self, z: &mut Vec<f64>, mu: f64, steps: &mut usize) {
        let mut phi = match self.value(z, mu) {
            Some(v) => v,
            None => return,
        };
        for _ in 0..100 {
            let (grad, hess) = self.newton_system(z, mu);
            let Some(dir) = self.direction(&grad, hess) else {
                return;
            };
            let decrement = -grad.dot(&dir);
            if !(decrement > 1e-14 * (1.0 + phi.abs())) {
                return;
            }
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = z
                    .iter()
                    .zip(dir.iter())
                    .map(|(a, d)| a + step * d)
                    .collect();
                if let Some(v) = self.value(&trial, mu) {
                    if v <= phi - 1e-4 * step * decrement {
                        *z = trial;
                        phi = v;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            *steps += 1;
            if !accepted {
                return;
            }
        }
    }
}

/// Least-squares tensor-product B-spline fit with every corner value of the
/// Jacobian determinant kept at or above `epsilon`.
///
/// Minimizes `|targets - (W vec(Theta1), W vec(Theta2))|_F^2 + ridge (|Theta1|_F^2 + |Theta2|_F^2)`
/// by a log-barrier interior-point method started from the affine fit of the
/// targets. Iterates stay strictly feasible; the returned coefficients are the
/// best accepted iterate, so the objective never exceeds the starting value.
pub fn fit_bspline_constrained(
    grid: &KnotGrid,
    sites: &[Point],
    targets: &[Point],
    epsilon: f64,
    ridge: f64,
) -> Result<ConstrainedFit> {
    check_fit_inputs(sites, targets, ridge)?;
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let prob = LsProblem::new(grid, sites, targets, ridge)?;
    let constraints = corner_constraints(grid);
    let barrier = Barrier {
        prob: &prob,
        constraints: &constraints,
        grid,
        epsilon,
    };

    let start = feasible_start(grid, sites, targets, epsilon)?;
    let mut z: Vec<f64> = start.vec1().iter().chain(start.vec2()).copied().collect();
    let start_objective = prob.objective(&z);
    let mut best = (z.clone(), start_objective);
    let mut trace = vec![start_objective];

    let m = constraints.len() as f64;
    let mut mu = start_objective.max(1e-12 * (1.0 + prob.yty)) / m;
    let mut steps = 0;
    let mut converged = false;
    for _ in 0..60 {
        barrier.center(&mut z, mu, &mut steps);
        let f = prob.objective(&z);
        if f <= best.1 {
            best = (z.clone(), f);
            trace.push(f);
        }
        if m * mu <= 1e-13 * (1.0 + best.1) {
            converged = true;
            break;
        }
        mu *= 0.1;
    }

    let coef = barrier.coef(&best.0);
    let min_corner = constraints
        .iter()
        .map(|k| k.evaluate(&coef))
        .fold(f64::INFINITY, f64::min);
    Ok(ConstrainedFit {
        coef,
        objective: best.1,
        start_objective,
        trace,
        min_corner,
        newton_steps: steps,
        converged,
    })
}

/// Constrained B-spline smoother on a fixed grid.
#[derive(Clone, Debug)]
pub struct BsplineSmoother {
    pub grid: KnotGrid,
    pub epsilon: f64,
    pub ridge: Option<f64>,
}

impl BsplineSmoother {
    pub fn fit(&self, sites: &[Point], targets: &[Point]) -> Result<ConstrainedFit> {
        let ridge = self
            .ridge
            .unwrap_or_else(|| default_ridge(&self.grid, sites.len()));
        fit_bspline_constrained(&self.grid, sites, targets, self.epsilon, ridge)
    }
}

impl CoordinateSmoother for BsplineSmoother {
    fn smooth(&self, sites: &[Point], targets: &[Point]) -> Result<Vec<Point>> {
        let fit = self.fit(sites, targets)?;
        let w = design_matrix(&self.grid, sites)?;
        let f1 = w.mul_vec(fit.coef.vec1());
        let f2 = w.mul_vec(fit.coef.vec2());
        Ok(f1.into_iter().zip(f2).map(|(a, b)| [a, b]).collect())
    }
}
