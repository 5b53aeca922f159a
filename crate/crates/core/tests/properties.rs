use bspline_deform::basis::{design_matrix, eval_basis, eval_basis_deriv, Axis, KnotGrid, Point};
use bspline_deform::covariance::{
    covariance_matrix, fit_variogram, variogram_inverse, CovParams, VariogramModel,
};
use bspline_deform::deformation::{
    assemble_a, corner_constraints, min_jacobian, CoefPair, DeformationMap, SpatialMap,
};
use bspline_deform::estimation::{normalize_gauge, DeformModel, Diagnostics};
use bspline_deform::fields::{krige, AnalyticMap};
use bspline_deform::scaling::{isotonic_fit, kruskal_stress};
use bspline_deform::smoothers::fit_bspline_constrained;
use proptest::prelude::*;

fn grid_sites(m: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            out.push([i as f64 / (m - 1) as f64, j as f64 / (m - 1) as f64]);
        }
    }
    out
}

fn perturbed_identity(grid: &KnotGrid, noise: &[f64], amp: f64) -> CoefPair {
    let id = CoefPair::identity(grid);
    let p = grid.n_basis();
    let v1: Vec<f64> = id
        .vec1()
        .iter()
        .zip(noise)
        .map(|(a, e)| a + amp * e)
        .collect();
    let v2: Vec<f64> = id
        .vec2()
        .iter()
        .zip(&noise[p..])
        .map(|(a, e)| a + amp * e)
        .collect();
    CoefPair::from_vecs(grid, &v1, &v2)
}

fn unit() -> impl Strategy<Value = f64> {
    0.0..1.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_is_a_nonnegative_partition_of_unity(k in 2usize..10, x in unit()) {
        let grid = KnotGrid::unit_square(k).unwrap();
        let b = eval_basis(&grid, Axis::X1, x).unwrap();
        prop_assert!(b.iter().all(|v| *v >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(b.iter().filter(|v| **v > 0.0).count() <= 2);
        let db = eval_basis_deriv(&grid, Axis::X1, x).unwrap();
        prop_assert!(db.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn design_rows_sum_to_one(k1 in 2usize..8, k2 in 2usize..8, x in unit(), y in unit()) {
        let grid = KnotGrid::new([0.0, 0.0], [1.0, 1.0], k1, k2).unwrap();
        let w = design_matrix(&grid, &[[x, y]]).unwrap();
        let s: f64 = w.row(0).iter().map(|(_, v)| v).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(w.row(0).len() <= 4);
    }

    #[test]
    fn jacobian_form_is_skew_and_matches_map(
        k in 3usize..8,
        noise in prop::collection::vec(-1.0..1.0f64, 128),
        x in unit(),
        y in unit(),
    ) {
        let grid = KnotGrid::unit_square(k).unwrap();
        let coef = perturbed_identity(&grid, &noise, 0.05);
        let a = assemble_a(&grid, [x, y]).unwrap();
        let dense = a.to_dense();
        prop_assert!((&dense + dense.transpose()).amax() < 1e-12);
        let map = DeformationMap::new(grid, coef.clone()).unwrap();
        let det = map.jacobian_det([x, y]).unwrap();
        let bil = a.bilinear(coef.vec1(), coef.vec2());
        prop_assert!((det - bil).abs() < 1e-9 * (1.0 + det.abs()));
    }

    #[test]
    fn corner_minimum_bounds_the_domain(
        k in 3usize..7,
        noise in prop::collection::vec(-1.0..1.0f64, 98),
        x in unit(),
        y in unit(),
    ) {
        let grid = KnotGrid::unit_square(k).unwrap();
        let coef = perturbed_identity(&grid, &noise, 0.3);
        let map = DeformationMap::new(grid, coef).unwrap();
        prop_assert!(map.jacobian_det([x, y]).unwrap() >= min_jacobian(&map) - 1e-9);
    }

    #[test]
    fn swapping_coefficients_negates_every_corner(
        k in 2usize..7,
        noise in prop::collection::vec(-1.0..1.0f64, 98),
    ) {
        let grid = KnotGrid::unit_square(k).unwrap();
        let coef = perturbed_identity(&grid, &noise, 0.2);
        let sw = coef.swapped();
        for c in corner_constraints(&grid) {
            prop_assert!((c.evaluate(&coef) + c.evaluate(&sw)).abs() < 1e-9);
        }
    }

    #[test]
    fn isotonic_fit_is_monotone_and_mean_preserving(
        pairs in prop::collection::vec((0.0..10.0f64, 0.0..5.0f64), 1..60),
    ) {
        let d2: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let h: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let fit = isotonic_fit(&d2, &h);
        let mut order: Vec<usize> = (0..d2.len()).collect();
        order.sort_by(|&i, &j| d2[i].total_cmp(&d2[j]));
        for w in order.windows(2) {
            prop_assert!(fit[w[0]] <= fit[w[1]] + 1e-12);
        }
        let s0: f64 = h.iter().sum();
        let s1: f64 = fit.iter().sum();
        prop_assert!((s0 - s1).abs() < 1e-9 * (1.0 + s0.abs()));
        let sse = |v: &[f64]| v.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mean = s0 / h.len() as f64;
        prop_assert!(sse(&fit) <= sse(&vec![mean; h.len()]) + 1e-9);
        // residuals are orthogonal to the fitted values
        let dot: f64 = fit.iter().zip(&h).map(|(f, y)| f * (y - f)).sum();
        prop_assert!(dot.abs() < 1e-8 * (1.0 + s0 * s0));
    }

    #[test]
    fn stress_is_nonnegative(
        pairs in prop::collection::vec((0.0..10.0f64, 0.01..5.0f64), 2..40),
    ) {
        let d2: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let h: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let s = kruskal_stress(&isotonic_fit(&d2, &h), &h).unwrap();
        prop_assert!(s >= 0.0 && s.is_finite());
    }

    #[test]
    fn variogram_inverse_round_trips(
        nugget in 0.01..2.0f64,
        sigma2 in 0.1..3.0f64,
        phi in 0.05..1.0f64,
        frac in 0.0..2.5f64,
    ) {
        let cov = CovParams::new(sigma2, phi, nugget).unwrap();
        let g = VariogramModel::from_cov(&cov);
        let h = frac * phi;
        let back = variogram_inverse(&g, g.eval(h));
        prop_assert!((back - h).abs() < 1e-6 * (1.0 + h));
    }

    #[test]
    fn swirl_inverse_round_trips(x in unit(), y in unit(), strength in -1.5..1.5f64) {
        let map = AnalyticMap::swirl([0.5, 0.5], strength, 0.5).unwrap();
        let p = map.eval([x, y]);
        let q = map.inverse().eval(p);
        prop_assert!((q[0] - x).abs() < 1e-12 && (q[1] - y).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn constrained_fit_is_feasible(
        k in 3usize..6,
        jitter in prop::collection::vec(-0.4..0.4f64, 72),
        margin in prop::sample::select(vec![1e-4, 1e-2]),
    ) {
        let grid = KnotGrid::unit_square(k).unwrap();
        let sites = grid_sites(6);
        let targets: Vec<Point> = sites
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + jitter[2 * i], p[1] + jitter[2 * i + 1]])
            .collect();
        let fit = fit_bspline_constrained(&grid, &sites, &targets, margin, 1e-6).unwrap();
        prop_assert!(fit.min_corner >= margin - 1e-9);
        prop_assert!(fit.objective <= fit.start_objective + 1e-12);
        prop_assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gauge_normalization_preserves_covariance(
        angle in 0.0..std::f64::consts::TAU,
        scale in 0.3..3.0f64,
        shift in (-2.0..2.0f64, -2.0..2.0f64),
        noise in prop::collection::vec(-1.0..1.0f64, 32),
    ) {
        let grid = KnotGrid::unit_square(4).unwrap();
        let (c, s) = (angle.cos(), angle.sin());
        let base = perturbed_identity(&grid, &noise, 0.03);
        let base_map = DeformationMap::new(grid.clone(), base).unwrap();
        let coef = CoefPair::from_fn(&grid, |p| {
            let q = base_map.eval(p).unwrap();
            [scale * (c * q[0] - s * q[1]) + shift.0, scale * (s * q[0] + c * q[1]) + shift.1]
        });
        let sites = grid_sites(5);
        let cov = CovParams::new(1.0, 0.4, 0.2).unwrap();
        let map = DeformationMap::new(grid.clone(), coef.clone()).unwrap();
        let before = covariance_matrix(&sites, &map, &cov).unwrap();
        let (norm, t) = normalize_gauge(&grid, &coef, &sites).unwrap();
        let cov2 = CovParams::new(1.0, 0.4 * t.scale, 0.2).unwrap();
        let map2 = DeformationMap::new(grid, norm).unwrap();
        let after = covariance_matrix(&sites, &map2, &cov2).unwrap();
        prop_assert!((before - after).amax() < 1e-10);
    }

    #[test]
    fn kriging_variance_is_bounded(
        pred in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..30),
        nugget in 0.0..1.0f64,
        data in prop::collection::vec(-2.0..2.0f64, 16),
    ) {
        let grid = KnotGrid::unit_square(3).unwrap();
        let sites = grid_sites(4);
        let model = DeformModel {
            coef: CoefPair::identity(&grid),
            grid,
            cov: CovParams::new(1.5, 0.3, nugget).unwrap(),
            epsilon: 1e-3,
            sites,
            site_means: vec![0.0; 16],
            mean: 0.0,
            diagnostics: Diagnostics::default(),
        };
        let pts: Vec<Point> = pred.iter().map(|p| [p.0, p.1]).collect();
        let k = krige(&model, &data, &pts).unwrap();
        let total = model.cov.total_variance();
        for v in &k.variance {
            prop_assert!(*v >= 0.0 && *v <= total + 1e-12);
        }
    }
}

#[test]
fn variogram_fit_recovers_noise_free_curve() {
    let truth = CovParams::new(2.0, 0.3, 0.5).unwrap();
    let g = VariogramModel::from_cov(&truth);
    let pairs: Vec<(f64, f64)> = (1..400)
        .map(|i| i as f64 / 200.0)
        .map(|h| (h, g.eval(h)))
        .collect();
    let fit = fit_variogram(&pairs).unwrap();
    let est = fit.model.to_cov();
    assert!((est.sigma2 - truth.sigma2).abs() < 0.05 * truth.sigma2);
    assert!((est.phi - truth.phi).abs() < 0.05 * truth.phi);
    assert!((est.nugget - truth.nugget).abs() < 0.05 * truth.nugget);
}

#[test]
fn analytic_map_applies_to_all_sites() {
    let sites = grid_sites(4);
    let map = AnalyticMap::default_swirl();
    let out = map.apply_all(&sites).unwrap();
    assert_eq!(out.len(), sites.len());
    for (p, q) in sites.iter().zip(&out) {
        assert_eq!(map.eval(*p), *q);
    }
}
