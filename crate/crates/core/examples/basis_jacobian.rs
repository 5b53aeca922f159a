//! Build a B-spline deformation from an analytic swirl, evaluate it and its
//! Jacobian determinant, and check the corner constraints.
//!
//! cargo run --example basis_jacobian -- [K]

use bspline_deform::basis::{design_matrix, eval_basis, Axis, KnotGrid};
use bspline_deform::deformation::{
    assemble_a, corner_constraints, default_epsilon, min_jacobian, validate, CoefPair,
    DeformationMap,
};
use bspline_deform::fields::AnalyticMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(6);
    let grid = KnotGrid::unit_square(k)?;
    println!(
        "{k} x {k} knots, spacing {:.4}, {} basis functions",
        grid.tau(Axis::X1),
        grid.n_basis()
    );

    let b = eval_basis(&grid, Axis::X1, 0.37)?;
    println!(
        "basis values at x1 = 0.37: {:?}",
        b.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
    );

    let swirl = AnalyticMap::default_swirl();
    let coef = CoefPair::from_fn(&grid, |p| swirl.eval(p));
    let map = DeformationMap::new(grid.clone(), coef.clone())?;

    let sites = [[0.1, 0.1], [0.5, 0.5], [0.62, 0.41], [0.9, 0.75]];
    let w = design_matrix(&grid, &sites)?;
    let f1 = w.mul_vec(coef.vec1());
    let f2 = w.mul_vec(coef.vec2());
    for (i, x) in sites.iter().enumerate() {
        let det = map.jacobian_det(*x)?;
        let form = assemble_a(&grid, *x)?;
        println!(
            "f({:.2}, {:.2}) = ({:.4}, {:.4})  swirl ({:.4}, {:.4})  |J| = {det:.4} (bilinear form {:.4})",
            x[0],
            x[1],
            f1[i],
            f2[i],
            swirl.eval(*x)[0],
            swirl.eval(*x)[1],
            form.bilinear(coef.vec1(), coef.vec2())
        );
    }

    let eps = default_epsilon(&grid);
    let corners = corner_constraints(&grid);
    println!("{} corner constraints, epsilon {eps:.3e}", corners.len());
    println!("min |J| over the domain: {:.4}", min_jacobian(&map));
    println!("validated margin: {:.4}", validate(&grid, &coef, eps)?);

    let flipped = coef.swapped();
    match validate(&grid, &flipped, eps) {
        Ok(m) => println!("swapped coefficients unexpectedly valid ({m:.3e})"),
        Err(e) => println!("swapped coefficients rejected: {e}"),
    }
    Ok(())
}
