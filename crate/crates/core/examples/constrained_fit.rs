//! Fit a B-spline map to targets that fold, with and without the corner
//! constraints.
//!
//! cargo run --example constrained_fit

use bspline_deform::basis::KnotGrid;
use bspline_deform::deformation::{default_epsilon, min_jacobian, DeformationMap};
use bspline_deform::smoothers::{fit_bspline_constrained, fit_bspline_unconstrained};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let m = 8;
    let sites: Vec<[f64; 2]> = (0..m * m)
        .map(|k| {
            [
                (k % m) as f64 / (m - 1) as f64,
                (k / m) as f64 / (m - 1) as f64,
            ]
        })
        .collect();
    // swap columns 3 and 4 in the lower half: the target map turns inside out there
    let targets: Vec<[f64; 2]> = sites
        .iter()
        .map(|p| {
            let col = (p[0] * 7.0).round() as usize;
            let row = (p[1] * 7.0).round() as usize;
            match (col, row < 4) {
                (3, true) => [4.0 / 7.0, p[1]],
                (4, true) => [3.0 / 7.0, p[1]],
                _ => *p,
            }
        })
        .collect();

    let grid = KnotGrid::unit_square(8)?;
    let eps = default_epsilon(&grid);
    let ridge = 1e-8;

    let free = fit_bspline_unconstrained(&grid, &sites, &targets, ridge)?;
    let free_map = DeformationMap::new(grid.clone(), free)?;
    println!("unconstrained: min |J| = {:.4}", min_jacobian(&free_map));

    let fit = fit_bspline_constrained(&grid, &sites, &targets, eps, ridge)?;
    let map = DeformationMap::new(grid, fit.coef.clone())?;
    println!(
        "constrained:   min |J| = {:.4} (epsilon {eps:.2e}), objective {:.4} from {:.4}, {} Newton steps, converged {}",
        min_jacobian(&map),
        fit.objective,
        fit.start_objective,
        fit.newton_steps,
        fit.converged
    );
    println!(
        "objective trace: {:?}",
        fit.trace
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
    );
    Ok(())
}
