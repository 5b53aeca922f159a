//! Fit a model to simulated swirl data, then krige one period onto a grid and
//! draw conditional simulations.
//!
//! cargo run --release --example kriging

use bspline_deform::cli::regular_grid;
use bspline_deform::covariance::CovParams;
use bspline_deform::estimation::{fit, Dataset, FitConfig};
use bspline_deform::fields::{conditional_simulate, krige, simulate_grf, AnalyticMap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sites: Vec<[f64; 2]> = (0..81)
        .map(|k| [(k % 9) as f64 / 8.0, (k / 9) as f64 / 8.0])
        .collect();
    let truth = AnalyticMap::default_swirl();
    let cov = CovParams::new(1.0, 0.25, 0.2)?;
    let z = simulate_grf(&sites, &truth, &cov, 60, 4)?;
    let data = Dataset::new(sites, z)?;
    let model = fit(&data, &FitConfig::square(4))?;
    println!(
        "fitted sigma2 {:.3} phi {:.3} nugget {:.3}, min |J| {:.3e}",
        model.cov.sigma2,
        model.cov.phi,
        model.cov.nugget,
        model.min_jacobian()
    );

    let period: Vec<f64> = data.replicates().column(0).iter().copied().collect();
    let grid = regular_grid([0.0, 0.0], [1.0, 1.0], 5);
    let k = krige(&model, &period, &grid)?;
    for (p, (m, v)) in grid.iter().zip(k.mean.iter().zip(&k.variance)).step_by(4) {
        println!(
            "({:.2}, {:.2}): mean {m:+.3} sd {:.3}",
            p[0],
            p[1],
            v.sqrt()
        );
    }

    let draws = conditional_simulate(&model, &period, &grid, 500, 7)?;
    let i = 12;
    let row = draws.row(i);
    let mean = row.mean();
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (row.len() - 1) as f64;
    println!(
        "site {i}: kriging mean {:+.3} var {:.3}; 500 draws mean {mean:+.3} var {var:.3}",
        k.mean[i], k.variance[i]
    );
    Ok(())
}
