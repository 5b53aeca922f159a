//! Simulate the swirl field on an 11 x 11 grid and compare the fitted
//! covariance with the truth for several basis sizes.
//!
//! cargo run --release --example swirl_study -- [seed] [T]

use std::time::Instant;

use bspline_deform::covariance::{covariance_matrix, CovParams};
use bspline_deform::estimation::{fit, Dataset, FitConfig};
use bspline_deform::fields::{simulate_grf, AnalyticMap};
use bspline_deform::linalg::{regression, upper_entries};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let t: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);

    let sites: Vec<[f64; 2]> = (0..121)
        .map(|k| [(k % 11) as f64 / 10.0, (k / 11) as f64 / 10.0])
        .collect();
    let truth = AnalyticMap::default_swirl();
    let cov = CovParams::new(1.0, 0.25, 1.0)?;
    let z = simulate_grf(&sites, &truth, &cov, t, seed)?;
    let true_c = upper_entries(&covariance_matrix(&sites, &truth, &cov)?);
    let data = Dataset::new(sites, z)?;

    for k in [4, 6, 8] {
        let start = Instant::now();
        let model = fit(&data, &FitConfig::square(k))?;
        let est = upper_entries(&model.covariance());
        let r = regression(&true_c, &est);
        let mse = true_c
            .iter()
            .zip(&est)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / est.len() as f64;
        println!(
            "K={k}: slope {:.3} intercept {:.3} corr {:.3} mse {:.4} min|J| {:.3e} sigma2 {:.3} phi {:.3} nugget {:.3} iters {} ({:.1?})",
            r.slope,
            r.intercept,
            r.correlation,
            mse,
            model.min_jacobian(),
            model.cov.sigma2,
            model.cov.phi,
            model.cov.nugget,
            model.diagnostics.iterations,
            start.elapsed()
        );
    }
    Ok(())
}
