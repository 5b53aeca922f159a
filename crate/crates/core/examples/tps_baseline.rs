//! Thin-plate spline smoother: match the effective degrees of freedom to a
//! B-spline basis size and check whether the smoothed map folds.
//!
//! cargo run --example tps_baseline

use bspline_deform::fields::AnalyticMap;
use bspline_deform::smoothers::{fit_tps, tps_effective_dof, tps_lambda_for_dof};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sites: Vec<[f64; 2]> = (0..121)
        .map(|k| [(k % 11) as f64 / 10.0, (k / 11) as f64 / 10.0])
        .collect();
    let swirl = AnalyticMap::default_swirl();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.03)?;
    let targets: Vec<[f64; 2]> = sites
        .iter()
        .map(|p| {
            let q = swirl.eval(*p);
            [q[0] + noise.sample(&mut rng), q[1] + noise.sample(&mut rng)]
        })
        .collect();

    for k in [4usize, 6, 8] {
        let dof = (k * k) as f64;
        let lambda = tps_lambda_for_dof(&sites, dof)?;
        let model = fit_tps(&sites, &targets, lambda)?;
        let mut min_det = f64::INFINITY;
        for a in 0..=100 {
            for b in 0..=100 {
                min_det = min_det.min(model.jacobian_det([a as f64 / 100.0, b as f64 / 100.0]));
            }
        }
        println!(
            "dof {dof:>4}: lambda {lambda:.3e} (check {:.2}), min |J| on a 101 x 101 grid {min_det:+.4}",
            tps_effective_dof(&sites, lambda)?
        );
    }
    Ok(())
}
