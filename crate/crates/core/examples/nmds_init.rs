//! Recover a planar configuration from noiseless dispersions with the
//! iterative nonmetric initializer.
//!
//! cargo run --example nmds_init

use bspline_deform::covariance::{CovParams, DispersionMatrix, VariogramModel};
use bspline_deform::fields::AnalyticMap;
use bspline_deform::linalg::procrustes_rms;
use bspline_deform::scaling::{sg_initialize, SgOptions};
use bspline_deform::smoothers::TpsSmoother;
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let m = 7;
    let sites: Vec<[f64; 2]> = (0..m * m)
        .map(|k| {
            [
                (k % m) as f64 / (m - 1) as f64,
                (k / m) as f64 / (m - 1) as f64,
            ]
        })
        .collect();
    let hidden = AnalyticMap::swirl([0.5, 0.5], 0.8, 0.35)?;
    let config: Vec<[f64; 2]> = sites.iter().map(|p| hidden.eval(*p)).collect();

    let g = VariogramModel::from_cov(&CovParams::new(2.0, 0.6, 0.2)?);
    let n = sites.len();
    let d2 = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            g.eval(
                ((config[i][0] - config[j][0]).powi(2) + (config[i][1] - config[j][1]).powi(2))
                    .sqrt(),
            )
        }
    });
    let res = sg_initialize(
        &DispersionMatrix::from_matrix(d2)?,
        &sites,
        &TpsSmoother { lambda: 0.0 },
        SgOptions::default(),
    )?;

    println!("iterations {} converged {}", res.iterations, res.converged);
    println!(
        "stress trace {:?}",
        res.stress
            .iter()
            .map(|s| format!("{s:.2e}"))
            .collect::<Vec<_>>()
    );
    println!(
        "fitted variogram: nugget {:.4} sill {:.4} range {:.4}",
        res.variogram.nugget, res.variogram.sill, res.variogram.range
    );
    println!(
        "Procrustes RMS to the hidden configuration: {:.2e}",
        procrustes_rms(res.configuration.coords(), &config, true)
    );
    Ok(())
}
