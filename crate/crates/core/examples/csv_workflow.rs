//! End-to-end use of the command implementations: write a long-format CSV,
//! estimate a model, reload the model file and predict on a grid.
//!
//! cargo run --release --example csv_workflow -- [output dir]

use std::path::PathBuf;

use bspline_deform::cli::{
    cmd_estimate, cmd_predict, cmd_simulate, read_points, Config, EstimateArgs, ModelFile,
    PredictArgs,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bdef_workflow"));
    let cfg = Config {
        grid_size: 8,
        t: 50,
        ..Config::default()
    };
    let sim = cmd_simulate(&cfg, &dir, 5)?;
    println!("simulated data in {}", sim.data.display());

    let model_path = dir.join("model.json");
    let est = cmd_estimate(
        &EstimateArgs {
            data: sim.data.clone(),
            out: model_path.clone(),
            ..Default::default()
        },
        &cfg,
    )?;
    println!(
        "estimated K = {}: sigma2 {:.3} phi {:.3} nugget {:.3}",
        est.model.k1, est.model.sigma2, est.model.phi, est.model.nugget
    );
    let reloaded = ModelFile::read(&model_path)?;
    println!("model file reloads identically: {}", reloaded == est.model);

    let grid = dir.join("grid.csv");
    let mut text = String::from("x1,x2\n");
    for k in 0..25 {
        text.push_str(&format!(
            "{},{}\n",
            (k % 5) as f64 / 4.0,
            (k / 5) as f64 / 4.0
        ));
    }
    std::fs::write(&grid, text)?;
    let out = dir.join("predictions.csv");
    let n = cmd_predict(&PredictArgs {
        model: model_path,
        grid: grid.clone(),
        time: "t010".into(),
        out: out.clone(),
        draws: Some(3),
        seed: 1,
    })?;
    println!(
        "{n} predictions for {} sites in {}",
        read_points(&grid)?.len(),
        out.display()
    );
    Ok(())
}
