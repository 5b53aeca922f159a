use std::fs;
use std::path::Path;
use std::process::Command;

use bspline_deform::cli::{
    cmd_estimate, cmd_predict, cmd_simulate, ingest, read_points, Config, EstimateArgs, ModelFile,
    PredictArgs,
};

fn bdef(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bdef"))
        .args(args)
        .output()
        .expect("run bdef")
}

fn small_config() -> Config {
    Config {
        grid_size: 6,
        t: 40,
        k1: 3,
        k2: 3,
        max_outer: 4,
        ..Config::default()
    }
}

fn write_points(path: &Path, pts: &[[f64; 2]]) {
    let mut s = String::from("x1,x2\n");
    for p in pts {
        s.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn library_workflow_round_trips_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let sim = cmd_simulate(&cfg, dir.path(), 3).unwrap();
    let data = ingest(&sim.data).unwrap();
    assert!(data.dropped.is_empty());
    assert_eq!(data.dataset.n(), 36);
    assert_eq!(data.dataset.t(), 40);

    let model_path = dir.path().join("model.json");
    let est = cmd_estimate(
        &EstimateArgs {
            data: sim.data.clone(),
            out: model_path.clone(),
            ..Default::default()
        },
        &cfg,
    )
    .unwrap();
    assert!(est.grid_csv.exists());

    let text = fs::read_to_string(&model_path).unwrap();
    let back = ModelFile::from_json(&text).unwrap();
    assert_eq!(back, est.model);
    assert_eq!(back.to_json().unwrap(), text.trim_end());

    let (model, dataset) = back.to_model().unwrap();
    assert!(model.min_jacobian() >= model.epsilon - 1e-9);
    assert_eq!(dataset.replicates(), data.dataset.replicates());

    let grid = dir.path().join("grid.csv");
    write_points(&grid, &[[0.1, 0.1], [0.5, 0.5], [0.9, 0.3]]);
    let out = dir.path().join("pred.csv");
    let n = cmd_predict(&PredictArgs {
        model: model_path,
        grid: grid.clone(),
        time: "t005".into(),
        out: out.clone(),
        draws: Some(4),
        seed: 9,
    })
    .unwrap();
    assert_eq!(n, 3);
    let pred = fs::read_to_string(&out).unwrap();
    assert_eq!(pred.lines().count(), 4);
    assert!(pred.starts_with("x1,x2,mean,variance"));
    let draws = fs::read_to_string(dir.path().join("pred_draws.csv")).unwrap();
    assert_eq!(draws.lines().next().unwrap().split(',').count(), 6);
    assert_eq!(read_points(&grid).unwrap().len(), 3);
}

#[test]
fn binary_runs_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.toml");
    fs::write(
        &cfg,
        "grid_size = 6\nT = 30\nk1 = 3\nk2 = 3\nmax_outer = 3\n",
    )
    .unwrap();
    let cfg_s = cfg.to_str().unwrap();
    let sim_dir = d.join("sim");

    let o = bdef(&[
        "simulate",
        "--config",
        cfg_s,
        "--out",
        sim_dir.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = sim_dir.join("data.csv");
    assert!(sim_dir.join("truth_map.csv").exists());
    assert!(sim_dir.join("truth_cov.csv").exists());

    let model = d.join("model.json");
    let o = bdef(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--k",
        "3",
        "--config",
        cfg_s,
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("model_grid.csv").exists());

    let grid = d.join("grid.csv");
    write_points(&grid, &[[0.25, 0.75], [0.6, 0.4]]);
    let pred = d.join("pred.csv");
    let o = bdef(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--time",
        "t000",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&pred).unwrap().lines().count(), 3);

    // prediction outside the domain is a domain error
    write_points(&grid, &[[1.5, 0.5]]);
    let o = bdef(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--time",
        "t000",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = bdef(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--grid",
        grid.to_str().unwrap(),
        "--time",
        "nope",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn binary_reports_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "station,x,y\n").unwrap();
    let o = bdef(&[
        "estimate",
        "--data",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));

    let missing = dir.path().join("missing.json");
    let o = bdef(&[
        "predict",
        "--model",
        missing.to_str().unwrap(),
        "--grid",
        bad.to_str().unwrap(),
        "--time",
        "t0",
        "--out",
        dir.path().join("p.csv").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}
