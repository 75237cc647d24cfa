use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use regcopula::bench::{synth_generate, Predictor, SynthMean, SynthSpec};
use regcopula::basis::BasisSpec;
use regcopula::margins::Margin;
use regcopula::predict::Quadrature;
use regcopula_cli::artifact::ModelArtifact;
use regcopula_cli::csvio::Table;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regcopula"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Two responses (normal, exponential) on two covariates.
fn write_training_csv(dir: &Path, n: usize) -> PathBuf {
    let spec = SynthSpec {
        n,
        covariate_dim: 2,
        basis: BasisSpec::linear(),
        sigma: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        mean: SynthMean::Surface { amplitude: 1.0, noise: 0.6 },
        margins: vec![Margin::normal(0.0, 1.0).unwrap(), Margin::Exponential { rate: 1.0 }],
        seed: 3,
    };
    let d = synth_generate(&spec).unwrap().data;
    let mut text = String::from("y1,y2,x1,x2\n");
    for i in 0..n {
        text += &format!("{},{},{},{}\n", d.y[(i, 0)], d.y[(i, 1)], d.x[(i, 0)], d.x[(i, 1)]);
    }
    let path = dir.join("train.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn fit_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 1
[data]
path = "train.csv"
responses = ["y1", "y2"]
covariates = ["x1", "x2"]
[basis]
kind = "thin_plate"
knots = 6
seed = 0
[fit]
iterations = 400
{extra}
[[margins]]
kind = "kernel"
[[margins]]
kind = "kernel"
lower = 0.0
"#
    );
    let path = dir.join("fit.toml");
    std::fs::write(&path, text).unwrap();
    path
}

struct Fitted {
    dir: tempfile::TempDir,
    model: PathBuf,
    train: PathBuf,
}

fn fitted() -> Fitted {
    let dir = tempfile::tempdir().unwrap();
    let train = write_training_csv(dir.path(), 120);
    let cfg = fit_config(dir.path(), "");
    let model = dir.path().join("model.json");
    ok(&["fit", "--config", p(&cfg), "--out", p(&model)]);
    Fitted { dir, model, train }
}

fn without_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v["provenance"].as_object_mut().unwrap().remove("created_unix");
    v
}

#[test]
fn fit_predict_densities_finite_on_training_rows() {
    let f = fitted();
    assert!(f.dir.path().join("model.trace.csv").exists());
    let out = ok(&["predict", "--model", p(&f.model), "--density", p(&f.train)]);
    let t = Table::parse(&out, "stdout").unwrap();
    assert_eq!(t.rows.len(), 120);
    assert!(t.rows.iter().all(|r| r[1].is_finite()));
}

#[test]
fn fit_is_deterministic() {
    let f = fitted();
    let again = f.dir.path().join("again.json");
    let cfg = f.dir.path().join("fit.toml");
    ok(&["fit", "--config", p(&cfg), "--out", p(&again)]);
    assert_eq!(without_timestamp(&f.model), without_timestamp(&again));
    let other = f.dir.path().join("other.json");
    ok(&["fit", "--config", p(&cfg), "--seed", "2", "--out", p(&other)]);
    assert_ne!(without_timestamp(&f.model)["variational"], without_timestamp(&other)["variational"]);
    assert_eq!(without_timestamp(&other)["provenance"]["seed"], 2);
}

#[test]
fn missing_column_and_malformed_csv_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.csv"), "y1,y2,x1\n1,2,3\n").unwrap();
    let cfg = fit_config(dir.path(), "");
    let out = run(&["fit", "--config", p(&cfg), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'x2'"));

    std::fs::write(dir.path().join("train.csv"), "y1,y2,x1,x2\n1,2,3,4\n1,2,oops,4\n").unwrap();
    let out = run(&["fit", "--config", p(&cfg), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("'x1'"), "{err}");
}

#[test]
fn unknown_config_key_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_training_csv(dir.path(), 50);
    let cfg = fit_config(dir.path(), "learning_rate = 0.1");
    let out = run(&["fit", "--config", p(&cfg), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn divergent_fit_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write_training_csv(dir.path(), 60);
    // Huge damping turns the adaptive rule into unit-rate ascent on unclipped gradients.
    let cfg = fit_config(dir.path(), "damping = 1e300\nclip_norm = 1e300\nprecondition = false");
    let out = run(&["fit", "--config", p(&cfg), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn predict_samples_shape_and_spearman_diagonal() {
    let f = fitted();
    let out = ok(&["predict", "--model", p(&f.model), "--at", "0.1,-0.2", "--samples", "1000", "--seed", "4"]);
    let t = Table::parse(&out, "stdout").unwrap();
    assert_eq!(t.headers, ["row", "y1", "y2"]);
    assert_eq!(t.rows.len(), 1000);
    assert_eq!(out, ok(&["predict", "--model", p(&f.model), "--at", "0.1,-0.2", "--samples", "1000", "--seed", "4"]));

    let out = ok(&["predict", "--model", p(&f.model), "--at", "0.1,-0.2", "--spearman"]);
    let lines: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(lines.len(), 2);
    for (j, l) in lines.iter().enumerate() {
        let v: Vec<f64> = l.split(',').skip(2).map(|s| s.parse().unwrap()).collect();
        assert_eq!(v[j], 1.0);
    }
}

#[test]
fn predict_mean_matches_benchmark_call() {
    let f = fitted();
    let t = Table::read(&f.train).unwrap();
    let x = t.select(&["x1".into(), "x2".into()]).unwrap();
    let xbar: Vec<f64> = (0..2).map(|j| x.column(j).mean()).collect();
    let at = format!("{},{}", xbar[0], xbar[1]);
    let out = ok(&["predict", "--model", p(&f.model), "--at", &at, "--mean"]);
    let row = &Table::parse(&out, "stdout").unwrap().rows[0];
    let art = ModelArtifact::load(&f.model).unwrap();
    let quad = Quadrature::new(regcopula::predict::GAUSS_HERMITE_ORDER);
    for j in 0..2 {
        let m = Predictor::mean(&art.model, &xbar, j, &quad).unwrap();
        assert_eq!(row[1 + j].to_bits(), m.to_bits());
    }
}

#[test]
fn predict_density_grid_integrates() {
    let f = fitted();
    let out = ok(&["predict", "--model", p(&f.model), "--at", "0,0", "--density-grid", "400"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("row,response,y,density"));
    let mut by_resp: Vec<Vec<(f64, f64)>> = vec![Vec::new(), Vec::new()];
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let j = if f[1] == "y1" { 0 } else { 1 };
        by_resp[j].push((f[2].parse().unwrap(), f[3].parse().unwrap()));
    }
    for g in &by_resp {
        let area: f64 = g.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
        assert!((area - 0.998).abs() < 0.02, "{area}");
    }
}

#[test]
fn predict_dimension_mismatch_exit_2() {
    let f = fitted();
    let out = run(&["predict", "--model", p(&f.model), "--at", "1,2,3", "--mean"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["predict", "--model", p(&f.model), "--mean"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sidecar_and_inline_artifacts_load_identically() {
    let f = fitted();
    let cfg = f.dir.path().join("fit.toml");
    let side = f.dir.path().join("side.json");
    ok(&["fit", "--config", p(&cfg), "--sidecar", "--out", p(&side)]);
    assert!(f.dir.path().join("side.bin").exists());
    let a = ModelArtifact::load(&f.model).unwrap();
    let b = ModelArtifact::load(&side).unwrap();
    assert_eq!(a.model, b.model);
}

#[test]
fn benchmark_bundled_synthetic_is_table_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scores.csv");
    ok(&["benchmark", "--config", p(&bundled("benchmark_synthetic.toml")), "--out", p(&out)]);
    let t = std::fs::read_to_string(&out).unwrap();
    let mut lines = t.lines();
    assert_eq!(lines.next(), Some("model,crps,ls,rmse,folds_scored,folds_failed"));
    let models: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        models,
        ["MVC.prior1", "MVC.prior2", "MVC.add.prior1", "MVC.add.prior2", "MVC.lin.prior1", "MVC.lin.prior2", "NOC"]
    );
    assert!(dir.path().join("scores.folds.csv").exists());
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "[lfi]\nsims = 40\n").unwrap();
    let a = ok(&["simulate", "--config", p(&cfg), "--seed", "9"]);
    let b = ok(&["simulate", "--config", p(&cfg), "--seed", "9", "--threads", "2"]);
    assert_eq!(a, b);
    let t = Table::parse(&a, "stdout").unwrap();
    assert_eq!(t.rows.len(), 40);
    assert_eq!(t.headers.len(), 11);
    assert_ne!(a, ok(&["simulate", "--config", p(&cfg), "--seed", "10"]));
}

#[test]
fn census_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let mut census = String::from("abundance,interval\n");
    for i in 0..120 {
        census += &format!("{},{}\n", 1 + i % 30, 4.5);
    }
    std::fs::write(dir.path().join("census.csv"), census).unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "[lfi]\nsims = 5\ncensus_file = \"census.csv\"\n").unwrap();
    let t = Table::parse(&ok(&["simulate", "--config", p(&cfg)]), "stdout").unwrap();
    assert_eq!(t.rows.len(), 5);
    std::fs::write(dir.path().join("census.csv"), "abundance,interval\n2.5,5\n").unwrap();
    assert_eq!(run(&["simulate", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn lfi_train_posterior_calibrate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lfi.toml");
    std::fs::write(
        &cfg,
        "seed = 4\n[basis]\nkind = \"thin_plate\"\nknots = 12\nseed = 1\n[fit]\niterations = 300\n[lfi]\nsims = 500\ncases = 50\nper_case = 40\n",
    )
    .unwrap();
    let sims = dir.path().join("sims.csv");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&sims)]);
    let from_file = dir.path().join("lfi_file.toml");
    std::fs::write(
        &from_file,
        format!("{}simulations_file = \"sims.csv\"\n", std::fs::read_to_string(&cfg).unwrap()),
    )
    .unwrap();
    let model = dir.path().join("lfi.json");
    ok(&["lfi-train", "--config", p(&from_file), "--out", p(&model)]);
    let direct = dir.path().join("direct.json");
    ok(&["lfi-train", "--config", p(&cfg), "--out", p(&direct)]);
    assert_eq!(without_timestamp(&model)["variational"], without_timestamp(&direct)["variational"]);

    let h = Table::read(&sims).unwrap();
    let at: Vec<String> = (5..10).map(|c| h.rows[0][c].to_string()).collect();
    let at = at.join(",");
    let draws = ok(&["lfi-posterior", "--model", p(&model), "--at", &at, "--draws", "200"]);
    let t = Table::parse(&draws, "stdout").unwrap();
    assert_eq!(t.headers, ["omega", "sigma2", "c", "phi1", "phi2"]);
    assert_eq!(t.rows.len(), 200);
    assert!(t.rows.iter().all(|r| r[1] > 0.0 && r[3] > 0.0 && r[4] > 0.0));

    let plug = ok(&["lfi-posterior", "--model", p(&model), "--at", &at, "--draws", "200", "--abundance", "20", "--plug-in"]);
    let t = Table::parse(&plug, "stdout").unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.headers.len(), 8);
    assert!(t.rows[0][7] > 0.0);

    let out = dir.path().join("calibration.csv");
    ok(&["calibrate", "--config", p(&cfg), "--model", p(&model), "--out", p(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<(String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (name, d) = l.split_once(',').unwrap();
            (name.to_string(), d.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(), regcopula::lfi::RESPONSE_NAMES);
    assert!(rows.iter().all(|r| r.1 >= 0.0 && r.1 <= 1.0));
    assert!(dir.path().join("calibration.curves.csv").exists());
}
