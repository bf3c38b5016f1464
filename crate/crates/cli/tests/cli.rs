use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtsens::confounding::ConfoundingSpec;
use mtsens::dataset::{load_csv, TreatmentPair};
use mtsens::engine::run_sensitivity;
use mtsens_cli::config::{AnalysisConfig, Profile};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn data_path() -> String {
    configs().join("data/illustrative.csv").canonicalize().unwrap().display().to_string()
}

fn mtsens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtsens")).args(args).arg("-q").output().expect("binary runs")
}

/// A small analysis config over the shipped data.
fn small_config(dir: &Path, name: &str, priors: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"name = "{name}"
seed = 5

[data]
path = "{data}"
outcome = "y"
treatment = "a"
covariates = ["X1"]

[engine]
m1 = 2
m2 = 2

[gps]
model = "stratified"
columns = ["X1"]

[trees]
trees = 20
burn_in = 40
keep = 50

[output]
json = "{name}.json"
{extra}
{priors}
"#,
        data = data_path()
    );
    let p = dir.join(format!("{name}.toml"));
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn widths(doc: &Value) -> Vec<f64> {
    doc["pairs"].as_array().unwrap().iter().map(|p| p["upper95"].as_f64().unwrap() - p["lower95"].as_f64().unwrap()).collect()
}

#[test]
fn shipped_configs_round_trip() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let (cfg, _) = AnalysisConfig::load(&path).unwrap();
            let again = AnalysisConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(cfg, again, "{}", path.display());
            assert_eq!(again.to_toml(), cfg.to_toml());
            n += 1;
        }
    }
    assert!(n >= 8);
}

#[test]
fn out_of_bounds_prior_cites_natural_bounds() {
    let text = std::fs::read_to_string(configs().join("spec-vi.toml")).unwrap().replace("lo = -1.0", "lo = -1.5");
    let err = AnalysisConfig::parse(&text).unwrap_err().to_string();
    assert!(err.contains("natural bounds [-1, 1]"), "{err}");
    assert!(err.contains("c.1.2"), "{err}");
}

#[test]
fn malformed_configs_are_rejected() {
    let base = std::fs::read_to_string(configs().join("spec-vii.toml")).unwrap();
    let cases = [
        base.replace("[engine]", "[engine]\nm3 = 1"),
        base.replace("dist = \"point\", value = 0.0", "dist = \"beta\", value = 0.0"),
        base.replace("[c.1]\n2 =", "[c.1]\n1 ="),
        base.replace("m1 = 10", "m1 = 0"),
        base.replace("[engine]", "[engine]\nestimand = \"catt\""),
        base + "\n[c.4]\nx = { dist = \"point\", value = 0.0 }\n",
    ];
    for text in &cases {
        assert!(AnalysisConfig::parse(text).is_err(), "{text}");
    }
    let goal = std::fs::read_to_string(configs().join("goalpost.toml")).unwrap();
    assert!(AnalysisConfig::parse(&goal.replace(", direction = \"below\"", "")).is_err());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(mtsens(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mtsens(&["analyze", "/nonexistent.toml"]).status.code(), Some(1));
    assert_eq!(mtsens(&["simulate", "nope", "--reps", "1"]).status.code(), Some(1));
    assert_eq!(mtsens(&["simulate", "illustrative", "--strategies", "V"]).status.code(), Some(1));
    assert_eq!(mtsens(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_label_and_missing_column_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_config(dir.path(), "badlabel", "[c.1]\n7 = { dist = \"point\", value = 0.1 }", "");
    let out = mtsens(&["analyze", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("badlabel.toml") && err.contains("label 7"), "{err}");

    let text = std::fs::read_to_string(&p).unwrap().replace("[\"X1\"]", "[\"X2\"]").replace("7 =", "2 =");
    std::fs::write(&p, text).unwrap();
    let out = mtsens(&["analyze", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gps_non_convergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_config(dir.path(), "noconv", "", "");
    let text = std::fs::read_to_string(&p)
        .unwrap()
        .replace("model = \"stratified\"\ncolumns = [\"X1\"]", "model = \"multilogit\"\nridge = 0.0\nmax_iter = 1\ntol = 1e-300");
    std::fs::write(&p, text).unwrap();
    let out = mtsens(&["analyze", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn all_zero_config_reproduces_unadjusted_engine_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_config(dir.path(), "zero", "", "");
    let out = mtsens(&["analyze", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json(&dir.path().join("zero.json"));

    let (cfg, _) = AnalysisConfig::load(&p).unwrap();
    let ds = load_csv(data_path(), &cfg.schema()).unwrap();
    let engine = cfg.engine_config(&ds, Profile::Fast, 5, 1).unwrap();
    let post = run_sensitivity(&ds, &ConfoundingSpec::new(3), &engine, None).unwrap();
    for (got, want) in doc["pairs"].as_array().unwrap().iter().zip(&post.pairs) {
        // serde_json's default parser may differ from the printed value in the last ulp.
        assert!((got["mean"].as_f64().unwrap() - want.summary.mean).abs() < 1e-12);
        assert!((got["lower95"].as_f64().unwrap() - want.summary.lower).abs() < 1e-12);
        assert_eq!(got["M1"], 2);
        assert_eq!(got["seed"], 5);
    }
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("1 vs 2") && table.contains("95% interval"), "{table}");
}

#[test]
fn natural_bounds_widen_every_interval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for spec in ["vi", "vii"] {
        let cfg = configs().join(format!("spec-{spec}.toml"));
        let out = mtsens(&["analyze", cfg.to_str().unwrap(), "--out-dir", d, "--seed", "9"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (wide, zero) = (widths(&json(&dir.path().join("spec-vi.json"))), widths(&json(&dir.path().join("spec-vii.json"))));
    for (w, z) in wide.iter().zip(&zero) {
        assert!(w > z, "{wide:?} vs {zero:?}");
    }
    let out = mtsens(&["report", &format!("{d}/spec-vi.json"), &format!("{d}/spec-vii.json"), "--out-dir", d]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(String::from_utf8(out.stdout).unwrap().contains("specification (vi)"));
}

#[test]
fn seed_flag_overrides_config_and_samples_are_dumped() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let p = small_config(dir.path(), "seeded", "[c.1]\n2 = { dist = \"uniform\", lo = -0.1, hi = 0.1 }", "");
    let run = |seed: &str| {
        assert!(mtsens(&["analyze", p.to_str().unwrap(), "--out-dir", d, "--seed", seed, "--samples"]).status.success());
        std::fs::read(dir.path().join("seeded.json")).unwrap()
    };
    let a = run("11");
    assert_ne!(a, run("12"));
    assert_eq!(json(Path::new(&format!("{d}/seeded.json")))["seed"], 12);
    let samples = std::fs::read_to_string(dir.path().join("seeded.samples.csv")).unwrap();
    assert_eq!(samples.lines().next().unwrap(), "m1,m2,draw,1-2,1-3,2-3");
    assert_eq!(samples.lines().count(), 1 + 2 * 2 * 50);
}

#[test]
fn contour_origin_cell_matches_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let priors = "[c.2]\n3 = { dist = \"point\", value = -0.1 }";
    let grid = "\n[contour]\npair = [1, 2]\nc_jk = { lo = 0.0, hi = 0.0, step = 0.1 }\nc_kj = { lo = 0.0, hi = 0.0, step = 0.1 }\ncsv = \"grid.csv\"\n";
    let p = small_config(dir.path(), "origin", priors, grid);
    assert!(mtsens(&["contour", p.to_str().unwrap(), "--out-dir", d]).status.success());
    assert!(mtsens(&["analyze", p.to_str().unwrap(), "--out-dir", d]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    let est: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let doc = json(&dir.path().join("origin.json"));
    assert!((est - doc["pairs"][0]["mean"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(doc["pairs"][0]["j"], 1);
    assert_eq!(doc["pairs"][0]["k"], 2);
}

#[test]
fn contour_three_by_three_and_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let grid = "\n[contour]\npair = [1, 3]\nc_jk = { lo = -0.2, hi = 0.0, step = 0.1 }\nc_kj = { lo = 0.0, hi = 0.2, step = 0.1 }\ncsv = \"g.csv\"\n";
    let p = small_config(dir.path(), "grid", "", grid);
    assert!(mtsens(&["contour", p.to_str().unwrap(), "--out-dir", d]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "c_jk,c_kj,estimate");
    assert_eq!(lines.len(), 10);

    let fine = grid.replace("step = 0.1", "step = 0.001").replace("lo = -0.2", "lo = -1.0").replace("hi = 0.2", "hi = 1.0");
    let p = small_config(dir.path(), "fine", "", &fine);
    let out = mtsens(&["contour", p.to_str().unwrap(), "--out-dir", d]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("outcome-model fits"), "{err}");
}

#[test]
fn simulate_smoke_writes_three_pair_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = mtsens(&["simulate", "illustrative", "--reps", "2", "--strategies", "I", "--m1", "1", "--m2", "1", "--n", "400", "--out-dir", d]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("simulate-illustrative-metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[0], "I");
        assert!(f[3..7].iter().all(|v| v.parse::<f64>().unwrap().is_finite()), "{r}");
    }
    let wide = std::fs::read_to_string(dir.path().join("simulate-illustrative-table.csv")).unwrap();
    assert_eq!(wide.lines().count(), 2);
    let rep = mtsens(&["report", &format!("{d}/simulate-illustrative.json")]);
    assert!(String::from_utf8(rep.stdout).unwrap().contains("aab/rmse/cov"));
}

#[test]
fn write_data_dump_feeds_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = mtsens(&["simulate", "contextual-umc1", "--reps", "1", "--n", "300", "--m1", "1", "--m2", "1", "--strategies", "naive", "--write-data", "--out-dir", d]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("simulate-contextual-umc1-strong-balanced-data.csv");
    let header = std::fs::read_to_string(&data).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("y,a,X1,X2,X3,X5"), "{header}");
    assert!(!header.split(',').any(|c| c == "X4"));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_config(dir.path(), "det", "[c.3]\n1 = { dist = \"truncnormal\", center = 0.1, spread = 0.1, lo = 0.0, hi = 0.3 }", "");
    let mut outs = Vec::new();
    for jobs in ["1", "3", "1"] {
        let sub = dir.path().join(format!("j{}", outs.len()));
        assert!(mtsens(&["analyze", p.to_str().unwrap(), "--jobs", jobs, "--out-dir", sub.to_str().unwrap()]).status.success());
        outs.push(std::fs::read(sub.join("det.json")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn summary_table_rounds_to_two_decimals() {
    let pair = TreatmentPair { j: 1, k: 2 };
    assert_eq!(pair.swapped(), TreatmentPair { j: 2, k: 1 });
    assert_eq!(mtsens_cli::report::r2(-0.004), "0.00");
    assert_eq!(mtsens_cli::report::r2(0.125), "0.12");
    assert_eq!(mtsens_cli::report::r2(-0.156), "-0.16");
}
