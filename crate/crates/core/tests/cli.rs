use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iuq"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

const MINIMAL: &str = r#"
name = "cli"
seed = 5
methods = ["circe-bias"]
[model]
kind = "affine"
sensitivity = [[1.0, 0.3], [0.2, 1.0]]
[truth]
mean = [0.0, 0.0]
var = [0.04, 0.04]
[data]
noise_sd = [0.01]
n_designs = 20
design_range = [[0.0, 1.0]]
[fuq]
n_samples = 300
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn bundled_affine_circe_scenario_runs() {
    let out = tempfile::tempdir().unwrap();
    let st = bin().args(["report", "--config"]).arg(scenario("affine-circe.toml")).arg("--out-dir").arg(out.path()).status().unwrap();
    assert!(st.success());
    assert!(out.path().join("report.json").is_file());
    assert!(out.path().join("bands.csv").is_file());
}

#[test]
fn missing_noise_spec_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &MINIMAL.replace("noise_sd = [0.01]\n", ""));
    let out = bin().args(["report", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_sd"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &(MINIMAL.to_string() + "[envelope]\ntarget = 0.9\nwidth = 3\n"));
    let out = bin().args(["report", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn method_failure_exits_3() {
    // Pseudo-CDF of a decreasing-then-increasing response is not monotone.
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("sensitivity = [[1.0, 0.3], [0.2, 1.0]]", "sensitivity = [[1.0, 0.3], [-1.0, 1.0]]")
        + "[dipe]\ngrids = [{ index = 0, lo = -3.0, hi = 3.0, n = 41 }]\n";
    let cfg = write_config(dir.path(), &text);
    let out = bin().args(["iuq", "--method", "dipe", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn same_seed_gives_identical_reports_and_seed_flag_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let run = |sub: &str, seed: Option<&str>| {
        let out = dir.path().join(sub);
        let mut c = bin();
        c.args(["report", "--jobs", "2", "--config"]).arg(&cfg).arg("--out-dir").arg(&out);
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        assert!(c.status().unwrap().success());
        std::fs::read(out.join("report.json")).unwrap()
    };
    let a = run("a", None);
    let b = run("b", None);
    assert_eq!(a, b);
    let c = run("c", Some("6"));
    assert_ne!(a, c);
}

#[test]
fn subcommands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let go = |args: &[&str]| {
        let st = bin().args(args).arg("--config").arg(&cfg).arg("--out-dir").arg(dir.path()).status().unwrap();
        assert!(st.success(), "{args:?}");
    };
    go(&["generate"]);
    go(&["iuq", "--method", "circe"]);
    go(&["fuq"]);
    go(&["envelope"]);
    for f in ["experiments.csv", "iuq-circe.json", "bands.csv", "envelope.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("experiments.csv")).unwrap();
    assert!(csv.starts_with("design_label,time_s,qoi_label,value,noise_sd\n"));
}

#[test]
fn generated_csv_feeds_back_in() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    assert!(bin().args(["generate", "--config"]).arg(&cfg).arg("--out-dir").arg(dir.path()).status().unwrap().success());
    let text = MINIMAL.replace("[data]\n", "[data]\ncsv = \"experiments.csv\"\n");
    let cfg2 = dir.path().join("from-csv.toml");
    std::fs::write(&cfg2, text).unwrap();
    let out = dir.path().join("csv-run");
    assert!(bin().args(["report", "--config"]).arg(&cfg2).arg("--out-dir").arg(&out).status().unwrap().success());
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["generation"]["data_source"], "csv");
    assert!(r["baseline"].is_null());
}
