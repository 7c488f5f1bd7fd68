use std::fs;
use std::path::Path;
use std::process::Command;

fn sysid(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sysid"))
        .args(args)
        .current_dir(dir)
        .env_remove("SYSID_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_record(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("error.json")).unwrap()).unwrap()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[nlarx]\nnaa = 3\n").unwrap();
    let out = tmp.path().join("out");
    let o = sysid(&["train-nlarx", "--config", p(&cfg), "--output-dir", p(&out)], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let e = error_record(&out);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["exit_code"], 2);
    assert!(e["message"].as_str().unwrap().contains("naa"));
}

#[test]
fn config_for_another_task_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "task = \"benchgen\"\n").unwrap();
    let o = sysid(&["train-nlss", "--config", p(&cfg), "--output-dir", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_file_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sysid(&["train-nlarx", "--data", "nope.csv", "--output-dir", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&tmp.path().join("out"))["kind"], "data");
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sysid"))
        .args(["benchgen", "--system", "linear_first_order", "--samples", "200"])
        .current_dir(tmp.path())
        .env("SYSID_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("from-env/estimation.csv").exists());
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("from-env/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["estimation_samples"], 140);
}

#[test]
fn help_and_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sysid(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(sysid(&["train-nlarx", "--bogus"], tmp.path()).status.code(), Some(2));
}

#[test]
fn train_then_simulate_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(sysid(&["benchgen", "--system", "narx_toy", "--samples", "400", "--output-dir", "b"], d).status.success());
    let cfg = d.join("nlarx.toml");
    fs::write(&cfg, "[nlarx]\nregressor_names = [\"y1(t-1)\", \"u1(t-1)\", \"y1(t-1)*u1(t-2)\"]\n").unwrap();
    let o = sysid(
        &["train-nlarx", "--config", p(&cfg), "--data", "b/estimation.csv", "--validation", "b/validation.csv", "--output-dir", "m"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = fs::read_to_string(d.join("m/fit.csv")).unwrap();
    let val: f64 = fit
        .lines()
        .find(|l| l.starts_with("validation"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(val > 85.0, "{fit}");
    assert!(fs::read_to_string(d.join("m/compare.svg")).unwrap().starts_with("<svg"));

    let o = sysid(&["simulate", "--model", "m/model.json", "--data", "b/validation.csv", "--output-dir", "s"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sim = fs::read_to_string(d.join("s/simulation.csv")).unwrap();
    assert!(sim.starts_with("t,y1\n"));

    let o = sysid(&["compare", "--model", "m/model.json", "--validation", "b/validation.csv", "--output-dir", "c"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("c/report.json")).unwrap()).unwrap();
    assert_eq!(rep["models"][0]["kind"], "nlarx");
    assert_eq!(rep["models"][0]["active_regressors"].as_array().unwrap().len(), 3);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(sysid(&["benchgen", "--system", "narx_toy", "--samples", "300", "--seed", "4", "--output-dir", "a"], d).status.success());
    let o = sysid(&["benchgen", "--config", "a/resolved_config.toml", "--output-dir", "a"], d);
    assert!(o.status.success());
    let first = fs::read(d.join("a/estimation.csv")).unwrap();
    assert!(sysid(&["benchgen", "--system", "narx_toy", "--samples", "300", "--seed", "4", "--output-dir", "b"], d).status.success());
    assert_eq!(first, fs::read(d.join("b/estimation.csv")).unwrap());
}
