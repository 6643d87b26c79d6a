use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn mossaw(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mossaw")).arg("--out-dir").arg(out).args(args).output().unwrap()
}

fn error_doc(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(&path, r#"{"synth": {"mod_indices": [0.5, 1.2, 2.0, 3.0, 4.5]}, "idt": {"sweep_points": 201}}"#).unwrap();
    path
}

#[test]
fn dry_run_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = mossaw(&["--seed", "7", "--dry-run", "synth"], dir.path());
    assert!(o.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["synth"]["mod_indices"].as_array().unwrap().len(), 8);
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "dry run wrote files");
}

#[test]
fn shipped_default_config_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let builtin = mossaw(&["--dry-run", "pipeline"], dir.path());
    let path = fixtures().join("default.json");
    let shipped = mossaw(&["--config", path.to_str().unwrap(), "--dry-run", "pipeline"], dir.path());
    assert_eq!(builtin.stdout, shipped.stdout);
    assert_eq!(builtin.stdout, fs::read(path).unwrap());
}

#[test]
fn pipeline_reports_displacement_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = mossaw(&["--config", cfg.to_str().unwrap(), "pipeline"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let last = stdout.lines().last().unwrap();
    assert!(last.starts_with("C_perp = "), "{last}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("globalfit/report.json")).unwrap()).unwrap();
    for key in ["m", "m_uncertainty", "alpha", "alpha_uncertainty"] {
        assert!(report["fit"][key].as_f64().unwrap().is_finite(), "{key}");
    }
    let c = report["c_perp"]["value"].as_f64().unwrap();
    assert!((c - 1.7e-10).abs() < 0.05e-10, "{c}");
    assert!(report["c_perp"]["uncertainty"].as_f64().unwrap() > 0.0);

    // Later stages alone, from the files on disk.
    let again = mossaw(&["--config", cfg.to_str().unwrap(), "globalfit"], &out);
    assert!(again.status.success());
    assert_eq!(String::from_utf8(again.stdout).unwrap().trim(), last);
}

#[test]
fn stages_match_pipeline_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(mossaw(&["--config", cfg, "pipeline"], &a).status.success());
    for stage in ["synth", "fit", "calibrate", "extract", "globalfit", "idt-model", "idt-fit"] {
        let o = mossaw(&["--config", cfg, stage], &b);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["extract/powers.csv", "globalfit/report.json", "idt/fit.json", "calib/drift.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bundled_traces_give_reference_transducer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("idt_fixture.json");
    let o = mossaw(&["--config", cfg.to_str().unwrap(), "idt-fit"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("idt/fit.json")).unwrap()).unwrap();
    let eta = rep["eta_alpha"]["eta"].as_f64().unwrap();
    let alpha = rep["eta_alpha"]["alpha"].as_f64().unwrap();
    assert!((eta - 0.35).abs() < 0.01, "{eta}");
    assert!((alpha - 0.34).abs() < 0.01, "{alpha}");
}

#[test]
fn truncated_spectrum_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("zero_power.json");
    let cfg = cfg.to_str().unwrap();
    assert!(mossaw(&["--config", cfg, "synth"], dir.path()).status.success());
    let path = dir.path().join("spectra/p0_dec.csv");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    let o = mossaw(&["--config", cfg, "fit"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let doc = error_doc(&o);
    assert_eq!(doc["exit_code"], 2);
    assert!(doc["message"].as_str().unwrap().contains("p0_dec.csv"), "{doc}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"scan": {"n_chanels": 1024}}"#).unwrap();
    let o = mossaw(&["--config", path.to_str().unwrap(), "synth"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_doc(&o)["error"], "config");
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"modulation": {"alpha": 1.5}}"#).unwrap();
    let o = mossaw(&["--config", path.to_str().unwrap(), "--dry-run", "synth"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = mossaw(&["extract"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_doc(&o)["error"], "io");
    let o = mossaw(&["--config", "/nonexistent/run.json", "synth"], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn too_few_powers_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.json");
    fs::write(&path, r#"{"synth": {"mod_indices": [1.0, 2.0]}}"#).unwrap();
    let cfg = path.to_str().unwrap();
    for stage in ["synth", "fit", "calibrate", "extract"] {
        assert!(mossaw(&["--config", cfg, stage], dir.path()).status.success(), "{stage}");
    }
    let o = mossaw(&["--config", cfg, "globalfit"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_doc(&o)["error"], "invalid_input");
}
