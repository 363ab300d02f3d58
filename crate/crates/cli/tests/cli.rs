use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ugcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ugcl")).args(args).output().unwrap()
}

fn gen(dir: &Path) -> String {
    let data = dir.join("sbm");
    let out = ugcl(&["gen-sbm", "--out", data.to_str().unwrap(), "--n-per-block", "20", "--dim", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data.to_str().unwrap().to_string()
}

#[test]
fn generate_then_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let config = dir.path().join("quick.cfg");
    fs::write(&config, "# quick\nimputer_hidden = 8\npe_hidden = 16\nppnp_hidden = 8\nmax_epochs = 30\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = ugcl(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        &data,
        "--epochs",
        "5",
        "--seeds",
        "0,1",
        "--out",
        out_dir.to_str().unwrap(),
        "--dump-embeddings",
        "--set",
        "patience=10",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("ugcl") && stdout.contains("gcn"), "{stdout}");
    for file in ["config.txt", "runs.csv", "summary.json", "loss_r0_s1.csv", "embeddings_r0_s0.tsv", "curve_gcn_r0_s1.csv"] {
        assert!(out_dir.join(file).exists(), "{file}");
    }
    let saved = fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(saved.contains("patience = 10") && saved.contains("epochs = 5"), "{saved}");
}

#[test]
fn baseline_only_skips_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let out_dir = dir.path().join("out");
    let out = ugcl(&["run", "--dataset", &data, "--seeds", "0", "--baseline-only", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    assert!(runs.contains(",gcn,") && !runs.contains(",ugcl,"), "{runs}");
    assert!(!out_dir.join("loss_r0_s0.csv").exists());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = ugcl(&["run", "--dataset", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    assert!(!ugcl(&["run", "--alpha", "1.5"]).status.success());
    assert!(!ugcl(&["run", "--set", "nonsense"]).status.success());
    assert!(!ugcl(&["run", "--no-such-flag"]).status.success());
    assert!(!ugcl(&[]).status.success());
}
