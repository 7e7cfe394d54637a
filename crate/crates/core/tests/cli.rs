use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_source=12
n_source_test=4
n_target=12
n_target_test=4
source_iters=6
adapt_iters=4
heatmaps=1
";

fn rectseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rectseg"))
        .current_dir(dir)
        .args(["--config", "small.cfg"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stagewise_commands_chain() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();

    ok(&rectseg(d, &["--out", "data", "gen-data"]));
    for split in ["source", "source_test", "target", "target_test"] {
        assert!(
            d.join("data").join(split).join("manifest.txt").exists(),
            "{split}"
        );
    }
    ok(&rectseg(
        d,
        &["--out", "src", "pretrain", "--data", "data/source"],
    ));
    ok(&rectseg(
        d,
        &[
            "--out",
            "pl",
            "pseudo-label",
            "--checkpoint",
            "src/source.ckpt",
            "--data",
            "data/target",
        ],
    ));
    let s = ok(&rectseg(
        d,
        &[
            "--out",
            "ad",
            "adapt",
            "--checkpoint",
            "src/source.ckpt",
            "--data",
            "data/target",
            "--pseudo",
            "pl",
        ],
    ));
    assert!(s.contains("iterations"));
    let s = ok(&rectseg(
        d,
        &[
            "--out",
            "ev",
            "eval",
            "--checkpoint",
            "ad/adapted.ckpt",
            "--data",
            "data/target_test",
            "--beta",
            "0",
        ],
    ));
    assert!(s.contains("alpha 1 beta 0"));
    let metrics = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(metrics.starts_with("run_id,split,class_or_mIoU,value\n"));
    assert_eq!(metrics.lines().filter(|l| l.contains(",mIoU,")).count(), 1);

    let s = ok(&rectseg(
        d,
        &[
            "--out",
            "cu",
            "compare-uncertainty",
            "--checkpoint",
            "ad/adapted.ckpt",
            "--dataset",
            "data/target_test",
            "--methods",
            "kl,mse",
        ],
    ));
    assert!(s.starts_with("method,right,wrong,gap\n"));
    assert_eq!(s.lines().count(), 3);
}

#[test]
fn pipeline_sweep_and_report() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();
    ok(&rectseg(d, &["--out", "run", "pipeline"]));
    for f in [
        "source.ckpt",
        "adapted.ckpt",
        "metrics.csv",
        "history_adapt.csv",
        "manifest.txt",
        "report.txt",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(&rectseg(
        d,
        &["--out", "sw", "sweep-threshold", "--taus", "0.9,0"],
    ));
    assert!(d.join("sw/sweep.csv").exists());
    let s = ok(&rectseg(d, &["--out", "rep", "report", "run", "sw"]));
    assert!(s.lines().count() >= 2);
}

#[test]
fn errors_are_one_line_with_kind() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("small.cfg"), "base_lr=fast\n").unwrap();
    let o = rectseg(d, &["pipeline"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    std::fs::write(d.join("small.cfg"), SMALL).unwrap();
    let o = rectseg(
        d,
        &["eval", "--checkpoint", "missing.ckpt", "--data", "nowhere"],
    );
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[io]:"));
    let o = rectseg(d, &["sweep-threshold", "--taus", "0.9,x"]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[invalid-argument]:"));
}
