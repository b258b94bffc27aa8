use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kernelscope::dynamics::ConstantKernelModel;
use kernelscope::harness::{self, ExperimentConfig, Layout, ReportBundle};
use kernelscope::io;

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn kernelscope(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kernelscope"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = kernelscope(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn manifest(out: &Path) -> ReportBundle {
    serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

fn train_toy(out: &Path) {
    ok(out, &["train", "--config", toy_config().to_str().unwrap()]);
}

#[test]
fn train_then_report_lists_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path());
    ok(dir.path(), &["report"]);
    let m = manifest(dir.path());
    let ckpts = m.files.iter().filter(|f| f.path.starts_with("checkpoints/")).count();
    assert!(ckpts >= 2, "{ckpts} checkpoints");
    assert!(m.file("trace.csv").is_some());
    assert_eq!(m.incomplete().count(), 0);
    let cfg = ExperimentConfig::load(&toy_config()).unwrap();
    assert_eq!(m.config_hash.as_deref(), Some(cfg.hash().as_str()));
}

#[test]
fn spectrum_shapes_follow_n() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&toy_config()).unwrap();
    cfg.dataset.n = 100;
    let cfg_path = dir.path().join("n100.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out = dir.path().join("run");
    ok(&out, &["train", "--config", cfg_path.to_str().unwrap(), "--checkpoints", "0,10"]);
    ok(&out, &["spectrum"]);

    let layout = Layout::new(&out);
    assert_eq!(layout.spectrum_steps().unwrap(), vec![0, 10]);
    let g = io::read_matrix(&layout.gramian(10)).unwrap();
    assert_eq!((g.nrows(), g.ncols()), (100, 100));
    let spec = io::read_spectrum(&layout.spectrum(10)).unwrap();
    assert_eq!(spec.eigenvalues.len(), 100);
    let sidecar: serde_json::Value =
        serde_json::from_slice(&fs::read(io::sidecar_path(&layout.spectrum(10))).unwrap()).unwrap();
    assert_eq!(sidecar["N"], 100);
    assert_eq!(sidecar["eigenvalues"].as_array().unwrap().len(), 100);
}

#[test]
fn predict_round_trips_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path());
    ok(dir.path(), &["spectrum"]);
    ok(dir.path(), &["predict", "--checkpoints", "5"]);

    let layout = Layout::new(dir.path());
    let exp = harness::load_experiment(&layout, None).unwrap();
    let spec = harness::load_spectra(&layout, Some(&[5])).unwrap().remove(0);
    let cp = exp.trace.require(5).unwrap();
    let ck = ConstantKernelModel::new(spec, cp.outputs.clone(), cp.residual.clone(), cp.delta).unwrap();
    let train = io::read_matrix(&layout.predict(5, "train.ksmat")).unwrap();
    let steps = fs::read_to_string(layout.predict(5, "steps.csv")).unwrap();
    let steps: Vec<u64> = steps.lines().skip(1).map(|l| l.parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 5]);
    for (row, &t) in steps.iter().enumerate() {
        let expected = ck.closed_form_train(t).0;
        for j in 0..expected.len() {
            assert_eq!(train[(row, j)], expected[j]);
        }
    }
    let grad = io::read_matrix(&layout.predict(5, "test_gradient.ksmat")).unwrap();
    let eig = io::read_matrix(&layout.predict(5, "test_eigenfunction.ksmat")).unwrap();
    assert_eq!((grad.nrows(), grad.ncols()), (3, 10));
    assert_eq!(eig.shape(), grad.shape());
}

#[test]
fn full_pipeline_is_deterministic() {
    let run = |out: &Path| {
        train_toy(out);
        for args in [
            &["spectrum"][..],
            &["align"],
            &["dynamics-check", "--constant-kernel", "--dg"],
            &["fourier", "--residual"],
            &["predict"],
            &["report"],
        ] {
            ok(out, args);
        }
        fs::read(out.join("manifest.json")).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run(a.path());
    assert_eq!(ma, run(b.path()));

    let m = manifest(a.path());
    for expected in [
        "analysis/alignment.csv",
        "analysis/preservation.csv",
        "analysis/trends.csv",
        "dynamics/first_order.csv",
        "dynamics/dg_order.csv",
        "dynamics/modes_t00000000.csv",
        "fourier/mode0001_t00000010.pgm",
        "fourier/residual_t00000010.ksmat",
        "predict/t00000000/test_eigenfunction.ksmat",
    ] {
        assert!(m.file(expected).is_some(), "missing {expected}");
    }
    let header = fs::read_to_string(a.path().join("analysis/alignment.csv")).unwrap();
    assert!(header.starts_with("t,target,k,energy\n"));
}

#[test]
fn first_order_csv_is_written_for_companion_pairs() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path());
    ok(dir.path(), &["dynamics-check"]);
    let text = fs::read_to_string(dir.path().join("dynamics/first_order.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,error,cos_alpha"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    // Checkpoints 0 and 5 have companions; 10 is the last step.
    assert_eq!(rows.iter().map(|r| r[0] as u64).collect::<Vec<_>>(), vec![0, 5]);
    for r in rows {
        assert!(r[2] > 0.99, "cos alpha {}", r[2]);
    }
}

#[test]
fn failures_print_one_parsable_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = kernelscope(dir.path(), &["train"]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: kind=config message=\""), "{err}");

    let o = kernelscope(&dir.path().join("empty"), &["spectrum", "--config", toy_config().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error: kind=missing_checkpoint"), "{err}");
}

#[test]
fn interrupted_writes_are_marked_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path());
    fs::create_dir_all(dir.path().join("spectra")).unwrap();
    fs::write(dir.path().join("spectra/eig_t00000005.ksmat.partial"), b"trunc").unwrap();
    // A failing command still refreshes the manifest.
    let o = kernelscope(dir.path(), &["align"]);
    assert!(!o.status.success());
    let m = manifest(dir.path());
    let partial = m.file("spectra/eig_t00000005.ksmat.partial").expect("listed");
    assert!(!partial.complete);
    assert_eq!(m.incomplete().count(), 1);
}
