use std::path::Path;
use std::process::{Command, Output};

fn lcgnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcgnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("LCGNET_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn bench_ops_cg_single_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcgnet(
        &["bench-ops", "--detector", "cg", "--nt", "32", "--iters", "1"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "8648,2");
}

#[test]
fn bench_ops_measured_equals_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    for det in ["cg", "lcgnet"] {
        for nt in ["4", "8"] {
            let closed = lcgnet(
                &["bench-ops", "--detector", det, "--nt", nt, "--iters", "3"],
                dir.path(),
            );
            let measured = lcgnet(
                &["bench-ops", "--detector", det, "--nt", nt, "--iters", "3", "--measured"],
                dir.path(),
            );
            assert!(closed.status.success() && measured.status.success());
            assert_eq!(stdout(&closed), stdout(&measured), "{det} nt={nt}");
        }
    }
}

#[test]
fn empty_snr_list_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcgnet(&["eval-ber", "--snr", ""], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lcgnet(&["frobnicate"], dir.path()).status.code(), Some(2));
    let o = lcgnet(&["bench-ops", "--detector", "cg", "--nt", "4", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn runtime_error_is_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcgnet(&["bench-ops", "--detector", "sdr", "--nt", "4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sdr"));
}

#[test]
fn hardening_rows_increase() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcgnet(&["hardening", "--nt", "32", "--nr", "32,64,128"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("nt,nr,channel,draws,mean_ratio"));
    let ratios: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 3);
    assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
}

#[test]
fn eval_ber_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "eval-ber",
        "--nt",
        "2",
        "--nr",
        "4",
        "--snr",
        "0,6",
        "--detectors",
        "zf,lmmse,cg:2",
        "--max-symbols",
        "4000",
        "--seed",
        "11",
    ];
    let a = lcgnet(&args, dir.path());
    let b = lcgnet(&args, dir.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.starts_with("detector,snr_db,trials,"));
    assert_eq!(text.lines().count(), 1 + 6);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("ops.cfg"),
        "# closed-form count\ndetector = cg\nnt = 32\niters = 1\n",
    )
    .unwrap();
    let o = lcgnet(&["bench-ops", "--config", "ops.cfg"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "8648,2");
    let o = lcgnet(&["bench-ops", "--config", "ops.cfg", "--nt", "4"], dir.path());
    assert_eq!(stdout(&o).trim(), format!("{},2", 8 * 16 + 14 * 4 + 8));
}

#[test]
fn train_quantize_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = Command::new(env!("CARGO_BIN_EXE_lcgnet"))
        .args([
            "train",
            "--nt",
            "2",
            "--nr",
            "4",
            "--layers",
            "2",
            "--samples-per-stage",
            "60",
            "--batch-size",
            "20",
            "--max-epochs",
            "2",
            "--schedule",
            "20,10",
            "--checkpoint",
            "ckpt/model.json",
        ])
        .current_dir(p)
        .env("LCGNET_OUT_DIR", "artifacts")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("event").is_some());
    }
    assert!(p.join("artifacts/model.json").exists());
    assert!(p.join("ckpt/model.json").exists());

    let o = lcgnet(
        &[
            "quantize",
            "--nt",
            "2",
            "--nr",
            "4",
            "--model",
            "artifacts/model.json",
            "--samples",
            "60",
            "--batch-size",
            "20",
            "--out",
            "q/model.json",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("q/model.quantizer.json").exists());

    let o = lcgnet(
        &[
            "eval-ber",
            "--nt",
            "2",
            "--nr",
            "4",
            "--snr",
            "10",
            "--detectors",
            "model:artifacts/model.json,model:q/model.json",
            "--max-symbols",
            "2000",
            "--out",
            "ber.csv",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(p.join("ber.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = lcgnet(
        &[
            "eval-nmse",
            "--nt",
            "2",
            "--nr",
            "4",
            "--snr",
            "10",
            "--detector",
            "model:q/model.json",
            "--trials",
            "50",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1 + 2);
}

#[test]
fn gen_data_writes_payload_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcgnet(
        &[
            "gen-data",
            "--nt",
            "2",
            "--nr",
            "4",
            "--snr",
            "5,10",
            "--count",
            "8",
            "--out",
            "d/set.bin",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("d/set.bin").exists());
    assert!(dir.path().join("d/set.bin.json").exists());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["meta"]["count"], 8);
}

#[test]
fn missing_model_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcgnet(
        &[
            "eval-ber",
            "--nt",
            "2",
            "--nr",
            "4",
            "--snr",
            "5",
            "--detectors",
            "model:nope.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}
