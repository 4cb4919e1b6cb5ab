use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn absolutenet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_absolutenet"))
        .current_dir(dir)
        .env_remove("FNIRS_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = absolutenet(dir, args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: impl AsRef<Path>) -> String {
    let path = path.as_ref();
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn first_line(path: impl AsRef<Path>) -> String {
    read(path).lines().next().unwrap_or_default().to_string()
}

/// A small easy dataset in a fresh directory.
fn workspace(per_class: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let n = per_class.to_string();
    ok(
        dir.path(),
        &[
            "gen",
            "--seed",
            "3",
            "--preset",
            "easy",
            "--trials-per-class",
            &n,
            "-o",
            "data.fnid",
        ],
    );
    let data = dir.path().join("data.fnid");
    (dir, data)
}

const QUICK: &[&str] = &["--epochs", "1", "--retrain-epochs", "1"];

#[test]
fn verify_arch_matches_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["verify-arch"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("49088") || text.contains("49,088"), "{text}");
    assert!(dir.path().join("runs/verify-arch/arch.json").exists());
    assert!(dir.path().join("runs/verify-arch/manifest.json").exists());
}

#[test]
fn verify_arch_reports_pooling_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let out = absolutenet(dir.path(), &["verify-arch", "--pool-stride", "25"]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Average Pooling 2D"), "{text}");
}

#[test]
fn verify_arch_single_has_no_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["verify-arch", "--variant", "single"]);
    assert!(!out.stdout.is_empty());
}

#[test]
fn gen_is_deterministic_and_honours_the_seed_variable() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen", "--seed", "5", "--trials-per-class", "10"];
    ok(dir.path(), &[&args[..], &["-o", "a.fnid"]].concat());
    ok(dir.path(), &[&args[..], &["-o", "b.fnid"]].concat());
    let a = std::fs::read(dir.path().join("a.fnid")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.fnid")).unwrap());
    assert!(dir.path().join("a.fnid.meta.json").exists());
    assert!(dir.path().join("a.fnid.manifest.json").exists());

    let env = Command::new(env!("CARGO_BIN_EXE_absolutenet"))
        .current_dir(dir.path())
        .env("FNIRS_SEED", "5")
        .args(["gen", "--trials-per-class", "10", "-o", "c.fnid"])
        .status()
        .unwrap();
    assert!(env.success());
    assert_eq!(a, std::fs::read(dir.path().join("c.fnid")).unwrap());
    ok(
        dir.path(),
        &["gen", "--seed", "6", "--trials-per-class", "10", "-o", "d.fnid"],
    );
    assert_ne!(a, std::fs::read(dir.path().join("d.fnid")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        code(&absolutenet(p, &["gen", "--trials-per-class", "0", "-o", "x.fnid"])),
        2
    );
    assert_eq!(code(&absolutenet(p, &["verify-arch", "--no-such-flag"])), 2);
    assert_eq!(code(&absolutenet(p, &["cv", "missing.fnid"])), 3);
    assert_eq!(code(&absolutenet(p, &["ga", "missing.fnid", "--pop", "1"])), 2);
    assert_eq!(code(&absolutenet(p, &["cv", "missing.fnid", "--batch-size", "1"])), 2);
    std::fs::write(p.join("junk.fnid"), b"not a dataset").unwrap();
    assert_eq!(code(&absolutenet(p, &["cv", "junk.fnid"])), 3);
    assert_eq!(code(&absolutenet(p, &["--help"])), 0);
}

#[test]
fn gradcheck_point_and_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gradcheck", "--op", "log_abs", "--at", "0.0"]);
    assert_eq!(
        read(dir.path().join("runs/gradcheck/gradient.csv")),
        "op,at,gradient\nlog_abs,0,0\n"
    );

    let out = absolutenet(dir.path(), &["gradcheck", "--op", "matmul", "--tolerance", "1e-12"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path().join("runs/gradcheck/gradcheck.csv"));
    assert_eq!(
        csv.lines().next().unwrap(),
        "case,kind,coords,straddled,max_rel_error,max_abs_error,pass"
    );
    assert!(csv.lines().nth(1).unwrap().ends_with(",false"), "{csv}");
}

#[test]
fn cv_outputs_and_determinism() {
    let (dir, data) = workspace(15);
    let data = data.to_str().unwrap();
    let p = dir.path();
    let run = |out: &str| {
        let stdout = ok(p, &[&["cv", data, "--seed", "1", "--out", out][..], QUICK].concat()).stdout;
        String::from_utf8(stdout).unwrap()
    };
    let text = run("a");
    assert!(text.contains("accuracy mean ± std:"), "{text}");
    run("b");
    assert_eq!(
        first_line(p.join("a/folds.csv")),
        "fold,train,val,test,selected_epoch,best_val_loss,tp,fp,tn,fn,accuracy,sensitivity,specificity"
    );
    assert_eq!(
        first_line(p.join("a/epochs.csv")),
        "fold,phase,epoch,train_loss,train_accuracy,val_loss,val_accuracy"
    );
    assert_eq!(read(p.join("a/folds.csv")).lines().count(), 6);
    for f in ["folds.csv", "epochs.csv", "summary.txt"] {
        assert_eq!(read(p.join("a").join(f)), read(p.join("b").join(f)), "{f}");
    }
}

#[test]
fn single_chromophore_input_uses_fourteen_channels() {
    let (dir, data) = workspace(10);
    let data = data.to_str().unwrap();
    for input in ["hbo2", "hbr"] {
        let args = [
            &["cv", data, "--input", input, "--max-folds", "1", "--out", input][..],
            QUICK,
        ]
        .concat();
        ok(dir.path(), &args);
        let report: serde_json::Value = serde_json::from_str(&read(dir.path().join(input).join("cv.json"))).unwrap();
        assert_eq!(report["model"]["input_channels"], 14);
        assert_eq!(report["model"]["spatial_kernel"], 14);
    }
}

#[test]
fn replay_reproduces_outputs() {
    let (dir, data) = workspace(10);
    let p = dir.path();
    let args = [
        &[
            "--threads",
            "1",
            "train",
            data.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            "t",
        ][..],
        QUICK,
    ]
    .concat();
    ok(p, &args);
    let params = std::fs::read(p.join("t/model.params")).unwrap();
    let epochs = read(p.join("t/epochs.csv"));
    std::fs::remove_file(p.join("t/model.params")).unwrap();
    // The seed variable must not override the recorded one.
    let status = Command::new(env!("CARGO_BIN_EXE_absolutenet"))
        .current_dir(p)
        .env("FNIRS_SEED", "123")
        .args(["replay", "t/manifest.json"])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(params, std::fs::read(p.join("t/model.params")).unwrap());
    assert_eq!(epochs, read(p.join("t/epochs.csv")));
}

#[test]
fn ga_best_genome_reloads_into_cv() {
    let (dir, data) = workspace(10);
    let data = data.to_str().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "--threads",
            "1",
            "ga",
            data,
            "--pop",
            "3",
            "--gens",
            "2",
            "--fitness-epochs",
            "1",
            "--out",
            "ga",
        ],
    );
    assert_eq!(
        first_line(p.join("ga/ga_log.csv")),
        "generation,index,learning_rate,temporal_kernel,separable_kernel,pool_size,pool_stride,fitness,seed"
    );
    let best = read(p.join("ga/best.toml"));
    let table: toml::Table = best.parse().unwrap();
    let ga: serde_json::Value = serde_json::from_str(&read(p.join("ga/ga.json"))).unwrap();
    assert_eq!(
        table["model"]["pool_size"].as_integer().unwrap(),
        ga["best"]["pool_size"].as_i64().unwrap()
    );
    assert_eq!(
        table["train"]["learning_rate"].as_float().unwrap(),
        ga["best"]["learning_rate"].as_f64().unwrap()
    );

    let args = [
        &[
            "cv",
            data,
            "--config-override",
            "ga/best.toml",
            "--max-folds",
            "1",
            "--out",
            "cv",
        ][..],
        QUICK,
    ]
    .concat();
    ok(p, &args);
    let manifest: serde_json::Value = serde_json::from_str(&read(p.join("cv/manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["model"]["pool_size"], ga["best"]["pool_size"]);
    assert_eq!(
        manifest["config"]["train"]["learning_rate"],
        ga["best"]["learning_rate"]
    );
}

#[test]
fn ablation_table_and_full_row_match_cv() {
    let (dir, data) = workspace(10);
    let data = data.to_str().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            &["ablate", data, "--seed", "2", "--max-folds", "1", "--out", "ab"][..],
            QUICK,
        ]
        .concat(),
    );
    ok(
        p,
        &[
            &["cv", data, "--seed", "2", "--max-folds", "1", "--out", "cv"][..],
            QUICK,
        ]
        .concat(),
    );
    let table = read(p.join("ab/ablation.csv"));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(
        rows[0],
        "variant,trainable_params,closed_form_params,folds,accuracy_mean,accuracy_std,sensitivity_mean,sensitivity_std,specificity_mean,specificity_std"
    );
    assert_eq!(rows.len(), 6);
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[1], cells[2], "{row}");
    }
    let full: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(full[0], "full");
    let cv = read(p.join("cv/folds.csv"));
    let fold: Vec<&str> = cv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(full[4], fold[10]);
    assert_eq!(full[6], fold[11]);
    assert_eq!(full[8], fold[12]);
}

#[test]
fn config_file_and_override_merge() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("base.toml"), "seed = 4\n[data]\ntrials_per_class = 7\n").unwrap();
    std::fs::write(p.join("over.toml"), "[data]\ntrials_per_class = 9\n").unwrap();
    ok(
        p,
        &[
            "--config",
            "base.toml",
            "--config-override",
            "over.toml",
            "gen",
            "-o",
            "x.fnid",
        ],
    );
    let manifest: serde_json::Value = serde_json::from_str(&read(p.join("x.fnid.manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["data"]["trials_per_class"], 9);

    std::fs::write(p.join("bad.toml"), "[data]\nno_such_key = 1\n").unwrap();
    assert_eq!(
        code(&absolutenet(p, &["--config", "bad.toml", "gen", "-o", "y.fnid"])),
        2
    );
}
