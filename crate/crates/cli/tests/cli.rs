//! End-to-end runs of the `safe-sim` binary: generate data, train a tiny
//! model, evaluate, sweep, reconstruct, and check command-line error paths.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safe-sim"))
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed ({}):\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_tiny_configs(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = dir.join("data.spec");
    fs::write(&spec, "count = 24\nheight = 16\nwidth = 16\nseed = 9\n").unwrap();
    let config = dir.join("train.conf");
    fs::write(
        &config,
        "seed = 5\nbatch_size = 8\npatience = 3\nmax_epochs = 2\nbase_width = 4\n",
    )
    .unwrap();
    (spec, config)
}

struct Trained {
    data_dir: PathBuf,
    out_dir: PathBuf,
}

fn gen_and_train(root: &Path, strategy: &str) -> Trained {
    let (spec, config) = write_tiny_configs(root);
    let data_dir = root.join("data");
    let out_dir = root.join(format!("run_s{strategy}"));
    ok(&bin()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data_dir)
        .output()
        .unwrap());
    ok(&bin()
        .args(["train", "--strategy", strategy, "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data_dir)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap());
    Trained { data_dir, out_dir }
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (spec, _) = write_tiny_configs(tmp.path());
    let d1 = tmp.path().join("a");
    let d2 = tmp.path().join("b");
    for d in [&d1, &d2] {
        ok(&bin().args(["gen-data", "--spec"]).arg(&spec).arg("--out").arg(d).output().unwrap());
    }
    let names: Vec<_> = {
        let mut v: Vec<_> = fs::read_dir(&d1)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names.len(), 24);
    assert_eq!(names[0], "img_00000.ppm");
    for n in &names {
        assert_eq!(
            fs::read(d1.join(n)).unwrap(),
            fs::read(d2.join(n)).unwrap(),
            "{n:?} differs between runs"
        );
    }
}

#[test]
fn train_eval_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let t = gen_and_train(tmp.path(), "2");

    for f in ["stage_a.ckpt", "final.ckpt", "report_stage_a.txt", "report_stage_b.txt"] {
        assert!(t.out_dir.join(f).exists(), "missing {f}");
    }
    let test_dir = t.out_dir.join("test");
    assert!(fs::read_dir(&test_dir).unwrap().count() > 0);

    // eval with --trials 3: every CSV row reports trials = 3
    let csv = tmp.path().join("eval.csv");
    let stdout = ok(&bin()
        .args(["eval", "--checkpoint"])
        .arg(t.out_dir.join("final.ckpt"))
        .arg("--data")
        .arg(&test_dir)
        .args(["--channel", "awgn", "--snrs", "0,10", "--trans", "2", "--trials", "3", "--seed", "1", "--csv"])
        .arg(&csv)
        .output()
        .unwrap());
    assert!(stdout.contains("csv written"));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,trainX,transY,channel,snr_db,mean_psnr_db,std_psnr_db,trials"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.starts_with("2,2,2,awgn,"), "{r}");
        assert!(r.ends_with(",3"), "{r}");
    }

    // identical invocation -> byte-identical CSV
    let csv2 = tmp.path().join("eval2.csv");
    ok(&bin()
        .args(["eval", "--checkpoint"])
        .arg(t.out_dir.join("final.ckpt"))
        .arg("--data")
        .arg(&test_dir)
        .args(["--channel", "awgn", "--snrs", "0,10", "--trans", "2", "--trials", "3", "--seed", "1", "--csv"])
        .arg(&csv2)
        .output()
        .unwrap());
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&csv2).unwrap());
}

#[test]
fn eval_trans1_on_final_equals_stage_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let t = gen_and_train(tmp.path(), "2");
    let test_dir = t.out_dir.join("test");
    let mut csvs = Vec::new();
    for ckpt in ["final.ckpt", "stage_a.ckpt"] {
        let csv = tmp.path().join(format!("{ckpt}.csv"));
        ok(&bin()
            .args(["eval", "--checkpoint"])
            .arg(t.out_dir.join(ckpt))
            .arg("--data")
            .arg(&test_dir)
            .args(["--snrs", "5,15", "--trans", "1", "--trials", "2", "--seed", "3", "--csv"])
            .arg(&csv)
            .output()
            .unwrap());
        csvs.push(fs::read(&csv).unwrap());
    }
    assert_eq!(csvs[0], csvs[1], "level-1 path changed across stage B");
}

#[test]
fn training_is_reproducible_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_and_train(tmp.path(), "2");
    let again = tmp.path().join("again");
    fs::create_dir_all(&again).unwrap();
    let b = gen_and_train(&again, "2");
    assert_eq!(
        fs::read(a.out_dir.join("final.ckpt")).unwrap(),
        fs::read(b.out_dir.join("final.ckpt")).unwrap(),
        "checkpoints differ between identical runs"
    );
    assert_eq!(
        fs::read(a.out_dir.join("stage_a.ckpt")).unwrap(),
        fs::read(b.out_dir.join("stage_a.ckpt")).unwrap()
    );
}

#[test]
fn sweep_covers_the_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let t = gen_and_train(tmp.path(), "2");
    let csv = tmp.path().join("sweep.csv");
    ok(&bin()
        .args(["sweep", "--checkpoint"])
        .arg(t.out_dir.join("final.ckpt"))
        .arg("--data")
        .arg(t.out_dir.join("test"))
        .args(["--snrs", "0,10", "--trials", "2", "--seed", "4", "--csv"])
        .arg(&csv)
        .output()
        .unwrap());
    let text = fs::read_to_string(&csv).unwrap();
    let cells: Vec<(&str, &str)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1], f[2])
        })
        .collect();
    assert_eq!(cells.iter().filter(|c| **c == ("1", "1")).count(), 2);
    assert_eq!(cells.iter().filter(|c| **c == ("2", "1")).count(), 2);
    assert_eq!(cells.iter().filter(|c| **c == ("2", "2")).count(), 2);
}

#[test]
fn reconstruct_writes_a_valid_image() {
    let tmp = tempfile::tempdir().unwrap();
    let t = gen_and_train(tmp.path(), "2");
    let input = t.data_dir.join("img_00000.ppm");
    let out = tmp.path().join("recon.ppm");
    let stdout = ok(&bin()
        .args(["reconstruct", "--checkpoint"])
        .arg(t.out_dir.join("final.ckpt"))
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .args(["--snr", "10"])
        .output()
        .unwrap());
    assert!(stdout.contains("psnr"));
    let bytes = fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(bytes.len(), "P6\n16 16\n255\n".len() + 3 * 16 * 16);
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = bin()
        .args(["gradcheck", "--points", "3", "--seed", "11"])
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

#[test]
fn failures_exit_nonzero_with_one_line_diagnostic() {
    let out = bin().arg("no-such-command").output().unwrap();
    assert!(!out.status.success());

    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent",
               "--csv", "/tmp/never.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");

    // unknown config keys are rejected
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "warp_speed = 9\n").unwrap();
    let out = bin()
        .args(["train", "--strategy", "2", "--config"])
        .arg(&bad)
        .args(["--data", "/nonexistent", "--out"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));
}
