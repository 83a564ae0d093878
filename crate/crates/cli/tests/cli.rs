use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[scene]
n_train = 30
n_test = 10
image_size = 8
focal = 6

[target]
pose_center = 20,0,0

[train]
epochs = 2
batch_size = 8

[model]
encoder_hidden = 8,8
localizer = 8
head_hidden = 4
disc_hidden = 8,4,4

[experiment]
seeds = 0
nu_values = 0.1,0.5
";

fn poseadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poseadapt")).args(args).env_remove("POSEADAPT_SEED").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The run directory is the first line a producing subcommand prints.
fn run_dir(o: &Output) -> PathBuf {
    PathBuf::from(stdout(o).lines().next().expect("run directory line"))
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn gradcheck_passes() {
    let o = poseadapt(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(), 4);
}

#[test]
fn adapt_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();
    let args = ["--config", &cfg, "--out-dir", out, "--set", "train.nu=0.05", "adapt"];
    let a = poseadapt(&args);
    let b = poseadapt(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(b.status.success(), "{}", stderr(&b));
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    let ma = fs::read(da.join("medians.csv")).unwrap();
    assert_eq!(ma, fs::read(db.join("medians.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 1 + 5);

    // The embedded snapshot alone reproduces the run.
    let snapshot = da.join("config.txt");
    let c = poseadapt(&["--config", snapshot.to_str().unwrap(), "--out-dir", out, "adapt"]);
    assert!(c.status.success(), "{}", stderr(&c));
    assert_eq!(fs::read(run_dir(&c).join("medians.csv")).unwrap(), fs::read(db.join("medians.csv")).unwrap());

    // Report tables reproduce the stored medians.
    let r = poseadapt(&["--out-dir", out, "report", "--archive", da.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(fs::read(run_dir(&r).join("medians.csv")).unwrap(), fs::read(da.join("medians.csv")).unwrap());
    assert!(stdout(&r).contains("| joint |"));
}

#[test]
fn sweep_and_train_write_archives() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();
    let s = poseadapt(&["--config", &cfg, "--out-dir", out, "--jobs", "2", "sweep", "--methods", "ss,apanet"]);
    assert!(s.status.success(), "{}", stderr(&s));
    let csv = fs::read_to_string(run_dir(&s).join("medians.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let t = poseadapt(&["--config", &cfg, "--out-dir", out, "train", "--method", "apanets"]);
    assert!(t.status.success(), "{}", stderr(&t));
    let dir = run_dir(&t);
    assert!(dir.join("model.apanet").exists());
    assert!(dir.join("report.jsonl").exists());
    assert!(dir.join("predictions").is_dir());
}

#[test]
fn synth_then_analyze_identical_files_covers_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();
    let s = poseadapt(&["--config", &cfg, "--out-dir", out, "synth"]);
    assert!(s.status.success(), "{}", stderr(&s));
    let poses = run_dir(&s).join("target").join("poses.txt");
    let poses = poses.to_str().unwrap();
    let a = poseadapt(&["--out-dir", out, "analyze", "--queries", poses, "--refs", poses]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("coverage = 1\n"), "{}", stdout(&a));
}

#[test]
fn errors_are_prefixed_and_nonzero() {
    for args in [
        vec!["--bogus", "adapt"],
        vec!["--set", "trian.lr=1", "synth"],
        vec!["--set", "train.lr=fast", "synth"],
        vec!["analyze", "--queries", "/no/such/file", "--refs", "/no/such/file"],
        vec!["report", "--archive", "/no/such/archive"],
    ] {
        let o = poseadapt(&args);
        assert!(!o.status.success(), "{args:?}");
        let err = stderr(&o);
        assert!(err.starts_with("ERROR: "), "{args:?}: {err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
}

#[test]
fn seed_env_is_a_fallback() {
    let env = |seed: &str, extra: &[&str]| {
        let mut args = extra.to_vec();
        args.push("--print-config");
        let o = Command::new(env!("CARGO_BIN_EXE_poseadapt")).args(&args).env("POSEADAPT_SEED", seed).output().unwrap();
        stdout(&o)
    };
    let train_seed = |text: String| {
        let section = text.split("[train]").nth(1).unwrap().to_string();
        section.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
    };
    assert_eq!(train_seed(env("9", &[])), "seed = 9");
    assert_eq!(train_seed(env("9", &["--set", "train.seed=3"])), "seed = 3");
}
