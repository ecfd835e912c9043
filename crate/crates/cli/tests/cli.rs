use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
num_images = 24
epochs = 2
batch_size = 8
dim = 16
depth = 2
heads = 2
decoder_dim = 16
decoder_heads = 2
pdec_depth = 1
fdec_depth = 1
contrast_dim = 8
log_interval = 1
";

fn cmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmae")).args(args).env_remove("CMAE_DATA_DIR").env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let o = cmae(&["synth-data", "--out", data.to_str().unwrap(), "--train", "40", "--test", "20"]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.s("tiny.cfg"), self.s("data"), self.s(out));
        let mut args = vec!["pretrain", "--config", &cfg, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        cmae(&args)
    }
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout(o)).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn pretrain_writes_checkpoint_metrics_and_summary() {
    let f = Fixture::new();
    let o = f.pretrain("run.cmae", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(f.path("run.cmae").exists());
    let csv = std::fs::read_to_string(f.path("run.cmae.metrics.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,lr,loss_total,loss_recon,loss_contrastive,pos_sim\n"));
    // 24 images in batches of 8 for 2 epochs
    assert_eq!(csv.lines().count(), 1 + 6);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("run.cmae.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 6);
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new();
    let o = f.pretrain("one.cmae", &["--epochs", "1", "--set", "log_interval=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(f.path("one.cmae.metrics.csv")).unwrap();
    // steps 0 and 2 of a 3-step run
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn data_dir_from_environment() {
    let f = Fixture::new();
    let o = Command::new(env!("CARGO_BIN_EXE_cmae"))
        .args(["pretrain", "--config", &f.s("tiny.cfg"), "--epochs", "1", "--out", &f.s("env.cmae")])
        .env("CMAE_DATA_DIR", f.path("data"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cmae(&["pretrain", "--config", &f.s("tiny.cfg"), "--out", &f.s("none.cmae")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("CMAE_DATA_DIR"));
}

#[test]
fn probe_prints_json_and_leaves_checkpoint_untouched() {
    let f = Fixture::new();
    assert!(f.pretrain("p.cmae", &[]).status.success());
    let before = read(&f.path("p.cmae"));
    let o = cmae(&["probe", "--ckpt", &f.s("p.cmae"), "--blocks", "0", "--epochs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    let top1 = v["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(v["head"], "linear");
    assert_eq!(v["test"], 20);
    let o = cmae(&["probe", "--ckpt", &f.s("p.cmae"), "--blocks", "1", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&o)["head"], "mlp");
    assert_eq!(read(&f.path("p.cmae")), before);
}

#[test]
fn finetune_curve_covers_every_depth() {
    let f = Fixture::new();
    assert!(f.pretrain("c.cmae", &["--epochs", "1"]).status.success());
    let o = cmae(&["finetune", "--ckpt", &f.s("c.cmae"), "--curve", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = json(&o)["curve"].as_array().unwrap().clone();
    let blocks: Vec<u64> = curve.iter().map(|r| r["blocks"].as_u64().unwrap()).collect();
    assert_eq!(blocks, vec![0, 1, 2]);
    let o = cmae(&["finetune", "--ckpt", &f.s("c.cmae"), "--blocks", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_reports_both_checkpoints() {
    let f = Fixture::new();
    assert!(f.pretrain("a.cmae", &["--epochs", "1"]).status.success());
    assert!(f.pretrain("b.cmae", &["--epochs", "1", "--lambda-c", "0"]).status.success());
    let o = cmae(&["analyze", "--ckpt", &f.s("a.cmae"), "--baseline", &f.s("b.cmae")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    for s in [&v["stats"], &v["baseline"]["stats"]] {
        for k in ["mean_intra_class_distance", "std_intra_class_distance", "mean_inter_class_center_distance", "std_inter_class_center_distance"] {
            assert!(s[k].as_f64().unwrap() >= 0.0, "{k}");
        }
    }
    assert_eq!(v["baseline"]["lambda_c"], 0.0);
}

#[test]
fn ablate_writes_axis_csv() {
    let f = Fixture::new();
    let out = f.s("abl");
    let (cfg, data) = (f.s("tiny.cfg"), f.s("data"));
    let o = cmae(&[
        "ablate", "--config", &cfg, "--data", &data, "--epochs", "1", "--axis", "lambda_c", "--values", "0,1", "--seeds", "0",
        "--out-dir", &out, "--probe-epochs", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(f.path("abl").join("ablation_lambda_c.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,row,settings,seed,top1,train_top1,final_loss,reference_top1");
    // two rows, one seed each, plus a mean line per row
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("lambda_c,0,lambda_c=0,0,"));
}

#[test]
fn ablate_dry_run_lists_published_rows() {
    let o = cmae(&["ablate", "--axis", "shift_range", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for label in ["crop:", "0:", "0-2:", "0-4:", "0-6:", "0-9:", "4-6:", "6-9:"] {
        assert!(text.lines().any(|l| l.starts_with(label)), "{label} missing in\n{text}");
    }
}

#[test]
fn resume_matches_unbroken_run() {
    let f = Fixture::new();
    let p64 = ["--precision", "f64"];
    assert!(f.pretrain("full.cmae", &p64).status.success());
    let mut stop = p64.to_vec();
    stop.extend_from_slice(&["--stop-at", "4"]);
    assert!(f.pretrain("half.cmae", &stop).status.success());
    let o = cmae(&["pretrain", "--resume", &f.s("half.cmae"), "--data", &f.s("data"), "--out", &f.s("half.cmae")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&f.path("half.cmae")), read(&f.path("full.cmae")));
    assert_eq!(read(&f.path("half.cmae.metrics.csv")), read(&f.path("full.cmae.metrics.csv")));
}

#[test]
fn exit_codes() {
    let o = cmae(&["pretrain", "--epoch", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--epochs"), "{}", stderr(&o));
    assert_eq!(cmae(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cmae(&["ablate", "--axis", "depth", "--dry-run"]).status.code(), Some(1));
    assert_eq!(cmae(&["pretrain", "--set", "nonsense"]).status.code(), Some(1));
    let o = cmae(&["probe", "--ckpt", "/definitely/not/here.cmae"]);
    assert_eq!(o.status.code(), Some(2));
    for sub in ["pretrain", "probe", "finetune", "analyze", "ablate", "synth-data"] {
        let o = cmae(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn corrupt_checkpoint_is_runtime_error() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.cmae"), b"not a checkpoint").unwrap();
    let o = cmae(&["probe", "--ckpt", &f.s("bad.cmae"), "--data", &f.s("data")]);
    assert_eq!(o.status.code(), Some(2));
}
