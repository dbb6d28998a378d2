use std::path::Path;
use std::process::{Command, Output};

use amtpp_core::ablation::Ablation;
use amtpp_core::Checkpoint;
use tempfile::TempDir;

fn amtpp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amtpp"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawn amtpp")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = amtpp(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Fails with exactly one `error: ...` line on stderr.
fn fails(dir: &Path, args: &[&str]) -> String {
    let out = amtpp(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

const TINY: &str = "\
# tiny model so the tests stay fast
train_data = trips.csv
stations = 5
components = 2
origin_dim = 4
dest_dim = 4
hour_dim = 4
week_dim = 4
heads = 2
key_dim = 3
value_dim = 3
model_dim = 8
epochs = 2
batch_size = 4
output_dir = out
";

/// Generated data plus a tiny config.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["generate", "--users", "10", "--stations", "5", "--days", "7", "--seed", "3", "--out", "trips.csv"]);
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    dir
}

fn trained() -> TempDir {
    let dir = workspace();
    ok(dir.path(), &["train", "--config", "run.cfg"]);
    dir
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let gen = |seed: &str, out: &str| ok(dir.path(), &["generate", "--users", "20", "--stations", "6", "--days", "10", "--seed", seed, "--out", out]);
    gen("7", "a.csv");
    gen("7", "b.csv");
    gen("8", "c.csv");
    assert_eq!(read(dir.path(), "a.csv"), read(dir.path(), "b.csv"));
    assert_ne!(read(dir.path(), "a.csv"), read(dir.path(), "c.csv"));
    let sidecar = read(dir.path(), "a.archetypes.csv");
    assert!(sidecar.starts_with("user_id,archetype\n"));
    assert_eq!(sidecar.lines().count(), 21);
}

#[test]
fn zero_users_writes_header_only() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["generate", "--users", "0", "--out", "empty.csv"]);
    assert_eq!(read(dir.path(), "empty.csv"), "user_id,t,o,d\n");
}

#[test]
fn train_writes_checkpoint_and_one_log_row_per_epoch() {
    let dir = trained();
    assert!(dir.path().join("out/checkpoint.amtpp").exists());
    let log = read(dir.path(), "out/train_log.csv");
    assert!(log.starts_with("epoch,train_t,train_o,train_d,val_t,val_o,val_d,seed\n"));
    let epochs: Vec<String> = csv_rows(&log).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(epochs, ["1", "2"]);
}

#[test]
fn ablation_flag_is_recorded_in_checkpoint() {
    let dir = workspace();
    ok(dir.path(), &["train", "--config", "run.cfg", "--ablation", "lognorm_time_head"]);
    let ckpt = Checkpoint::load(dir.path().join("out/checkpoint.amtpp")).unwrap();
    assert_eq!(ckpt.train.ablation, Ablation::LognormTimeHead);
    let bytes = std::fs::read(dir.path().join("out/checkpoint.amtpp")).unwrap();
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(4096)]).into_owned();
    assert!(header.contains("ablation=lognorm_time_head"), "{header}");
}

#[test]
fn resume_continues_the_epoch_counter() {
    let dir = trained();
    ok(dir.path(), &["train", "--config", "run.cfg", "--resume", "out/last.amtpp", "--epochs", "4"]);
    let epochs: Vec<String> = csv_rows(&read(dir.path(), "out/train_log.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
    let last = Checkpoint::load(dir.path().join("out/last.amtpp")).unwrap();
    assert_eq!(last.epoch, 4);
}

#[test]
fn eval_reports_model_and_baseline() {
    let dir = trained();
    let stdout = ok(dir.path(), &["eval", "--config", "run.cfg"]);
    assert!(stdout.contains("[overall]"));
    let metrics = read(dir.path(), "out/metrics.csv");
    assert!(metrics.starts_with("target,metric,value,group\n"));
    let metric_names: Vec<String> = csv_rows(&metrics).into_iter().map(|r| r[1].clone()).collect();
    assert!(metric_names.iter().any(|m| m == "accuracy"));
    assert!(metric_names.iter().any(|m| m == "naive_accuracy"));
    // every row has the four fixed columns
    assert!(csv_rows(&metrics).iter().all(|r| r.len() == 4));
}

#[test]
fn baseline_only_emits_naive_rows() {
    let dir = trained();
    ok(dir.path(), &["eval", "--checkpoint", "out/checkpoint.amtpp", "--data", "trips.csv", "--baseline-only", "--out", "naive.csv"]);
    let rows = csv_rows(&read(dir.path(), "naive.csv"));
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[1].starts_with("naive_") || r[0] == "all"), "{rows:?}");
}

#[test]
fn eval_rejects_station_count_mismatch() {
    let dir = trained();
    ok(dir.path(), &["generate", "--users", "4", "--stations", "8", "--days", "5", "--out", "wide.csv"]);
    let err = fails(dir.path(), &["eval", "--checkpoint", "out/checkpoint.amtpp", "--data", "wide.csv"]);
    assert!(err.contains("station"), "{err}");
}

#[test]
fn predict_cold_start_and_what_if() {
    let dir = trained();
    let cold = ok(dir.path(), &["predict", "--checkpoint", "out/checkpoint.amtpp"]);
    assert!(cold.contains("no history"));
    assert!(cold.contains("tau quantiles"));
    let out = ok(
        dir.path(),
        &["predict", "--checkpoint", "out/checkpoint.amtpp", "--history", "trips.csv", "--user", "u0002", "--what-if", "--scale-beta", "0.5", "--od-csv", "od.csv"],
    );
    assert!(out.contains("what-if"));
    let od = read(dir.path(), "od.csv");
    assert_eq!(od.lines().next(), Some("d\\o,0,1,2,3,4"));
    // each column is a distribution over destinations
    let rows = csv_rows(&od);
    for o in 0..5 {
        let total: f64 = rows.iter().map(|r| r[o + 1].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6, "column {o}: {total}");
    }
}

#[test]
fn predict_unknown_user_fails_without_cold_start() {
    let dir = trained();
    let base = ["predict", "--checkpoint", "out/checkpoint.amtpp", "--history", "trips.csv", "--user", "nobody"];
    let err = fails(dir.path(), &base);
    assert!(err.contains("nobody"));
    let mut cold = base.to_vec();
    cold.push("--cold-start");
    assert!(ok(dir.path(), &cold).contains("no history"));
}

#[test]
fn sampling_is_seeded_and_valid() {
    let dir = trained();
    let args = |seed: &'static str| ["sample", "--checkpoint", "out/checkpoint.amtpp", "--history", "trips.csv", "--user", "u0000", "-n", "20", "--seed", seed];
    let a = ok(dir.path(), &args("5"));
    assert_eq!(a, ok(dir.path(), &args("5")));
    assert_ne!(a, ok(dir.path(), &args("6")));
    let history = csv_rows(&read(dir.path(), "trips.csv"));
    let mut prev: i64 = history.iter().filter(|r| r[0] == "u0000").map(|r| r[1].parse::<i64>().unwrap()).max().unwrap();
    let rows = csv_rows(&a);
    assert_eq!(rows.len(), 20);
    for r in rows {
        let t: i64 = r[1].parse().unwrap();
        assert!(t > prev, "tau must be positive");
        assert_ne!(r[2], r[3], "origin equals destination");
        prev = t;
    }
}

#[test]
fn config_errors_name_the_line() {
    let dir = workspace();
    std::fs::write(dir.path().join("bad.cfg"), format!("{TINY}bogus = 1\n")).unwrap();
    let err = fails(dir.path(), &["train", "--config", "bad.cfg"]);
    assert!(err.contains("bad.cfg:16"), "{err}");
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = workspace();
    let cfg = TINY.replace("epochs = 2", "epochs = 1");
    std::fs::write(dir.path().join("abl.cfg"), cfg).unwrap();
    let table = ok(dir.path(), &["ablate", "--config", "abl.cfg"]);
    assert_eq!(table.lines().count(), 6);
    let rows = csv_rows(&read(dir.path(), "out/ablation.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["full", "lognorm_time_head", "no_od_matrix", "no_time_embedding", "fixed_embedding"]);
}
