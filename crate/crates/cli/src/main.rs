//! `amtpp` command-line entry point.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use amtpp_core::ablation::{format_table, run_ablation, Ablation};
use amtpp_core::config::RunConfig;
use amtpp_core::data::{load_csv, load_station_features, save_csv, split_users, StationFeatures, UserSequence};
use amtpp_core::eval::{entropy_report, format_reports, naive_baseline, predict_steps, write_metrics_csv, F1Average};
use amtpp_core::synth::{generate_synthetic, SyntheticPopulationSpec};
use amtpp_core::train::{resume, train, EpochLog, TrainOutcome};
use amtpp_core::{AmtppError, Checkpoint, NextTripPrediction, OdMask, TimeDistribution};

const BEST: &str = "checkpoint.amtpp";
const LAST: &str = "last.amtpp";
const DIVERGED: &str = "diverged.amtpp";
const TRAIN_LOG: &str = "train_log.csv";
const METRICS: &str = "metrics.csv";
const ABLATION: &str = "ablation.csv";

#[derive(Parser)]
#[command(name = "amtpp", version, about = "Next-trip time, origin and destination prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic trip CSV and its archetype sidecar.
    Generate(GenerateArgs),
    /// Train from a run config; writes checkpoints and a per-epoch log.
    Train(TrainArgs),
    /// Metrics of a checkpoint next to the naive baseline.
    Eval(EvalArgs),
    /// Next-trip distribution for one user.
    Predict(PredictArgs),
    /// Autoregressively sample future trips for one user.
    Sample(SampleArgs),
    /// Train and evaluate every ablation configuration.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 10)]
    stations: usize,
    #[arg(long, default_value_t = 30)]
    days: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.6)]
    round_trip: f64,
    #[arg(long, default_value_t = 0.2)]
    morning_only: f64,
    #[arg(long, default_value_t = 0.2)]
    random: f64,
    /// Trip CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Archetype sidecar; defaults to `<out stem>.archetypes.csv`.
    #[arg(long)]
    archetypes: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `ablation` key.
    #[arg(long)]
    ablation: Option<String>,
    /// Continue from this checkpoint (usually `last.amtpp`).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total epochs, counting those already run; defaults to the config.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Defaults to `<output_dir>/checkpoint.amtpp` when `--config` is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Trip CSV to evaluate on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run config supplying test data, time zone, F1 averaging and output directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics CSV; defaults to `<output_dir>/metrics.csv` with a config, otherwise not written.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit only the naive baseline.
    #[arg(long)]
    baseline_only: bool,
    /// weighted or macro; overrides the config.
    #[arg(long)]
    average: Option<String>,
    #[arg(long)]
    tz_offset: Option<i64>,
}

#[derive(Args)]
struct HistoryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trip CSV holding the user's history; omit for a cold start.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    user: Option<String>,
    /// Start from the learned initial state when the user is not in the history.
    #[arg(long)]
    cold_start: bool,
    #[arg(long, default_value_t = 0)]
    tz_offset: i64,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    history: HistoryArgs,
    /// Also report the prediction with the time-head peaks rescaled.
    #[arg(long)]
    what_if: bool,
    /// Factor applied to the peak parameters fed to the OD head.
    #[arg(long, default_value_t = 0.5, requires = "what_if")]
    scale_beta: f64,
    /// Write the full OD matrix (`[d][o]`) here.
    #[arg(long)]
    od_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    history: HistoryArgs,
    #[arg(short, long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Departure reference (epoch seconds) when the history is empty.
    #[arg(long, default_value_t = 0)]
    start: i64,
    /// Trip CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Results CSV; defaults to `<output_dir>/ablation.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Sample(a) => sample(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {reason}");
            ExitCode::FAILURE
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SyntheticPopulationSpec {
        users: a.users,
        stations: a.stations,
        days: a.days,
        seed: a.seed,
        round_trip: a.round_trip,
        morning_only: a.morning_only,
        random: a.random,
        ..SyntheticPopulationSpec::default()
    };
    let pop = generate_synthetic(&spec)?;
    save_csv(&a.out, &pop.sequences)?;
    let sidecar = a.archetypes.unwrap_or_else(|| sidecar_path(&a.out));
    pop.save_archetypes(&sidecar)?;
    let trips: usize = pop.sequences.iter().map(UserSequence::len).sum();
    log::info!("seed {}: {} users, {trips} trips -> {}, archetypes -> {}", a.seed, a.users, a.out.display(), sidecar.display());
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "trips".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.archetypes.csv"))
}

struct Inputs {
    train: Vec<UserSequence>,
    val: Vec<UserSequence>,
    features: Option<StationFeatures>,
    mask: Option<OdMask>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let s = cfg.train.model.stations;
    let path = cfg.train_data.as_ref().context("config has no train_data")?;
    let all = load_csv(path, s, cfg.tz_offset)?;
    let (train, val) = match &cfg.val_data {
        Some(v) => (all, load_csv(v, s, cfg.tz_offset)?),
        None => split_users(&all, cfg.train_fraction, cfg.train.seed)?,
    };
    let features = cfg.feature_path.as_ref().map(|p| load_station_features(p, s)).transpose()?;
    let mask = cfg.mask_path.as_ref().map(|p| OdMask::load_csv(p, s)).transpose()?;
    Ok(Inputs { train, val, features, mask })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(name) = &a.ablation {
        cfg.train.ablation = Ablation::parse(name)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let inputs = load_inputs(&cfg)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let result = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let epochs = a.epochs.unwrap_or(ckpt.train.epochs);
            log::info!("resuming {} at epoch {} of {epochs}", path.display(), ckpt.epoch);
            resume(&ckpt, &inputs.train, &inputs.val, epochs)
        }
        None => {
            log::info!("training {} ({} users, {} validation users), seed {}", cfg.train.ablation.name(), inputs.train.len(), inputs.val.len(), cfg.train.seed);
            train(&inputs.train, &inputs.val, &cfg.train, inputs.features, inputs.mask)
        }
    };
    let outcome = match result {
        Ok(o) => o,
        Err(AmtppError::Diverged { epoch, batch, detail, last_good }) => {
            let path = dir.join(DIVERGED);
            last_good.save(&path)?;
            bail!("training diverged at epoch {epoch}, batch {batch}: {detail}; last good state saved to {}", path.display());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.best.save(dir.join(BEST))?;
    outcome.last.save(dir.join(LAST))?;
    let seed = outcome.last.train.seed;
    write_train_log(&dir.join(TRAIN_LOG), &outcome, seed, a.resume.is_some())?;
    log::info!(
        "best val nll {:.4} at epoch {}; {} epochs run{}",
        outcome.best.best_val_nll,
        outcome.best.epoch,
        outcome.log.len(),
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

/// Appends when resuming so the log keeps one row per epoch overall.
fn write_train_log(path: &Path, outcome: &TrainOutcome, seed: u64, append: bool) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "epoch,train_t,train_o,train_d,val_t,val_o,val_d,seed")?;
    }
    for EpochLog { epoch, train, val } in &outcome.log {
        writeln!(w, "{epoch},{},{},{},{},{},{},{seed}", train.t, train.o, train.d, val.t, val.o, val.d)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.config.as_ref().map(RunConfig::load).transpose()?;
    let checkpoint = match (&a.checkpoint, &cfg) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.output_dir.join(BEST),
        (None, None) => bail!("--checkpoint or --config is required"),
    };
    let data = match (&a.data, &cfg) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.test_data.clone().or_else(|| c.val_data.clone()).or_else(|| c.train_data.clone()).context("config names no data")?,
        (None, None) => bail!("--data or --config is required"),
    };
    let average = match (&a.average, &cfg) {
        (Some(s), _) => F1Average::parse(s).with_context(|| format!("--average must be weighted or macro, got {s:?}"))?,
        (None, Some(c)) => c.f1,
        (None, None) => F1Average::Weighted,
    };
    let tz = a.tz_offset.or(cfg.as_ref().map(|c| c.tz_offset)).unwrap_or(0);
    let out = a.out.clone().or_else(|| cfg.as_ref().map(|c| c.output_dir.join(METRICS)));

    let ckpt = Checkpoint::load(&checkpoint)?;
    let seqs = load_csv(&data, ckpt.train.model.stations, tz)?;
    let naive = entropy_report(&seqs, &naive_baseline(&seqs), average)?;
    let model = if a.baseline_only {
        Vec::new()
    } else {
        let (model, store) = ckpt.restore()?;
        let records = predict_steps(&model, &store, &seqs, ckpt.train.window, ckpt.train.batch_size.max(32))?;
        entropy_report(&seqs, &records, average)?
    };
    print!("{}", format_reports(&model, &naive));
    if let Some(path) = out {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_metrics_csv(file, &model, &naive).with_context(|| format!("writing {}", path.display()))?;
        log::info!("metrics -> {} (checkpoint seed {})", path.display(), ckpt.train.seed);
    }
    Ok(())
}

/// The named user's history, or an empty one for a cold start.
fn history(a: &HistoryArgs, stations: usize) -> Result<UserSequence> {
    let user = a.user.clone().unwrap_or_else(|| "user".into());
    let Some(path) = &a.history else {
        return Ok(UserSequence::new(user, Vec::new(), stations, a.tz_offset)?);
    };
    let seqs = load_csv(path, stations, a.tz_offset)?;
    let found = match &a.user {
        Some(u) => seqs.into_iter().find(|s| &s.user_id == u),
        None if seqs.len() == 1 => seqs.into_iter().next(),
        None => bail!("{} holds several users; pick one with --user", path.display()),
    };
    match found {
        Some(s) => Ok(s),
        None if a.cold_start => Ok(UserSequence::new(user, Vec::new(), stations, a.tz_offset)?),
        None => bail!("user {user} not found in {} (pass --cold-start to predict from the initial state)", path.display()),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.history.checkpoint)?;
    let (model, store) = ckpt.restore()?;
    let hist = history(&a.history, model.stations())?;
    let window = ckpt.train.window;
    let base = model.predict_next(&store, &hist, window, 1.0)?;
    if hist.is_empty() {
        println!("user {}: no history, predicting from the initial state", hist.user_id);
    } else {
        let last = hist.trips.last().expect("non-empty");
        println!("user {}: {} trips, last at t={} ({} -> {})", hist.user_id, hist.len(), last.t, last.o, last.d);
    }
    print!("{}", describe(&base));
    if a.what_if {
        let scaled = model.predict_next(&store, &hist, window, a.scale_beta)?;
        println!("\nwhat-if: peak parameters scaled by {} before the OD head", a.scale_beta);
        print!("{}", top("destination", &scaled.destination, 5));
        let shift: f64 = base.destination.iter().zip(&scaled.destination).map(|(p, q)| (p - q).abs()).sum::<f64>() / 2.0;
        println!("total variation from baseline destinations: {shift:.4}");
    }
    if let Some(path) = &a.od_csv {
        let od = base.od.as_ref().context("this model has no OD matrix (independent destination head)")?;
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        od.write_csv(file).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn top(label: &str, p: &[f64], k: usize) -> String {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut out = format!("top {label}s:\n");
    for &i in idx.iter().take(k) {
        out.push_str(&format!("  {i:>4}  {:.4}\n", p[i]));
    }
    out
}

fn describe(p: &NextTripPrediction) -> String {
    let mut out = top("origin", &p.origin, 5);
    out.push_str(&top("destination", &p.destination, 5));
    match &p.time {
        TimeDistribution::AsymmetricLogLaplace(m) => {
            out.push_str("time mixture (asymmetric log-Laplace, y = ln tau):\n    k       w   beta_hat  tau_peak_h  lambda_hat  gamma_hat\n");
            for k in 0..m.components() {
                out.push_str(&format!(
                    "  {k:>3}  {:.4}  {:>9.4}  {:>10.3}  {:>10.4}  {:>9.4}\n",
                    m.w[k],
                    m.beta_hat[k],
                    m.beta_hat[k].exp(),
                    m.lambda_hat[k],
                    m.gamma_hat[k]
                ));
            }
        }
        TimeDistribution::LogNormal(m) => {
            out.push_str("time mixture (log-normal, y = ln tau):\n    k       w         mu     sigma\n");
            for k in 0..m.components() {
                out.push_str(&format!("  {k:>3}  {:.4}  {:>9.4}  {:>8.4}\n", m.w[k], m.mu[k], m.sigma[k]));
            }
        }
    }
    out.push_str(&format!(
        "tau quantiles (hours): q10 {:.3}  q50 {:.3}  q90 {:.3}\n",
        p.time.quantile(0.1),
        p.time.quantile(0.5),
        p.time.quantile(0.9)
    ));
    out
}

fn sample(a: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.history.checkpoint)?;
    let (model, store) = ckpt.restore()?;
    let hist = history(&a.history, model.stations())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let trips = model.sample_trips(&store, &hist, a.n, ckpt.train.window, a.start, &mut rng)?;
    let sampled = UserSequence::new(hist.user_id.clone(), trips, model.stations(), a.history.tz_offset)?;
    match &a.out {
        Some(path) => {
            save_csv(path, std::slice::from_ref(&sampled))?;
            log::info!("{} trips sampled with seed {} -> {}", a.n, a.seed, path.display());
        }
        None => amtpp_core::data::write_trips(std::io::stdout().lock(), std::slice::from_ref(&sampled)).context("writing to stdout")?,
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let inputs = load_inputs(&cfg)?;
    let eval_data = match &cfg.test_data {
        Some(p) => load_csv(p, cfg.train.model.stations, cfg.tz_offset)?,
        None => inputs.val.clone(),
    };
    let rows = run_ablation(&inputs.train, &inputs.val, &eval_data, &cfg.train, inputs.features, inputs.mask)?;
    print!("{}", format_table(&rows));
    let path = a.out.unwrap_or_else(|| cfg.output_dir.join(ABLATION));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut w = std::io::BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "configuration,nll_t,nll_o,nll_d,epochs_run,seed")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{},{}", r.ablation.name(), r.nll.t, r.nll.o, r.nll.d, r.epochs_run, cfg.train.seed)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
