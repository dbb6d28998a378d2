//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits 0 so that a red criterion stays visible without breaking the
//! workspace test run; set `AMTPP_ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use amtpp_autodiff::{grad_check, Graph, ParamStore, Tensor, TensorError};
use amtpp_core::ablation::Ablation;
use amtpp_core::data::{pad_batch, pad_batch_to, split_users, UserSequence};
use amtpp_core::entropy::{lz_entropy_rate, match_lengths};
use amtpp_core::eval::{naive_baseline, predict_steps, F1Average, MetricsReport, StepRecord};
use amtpp_core::model::Amtpp;
use amtpp_core::od_head::{OdHead, OdHeadKind, OdMask, OdMatrix};
use amtpp_core::synth::{generate_synthetic, Archetype, Population, SyntheticPopulationSpec};
use amtpp_core::time_head::{AllMixtureParams, LogNormalMixtureParams};
use amtpp_core::train::{train, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: &str, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let verdict = if out.pass { "PASS" } else { "FAIL" };
    println!("{verdict} {id:<3} {title}: {} [{:.1}s]", out.detail, start.elapsed().as_secs_f64());
    out.pass
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (model, mut store) = Amtpp::new(common::micro_config(), None, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // move every weight off its initial value so no path is trivially dead
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in store.iter_mut() {
        if p.name.contains("log_pos_scale") {
            continue;
        }
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let users = common::micro_users();
    let refs: Vec<&UserSequence> = users.iter().collect();
    let batch = pad_batch(&refs, 5, 128).unwrap();
    let report = grad_check(
        &mut store,
        |g, s| {
            let (loss, _) = model.loss(g, s, &batch).map_err(|e| TensorError::Contract(e.to_string()))?;
            Ok(loss.objective)
        },
        1e-4,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let covered = ["enc.hour.log_pos_scale", "enc.week.log_pos_scale", "time.beta.weight", "od.m1.weight", "od.m2.weight"]
        .iter()
        .all(|n| store.find(n).is_some_and(|id| store.get(id).trainable));
    outcome(
        report.max_rel_error < 1e-4 && secs < 60.0 && covered,
        format!("{} entries, max rel error {:.2e}, {secs:.1}s", report.checked, report.max_rel_error),
    )
}

// ---------------------------------------------------------------- 2, 3

/// Adaptive Simpson on a smooth interval.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Integrates over `[lo, hi]` split at every kink or mode.
fn piecewise(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, mut breaks: Vec<f64>) -> f64 {
    breaks.sort_by(f64::total_cmp);
    let mut edges = vec![lo];
    edges.extend(breaks.into_iter().filter(|b| *b > lo && *b < hi));
    edges.push(hi);
    edges.windows(2).map(|w| simpson(f, w[0], w[1], 1e-12)).sum()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-3..1.0f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn random_all(rng: &mut ChaCha8Rng, k: usize) -> AllMixtureParams {
    let w = simplex(rng, k);
    let beta = (0..k).map(|_| rng.random_range(-1.0..5.0)).collect();
    let lambda = (0..k).map(|_| log_uniform(rng, 0.3, 30.0)).collect();
    let gamma = (0..k).map(|_| log_uniform(rng, 0.2, 5.0)).collect();
    AllMixtureParams::new(w, beta, lambda, gamma).unwrap()
}

fn random_lognormal(rng: &mut ChaCha8Rng, k: usize) -> LogNormalMixtureParams {
    let w = simplex(rng, k);
    let mu = (0..k).map(|_| rng.random_range(-1.0..5.0)).collect();
    let sigma = (0..k).map(|_| log_uniform(rng, 0.03, 3.0)).collect();
    LogNormalMixtureParams::new(w, mu, sigma).unwrap()
}

fn all_mass(m: &AllMixtureParams) -> f64 {
    let k = m.components();
    let left_rate = (0..k).map(|i| m.lambda_hat[i] * m.gamma_hat[i]).fold(f64::INFINITY, f64::min);
    let right_rate = (0..k).map(|i| m.lambda_hat[i] / m.gamma_hat[i]).fold(f64::INFINITY, f64::min);
    let lo = m.beta_hat.iter().cloned().fold(f64::INFINITY, f64::min) - 60.0 / left_rate;
    let hi = m.beta_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 60.0 / right_rate;
    // extra breaks one scale either side of each knot keep pieces well resolved
    let mut breaks = Vec::new();
    for i in 0..k {
        let b = m.beta_hat[i];
        for s in [1.0, 4.0, 16.0] {
            breaks.push(b - s / (m.lambda_hat[i] * m.gamma_hat[i]));
            breaks.push(b + s * m.gamma_hat[i] / m.lambda_hat[i]);
        }
        breaks.push(b);
    }
    piecewise(&|y| m.log_density_y(y).exp(), lo, hi, breaks)
}

fn lognormal_mass(m: &LogNormalMixtureParams) -> f64 {
    let k = m.components();
    let lo = (0..k).map(|i| m.mu[i] - 40.0 * m.sigma[i]).fold(f64::INFINITY, f64::min);
    let hi = (0..k).map(|i| m.mu[i] + 40.0 * m.sigma[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut breaks = Vec::new();
    for i in 0..k {
        for s in [-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0] {
            breaks.push(m.mu[i] + s * m.sigma[i]);
        }
    }
    piecewise(&|y| m.log_density_y(y).exp(), lo, hi, breaks)
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst_all, mut worst_ln) = (0.0f64, 0.0f64);
    for k in [1, 2, 4, 16] {
        for _ in 0..100 {
            worst_all = worst_all.max((all_mass(&random_all(&mut rng, k)) - 1.0).abs());
            worst_ln = worst_ln.max((lognormal_mass(&random_lognormal(&mut rng, k)) - 1.0).abs());
        }
    }
    outcome(
        worst_all < 1e-6 && worst_ln < 1e-6,
        format!("100 draws per K in {{1,2,4,16}}: max |mass-1| ALL {worst_all:.1e}, log-normal {worst_ln:.1e}"),
    )
}

/// Density in `τ` written directly as a power law around each knot.
fn all_tau_density(m: &AllMixtureParams, tau: f64) -> f64 {
    (0..m.components())
        .map(|k| {
            let (l, g) = (m.lambda_hat[k], m.gamma_hat[k]);
            let c = l / (g + 1.0 / g);
            let ratio = tau / m.beta_hat[k].exp();
            let exponent = if ratio < 1.0 { l * g } else { -l / g };
            m.w[k] * c * ratio.powf(exponent) / tau
        })
        .sum()
}

fn lognormal_tau_density(m: &LogNormalMixtureParams, tau: f64) -> f64 {
    (0..m.components())
        .map(|k| {
            let z = (tau.ln() - m.mu[k]) / m.sigma[k];
            m.w[k] * (-0.5 * z * z).exp() / (tau * m.sigma[k] * (2.0 * std::f64::consts::PI).sqrt())
        })
        .sum()
}

fn change_of_variables() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let grid: Vec<f64> = (0..1000).map(|i| (-3.0 + 8.0 * i as f64 / 999.0f64).exp()).collect();
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for k in [1, 2, 4, 16] {
        for _ in 0..25 {
            let a = random_all(&mut rng, k);
            let l = random_lognormal(&mut rng, k);
            for &tau in &grid {
                for (got, want) in [
                    (a.tau_log_likelihood(tau).unwrap(), all_tau_density(&a, tau)),
                    (l.tau_log_likelihood(tau).unwrap(), lognormal_tau_density(&l, tau)),
                ] {
                    // compare where the oracle density is representable
                    if want > 1e-250 {
                        worst = worst.max((got.exp() - want).abs() / want);
                        compared += 1;
                    }
                }
            }
        }
    }
    outcome(worst < 1e-12, format!("{compared} points, max relative density error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn sampling() -> Outcome {
    let mix = AllMixtureParams::new(vec![0.3, 0.7], vec![8f64.ln(), 16f64.ln()], vec![10.0, 5.0], vec![0.7, 1.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let n = 100_000;
    let mut xs: Vec<f64> = (0..n).map(|_| mix.sample_tau(&mut rng)).collect();
    xs.sort_by(f64::total_cmp);
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = mix.tau_cdf(x).unwrap();
            (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
        })
        .fold(0.0, f64::max);
    let beta = 8f64.ln();
    let sym = AllMixtureParams::single(beta, 4.0, 1.0).unwrap();
    let below = (0..n).filter(|_| sym.sample_tau(&mut rng) <= beta.exp()).count() as f64 / n as f64;
    let exact = sym.tau_cdf(beta.exp()).unwrap();
    outcome(
        ks < 0.01 && (below - 0.5).abs() <= 0.005 && (exact - 0.5).abs() < 1e-12,
        format!("KS {ks:.4} over {n} samples; symmetric empirical CDF(beta) {below:.4}"),
    )
}

// ---------------------------------------------------------------- 5

fn structural() -> Outcome {
    let s = 10;
    let width = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::new();
    let head = OdHead::register(&mut store, width, s, 3, OdHeadKind::LowRank, &mut rng).unwrap();
    let n = 1000;
    let ctx: Vec<f64> = (0..n * width).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut g = Graph::inference();
    let c = g.constant(Tensor::new(vec![1, n, width], ctx).unwrap());
    let od = head.forward(&mut g, &store, c, &OdMask::diagonal(s)).unwrap();
    let log_cond = g.data(od.log_conditional.unwrap()).to_vec();
    let (mut col_err, mut diag) = (0.0f64, 0.0f64);
    for row in log_cond.chunks(s * s) {
        let m = OdMatrix::from_log_conditionals(s, row);
        for o in 0..s {
            col_err = col_err.max((m.column(o).iter().sum::<f64>() - 1.0).abs());
            diag = diag.max(m.get(o, o));
        }
    }

    // causal: gradient of h_i reaches only e_0..=e_i
    let cfg = common::micro_config();
    let (model, store) = Amtpp::new(cfg.clone(), None, None, &mut ChaCha8Rng::seed_from_u64(51)).unwrap();
    let (t, e_width) = (6, cfg.embedding_width(0));
    let e_val: Vec<f64> = (0..t * e_width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut leaks = 0;
    let mut blocked = 0;
    for i in 0..t {
        let mut g = Graph::new();
        let e = g.leaf(Tensor::new(vec![1, t, e_width], e_val.clone()).unwrap(), true);
        let h = model.encoder.attend(&mut g, &store, e).unwrap();
        let hi = g.slice(h, 1, i, 1).unwrap();
        let total = g.sum(hi);
        g.backward(total).unwrap();
        let grad = g.grad(e).unwrap();
        for j in i + 1..t {
            blocked += 1;
            if grad[j * e_width..(j + 1) * e_width].iter().any(|v| *v != 0.0) {
                leaks += 1;
            }
        }
    }

    // fully masked batch
    let (model, mut store) = Amtpp::new(cfg, None, None, &mut ChaCha8Rng::seed_from_u64(52)).unwrap();
    let empty = UserSequence::new("e", vec![], 5, 0).unwrap();
    let batch = pad_batch_to(&[&empty, &empty, &empty], 5, 128, 5).unwrap();
    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, &store, &batch).unwrap();
    let masked_loss = g.data(loss.objective)[0];
    store.zero_grad();
    g.backward(loss.objective).unwrap();
    g.accumulate_param_grads(&mut store);
    let zero_grads = store.iter().all(|p| p.grad.iter().all(|v| *v == 0.0));

    outcome(
        col_err < 1e-6 && diag < 1e-12 && leaks == 0 && masked_loss == 0.0 && zero_grads,
        format!(
            "{n} contexts: max |col sum-1| {col_err:.1e}, max diagonal {diag:.1e}; {leaks}/{blocked} future gradients nonzero; masked loss {masked_loss}, zero grads {zero_grads}"
        ),
    )
}

// ---------------------------------------------------------------- 6, 7, 8, 10

const EPOCHS: usize = 25;

struct Experiment {
    train: Vec<UserSequence>,
    val: Vec<UserSequence>,
    test: Population,
    naive: Vec<StepRecord>,
}

impl Experiment {
    fn new() -> Self {
        let spec = SyntheticPopulationSpec { users: 200, stations: 10, days: 30, seed: 7, ..SyntheticPopulationSpec::default() };
        let pop = generate_synthetic(&spec).unwrap();
        let (train, val) = split_users(&pop.sequences, 0.8, 7).unwrap();
        // held-out users from the same generator
        let test = generate_synthetic(&SyntheticPopulationSpec { users: 100, seed: 8, ..spec }).unwrap();
        let naive = naive_baseline(&test.sequences);
        Self { train, val, test, naive }
    }

    fn config(ablation: Ablation) -> TrainConfig {
        let mut cfg = TrainConfig {
            ablation,
            batch_size: 1,
            epochs: EPOCHS,
            lr: 2e-3,
            seed: 7,
            patience: EPOCHS,
            clip_norm: 20.0,
            cosine_decay: true,
            ..TrainConfig::default()
        };
        cfg.model.stations = 10;
        cfg
    }

    fn run(&self, ablation: Ablation) -> Run {
        let start = Instant::now();
        let outcome = train(&self.train, &self.val, &Self::config(ablation), None, None).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let (model, store) = outcome.best.restore().unwrap();
        let records = predict_steps(&model, &store, &self.test.sequences, 128, 64).unwrap();
        Run { outcome, model, store, records, secs }
    }

    fn cohort<'a>(&'a self, records: &'a [StepRecord], keep: impl Fn(Archetype) -> bool + 'a) -> impl Iterator<Item = &'a StepRecord> + 'a {
        records.iter().filter(move |r| keep(self.test.archetypes[r.user]))
    }
}

struct Run {
    outcome: TrainOutcome,
    model: Amtpp,
    store: ParamStore,
    records: Vec<StepRecord>,
    secs: f64,
}

impl Run {
    fn time_nll(&self) -> f64 {
        MetricsReport::from_records("all", &self.records, F1Average::Weighted).nll.unwrap().t
    }
}

fn learning(exp: &Experiment, full: &Run, lognorm: &Run) -> Outcome {
    let model = MetricsReport::from_records("all", &full.records, F1Average::Weighted);
    let naive = MetricsReport::from_records("all", &exp.naive, F1Average::Weighted);
    let random = MetricsReport::from_records("random", exp.cohort(&full.records, |a| a == Archetype::Random), F1Average::Weighted);
    let commuter = MetricsReport::from_records("commuter", exp.cohort(&full.records, Archetype::is_commuter), F1Average::Weighted);
    let (t_all, t_ln) = (full.time_nll(), lognorm.time_nll());
    let a = model.destination.accuracy >= naive.destination.accuracy + 0.05;
    let b = commuter.destination.accuracy >= 0.90;
    let c = t_all <= t_ln - 0.1;
    let mark = |ok: bool| if ok { "ok" } else { "miss" };
    outcome(
        a && b && c && full.secs < 900.0,
        format!(
            "(a) d acc {:.3} vs naive {:.3} [{}]; random cohort {:.3} vs chance 0.100; (b) commuter d acc {:.3} [{}]; (c) time NLL ALL {t_all:.3} vs log-normal {t_ln:.3} [{}]; train {:.0}s",
            model.destination.accuracy,
            naive.destination.accuracy,
            mark(a),
            random.destination.accuracy,
            commuter.destination.accuracy,
            mark(b),
            mark(c),
            full.secs
        ),
    )
}

fn ablation_order(runs: &[(Ablation, f64)]) -> Outcome {
    let worst = runs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let table: Vec<String> = runs.iter().map(|(a, t)| format!("{} {t:.3}", a.name())).collect();
    outcome(worst == Ablation::NoTimeEmbedding, format!("time NLL {}", table.join(", ")))
}

fn bimodal(exp: &Experiment, full: &Run) -> Outcome {
    let mut masses = Vec::new();
    for (u, seq) in exp.test.sequences.iter().enumerate() {
        if exp.test.archetypes[u] != Archetype::RoundTrip {
            continue;
        }
        for i in 0..seq.len().saturating_sub(1) {
            if seq.calendar[i].hour >= 12 {
                continue;
            }
            let p = full.model.predict_next(&full.store, &seq.prefix(i + 1), 128, 1.0).unwrap();
            masses.push(p.time.tau_cdf(10.0).unwrap() - p.time.tau_cdf(6.0).unwrap());
        }
    }
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    let above = masses.iter().filter(|m| **m >= 0.6).count();
    outcome(
        mean >= 0.6,
        format!("mean mass in [6, 10] h after a morning trip {mean:.3} over {} predictions ({above} individually >= 0.6)", masses.len()),
    )
}

fn determinism(first: &Run, again: &TrainOutcome) -> Outcome {
    let bits = |o: &TrainOutcome| o.log.iter().map(|l| [l.val.t.to_bits(), l.val.o.to_bits(), l.val.d.to_bits()]).collect::<Vec<_>>();
    let same = bits(&first.outcome) == bits(again);
    outcome(same && !again.log.is_empty(), format!("{} epochs of validation NLL compared bitwise", again.log.len()))
}

// ---------------------------------------------------------------- 9

/// Shortest substring starting at `i` that does not occur entirely inside `s[..i]`.
fn shortest_unseen(s: &[u8], i: usize) -> usize {
    let n = s.len();
    for len in 1..=n - i {
        let needle = &s[i..i + len];
        if !s[..i].windows(len).any(|w| w == needle) {
            return len;
        }
    }
    n - i + 1
}

fn entropy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=64usize);
        let alphabet = rng.random_range(1..=6u8);
        let s: Vec<u8> = (0..n).map(|_| rng.random_range(0..alphabet)).collect();
        let lengths: Vec<usize> = (0..n).map(|i| shortest_unseen(&s, i)).collect();
        let total: usize = lengths.iter().sum();
        let oracle = n as f64 / total as f64 * (n as f64).log2();
        if match_lengths(&s) != lengths || lz_entropy_rate(&s).unwrap() != oracle {
            mismatches += 1;
        }
    }
    let constant = lz_entropy_rate(&[3u8; 8]).unwrap();
    outcome(mismatches == 0 && constant == 1.0, format!("{mismatches}/1000 mismatches; constant length-8 sequence {constant}"))
}

fn main() {
    let mut results = Vec::new();
    results.push(report("1", "gradient check", gradient_check));
    results.push(report("2", "likelihood normalization", normalization));
    results.push(report("3", "change of variables", change_of_variables));
    results.push(report("4", "sampling fidelity", sampling));
    results.push(report("5", "structural invariants", structural));

    let exp = Experiment::new();
    let runs: Vec<(Ablation, Option<Run>)> = Ablation::ALL
        .iter()
        .map(|&a| (a, catch_unwind(AssertUnwindSafe(|| exp.run(a))).ok()))
        .collect();
    let get = |a: Ablation| runs.iter().find(|(b, _)| *b == a).and_then(|(_, r)| r.as_ref()).expect("training run failed");
    results.push(report("6", "learning on synthetic data", || learning(&exp, get(Ablation::Full), get(Ablation::LognormTimeHead))));
    results.push(report("7", "ablation ordering", || {
        ablation_order(&Ablation::ALL.iter().map(|&a| (a, get(a).time_nll())).collect::<Vec<_>>())
    }));
    results.push(report("8", "bimodal recovery", || bimodal(&exp, get(Ablation::Full))));
    results.push(report("9", "entropy-rate estimator", entropy));
    results.push(report("10", "determinism", || {
        let again = train(&exp.train, &exp.val, &Experiment::config(Ablation::Full), None, None).unwrap();
        determinism(get(Ablation::Full), &again)
    }));

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed < results.len() && std::env::var("AMTPP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
