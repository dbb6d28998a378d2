//! Sequential next-trip evaluation, the reverse-previous-trip baseline and
//! entropy-stratified reports.

use std::collections::HashMap;
use std::io::Write;

use amtpp_autodiff::{Graph, ParamStore};

use crate::data::{pad_batch, UserSequence};
use crate::entropy::lz_entropy_rate;
use crate::error::{AmtppError, Result};
use crate::model::Amtpp;
use crate::train::NllBreakdown;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Average {
    /// Per-class F1 weighted by true-class support.
    Weighted,
    /// Unweighted mean over classes present in truth or prediction.
    Macro,
}

impl F1Average {
    pub fn name(self) -> &'static str {
        match self {
            Self::Weighted => "weighted",
            Self::Macro => "macro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weighted" => Some(Self::Weighted),
            "macro" => Some(Self::Macro),
            _ => None,
        }
    }
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

pub fn f1_score(truth: &[usize], pred: &[usize], average: F1Average) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    // class -> (tp, fp, fn)
    let mut counts: HashMap<usize, (usize, usize, usize)> = HashMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            counts.entry(t).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().2 += 1;
        }
    }
    let mut classes: Vec<_> = counts.into_iter().collect();
    classes.sort_unstable_by_key(|(c, _)| *c);
    let f1 = |(tp, fp, fn_): (usize, usize, usize)| {
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    };
    match average {
        F1Average::Weighted => classes.iter().map(|(_, c)| (c.0 + c.2) as f64 * f1(*c)).sum::<f64>() / truth.len() as f64,
        F1Average::Macro => classes.iter().map(|(_, c)| f1(*c)).sum::<f64>() / classes.len() as f64,
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// One predicted trip.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Index into the evaluated sequence list.
    pub user: usize,
    pub step: usize,
    pub origin: usize,
    pub destination: usize,
    pub origin_pred: usize,
    pub destination_pred: usize,
    /// Log-likelihoods of the observed values; absent for the baseline.
    pub ll_o: Option<f64>,
    pub ll_d: Option<f64>,
    /// Absent at a user's first trip and for the baseline.
    pub ll_t: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetMetrics {
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub group: String,
    pub users: usize,
    pub steps: usize,
    pub time_steps: usize,
    /// `None` for the baseline.
    pub nll: Option<NllBreakdown>,
    pub origin: TargetMetrics,
    pub destination: TargetMetrics,
}

impl MetricsReport {
    pub fn from_records<'a>(group: &str, records: impl IntoIterator<Item = &'a StepRecord>, average: F1Average) -> Self {
        let records: Vec<&StepRecord> = records.into_iter().collect();
        let mut users: Vec<usize> = records.iter().map(|r| r.user).collect();
        users.sort_unstable();
        users.dedup();
        let o: Vec<usize> = records.iter().map(|r| r.origin).collect();
        let op: Vec<usize> = records.iter().map(|r| r.origin_pred).collect();
        let d: Vec<usize> = records.iter().map(|r| r.destination).collect();
        let dp: Vec<usize> = records.iter().map(|r| r.destination_pred).collect();
        let times: Vec<f64> = records.iter().filter_map(|r| r.ll_t).collect();
        let has_nll = records.iter().any(|r| r.ll_o.is_some());
        let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { -xs.iter().sum::<f64>() / xs.len() as f64 };
        let nll = has_nll.then(|| NllBreakdown {
            t: mean(&times),
            o: mean(&records.iter().filter_map(|r| r.ll_o).collect::<Vec<_>>()),
            d: mean(&records.iter().filter_map(|r| r.ll_d).collect::<Vec<_>>()),
        });
        Self {
            group: group.to_string(),
            users: users.len(),
            steps: records.len(),
            time_steps: times.len(),
            nll,
            origin: TargetMetrics {
                accuracy: accuracy(&o, &op),
                f1: f1_score(&o, &op, average),
            },
            destination: TargetMetrics {
                accuracy: accuracy(&d, &dp),
                f1: f1_score(&d, &dp, average),
            },
        }
    }
}

/// Predicts every trip of every user from that user's preceding trips
/// (the most recent `window` of them).
pub fn predict_steps(model: &Amtpp, store: &ParamStore, sequences: &[UserSequence], window: usize, batch_size: usize) -> Result<Vec<StepRecord>> {
    let s = model.stations();
    for seq in sequences {
        if let Some(t) = seq.trips.iter().find(|t| t.o >= s || t.d >= s) {
            return Err(AmtppError::UnknownStation {
                station: if t.o >= s { t.o } else { t.d },
                stations: s,
            });
        }
    }
    let mut records = Vec::new();
    let users: Vec<usize> = (0..sequences.len()).filter(|&u| !sequences[u].is_empty()).collect();
    for chunk in users.chunks(batch_size.max(1)) {
        let prefixes: Vec<UserSequence> = chunk.iter().map(|&u| sequences[u].prefix(window)).collect();
        let refs: Vec<&UserSequence> = prefixes.iter().collect();
        let batch = pad_batch(&refs, s, window)?;
        let mut g = Graph::inference();
        let out = model.forward(&mut g, store, &batch)?;
        let (lo, ld, lt) = (g.data(out.od.log_origin), g.data(out.od.log_destination), g.data(out.time_ll));
        for (row, &u) in chunk.iter().enumerate() {
            for k in 0..batch.lengths[row] {
                let at = row * batch.steps + k;
                let trip = sequences[u].trips[k];
                let po = &lo[at * s..(at + 1) * s];
                let pd = &ld[at * s..(at + 1) * s];
                records.push(StepRecord {
                    user: u,
                    step: k,
                    origin: trip.o,
                    destination: trip.d,
                    origin_pred: argmax(po),
                    destination_pred: argmax(pd),
                    ll_o: Some(po[trip.o]),
                    ll_d: Some(pd[trip.d]),
                    ll_t: (k > 0).then(|| lt[at]),
                });
            }
        }
        // Trips beyond the first window condition on a sliding window.
        for &u in chunk {
            let seq = &sequences[u];
            for k in window..seq.len() {
                let mut hist = seq.prefix(k);
                let start = k - window;
                hist.trips.drain(..start);
                hist.calendar.drain(..start);
                hist.taus.drain(..start);
                let p = model.predict_next(store, &hist, window, 1.0)?;
                let trip = seq.trips[k];
                records.push(StepRecord {
                    user: u,
                    step: k,
                    origin: trip.o,
                    destination: trip.d,
                    origin_pred: argmax(&p.origin),
                    destination_pred: argmax(&p.destination),
                    ll_o: Some(p.origin[trip.o].ln()),
                    ll_d: Some(p.destination[trip.d].ln()),
                    ll_t: Some(p.time.tau_log_likelihood(seq.taus[k - 1])?),
                });
            }
        }
    }
    records.sort_by_key(|r| (r.user, r.step));
    Ok(records)
}

fn mode(xs: impl Iterator<Item = usize>) -> usize {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for x in xs {
        *counts.entry(x).or_default() += 1;
    }
    counts.into_iter().max_by_key(|(v, c)| (*c, std::cmp::Reverse(*v))).map_or(0, |(v, _)| v)
}

/// Predicts `(o, d) = (d_prev, o_prev)`. A user's first trip has no
/// previous trip and gets the most frequent origin and destination of
/// the whole dataset.
pub fn naive_baseline(sequences: &[UserSequence]) -> Vec<StepRecord> {
    let all = || sequences.iter().flat_map(|s| s.trips.iter());
    let (mode_o, mode_d) = (mode(all().map(|t| t.o)), mode(all().map(|t| t.d)));
    let mut records = Vec::new();
    for (u, seq) in sequences.iter().enumerate() {
        for (k, trip) in seq.trips.iter().enumerate() {
            let (op, dp) = if k == 0 {
                (mode_o, mode_d)
            } else {
                (seq.trips[k - 1].d, seq.trips[k - 1].o)
            };
            records.push(StepRecord {
                user: u,
                step: k,
                origin: trip.o,
                destination: trip.d,
                origin_pred: op,
                destination_pred: dp,
                ll_o: None,
                ll_d: None,
                ll_t: None,
            });
        }
    }
    records
}

/// Splits users into five equal-count groups by entropy rate (stable on
/// ties, earlier groups take the remainder). Returns group labels and the
/// user indices of each group; fewer than five users form one group.
/// Users with fewer than two trips have no entropy rate and are left out.
pub fn entropy_groups(sequences: &[UserSequence]) -> Result<Vec<(String, Vec<usize>)>> {
    let mut scored = Vec::new();
    for (u, seq) in sequences.iter().enumerate() {
        if seq.len() < 2 {
            continue;
        }
        scored.push((lz_entropy_rate(&seq.locations())?, u));
    }
    if scored.len() < 5 {
        log::warn!("only {} users with trips; entropy report uses a single group", scored.len());
        return Ok(vec![("all".to_string(), scored.into_iter().map(|(_, u)| u).collect())]);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n, base, extra) = (scored.len(), scored.len() / 5, scored.len() % 5);
    let mut groups = Vec::with_capacity(5);
    let mut start = 0;
    for q in 0..5 {
        let size = base + usize::from(q < extra);
        groups.push((format!("q{}", q + 1), scored[start..start + size].iter().map(|(_, u)| *u).collect()));
        start += size;
    }
    debug_assert_eq!(start, n);
    Ok(groups)
}

/// Overall and per-entropy-group reports.
pub fn entropy_report(sequences: &[UserSequence], records: &[StepRecord], average: F1Average) -> Result<Vec<MetricsReport>> {
    let mut out = vec![MetricsReport::from_records("overall", records, average)];
    for (label, users) in entropy_groups(sequences)? {
        let mut member = vec![false; sequences.len()];
        for u in users {
            member[u] = true;
        }
        out.push(MetricsReport::from_records(&label, records.iter().filter(|r| member[r.user]), average));
    }
    Ok(out)
}

/// Rows `target,metric,value,group`. Baseline reports use `naive_*`
/// metric names.
pub fn write_metrics_csv<W: Write>(writer: W, model: &[MetricsReport], naive: &[MetricsReport]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "target,metric,value,group")?;
    for r in model {
        writeln!(w, "all,users,{},{}", r.users, r.group)?;
        writeln!(w, "all,steps,{},{}", r.steps, r.group)?;
        if let Some(n) = r.nll {
            writeln!(w, "t,nll,{},{}", n.t, r.group)?;
            writeln!(w, "o,nll,{},{}", n.o, r.group)?;
            writeln!(w, "d,nll,{},{}", n.d, r.group)?;
        }
        for (target, m) in [("o", r.origin), ("d", r.destination)] {
            writeln!(w, "{target},accuracy,{},{}", m.accuracy, r.group)?;
            writeln!(w, "{target},f1,{},{}", m.f1, r.group)?;
        }
    }
    for r in naive {
        if model.is_empty() {
            writeln!(w, "all,users,{},{}", r.users, r.group)?;
            writeln!(w, "all,steps,{},{}", r.steps, r.group)?;
        }
        for (target, m) in [("o", r.origin), ("d", r.destination)] {
            writeln!(w, "{target},naive_accuracy,{},{}", m.accuracy, r.group)?;
            writeln!(w, "{target},naive_f1,{},{}", m.f1, r.group)?;
        }
    }
    w.flush()
}

/// Human-readable side-by-side summary.
pub fn format_reports(model: &[MetricsReport], naive: &[MetricsReport]) -> String {
    let mut out = String::new();
    for (i, n) in naive.iter().enumerate() {
        out.push_str(&format!("[{}] users={} trips={}\n", n.group, n.users, n.steps));
        if let Some(m) = model.get(i) {
            if let Some(nll) = m.nll {
                out.push_str(&format!("  NLL  t={:.3} o={:.3} d={:.3}\n", nll.t, nll.o, nll.d));
            }
            out.push_str(&format!(
                "  model  acc o={:.3} d={:.3}  f1 o={:.3} d={:.3}\n",
                m.origin.accuracy, m.destination.accuracy, m.origin.f1, m.destination.f1
            ));
        }
        out.push_str(&format!(
            "  naive  acc o={:.3} d={:.3}  f1 o={:.3} d={:.3}\n",
            n.origin.accuracy, n.destination.accuracy, n.origin.f1, n.destination.f1
        ));
    }
    out
}
