//! Trip records, per-user sequences, CSV ingestion and batch padding.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AmtppError, Result};

pub const SECONDS_PER_HOUR: f64 = 3600.0;
const SECONDS_PER_DAY: i64 = 86_400;

/// One row of a trip CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripRecord {
    pub user_id: String,
    /// Departure, seconds since the Unix epoch.
    pub t: i64,
    pub o: usize,
    pub d: usize,
}

/// A trip inside a [`UserSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Trip {
    pub t: i64,
    pub o: usize,
    pub d: usize,
}

/// Local hour of day (0..=23) and day of week (Monday = 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Calendar {
    pub hour: u8,
    pub weekday: u8,
}

impl Calendar {
    pub fn of(t: i64, tz_offset_secs: i64) -> Self {
        let local = t + tz_offset_secs;
        let hour = (local.rem_euclid(SECONDS_PER_DAY) / 3600) as u8;
        // 1970-01-01 was a Thursday.
        let weekday = (local.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as u8;
        Self { hour, weekday }
    }
}

/// Time-ordered trips of one user with derived inter-event times (hours)
/// and calendar features.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub trips: Vec<Trip>,
    /// `taus[i]` is the gap between trip `i` and trip `i + 1`, in hours.
    pub taus: Vec<f64>,
    pub calendar: Vec<Calendar>,
    pub tz_offset_secs: i64,
}

impl UserSequence {
    /// Builds a sequence from trips already sorted by time.
    pub fn new(user_id: impl Into<String>, trips: Vec<Trip>, stations: usize, tz_offset_secs: i64) -> Result<Self> {
        let mut seq = Self {
            user_id: user_id.into(),
            trips: Vec::with_capacity(trips.len()),
            taus: Vec::new(),
            calendar: Vec::new(),
            tz_offset_secs,
        };
        for trip in trips {
            seq.push(trip, stations)?;
        }
        Ok(seq)
    }

    /// Appends a trip that departs strictly after the last one.
    pub fn push(&mut self, trip: Trip, stations: usize) -> Result<()> {
        validate_stations(trip.o, trip.d, stations).map_err(|m| AmtppError::Data(format!("user {}: {m}", self.user_id)))?;
        if let Some(last) = self.trips.last() {
            if trip.t <= last.t {
                return Err(AmtppError::Data(format!(
                    "user {}: departure {} not after previous departure {}",
                    self.user_id, trip.t, last.t
                )));
            }
            self.taus.push((trip.t - last.t) as f64 / SECONDS_PER_HOUR);
        }
        self.calendar.push(Calendar::of(trip.t, self.tz_offset_secs));
        self.trips.push(trip);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    /// Inter-event time that precedes trip `i`; zero for the first trip.
    pub fn tau_before(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.taus[i - 1]
        }
    }

    /// `[o_1, d_1, o_2, d_2, ...]`
    pub fn locations(&self) -> Vec<usize> {
        self.trips.iter().flat_map(|t| [t.o, t.d]).collect()
    }

    /// The first `n` trips.
    pub fn prefix(&self, n: usize) -> UserSequence {
        let n = n.min(self.len());
        UserSequence {
            user_id: self.user_id.clone(),
            trips: self.trips[..n].to_vec(),
            taus: self.taus[..n.saturating_sub(1)].to_vec(),
            calendar: self.calendar[..n].to_vec(),
            tz_offset_secs: self.tz_offset_secs,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = TripRecord> + '_ {
        self.trips.iter().map(|t| TripRecord {
            user_id: self.user_id.clone(),
            t: t.t,
            o: t.o,
            d: t.d,
        })
    }
}

fn validate_stations(o: usize, d: usize, stations: usize) -> std::result::Result<(), String> {
    if o >= stations || d >= stations {
        return Err(format!("station id {} out of range (S = {stations})", o.max(d)));
    }
    if o == d {
        return Err(format!("origin equals destination ({o})"));
    }
    Ok(())
}

/// Groups trip records by user (first-appearance order), sorts each user's
/// trips by time and derives gaps and calendar features.
pub fn sequences_from_records(records: Vec<(usize, TripRecord)>, stations: usize, tz_offset_secs: i64, source: &str) -> Result<Vec<UserSequence>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, Trip)>> = HashMap::new();
    for (line, r) in records {
        validate_stations(r.o, r.d, stations).map_err(|msg| AmtppError::Parse {
            path: source.to_string(),
            line,
            msg,
        })?;
        let entry = groups.entry(r.user_id.clone()).or_insert_with(|| {
            order.push(r.user_id.clone());
            Vec::new()
        });
        entry.push((line, Trip { t: r.t, o: r.o, d: r.d }));
    }
    let mut out = Vec::with_capacity(order.len());
    for user in order {
        let mut trips = groups.remove(&user).unwrap_or_default();
        trips.sort_by_key(|(_, t)| t.t);
        for pair in trips.windows(2) {
            if pair[0].1.t == pair[1].1.t {
                return Err(AmtppError::Parse {
                    path: source.to_string(),
                    line: pair[1].0,
                    msg: format!("duplicate departure time {} for user {user}", pair[1].1.t),
                });
            }
        }
        out.push(UserSequence::new(user, trips.into_iter().map(|(_, t)| t).collect(), stations, tz_offset_secs)?);
    }
    Ok(out)
}

/// Reads a `user_id,t,o,d` trip CSV.
pub fn read_trips<R: Read>(reader: R, stations: usize, tz_offset_secs: i64, source: &str) -> Result<Vec<UserSequence>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let parse_err = |line: usize, msg: String| AmtppError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["user_id", "t", "o", "d"] {
        return Err(parse_err(1, format!("expected header user_id,t,o,d, got {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if row.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, got {}", row.len())));
        }
        let field = |k: usize, name: &str| -> Result<i64> {
            row[k].parse::<i64>().map_err(|e| parse_err(line, format!("field {name}: {e}")))
        };
        let (t, o, d) = (field(1, "t")?, field(2, "o")?, field(3, "d")?);
        if o < 0 || d < 0 {
            return Err(parse_err(line, "negative station id".into()));
        }
        records.push((
            line,
            TripRecord {
                user_id: row[0].to_string(),
                t,
                o: o as usize,
                d: d as usize,
            },
        ));
    }
    sequences_from_records(records, stations, tz_offset_secs, source)
}

pub fn load_csv(path: impl AsRef<Path>, stations: usize, tz_offset_secs: i64) -> Result<Vec<UserSequence>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| AmtppError::io(path, e))?;
    read_trips(std::io::BufReader::new(file), stations, tz_offset_secs, &path.display().to_string())
}

pub fn write_trips<W: Write>(writer: W, sequences: &[UserSequence]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "user_id,t,o,d")?;
    for s in sequences {
        for t in &s.trips {
            writeln!(w, "{},{},{},{}", s.user_id, t.t, t.o, t.d)?;
        }
    }
    w.flush()
}

pub fn save_csv(path: impl AsRef<Path>, sequences: &[UserSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| AmtppError::io(path, e))?;
    write_trips(file, sequences).map_err(|e| AmtppError::io(path, e))
}

/// Per-station real features appended to the location embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct StationFeatures {
    pub dim: usize,
    /// Row-major `S x dim`.
    pub values: Vec<f64>,
}

impl StationFeatures {
    pub fn row(&self, station: usize) -> &[f64] {
        &self.values[station * self.dim..(station + 1) * self.dim]
    }

    pub fn stations(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }
}

/// Reads a `station_id,f_1,...,f_P` CSV; every station in `0..S` must
/// appear exactly once.
pub fn load_station_features(path: impl AsRef<Path>, stations: usize) -> Result<StationFeatures> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| AmtppError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let perr = |line: usize, msg: String| AmtppError::Parse {
        path: source.clone(),
        line,
        msg,
    };
    let header = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.get(0) != Some("station_id") || header.len() < 2 {
        return Err(perr(1, "expected header station_id,f_1,...".into()));
    }
    let dim = header.len() - 1;
    let mut values = vec![0.0; stations * dim];
    let mut seen = vec![false; stations];
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| perr(line, e.to_string()))?;
        let id: usize = row[0].parse().map_err(|e| perr(line, format!("station_id: {e}")))?;
        if id >= stations {
            return Err(perr(line, format!("station id {id} out of range (S = {stations})")));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(perr(line, format!("station {id} listed twice")));
        }
        for k in 0..dim {
            values[id * dim + k] = row[k + 1].parse().map_err(|e| perr(line, format!("f_{}: {e}", k + 1)))?;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(AmtppError::Data(format!("{source}: no features for station {missing}")));
    }
    Ok(StationFeatures { dim, values })
}

/// Disjoint user-level split, deterministic in `seed`.
pub fn split_users(sequences: &[UserSequence], train_fraction: f64, seed: u64) -> Result<(Vec<UserSequence>, Vec<UserSequence>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(AmtppError::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n = sequences.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(AmtppError::Data(format!(
            "splitting {n} users at {train_fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = idx[..n_train].to_vec();
    let mut val_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| sequences[i].clone()).collect(),
        val_idx.into_iter().map(|i| sequences[i].clone()).collect(),
    ))
}

/// Right-padded `B x T` batch.
///
/// Step `k` of a row holds trip `k` as encoder input and is also the
/// prediction target for the hidden state that precedes it.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub steps: usize,
    /// Reserved padding station id (`S`).
    pub pad_id: usize,
    pub hours: Vec<f64>,
    pub weekdays: Vec<f64>,
    /// Gap before each trip in hours (encoder input); zero for a user's
    /// first trip and for padding.
    pub taus: Vec<f64>,
    /// `ln tau` wherever `time_mask` is set, zero elsewhere.
    pub log_taus: Vec<f64>,
    pub origins: Vec<usize>,
    pub destinations: Vec<usize>,
    /// Steps whose origin and destination enter the loss.
    pub marker_mask: Vec<bool>,
    /// Steps whose gap enters the loss: real steps except a user's first
    /// trip.
    pub time_mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn marker_steps(&self) -> usize {
        self.marker_mask.iter().filter(|m| **m).count()
    }

    pub fn time_steps(&self) -> usize {
        self.time_mask.iter().filter(|m| **m).count()
    }
}

/// Pads to the longest (window-truncated) sequence of the batch.
pub fn pad_batch(sequences: &[&UserSequence], stations: usize, window: usize) -> Result<PaddedBatch> {
    let steps = sequences.iter().map(|s| s.len().min(window)).max().unwrap_or(0).max(1);
    pad_batch_to(sequences, stations, window, steps)
}

/// Like [`pad_batch`] with an explicit number of steps, which must cover
/// every (window-truncated) sequence. Sequences longer than `window` keep
/// their most recent trips.
pub fn pad_batch_to(sequences: &[&UserSequence], stations: usize, window: usize, steps: usize) -> Result<PaddedBatch> {
    if sequences.is_empty() {
        return Err(AmtppError::Data("cannot pad an empty batch".into()));
    }
    if window == 0 || steps == 0 {
        return Err(AmtppError::Config("window and steps must be positive".into()));
    }
    let b = sequences.len();
    let n = b * steps;
    let mut batch = PaddedBatch {
        batch: b,
        steps,
        pad_id: stations,
        hours: vec![0.0; n],
        weekdays: vec![0.0; n],
        taus: vec![0.0; n],
        log_taus: vec![0.0; n],
        origins: vec![stations; n],
        destinations: vec![stations; n],
        marker_mask: vec![false; n],
        time_mask: vec![false; n],
        lengths: Vec::with_capacity(b),
    };
    for (row, seq) in sequences.iter().enumerate() {
        let len = seq.len().min(window);
        if len > steps {
            return Err(AmtppError::Data(format!("sequence of {len} trips exceeds {steps} padded steps")));
        }
        let start = seq.len() - len;
        for k in 0..len {
            let i = start + k;
            let at = row * steps + k;
            let trip = seq.trips[i];
            if trip.o >= stations || trip.d >= stations {
                return Err(AmtppError::UnknownStation {
                    station: trip.o.max(trip.d),
                    stations,
                });
            }
            batch.hours[at] = seq.calendar[i].hour as f64;
            batch.weekdays[at] = seq.calendar[i].weekday as f64;
            batch.taus[at] = seq.tau_before(i);
            batch.origins[at] = trip.o;
            batch.destinations[at] = trip.d;
            batch.marker_mask[at] = true;
            if i > 0 {
                batch.time_mask[at] = true;
                batch.log_taus[at] = seq.tau_before(i).ln();
            }
        }
        batch.lengths.push(len);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: &str, times: &[i64]) -> UserSequence {
        let trips = times
            .iter()
            .enumerate()
            .map(|(i, &t)| Trip { t, o: i % 2, d: 1 - i % 2 })
            .collect();
        UserSequence::new(user, trips, 4, 0).unwrap()
    }

    #[test]
    fn gap_in_hours() {
        let s = seq("a", &[0, 9 * 3600]);
        assert_eq!(s.taus, vec![9.0]);
    }

    #[test]
    fn single_trip_has_no_gaps() {
        let s = seq("a", &[100]);
        assert!(s.taus.is_empty());
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn epoch_start_is_thursday_midnight() {
        assert_eq!(Calendar::of(0, 0), Calendar { hour: 0, weekday: 3 });
        // offsets shift the local clock
        assert_eq!(Calendar::of(0, 8 * 3600), Calendar { hour: 8, weekday: 3 });
        assert_eq!(Calendar::of(0, -3600), Calendar { hour: 23, weekday: 2 });
    }

    #[test]
    fn rejects_bad_rows() {
        let csv_text = "user_id,t,o,d\nu,0,1,1\n";
        match read_trips(csv_text.as_bytes(), 3, 0, "x.csv") {
            Err(AmtppError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let dup = "user_id,t,o,d\nu,5,0,1\nv,5,0,1\nu,5,1,0\n";
        match read_trips(dup.as_bytes(), 3, 0, "x.csv") {
            Err(AmtppError::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        let big = "user_id,t,o,d\nu,0,0,3\n";
        assert!(matches!(read_trips(big.as_bytes(), 3, 0, "x.csv"), Err(AmtppError::Parse { line: 2, .. })));
        let header = "uid,t,o,d\n";
        assert!(read_trips(header.as_bytes(), 3, 0, "x.csv").is_err());
    }

    #[test]
    fn unsorted_rows_are_ordered() {
        let text = "user_id,t,o,d\nu,7200,1,0\nu,0,0,1\n";
        let seqs = read_trips(text.as_bytes(), 2, 0, "x").unwrap();
        assert_eq!(seqs[0].trips[0].t, 0);
        assert_eq!(seqs[0].taus, vec![2.0]);
    }

    #[test]
    fn masks_follow_lengths() {
        let a = seq("a", &[0, 3600, 7200]);
        let b = seq("b", &[0, 3600, 7200, 10800, 14400]);
        let batch = pad_batch(&[&a, &b], 4, 128).unwrap();
        assert_eq!(batch.steps, 5);
        assert_eq!(&batch.marker_mask[..5], &[true, true, true, false, false]);
        assert_eq!(&batch.marker_mask[5..], &[true; 5]);
        assert_eq!(&batch.time_mask[..3], &[false, true, true]);
        assert_eq!(batch.origins[3], 4);
        assert_eq!(batch.lengths, vec![3, 5]);
    }

    #[test]
    fn single_sequence_batch_is_unpadded() {
        let a = seq("a", &[0, 3600, 9000]);
        let batch = pad_batch(&[&a], 4, 128).unwrap();
        assert_eq!(batch.steps, 3);
        assert!(batch.marker_mask.iter().all(|m| *m));
        assert_eq!(batch.origins, vec![0, 1, 0]);
        assert_eq!(batch.taus, vec![0.0, 1.0, 1.5]);
    }

    #[test]
    fn window_keeps_most_recent_trips() {
        let a = seq("a", &[0, 3600, 7200, 10800]);
        let batch = pad_batch(&[&a], 4, 2).unwrap();
        assert_eq!(batch.steps, 2);
        assert_eq!(batch.taus, vec![1.0, 1.0]);
        // the window's first step is not the user's first trip, so its gap counts
        assert_eq!(batch.time_mask, vec![true, true]);
    }

    #[test]
    fn split_partitions_users() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&format!("u{i}"), &[i])).collect();
        let (tr, va) = split_users(&seqs, 0.8, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let (tr2, va2) = split_users(&seqs, 0.8, 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        let mut ids: Vec<_> = tr.iter().chain(&va).map(|s| s.user_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(split_users(&seqs[..1], 0.5, 0).is_err());
        assert!(split_users(&seqs, 1.0, 0).is_err());
    }
}
