//! Synthetic commuter populations for desk-scale experiments.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::data::{Calendar, Trip, UserSequence};
use crate::error::{AmtppError, Result};

const HOUR: f64 = 3600.0;
const DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Archetype {
    /// Home to work in the morning, back in the evening, on weekdays.
    RoundTrip,
    /// One home-to-work trip every day.
    MorningOnly,
    /// Uniform OD pairs at exponential gaps.
    Random,
}

impl Archetype {
    pub fn is_commuter(self) -> bool {
        !matches!(self, Archetype::Random)
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::RoundTrip => "round_trip",
            Archetype::MorningOnly => "morning_only",
            Archetype::Random => "random",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPopulationSpec {
    pub users: usize,
    pub stations: usize,
    pub days: usize,
    pub round_trip: f64,
    pub morning_only: f64,
    pub random: f64,
    /// Mean local hour of the morning departure.
    pub morning_peak_hour: f64,
    /// Laplace scale (hours) of the daily departure jitter.
    pub departure_spread_hours: f64,
    /// Per-user shift of the morning peak, uniform in `±` this many hours.
    pub user_offset_hours: f64,
    pub work_hours: f64,
    /// Log-space scales of the work duration below and above its mode.
    /// Unequal values skew the duration towards overtime.
    pub duration_spread_low: f64,
    pub duration_spread_high: f64,
    pub random_mean_gap_hours: f64,
    /// Midnight UTC of the first simulated day (default: Monday 2017-07-03).
    pub start_epoch: i64,
    pub seed: u64,
}

impl Default for SyntheticPopulationSpec {
    fn default() -> Self {
        Self {
            users: 200,
            stations: 10,
            days: 30,
            round_trip: 0.6,
            morning_only: 0.2,
            random: 0.2,
            morning_peak_hour: 8.0,
            departure_spread_hours: 0.25,
            user_offset_hours: 0.5,
            work_hours: 8.0,
            duration_spread_low: 0.02,
            duration_spread_high: 0.08,
            random_mean_gap_hours: 12.0,
            start_epoch: 1_499_040_000,
            seed: 7,
        }
    }
}

impl SyntheticPopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let props = [self.round_trip, self.morning_only, self.random];
        if props.iter().any(|p| !(0.0..=1.0).contains(p)) || (props.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AmtppError::Config(format!("archetype proportions must be in [0,1] and sum to 1, got {props:?}")));
        }
        if self.stations < 2 {
            return Err(AmtppError::Config("need at least two stations".into()));
        }
        let positive = [
            self.departure_spread_hours,
            self.work_hours,
            self.duration_spread_low,
            self.duration_spread_high,
            self.random_mean_gap_hours,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.user_offset_hours < 0.0 {
            return Err(AmtppError::Config("spreads, durations and gaps must be positive".into()));
        }
        Ok(())
    }
}

/// Generated users and their archetypes, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub sequences: Vec<UserSequence>,
    pub archetypes: Vec<Archetype>,
}

impl Population {
    pub fn archetype_of(&self, user_id: &str) -> Option<Archetype> {
        self.sequences.iter().position(|s| s.user_id == user_id).map(|i| self.archetypes[i])
    }

    pub fn write_archetypes<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "user_id,archetype")?;
        for (s, a) in self.sequences.iter().zip(&self.archetypes) {
            writeln!(w, "{},{}", s.user_id, a)?;
        }
        w.flush()
    }

    pub fn save_archetypes(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| AmtppError::io(path, e))?;
        self.write_archetypes(file).map_err(|e| AmtppError::io(path, e))
    }
}

fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    if rng.random::<bool>() {
        e * scale
    } else {
        -e * scale
    }
}

fn asymmetric_laplace(rng: &mut ChaCha8Rng, low: f64, high: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    if rng.random::<f64>() < low / (low + high) {
        -e * low
    } else {
        e * high
    }
}

fn distinct_pair(rng: &mut ChaCha8Rng, stations: usize) -> (usize, usize) {
    let a = rng.random_range(0..stations);
    let mut b = rng.random_range(0..stations - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

struct Builder {
    trips: Vec<Trip>,
}

impl Builder {
    fn push(&mut self, t: f64, o: usize, d: usize) {
        let mut t = t.round() as i64;
        if let Some(last) = self.trips.last() {
            t = t.max(last.t + 1);
        }
        self.trips.push(Trip { t, o, d });
    }
}

pub fn generate_synthetic(spec: &SyntheticPopulationSpec) -> Result<Population> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_rt = (spec.round_trip * spec.users as f64).round() as usize;
    let n_mo = ((spec.morning_only * spec.users as f64).round() as usize).min(spec.users - n_rt.min(spec.users));
    let mut archetypes: Vec<Archetype> = (0..spec.users)
        .map(|i| {
            if i < n_rt {
                Archetype::RoundTrip
            } else if i < n_rt + n_mo {
                Archetype::MorningOnly
            } else {
                Archetype::Random
            }
        })
        .collect();
    archetypes.shuffle(&mut rng);

    let horizon = spec.start_epoch as f64 + (spec.days as i64 * DAY) as f64;
    let mut sequences = Vec::with_capacity(spec.users);
    for (i, &arch) in archetypes.iter().enumerate() {
        let (home, work) = distinct_pair(&mut rng, spec.stations);
        let offset = (rng.random::<f64>() * 2.0 - 1.0) * spec.user_offset_hours;
        let mut b = Builder { trips: Vec::new() };
        match arch {
            Archetype::RoundTrip | Archetype::MorningOnly => {
                for day in 0..spec.days as i64 {
                    let midnight = spec.start_epoch + day * DAY;
                    if arch == Archetype::RoundTrip && Calendar::of(midnight, 0).weekday >= 5 {
                        continue;
                    }
                    let leave = midnight as f64 + (spec.morning_peak_hour + offset + laplace(&mut rng, spec.departure_spread_hours)) * HOUR;
                    b.push(leave, home, work);
                    if arch == Archetype::RoundTrip {
                        let stay = spec.work_hours * asymmetric_laplace(&mut rng, spec.duration_spread_low, spec.duration_spread_high).exp();
                        b.push(leave + stay * HOUR, work, home);
                    }
                }
            }
            Archetype::Random => {
                let mut t = spec.start_epoch as f64 + rng.random::<f64>() * DAY as f64;
                while t < horizon {
                    let (o, d) = distinct_pair(&mut rng, spec.stations);
                    b.push(t, o, d);
                    let gap: f64 = Exp1.sample(&mut rng);
                    t += (gap * spec.random_mean_gap_hours).max(1.0 / 60.0) * HOUR;
                }
            }
        }
        sequences.push(UserSequence::new(format!("u{i:04}"), b.trips, spec.stations, 0)?);
    }
    Ok(Population { sequences, archetypes })
}
