//! The full next-trip model: history encoder, time head and OD head, with
//! the joint negative log-likelihood.

use amtpp_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{pad_batch, PaddedBatch, StationFeatures, Trip, UserSequence, SECONDS_PER_HOUR};
use crate::encoder::Encoder;
use crate::error::{AmtppError, Result};
use crate::od_head::{OdHead, OdHeadKind, OdMask, OdMatrix, OdVars};
use crate::time_head::{pick, MixtureVars, TimeDistribution, TimeHead, TimeHeadKind};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stations: usize,
    /// Mixture components `K`.
    pub components: usize,
    pub od_rank: usize,
    pub origin_dim: usize,
    pub dest_dim: usize,
    pub hour_dim: usize,
    pub week_dim: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub time_head: TimeHeadKind,
    pub od_head: OdHeadKind,
    /// Positional hour/week encodings in the time embedding; otherwise `τ`
    /// alone.
    pub time_embedding: bool,
    pub learnable_pos_scale: bool,
    /// Emit `β̂` straight from the affine map instead of through `exp`.
    pub unconstrained_beta: bool,
    /// The gap enters the trip embedding as `τ / tau_unit_hours`.
    pub tau_unit_hours: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stations: 10,
            components: 16,
            od_rank: 3,
            origin_dim: 64,
            dest_dim: 64,
            hour_dim: 64,
            week_dim: 64,
            heads: 4,
            key_dim: 25,
            value_dim: 25,
            model_dim: 100,
            layers: 1,
            time_head: TimeHeadKind::AsymmetricLogLaplace,
            od_head: OdHeadKind::LowRank,
            time_embedding: true,
            learnable_pos_scale: true,
            unconstrained_beta: false,
            tau_unit_hours: 24.0,
        }
    }
}

impl ModelConfig {
    /// Width of one trip embedding with `p` station features.
    pub fn embedding_width(&self, p: usize) -> usize {
        let time = if self.time_embedding { self.week_dim + self.hour_dim + 1 } else { 1 };
        time + self.origin_dim + self.dest_dim + 2 * p
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stations", self.stations),
            ("components", self.components),
            ("origin_dim", self.origin_dim),
            ("dest_dim", self.dest_dim),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("model_dim", self.model_dim),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(AmtppError::Config(format!("{name} must be positive")));
        }
        if !(self.tau_unit_hours > 0.0 && self.tau_unit_hours.is_finite()) {
            return Err(AmtppError::Config("tau_unit_hours must be positive".into()));
        }
        if self.stations < 2 {
            return Err(AmtppError::Config("need at least two stations".into()));
        }
        if self.time_embedding && (self.hour_dim == 0 || self.week_dim == 0 || self.hour_dim % 2 != 0 || self.week_dim % 2 != 0) {
            return Err(AmtppError::Config("hour_dim and week_dim must be positive and even".into()));
        }
        if self.od_head == OdHeadKind::LowRank && self.od_rank == 0 {
            return Err(AmtppError::Config("od_rank must be positive".into()));
        }
        Ok(())
    }
}

/// Graph outputs for every step of a batch.
#[derive(Clone, Copy, Debug)]
pub struct StepOutputs {
    pub mixture: MixtureVars,
    pub od: OdVars,
    /// `ln p(τ)` per step, `[B, T]`; meaningful where the time mask is set.
    pub time_ll: Var,
}

/// Summed negative log-likelihood terms over unmasked steps plus the
/// training objective (their total divided by the number of marker steps).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub objective: Var,
    pub nll_t: Var,
    pub nll_o: Var,
    pub nll_d: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NextTripPrediction {
    pub origin: Vec<f64>,
    pub destination: Vec<f64>,
    pub od: Option<OdMatrix>,
    pub time: TimeDistribution,
}

#[derive(Clone, Debug)]
pub struct Amtpp {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub time_head: TimeHead,
    pub od_head: OdHead,
    pub mask: OdMask,
    pub features: Option<StationFeatures>,
}

impl Amtpp {
    pub fn new(config: ModelConfig, features: Option<StationFeatures>, mask: Option<OdMask>, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mask = mask.unwrap_or_else(|| OdMask::diagonal(config.stations));
        if mask.stations() != config.stations {
            return Err(AmtppError::Config(format!("OD mask covers {} stations, model has {}", mask.stations(), config.stations)));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, &config, features.as_ref(), rng)?;
        let time_head = TimeHead::register(&mut store, config.model_dim, config.components, config.time_head, config.unconstrained_beta, rng)?;
        let od_head = OdHead::register(
            &mut store,
            config.model_dim + time_head.context_width(),
            config.stations,
            config.od_rank,
            config.od_head,
            rng,
        )?;
        Ok((
            Self {
                config,
                encoder,
                time_head,
                od_head,
                mask,
                features,
            },
            store,
        ))
    }

    pub fn stations(&self) -> usize {
        self.config.stations
    }

    /// Time and OD heads on predictive states `[B, T, c]`. `log_tau` is
    /// `[B, T, 1]` when time likelihoods are wanted.
    pub fn heads(&self, g: &mut Graph, store: &ParamStore, states: Var, log_tau: Option<Var>, beta_scale: f64) -> Result<(MixtureVars, OdVars, Option<Var>)> {
        let mixture = self.time_head.mixture(g, store, states)?;
        let time_ll = match log_tau {
            Some(y) => Some(self.time_head.log_likelihood(g, &mixture, y)?),
            None => None,
        };
        let mut parts = vec![states];
        parts.extend(self.time_head.context_parts(g, &mixture, beta_scale));
        let ctx = g.concat(&parts, 2)?;
        let od = self.od_head.forward(g, store, ctx, &self.mask)?;
        Ok((mixture, od, time_ll))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<StepOutputs> {
        if batch.pad_id != self.stations() {
            return Err(AmtppError::Data(format!("batch padded for {} stations, model has {}", batch.pad_id, self.stations())));
        }
        let h = self.encoder.encode(g, store, batch)?;
        let states = self.encoder.predictive_states(g, store, h)?;
        let y = g.constant(Tensor::new(vec![batch.batch, batch.steps, 1], batch.log_taus.clone())?);
        let (mixture, od, time_ll) = self.heads(g, store, states, Some(y), 1.0)?;
        Ok(StepOutputs {
            mixture,
            od,
            time_ll: time_ll.expect("time likelihood requested"),
        })
    }

    /// Masked joint negative log-likelihood.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<(LossVars, StepOutputs)> {
        let out = self.forward(g, store, batch)?;
        let not_marker: Vec<bool> = batch.marker_mask.iter().map(|m| !m).collect();
        let not_time: Vec<bool> = batch.time_mask.iter().map(|m| !m).collect();
        let safe = |ids: &[usize]| -> Vec<usize> { ids.iter().map(|&i| if i == batch.pad_id { 0 } else { i }).collect() };

        let masked_sum = |g: &mut Graph, x: Var, mask: &[bool]| -> Result<Var> {
            let kept = g.masked_fill(x, mask, 0.0)?;
            let total = g.sum(kept);
            Ok(g.neg(total))
        };
        let nll_t = masked_sum(g, out.time_ll, &not_time)?;
        let ll_o = g.pick_last(out.od.log_origin, &safe(&batch.origins))?;
        let nll_o = masked_sum(g, ll_o, &not_marker)?;
        let ll_d = g.pick_last(out.od.log_destination, &safe(&batch.destinations))?;
        let nll_d = masked_sum(g, ll_d, &not_marker)?;
        let to = g.add(nll_t, nll_o)?;
        let total = g.add(to, nll_d)?;
        let objective = g.scale(total, 1.0 / batch.marker_steps().max(1) as f64);
        Ok((
            LossVars {
                objective,
                nll_t,
                nll_o,
                nll_d,
            },
            out,
        ))
    }

    /// Distribution of the trip following `history` (possibly empty). The
    /// most recent `window` trips are encoded. `beta_scale` multiplies the
    /// `β̂` entries of the OD-head context.
    pub fn predict_next(&self, store: &ParamStore, history: &UserSequence, window: usize, beta_scale: f64) -> Result<NextTripPrediction> {
        let mut g = Graph::inference();
        let c = self.config.model_dim;
        let state = if history.is_empty() {
            let h0 = g.param(store, self.encoder.h0);
            g.reshape(h0, vec![1, 1, c])?
        } else {
            let batch = pad_batch(&[history], self.stations(), window)?;
            let h = self.encoder.encode(&mut g, store, &batch)?;
            g.slice(h, 1, batch.steps - 1, 1)?
        };
        let (mixture, od, _) = self.heads(&mut g, store, state, None, beta_scale)?;
        let s = self.stations();
        let origin = g.data(od.log_origin).iter().map(|v| v.exp()).collect();
        let destination = g.data(od.log_destination).iter().map(|v| v.exp()).collect();
        let od_matrix = od.log_conditional.map(|v| OdMatrix::from_log_conditionals(s, g.data(v)));
        Ok(NextTripPrediction {
            origin,
            destination,
            od: od_matrix,
            time: self.time_head.distribution(&g, &mixture, 0)?,
        })
    }

    /// Draws `n` trips one at a time, each conditioned on the history plus
    /// the trips sampled so far. `τ` comes from inverse-CDF sampling, then
    /// the origin, then the destination given that origin. With an empty
    /// history the first trip departs `τ` after `start_t`.
    pub fn sample_trips(&self, store: &ParamStore, history: &UserSequence, n: usize, window: usize, start_t: i64, rng: &mut ChaCha8Rng) -> Result<Vec<Trip>> {
        let s = self.stations();
        let mut seq = history.clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let p = self.predict_next(store, &seq, window, 1.0)?;
            let tau = p.time.sample_tau(rng);
            let last = seq.trips.last().map_or(start_t, |t| t.t);
            // whole seconds, strictly after the previous trip
            let t = last + ((tau * SECONDS_PER_HOUR).round() as i64).max(1);
            let o = pick(&p.origin, rng.random::<f64>());
            let mut dest = match &p.od {
                Some(m) => m.column(o),
                None => p.destination.clone(),
            };
            dest[o] = 0.0;
            let d = pick(&dest, rng.random::<f64>());
            let trip = Trip { t, o, d };
            seq.push(trip, s)?;
            out.push(trip);
        }
        Ok(out)
    }
}
