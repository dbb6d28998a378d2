//! Trip embeddings and causal multi-head self-attention over a user's
//! history.

use amtpp_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::data::{PaddedBatch, StationFeatures};
use crate::error::{AmtppError, Result};
use crate::init::{glorot, zeros};
use crate::model::ModelConfig;

/// Initial positional scale `L_pos`.
pub const DEFAULT_POS_SCALE: f64 = 10_000.0;

/// `[sin(pos/L^(0/J)), cos(pos/L^(0/J)), sin(pos/L^(2/J)), ...]`
pub fn positional_encode(pos: f64, l_pos: f64, j: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(j);
    for i in 0..j / 2 {
        let angle = pos / l_pos.powf(2.0 * i as f64 / j as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

#[derive(Clone, Debug)]
struct Layer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stations: usize,
    hour_dim: usize,
    week_dim: usize,
    heads: usize,
    key_dim: usize,
    value_dim: usize,
    pub model_dim: usize,
    tau_unit_hours: f64,
    /// `ln L_pos` for hour and week; absent without time embedding.
    pos_scale: Option<(ParamId, ParamId)>,
    emb_o: (ParamId, ParamId),
    emb_d: (ParamId, ParamId),
    layers: Vec<Layer>,
    pub h0: ParamId,
    /// `(S + 1) x P`, zero row for padding.
    features: Option<(usize, Vec<f64>)>,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, features: Option<&StationFeatures>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.hour_dim % 2 != 0 || cfg.week_dim % 2 != 0 {
            return Err(AmtppError::Config("hour and week embedding sizes must be even".into()));
        }
        let s = cfg.stations;
        let pos_scale = if cfg.time_embedding {
            let init = Tensor::scalar(DEFAULT_POS_SCALE.ln());
            let init = Tensor::new(vec![1], init.into_data())?;
            Some((
                store.add("enc.hour.log_pos_scale", init.clone(), cfg.learnable_pos_scale)?,
                store.add("enc.week.log_pos_scale", init, cfg.learnable_pos_scale)?,
            ))
        } else {
            None
        };
        // Row S (padding) stays zero at init like the biases.
        let mut table = |name: &str, width: usize, store: &mut ParamStore| -> Result<(ParamId, ParamId)> {
            let w = glorot(store, &format!("enc.{name}.weight"), s + 1, width, rng)?;
            store.get_mut(w).value.data_mut()[s * width..].fill(0.0);
            Ok((w, zeros(store, &format!("enc.{name}.bias"), vec![width])?))
        };
        let emb_o = table("origin", cfg.origin_dim, store)?;
        let emb_d = table("destination", cfg.dest_dim, store)?;
        let features = match features {
            Some(f) => {
                if f.stations() != s {
                    return Err(AmtppError::Config(format!("features cover {} stations, model has {s}", f.stations())));
                }
                let mut rows = f.values.clone();
                rows.extend(std::iter::repeat(0.0).take(f.dim));
                Some((f.dim, rows))
            }
            None => None,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut width = cfg.embedding_width(features.as_ref().map_or(0, |f| f.0));
        for l in 0..cfg.layers {
            layers.push(Layer {
                wq: glorot(store, &format!("enc.layer{l}.wq"), width, cfg.heads * cfg.key_dim, rng)?,
                wk: glorot(store, &format!("enc.layer{l}.wk"), width, cfg.heads * cfg.key_dim, rng)?,
                wv: glorot(store, &format!("enc.layer{l}.wv"), width, cfg.heads * cfg.value_dim, rng)?,
                wo: glorot(store, &format!("enc.layer{l}.wo"), cfg.heads * cfg.value_dim, cfg.model_dim, rng)?,
            });
            width = cfg.model_dim;
        }
        let h0 = zeros(store, "enc.h0", vec![cfg.model_dim])?;
        Ok(Self {
            stations: s,
            hour_dim: cfg.hour_dim,
            week_dim: cfg.week_dim,
            heads: cfg.heads,
            key_dim: cfg.key_dim,
            value_dim: cfg.value_dim,
            model_dim: cfg.model_dim,
            tau_unit_hours: cfg.tau_unit_hours,
            pos_scale,
            emb_o,
            emb_d,
            layers,
            h0,
            features,
        })
    }

    pub fn pos_scale_params(&self) -> Option<(ParamId, ParamId)> {
        self.pos_scale
    }

    /// Sinusoidal encoding of `[B, T]` positions, `[B, T, j]`.
    pub fn positional(g: &mut Graph, log_scale: Var, positions: &[f64], bt: [usize; 2], j: usize) -> Result<Var> {
        let half = j / 2;
        let coef = Tensor::new(vec![half], (0..half).map(|i| -(2.0 * i as f64) / j as f64).collect())?;
        let coef = g.constant(coef);
        let expo = g.mul(log_scale, coef)?;
        let inv_freq = g.exp(expo);
        let pos = g.constant(Tensor::new(vec![bt[0], bt[1], 1], positions.to_vec())?);
        let angle = g.mul(pos, inv_freq)?;
        let sin = g.sin(angle);
        let cos = g.cos(angle);
        let sin = g.reshape(sin, vec![bt[0], bt[1], half, 1])?;
        let cos = g.reshape(cos, vec![bt[0], bt[1], half, 1])?;
        let pair = g.concat(&[sin, cos], 3)?;
        Ok(g.reshape(pair, vec![bt[0], bt[1], j])?)
    }

    /// Trip embeddings `E`, `[B, T, J]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<Var> {
        let bt = [batch.batch, batch.steps];
        let tau = g.constant(Tensor::new(vec![bt[0], bt[1], 1], batch.taus.iter().map(|t| t / self.tau_unit_hours).collect())?);
        let time = match self.pos_scale {
            Some((lh, lw)) => {
                let (lh, lw) = (g.param(store, lh), g.param(store, lw));
                let week = Self::positional(g, lw, &batch.weekdays, bt, self.week_dim)?;
                let hour = Self::positional(g, lh, &batch.hours, bt, self.hour_dim)?;
                g.concat(&[week, hour, tau], 2)?
            }
            None => tau,
        };
        let mut parts = vec![time];
        for (ids, (w, b)) in [(&batch.origins, self.emb_o), (&batch.destinations, self.emb_d)] {
            if let Some(&bad) = ids.iter().find(|i| **i > self.stations) {
                return Err(AmtppError::UnknownStation {
                    station: bad,
                    stations: self.stations,
                });
            }
            let (w, b) = (g.param(store, w), g.param(store, b));
            let rows = g.gather_rows(w, ids, &bt)?;
            parts.push(g.add(rows, b)?);
            if let Some((p, table)) = &self.features {
                let t = g.constant(Tensor::new(vec![self.stations + 1, *p], table.clone())?);
                parts.push(g.gather_rows(t, ids, &bt)?);
            }
        }
        Ok(g.concat(&parts, 2)?)
    }

    /// Causal multi-head attention stack, `[B, T, J] -> [B, T, c]`.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
        let t = g.shape(e)[1];
        let mut causal = vec![false; t * t];
        for i in 0..t {
            for j in i + 1..t {
                causal[i * t + j] = true;
            }
        }
        let scale = 1.0 / (self.key_dim as f64).sqrt();
        let mut x = e;
        for layer in &self.layers {
            let (wq, wk, wv, wo) = (g.param(store, layer.wq), g.param(store, layer.wk), g.param(store, layer.wv), g.param(store, layer.wo));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice(q, 2, h * self.key_dim, self.key_dim)?;
                let kh = g.slice(k, 2, h * self.key_dim, self.key_dim)?;
                let vh = g.slice(v, 2, h * self.value_dim, self.value_dim)?;
                let kt = g.transpose(kh)?;
                let raw = g.matmul(qh, kt)?;
                let scores = g.scale(raw, scale);
                let masked = g.masked_fill(scores, &causal, f64::NEG_INFINITY)?;
                let attn = g.softmax(masked)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
            let proj = g.matmul(cat, wo)?;
            x = g.gelu(proj);
        }
        Ok(x)
    }

    /// Hidden states `h_1..h_T`, `[B, T, c]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<Var> {
        let e = self.embed(g, store, batch)?;
        self.attend(g, store, e)
    }

    /// States that predict each step: `[h_0, h_1, ..., h_{T-1}]`.
    pub fn predictive_states(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let (b, t) = (g.shape(h)[0], g.shape(h)[1]);
        let h0 = g.param(store, self.h0);
        let h0 = g.broadcast_to(h0, vec![b, 1, self.model_dim])?;
        if t == 1 {
            return Ok(h0);
        }
        let prev = g.slice(h, 1, 0, t - 1)?;
        Ok(g.concat(&[h0, prev], 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates() {
        assert_eq!(positional_encode(0.0, 1e4, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn two_dims_ignore_scale() {
        for l in [2.0, 10.0, 1e4] {
            assert_eq!(positional_encode(5.0, l, 2), vec![5f64.sin(), 5f64.cos()]);
        }
    }
}
