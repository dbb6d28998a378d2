//! Versioned checkpoint container.
//!
//! Layout (see `docs/checkpoint-format.md`): a UTF-8 header of
//! `key=value` lines opened by `AMTPP-CHECKPOINT` and closed by
//! `END_HEADER`, followed by little-endian binary blobs in this order:
//! station features, extra OD-mask pairs, parameters, Adam moments.

use std::path::Path;

use amtpp_autodiff::{Adam, AdamConfig, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_pairs, set_model_key, set_train_key, train_pairs};
use crate::data::StationFeatures;
use crate::error::{AmtppError, Result};
use crate::model::Amtpp;
use crate::od_head::OdMask;
use crate::train::TrainConfig;

pub const MAGIC: &str = "AMTPP-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const END: &str = "END_HEADER";

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Training settings; `train.model` is the configuration actually built
    /// (ablation already applied).
    pub train: TrainConfig,
    pub features: Option<StationFeatures>,
    pub mask: OdMask,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub rng: RngState,
    pub epoch: usize,
    pub best_val_nll: f64,
}

fn bad(msg: impl Into<String>) -> AmtppError {
    AmtppError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad("truncated binary section"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("blob too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    /// Rebuilds the model and checks the stored parameters against its
    /// layout.
    pub fn restore(&self) -> Result<(Amtpp, ParamStore)> {
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let (model, template) = Amtpp::new(self.train.model.clone(), self.features.clone(), Some(self.mask.clone()), &mut scratch)?;
        if template.len() != self.params.len() {
            return Err(bad(format!("expected {} parameters, found {}", template.len(), self.params.len())));
        }
        for (t, p) in template.iter().zip(self.params.iter()) {
            if t.name != p.name || t.value.shape() != p.value.shape() || t.trainable != p.trainable {
                return Err(bad(format!(
                    "parameter {} {:?} does not match model layout ({} {:?})",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        Ok((model, self.params.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        let mut line = |k: &str, v: String| {
            h.push_str(k);
            h.push('=');
            h.push_str(&v);
            h.push('\n');
        };
        line("format_version", FORMAT_VERSION.to_string());
        for (k, v) in model_pairs(&self.train.model) {
            line(&format!("model.{k}"), v);
        }
        for (k, v) in train_pairs(&self.train) {
            line(&format!("train.{k}"), v);
        }
        line("epoch", self.epoch.to_string());
        line("best_val_nll", format!("{:?}", self.best_val_nll));
        line("rng.seed", self.rng.seed.iter().map(|b| format!("{b:02x}")).collect());
        line("rng.stream", self.rng.stream.to_string());
        line("rng.word_pos", self.rng.word_pos.to_string());
        line("feature_dim", self.features.as_ref().map_or(0, |f| f.dim).to_string());
        let extra = self.mask.extra_pairs();
        line("mask_pairs", extra.len().to_string());
        line("params", self.params.len().to_string());
        match &self.adam {
            Some(a) => {
                line("adam.step", a.step.to_string());
                line("adam.lr", format!("{:?}", a.config.lr));
                line("adam.beta1", format!("{:?}", a.config.beta1));
                line("adam.beta2", format!("{:?}", a.config.beta2));
                line("adam.eps", format!("{:?}", a.config.eps));
            }
            None => line("adam", "none".into()),
        }

        let mut out = format!("{MAGIC}\n{h}{END}\n").into_bytes();
        if let Some(f) = &self.features {
            put_f64s(&mut out, &f.values);
        }
        for (o, d) in extra {
            out.extend_from_slice(&(o as u64).to_le_bytes());
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.value.data());
        }
        if let Some(a) = &self.adam {
            for m in a.m.iter().chain(&a.v) {
                put_f64s(&mut out, m);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = format!("\n{END}\n");
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| bad("missing END_HEADER"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let mut train = TrainConfig::default();
        let mut kv = std::collections::HashMap::new();
        for l in lines {
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("malformed header line {l:?}")))?;
            if let Some(mk) = k.strip_prefix("model.") {
                if !set_model_key(&mut train.model, mk, v).map_err(bad)? {
                    return Err(bad(format!("unknown header key {k}")));
                }
            } else if let Some(tk) = k.strip_prefix("train.") {
                if !set_train_key(&mut train, tk, v).map_err(bad)? {
                    return Err(bad(format!("unknown header key {k}")));
                }
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        fn take(kv: &mut std::collections::HashMap<String, String>, k: &str) -> Result<String> {
            kv.remove(k).ok_or_else(|| bad(format!("header lacks {k}")))
        }
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| bad(format!("bad value for {k}: {v:?}")))
        }
        let version: u32 = num("format_version", take(&mut kv, "format_version")?)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let epoch = num("epoch", take(&mut kv, "epoch")?)?;
        let best_val_nll = num("best_val_nll", take(&mut kv, "best_val_nll")?)?;
        let seed_hex = take(&mut kv, "rng.seed")?;
        if seed_hex.len() != 64 {
            return Err(bad("rng.seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng.seed is not hex"))?;
        }
        let rng = RngState {
            seed,
            stream: num("rng.stream", take(&mut kv, "rng.stream")?)?,
            word_pos: num("rng.word_pos", take(&mut kv, "rng.word_pos")?)?,
        };
        let feature_dim: usize = num("feature_dim", take(&mut kv, "feature_dim")?)?;
        let mask_pairs: usize = num("mask_pairs", take(&mut kv, "mask_pairs")?)?;
        let n_params: usize = num("params", take(&mut kv, "params")?)?;
        let adam_cfg = if kv.get("adam").map(String::as_str) == Some("none") {
            kv.remove("adam");
            None
        } else {
            Some((
                num::<u64>("adam.step", take(&mut kv, "adam.step")?)?,
                AdamConfig {
                    lr: num("adam.lr", take(&mut kv, "adam.lr")?)?,
                    beta1: num("adam.beta1", take(&mut kv, "adam.beta1")?)?,
                    beta2: num("adam.beta2", take(&mut kv, "adam.beta2")?)?,
                    eps: num("adam.eps", take(&mut kv, "adam.eps")?)?,
                },
            ))
        };
        if let Some(k) = kv.keys().next() {
            return Err(bad(format!("unknown header key {k}")));
        }

        let s = train.model.stations;
        let mut r = Reader {
            buf: bytes,
            pos: split + marker.len(),
        };
        let features = if feature_dim > 0 {
            Some(StationFeatures {
                dim: feature_dim,
                values: r.f64s(s * feature_dim)?,
            })
        } else {
            None
        };
        let mut mask = OdMask::diagonal(s);
        for _ in 0..mask_pairs {
            let (o, d) = (r.u64()? as usize, r.u64()? as usize);
            mask.forbid(o, d).map_err(|e| bad(e.to_string()))?;
        }
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("parameter name is not UTF-8"))?.to_string();
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                x => return Err(bad(format!("bad trainable flag {x}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let value = Tensor::new(shape, r.f64s(numel)?)?;
            params.add(name, value, trainable)?;
        }
        let adam = match adam_cfg {
            Some((step, config)) => {
                let mut a = Adam::new(config, &params)?;
                a.step = step;
                let sizes: Vec<usize> = params.iter().map(|p| p.value.numel()).collect();
                a.m = sizes.iter().map(|n| r.f64s(*n)).collect::<Result<_>>()?;
                a.v = sizes.iter().map(|n| r.f64s(*n)).collect::<Result<_>>()?;
                Some(a)
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            train,
            features,
            mask,
            params,
            adam,
            rng,
            epoch,
            best_val_nll,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| AmtppError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| AmtppError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
