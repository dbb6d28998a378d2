//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! rejected; absent keys keep their defaults.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ablation::Ablation;
use crate::error::{AmtppError, Result};
use crate::eval::F1Average;
use crate::model::ModelConfig;
use crate::od_head::OdHeadKind;
use crate::time_head::TimeHeadKind;
use crate::train::TrainConfig;

type KeyResult = std::result::Result<bool, String>;

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("{value:?}: {e}"))
}

pub fn model_pairs(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("stations", m.stations.to_string()),
        ("components", m.components.to_string()),
        ("od_rank", m.od_rank.to_string()),
        ("origin_dim", m.origin_dim.to_string()),
        ("dest_dim", m.dest_dim.to_string()),
        ("hour_dim", m.hour_dim.to_string()),
        ("week_dim", m.week_dim.to_string()),
        ("heads", m.heads.to_string()),
        ("key_dim", m.key_dim.to_string()),
        ("value_dim", m.value_dim.to_string()),
        ("model_dim", m.model_dim.to_string()),
        ("layers", m.layers.to_string()),
        ("time_head", m.time_head.name().to_string()),
        ("od_head", m.od_head.name().to_string()),
        ("time_embedding", m.time_embedding.to_string()),
        ("learnable_pos_scale", m.learnable_pos_scale.to_string()),
        ("unconstrained_beta", m.unconstrained_beta.to_string()),
        ("tau_unit_hours", format!("{:?}", m.tau_unit_hours)),
    ]
}

/// Returns `Ok(false)` for keys that are not model keys.
pub fn set_model_key(m: &mut ModelConfig, key: &str, value: &str) -> KeyResult {
    match key {
        "stations" => m.stations = parse(value)?,
        "components" => m.components = parse(value)?,
        "od_rank" => m.od_rank = parse(value)?,
        "origin_dim" => m.origin_dim = parse(value)?,
        "dest_dim" => m.dest_dim = parse(value)?,
        "hour_dim" => m.hour_dim = parse(value)?,
        "week_dim" => m.week_dim = parse(value)?,
        "heads" => m.heads = parse(value)?,
        "key_dim" => m.key_dim = parse(value)?,
        "value_dim" => m.value_dim = parse(value)?,
        "model_dim" => m.model_dim = parse(value)?,
        "layers" => m.layers = parse(value)?,
        "time_head" => m.time_head = TimeHeadKind::parse(value).ok_or_else(|| format!("time_head must be all or lognormal, got {value:?}"))?,
        "od_head" => m.od_head = OdHeadKind::parse(value).ok_or_else(|| format!("od_head must be low_rank or independent, got {value:?}"))?,
        "time_embedding" => m.time_embedding = parse(value)?,
        "learnable_pos_scale" => m.learnable_pos_scale = parse(value)?,
        "unconstrained_beta" => m.unconstrained_beta = parse(value)?,
        "tau_unit_hours" => m.tau_unit_hours = parse(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Training keys other than the model's.
pub fn train_pairs(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("ablation", t.ablation.name().to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("epochs", t.epochs.to_string()),
        ("lr", format!("{:?}", t.lr)),
        ("seed", t.seed.to_string()),
        ("patience", t.patience.to_string()),
        ("window", t.window.to_string()),
        ("clip_norm", format!("{:?}", t.clip_norm)),
        ("cosine_decay", t.cosine_decay.to_string()),
    ]
}

pub fn set_train_key(t: &mut TrainConfig, key: &str, value: &str) -> KeyResult {
    match key {
        "ablation" => t.ablation = Ablation::parse(value).map_err(|e| e.to_string())?,
        "batch_size" => t.batch_size = parse(value)?,
        "epochs" => t.epochs = parse(value)?,
        "lr" => t.lr = parse(value)?,
        "seed" => t.seed = parse(value)?,
        "patience" => t.patience = parse(value)?,
        "window" => t.window = parse(value)?,
        "clip_norm" => t.clip_norm = parse(value)?,
        "cosine_decay" => t.cosine_decay = parse(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    /// When absent, validation users are split off `train_data`.
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    pub feature_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seconds added to epoch times before extracting hour and weekday.
    pub tz_offset: i64,
    pub train_fraction: f64,
    pub f1: F1Average,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_data: None,
            val_data: None,
            test_data: None,
            mask_path: None,
            feature_path: None,
            output_dir: PathBuf::from("out"),
            tz_offset: 0,
            train_fraction: 0.8,
            f1: F1Average::Weighted,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse_str(text: &str, source: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let perr = |msg: String| AmtppError::Parse {
                path: source.to_string(),
                line,
                msg,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| perr(format!("expected key = value, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(perr(format!("key {key} given twice")));
            }
            cfg.set(key, value, base_dir).map_err(perr)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Relative paths resolve against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AmtppError::io(path, e))?;
        Self::parse_str(&text, &path.display().to_string(), path.parent())
    }

    fn set(&mut self, key: &str, value: &str, base_dir: Option<&Path>) -> std::result::Result<(), String> {
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        match key {
            "train_data" => self.train_data = Some(path(value)),
            "val_data" => self.val_data = Some(path(value)),
            "test_data" => self.test_data = Some(path(value)),
            "mask_path" => self.mask_path = Some(path(value)),
            "feature_path" => self.feature_path = Some(path(value)),
            "output_dir" => self.output_dir = path(value),
            "tz_offset" => self.tz_offset = parse(value)?,
            "train_fraction" => self.train_fraction = parse(value)?,
            "f1" => self.f1 = F1Average::parse(value).ok_or_else(|| format!("f1 must be weighted or macro, got {value:?}"))?,
            _ => {
                if !set_train_key(&mut self.train, key, value)? && !set_model_key(&mut self.train.model, key, value)? {
                    return Err(format!("unknown key {key}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse_str("epochs = 3\n\nbogus = 1\n", "run.cfg", None).unwrap_err();
        match err {
            AmtppError::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::parse_str("# comment\nlr = 0.01\nstations = 12 # trailing\nablation = no_od_matrix\n", "x", None).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.model.stations, 12);
        assert_eq!(cfg.train.ablation, Ablation::NoOdMatrix);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.model.components, 16);
    }

    #[test]
    fn repeated_and_malformed() {
        assert!(RunConfig::parse_str("lr = 1\nlr = 2\n", "x", None).is_err());
        assert!(matches!(RunConfig::parse_str("epochs\n", "x", None), Err(AmtppError::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse_str("epochs = many\n", "x", None), Err(AmtppError::Parse { line: 1, .. })));
    }

    #[test]
    fn pairs_round_trip() {
        let mut t = TrainConfig::default();
        t.lr = 0.0123;
        t.model.od_head = OdHeadKind::Independent;
        let mut back = TrainConfig::default();
        for (k, v) in train_pairs(&t) {
            assert!(set_train_key(&mut back, k, &v).unwrap());
        }
        for (k, v) in model_pairs(&t.model) {
            assert!(set_model_key(&mut back.model, k, &v).unwrap());
        }
        assert_eq!(back, t);
    }
}
