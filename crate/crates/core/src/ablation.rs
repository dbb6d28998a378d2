//! The five model configurations compared under one seed and budget.

use std::fmt;

use crate::data::{StationFeatures, UserSequence};
use crate::error::{AmtppError, Result};
use crate::model::ModelConfig;
use crate::od_head::{OdHeadKind, OdMask};
use crate::time_head::TimeHeadKind;
use crate::train::{evaluate_nll, train, NllBreakdown, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Log-normal mixture time head.
    LognormTimeHead,
    /// Independent origin and destination heads.
    NoOdMatrix,
    /// Time embedding reduced to `τ`.
    NoTimeEmbedding,
    /// Positional scales frozen at their initial value.
    FixedEmbedding,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::LognormTimeHead,
        Ablation::NoOdMatrix,
        Ablation::NoTimeEmbedding,
        Ablation::FixedEmbedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::LognormTimeHead => "lognorm_time_head",
            Self::NoOdMatrix => "no_od_matrix",
            Self::NoTimeEmbedding => "no_time_embedding",
            Self::FixedEmbedding => "fixed_embedding",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "AMTPP",
            Self::LognormTimeHead => "LogNormMix t",
            Self::NoOdMatrix => "No OD matrix",
            Self::NoTimeEmbedding => "No time embedding",
            Self::FixedEmbedding => "Fixed embedding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| AmtppError::Config(format!("unknown ablation {s:?}; expected one of full, lognorm_time_head, no_od_matrix, no_time_embedding, fixed_embedding")))
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Self::Full => {}
            Self::LognormTimeHead => cfg.time_head = TimeHeadKind::LogNormal,
            Self::NoOdMatrix => cfg.od_head = OdHeadKind::Independent,
            Self::NoTimeEmbedding => cfg.time_embedding = false,
            Self::FixedEmbedding => cfg.learnable_pos_scale = false,
        }
        cfg
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub nll: NllBreakdown,
    pub epochs_run: usize,
}

/// Trains every configuration from `base` (same seed, epochs, data) and
/// scores the best checkpoint of each on `eval_data`.
pub fn run_ablation(
    train_data: &[UserSequence],
    val_data: &[UserSequence],
    eval_data: &[UserSequence],
    base: &TrainConfig,
    features: Option<StationFeatures>,
    mask: Option<OdMask>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let cfg = TrainConfig { ablation, ..base.clone() };
        let outcome = train(train_data, val_data, &cfg, features.clone(), mask.clone())?;
        let (model, store) = outcome.best.restore()?;
        let nll = evaluate_nll(&model, &store, eval_data, cfg.window, cfg.batch_size)?;
        log::info!("{}: t {:.3} o {:.3} d {:.3}", ablation.label(), nll.t, nll.o, nll.d);
        rows.push(AblationRow {
            ablation,
            nll,
            epochs_run: outcome.log.len(),
        });
    }
    Ok(rows)
}

/// Text table with one row per configuration and NLL columns t, o, d.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<20} {:>8} {:>8} {:>8}\n", "Configuration", "NLL t", "NLL o", "NLL d");
    for r in rows {
        out.push_str(&format!("{:<20} {:>8.3} {:>8.3} {:>8.3}\n", r.ablation.label(), r.nll.t, r.nll.o, r.nll.d));
    }
    out
}
