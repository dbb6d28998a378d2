//! Minibatch Adam training on the joint negative log-likelihood.

use amtpp_autodiff::{Adam, AdamConfig, Graph, ParamStore, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::Ablation;
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{pad_batch, StationFeatures, UserSequence};
use crate::error::{AmtppError, Result};
use crate::model::{Amtpp, ModelConfig};
use crate::od_head::OdMask;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Most recent trips kept per sequence.
    pub window: usize,
    /// Rescale the gradient when its global norm exceeds this; 0 disables.
    pub clip_norm: f64,
    /// Anneal the learning rate along a half cosine from `lr` to zero over `epochs`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            ablation: Ablation::Full,
            batch_size: 64,
            epochs: 100,
            lr: 1e-3,
            seed: 0,
            patience: 10,
            window: 128,
            clip_norm: 0.0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    /// Model configuration with the ablation applied.
    pub fn effective_model(&self) -> ModelConfig {
        self.ablation.apply(&self.model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 {
            return Err(AmtppError::Config("batch_size and window must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(AmtppError::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        self.effective_model().validate()
    }
}

/// Per-step mean negative log-likelihoods.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllBreakdown {
    pub t: f64,
    pub o: f64,
    pub d: f64,
}

impl NllBreakdown {
    pub fn joint(&self) -> f64 {
        self.t + self.o + self.d
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct NllSums {
    t: f64,
    o: f64,
    d: f64,
    time_steps: usize,
    marker_steps: usize,
}

impl NllSums {
    fn means(&self) -> NllBreakdown {
        let div = |x: f64, n: usize| if n == 0 { f64::NAN } else { x / n as f64 };
        NllBreakdown {
            t: div(self.t, self.time_steps),
            o: div(self.o, self.marker_steps),
            d: div(self.d, self.marker_steps),
        }
    }
}

/// Per-step NLL means over `sequences`, evaluated in batches.
pub fn evaluate_nll(model: &Amtpp, store: &ParamStore, sequences: &[UserSequence], window: usize, batch_size: usize) -> Result<NllBreakdown> {
    let mut sums = NllSums::default();
    let refs: Vec<&UserSequence> = sequences.iter().filter(|s| !s.is_empty()).collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = pad_batch(chunk, model.stations(), window)?;
        let mut g = Graph::inference();
        let (loss, _) = model.loss(&mut g, store, &batch)?;
        sums.t += g.data(loss.nll_t)[0];
        sums.o += g.data(loss.nll_o)[0];
        sums.d += g.data(loss.nll_d)[0];
        sums.time_steps += batch.time_steps();
        sums.marker_steps += batch.marker_steps();
    }
    Ok(sums.means())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: NllBreakdown,
    pub val: NllBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation joint NLL.
    pub best: Checkpoint,
    /// State after the final epoch run.
    pub last: Checkpoint,
    /// Validation NLL before any update (or at the resumed checkpoint).
    pub initial_val: NllBreakdown,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Everything that evolves during training.
struct Session {
    config: TrainConfig,
    model: Amtpp,
    store: ParamStore,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    best_val: f64,
}

impl Session {
    fn snapshot(&self) -> Checkpoint {
        let mut train = self.config.clone();
        train.model = self.model.config.clone();
        Checkpoint {
            train,
            features: self.model.features.clone(),
            mask: self.model.mask.clone(),
            params: self.store.clone(),
            adam: Some(self.adam.clone()),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
            best_val_nll: self.best_val,
        }
    }
}

pub fn train(
    train_data: &[UserSequence],
    val_data: &[UserSequence],
    config: &TrainConfig,
    features: Option<StationFeatures>,
    mask: Option<OdMask>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (model, store) = Amtpp::new(config.effective_model(), features, mask, &mut rng)?;
    let adam = Adam::new(adam_config(config.lr), &store)?;
    run(
        Session {
            config: config.clone(),
            model,
            store,
            adam,
            rng,
            epoch: 0,
            best_val: f64::INFINITY,
        },
        train_data,
        val_data,
    )
}

/// Continues from `checkpoint` until `epochs` epochs have run in total.
pub fn resume(checkpoint: &Checkpoint, train_data: &[UserSequence], val_data: &[UserSequence], epochs: usize) -> Result<TrainOutcome> {
    let (model, store) = checkpoint.restore()?;
    let adam = match &checkpoint.adam {
        Some(a) => a.clone(),
        None => Adam::new(adam_config(checkpoint.train.lr), &store)?,
    };
    let mut config = checkpoint.train.clone();
    config.epochs = epochs;
    run(
        Session {
            config,
            model,
            store,
            adam,
            rng: checkpoint.rng.restore()?,
            epoch: checkpoint.epoch,
            best_val: checkpoint.best_val_nll,
        },
        train_data,
        val_data,
    )
}

/// Global gradient norm before clipping.
fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.iter().flat_map(|p| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

fn adam_config(lr: f64) -> AdamConfig {
    AdamConfig { lr, ..AdamConfig::default() }
}

/// Learning rate used during 1-based `epoch`.
fn epoch_lr(config: &TrainConfig, epoch: usize) -> f64 {
    if !config.cosine_decay || config.epochs == 0 {
        return config.lr;
    }
    let progress = (epoch - 1) as f64 / config.epochs as f64;
    0.5 * config.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn run(mut s: Session, train_data: &[UserSequence], val_data: &[UserSequence]) -> Result<TrainOutcome> {
    let train_refs: Vec<&UserSequence> = train_data.iter().filter(|u| !u.is_empty()).collect();
    if train_refs.is_empty() {
        return Err(AmtppError::Data("training set has no trips".into()));
    }
    if val_data.iter().all(|u| u.is_empty()) {
        return Err(AmtppError::Data("validation set has no trips".into()));
    }
    let (window, batch_size) = (s.config.window, s.config.batch_size);
    let initial_val = evaluate_nll(&s.model, &s.store, val_data, window, batch_size)?;
    if s.epoch == 0 {
        log::info!("epoch 0: val nll {:.4}", initial_val.joint());
    }
    let mut best = s.snapshot();
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_refs.len()).collect();

    while s.epoch < s.config.epochs {
        let last_good = s.snapshot();
        let epoch = s.epoch + 1;
        s.adam.config.lr = epoch_lr(&s.config, epoch);
        order.sort_unstable();
        order.shuffle(&mut s.rng);
        let mut sums = NllSums::default();
        let mut grad_norm_max: f64 = 0.0;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let seqs: Vec<&UserSequence> = chunk.iter().map(|&i| train_refs[i]).collect();
            let batch = pad_batch(&seqs, s.model.stations(), window)?;
            let mut g = Graph::new();
            let (loss, _) = s.model.loss(&mut g, &s.store, &batch)?;
            let objective = g.data(loss.objective)[0];
            let diverged = |detail: String| AmtppError::Diverged {
                epoch,
                batch: bi,
                detail,
                last_good: Box::new(last_good.clone()),
            };
            if !objective.is_finite() {
                let users: Vec<&str> = seqs.iter().map(|u| u.user_id.as_str()).collect();
                return Err(diverged(format!("objective {objective} on users {users:?}")));
            }
            s.store.zero_grad();
            g.backward(loss.objective)?;
            g.accumulate_param_grads(&mut s.store);
            let norm = clip_gradients(&mut s.store, s.config.clip_norm);
            grad_norm_max = grad_norm_max.max(norm);
            match s.adam.step(&mut s.store) {
                Ok(()) => {}
                Err(e @ TensorError::NonFiniteGradient { .. }) => return Err(diverged(e.to_string())),
                Err(e) => return Err(e.into()),
            }
            sums.t += g.data(loss.nll_t)[0];
            sums.o += g.data(loss.nll_o)[0];
            sums.d += g.data(loss.nll_d)[0];
            sums.time_steps += batch.time_steps();
            sums.marker_steps += batch.marker_steps();
        }
        s.epoch = epoch;
        let val = evaluate_nll(&s.model, &s.store, val_data, window, batch_size)?;
        let train_nll = sums.means();
        log::info!(
            "epoch {epoch}: train nll {:.4}, val nll {:.4}, max grad norm {grad_norm_max:.3e}",
            train_nll.joint(),
            val.joint()
        );
        log.push(EpochLog { epoch, train: train_nll, val });
        if val.joint() < s.best_val {
            s.best_val = val.joint();
            since_best = 0;
            best = s.snapshot();
        } else {
            since_best += 1;
            if since_best >= s.config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    // the best snapshot records the final best value
    best.best_val_nll = s.best_val;
    Ok(TrainOutcome {
        best,
        last: s.snapshot(),
        initial_val,
        log,
        stopped_early,
    })
}
