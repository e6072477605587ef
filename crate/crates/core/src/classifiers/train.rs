//! Minibatch training with early stopping on train/dev loss plateaus or
//! sustained increases, restoring the lowest-dev-loss epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, softmax, softmax_cross_entropy, AdamState, ClassifierError, DropoutMode, Example, ModelParams,
    ProbeConfig, ProbeInput, Result,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    Diverged,
    MaxEpochs,
}

/// Per-epoch losses (epochs are 1-based; index `e - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    /// Training hit a non-finite gradient or loss.
    pub non_finite: bool,
}

/// Tracks consecutive unchanged / increased epochs for both losses.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    tolerance: f64,
    prev: Option<[f64; 2]>,
    unchanged: [usize; 2],
    increased: [usize; 2],
}

impl EarlyStopping {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        Self {
            patience,
            tolerance,
            prev: None,
            unchanged: [0; 2],
            increased: [0; 2],
        }
    }

    /// Feeds one epoch's losses. Stops once either loss has stayed within
    /// `tolerance` of its previous value, or has risen, for more than
    /// `patience` consecutive epochs.
    pub fn update(&mut self, train_loss: f64, dev_loss: f64) -> Option<StopReason> {
        let cur = [train_loss, dev_loss];
        if let Some(prev) = self.prev {
            for k in 0..2 {
                let delta = cur[k] - prev[k];
                if delta.abs() < self.tolerance {
                    self.unchanged[k] += 1;
                    self.increased[k] = 0;
                } else if delta > 0.0 {
                    self.increased[k] += 1;
                    self.unchanged[k] = 0;
                } else {
                    self.unchanged[k] = 0;
                    self.increased[k] = 0;
                }
            }
        }
        self.prev = Some(cur);
        if self.unchanged.iter().any(|&n| n > self.patience) {
            Some(StopReason::Converged)
        } else if self.increased.iter().any(|&n| n > self.patience) {
            Some(StopReason::Diverged)
        } else {
            None
        }
    }
}

pub enum EpochOutcome {
    Losses { train: f64, dev: f64 },
    NonFinite,
}

/// Drives epochs `1..=max_epochs`. `snapshot` runs whenever an epoch sets a
/// new strictly lower dev loss.
pub fn run_schedule<S>(
    state: &mut S,
    max_epochs: usize,
    patience: usize,
    tolerance: f64,
    mut epoch: impl FnMut(&mut S, usize) -> EpochOutcome,
    mut snapshot: impl FnMut(&mut S, usize),
) -> TrainTrace {
    let mut stopper = EarlyStopping::new(patience, tolerance);
    let mut trace = TrainTrace {
        train_loss: Vec::new(),
        dev_loss: Vec::new(),
        best_epoch: 0,
        best_dev_loss: f64::INFINITY,
        stop_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
        non_finite: false,
    };
    for e in 1..=max_epochs {
        trace.stop_epoch = e;
        let (train, dev) = match epoch(state, e) {
            EpochOutcome::Losses { train, dev } if train.is_finite() && dev.is_finite() => (train, dev),
            _ => {
                trace.non_finite = true;
                trace.stop_reason = StopReason::Diverged;
                return trace;
            }
        };
        trace.train_loss.push(train);
        trace.dev_loss.push(dev);
        if dev < trace.best_dev_loss {
            trace.best_dev_loss = dev;
            trace.best_epoch = e;
            snapshot(state, e);
        }
        if let Some(reason) = stopper.update(train, dev) {
            trace.stop_reason = reason;
            return trace;
        }
    }
    trace
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub params: ModelParams,
    pub trace: TrainTrace,
    pub config: ProbeConfig,
}

/// Mean cross-entropy in evaluation mode.
pub fn evaluate_loss(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(ClassifierError::EmptySet("evaluation"));
    }
    let mut total = 0.0;
    for ex in examples {
        let logits = params.scores(&ex.input)?;
        total += softmax_cross_entropy(&logits, ex.label).0;
    }
    Ok(total / examples.len() as f64)
}

/// Class probabilities per example, evaluation mode.
pub fn predict_scores(params: &ModelParams, inputs: &[ProbeInput]) -> Result<Vec<Vec<f64>>> {
    inputs.iter().map(|x| params.scores(x).map(|l| softmax(&l))).collect()
}

fn check_examples(set: &[Example], what: &'static str, dim: usize, classes: usize, cfg: &ProbeConfig) -> Result<()> {
    if set.is_empty() {
        return Err(ClassifierError::EmptySet(what));
    }
    for ex in set {
        if ex.label >= classes {
            return Err(ClassifierError::ShapeMismatch(format!("label {} >= {classes} classes", ex.label)));
        }
        if ex.input.dim() != dim {
            return Err(ClassifierError::ShapeMismatch(format!(
                "{what} input dim {} differs from {dim}",
                ex.input.dim()
            )));
        }
        if cfg.family.is_recurrent() {
            match &ex.input {
                ProbeInput::Sequence { temporal: false, .. } => return Err(ClassifierError::NonTemporalInput),
                ProbeInput::Vector(_) => {
                    return Err(ClassifierError::ShapeMismatch("recurrent probe given pooled vectors".into()))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

struct RunState<'a> {
    params: ModelParams,
    best: ModelParams,
    grads: ModelParams,
    adam: AdamState,
    order: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    train: &'a [Example],
    dev: &'a [Example],
    cfg: &'a ProbeConfig,
}

impl RunState<'_> {
    fn epoch(&mut self) -> EpochOutcome {
        self.order.shuffle(&mut self.shuffle_rng);
        let batches: Vec<Vec<usize>> = self.order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect();
        for batch in batches {
            self.grads.scale(0.0);
            for &i in &batch {
                let ex = &self.train[i];
                let mode = DropoutMode::Train {
                    rng: &mut self.dropout_rng,
                    rate: self.cfg.dropout,
                };
                let (logits, cache) = match self.params.forward(&ex.input, mode) {
                    Ok(v) => v,
                    Err(_) => return EpochOutcome::NonFinite,
                };
                let (_, dlogits) = softmax_cross_entropy(&logits, ex.label);
                self.params.backward(&cache, &dlogits, &mut self.grads);
            }
            self.grads.scale(1.0 / batch.len() as f64);
            if adam_step(&mut self.params, &self.grads, &mut self.adam, self.cfg).is_err() {
                return EpochOutcome::NonFinite;
            }
        }
        match (evaluate_loss(&self.params, self.train), evaluate_loss(&self.params, self.dev)) {
            (Ok(train), Ok(dev)) => EpochOutcome::Losses { train, dev },
            _ => EpochOutcome::NonFinite,
        }
    }
}

/// Trains one probe and returns the parameters of its lowest-dev-loss epoch.
///
/// Recurrent sequences are processed one at a time within a minibatch, so
/// differing lengths never need padding. Pooled families see frame means.
pub fn train_probe(train: &[Example], dev: &[Example], classes: usize, cfg: &ProbeConfig) -> Result<TrainedProbe> {
    cfg.validate()?;
    if classes < 2 {
        return Err(ClassifierError::Config(format!("need at least 2 classes, got {classes}")));
    }
    let dim = train
        .first()
        .map(|e| e.input.dim())
        .ok_or(ClassifierError::EmptySet("train"))?;
    check_examples(train, "train", dim, classes, cfg)?;
    check_examples(dev, "dev", dim, classes, cfg)?;

    let pool = |set: &[Example]| -> Vec<Example> {
        set.iter()
            .map(|e| Example {
                input: ProbeInput::Vector(e.input.pooled().into_owned()),
                label: e.label,
            })
            .collect()
    };
    let (train_pooled, dev_pooled);
    let (train, dev) = if cfg.family.is_recurrent() {
        (train, dev)
    } else {
        train_pooled = pool(train);
        dev_pooled = pool(dev);
        (&train_pooled[..], &dev_pooled[..])
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(cfg, dim, classes, &mut init_rng);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut state = RunState {
        best: params.clone(),
        grads: params.zeros_like(),
        adam: AdamState::new(&params),
        params,
        order: (0..train.len()).collect(),
        shuffle_rng,
        dropout_rng,
        train,
        dev,
        cfg,
    };
    let trace = run_schedule(
        &mut state,
        cfg.max_epochs,
        cfg.patience,
        cfg.tolerance,
        |s, _| s.epoch(),
        |s, _| s.best = s.params.clone(),
    );
    Ok(TrainedProbe {
        params: state.best,
        trace,
        config: cfg.clone(),
    })
}
