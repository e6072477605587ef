//! Lightweight probes trained on frozen embeddings: logistic regression, a
//! two-hidden-layer GELU MLP, and stacked Elman/GRU/LSTM recurrences read
//! out from the final hidden state.

mod adam;
mod checkpoint;
mod loss;
mod model;
mod ops;
mod params;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use loss::{log_softmax, softmax, softmax_cross_entropy};
pub use model::{Cache, DropoutMode};
pub use params::{ModelParams, Tensor};
pub use train::{
    evaluate_loss, predict_scores, run_schedule, train_probe, EarlyStopping, EpochOutcome, StopReason,
    TrainTrace, TrainedProbe,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("recurrent probe given a sequence without temporal order")]
    NonTemporalInput,
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("invalid probe configuration: {0}")]
    Config(String),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeFamily {
    Lr,
    Mlp,
    Elman,
    Gru,
    Lstm,
}

impl ProbeFamily {
    pub const ALL: [ProbeFamily; 5] = [
        ProbeFamily::Lr,
        ProbeFamily::Mlp,
        ProbeFamily::Elman,
        ProbeFamily::Gru,
        ProbeFamily::Lstm,
    ];

    pub fn is_recurrent(self) -> bool {
        matches!(self, ProbeFamily::Elman | ProbeFamily::Gru | ProbeFamily::Lstm)
    }

    pub fn label(self) -> &'static str {
        match self {
            ProbeFamily::Lr => "LR",
            ProbeFamily::Mlp => "MLP",
            ProbeFamily::Elman => "Elman",
            ProbeFamily::Gru => "GRU",
            ProbeFamily::Lstm => "LSTM",
        }
    }
}

impl std::str::FromStr for ProbeFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(Self::Lr),
            "mlp" => Ok(Self::Mlp),
            "elman" | "rnn" => Ok(Self::Elman),
            "gru" => Ok(Self::Gru),
            "lstm" => Ok(Self::Lstm),
            other => Err(format!("unknown probe family '{other}'")),
        }
    }
}

impl std::fmt::Display for ProbeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One hyperparameter point. `num_layers`, `hidden` and `dropout` only
/// matter for recurrent families. Adam runs without weight decay and with
/// a constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub family: ProbeFamily,
    pub num_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(family: ProbeFamily) -> Self {
        Self {
            family,
            num_layers: 1,
            hidden: 64,
            dropout: 0.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 3,
            tolerance: 1e-6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClassifierError::Config(m));
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam moments need beta in [0,1) and epsilon > 0".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive".into());
        }
        if self.family.is_recurrent() && (self.num_layers == 0 || self.hidden == 0) {
            return bad("recurrent probes need at least one layer and a hidden size".into());
        }
        Ok(())
    }
}

/// Probe input: a pooled vector or a `frames x dim` sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeInput {
    Vector(Vec<f64>),
    Sequence {
        frames: usize,
        dim: usize,
        values: Vec<f64>,
        temporal: bool,
    },
}

impl ProbeInput {
    pub fn sequence(frames: usize, dim: usize, values: Vec<f64>, temporal: bool) -> Self {
        assert_eq!(values.len(), frames * dim);
        ProbeInput::Sequence {
            frames,
            dim,
            values,
            temporal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProbeInput::Vector(v) => v.len(),
            ProbeInput::Sequence { dim, .. } => *dim,
        }
    }

    /// Frame mean, or the vector itself.
    pub fn pooled(&self) -> std::borrow::Cow<'_, [f64]> {
        match self {
            ProbeInput::Vector(v) => std::borrow::Cow::Borrowed(v),
            ProbeInput::Sequence {
                frames, dim, values, ..
            } => {
                let mut acc = vec![0.0; *dim];
                for row in values.chunks_exact(*dim) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= *frames as f64);
                std::borrow::Cow::Owned(acc)
            }
        }
    }

    /// Replaces a sequence by its frame mean.
    pub fn into_pooled(self) -> ProbeInput {
        match self {
            v @ ProbeInput::Vector(_) => v,
            s => ProbeInput::Vector(s.pooled().into_owned()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ProbeInput,
    pub label: usize,
}
