use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ProbeConfig, ProbeFamily};

/// Named row-major parameter tensor. Bias vectors are `rows x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let mut t = Self::zeros(name, rows, cols);
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All trainable tensors of one probe, in a fixed family-specific order.
///
/// * LR: `out.w`, `out.b`
/// * MLP: `fc1.w`, `fc1.b`, `fc2.w`, `fc2.b`, `out.w`, `out.b`
/// * Elman, per layer: `wx`, `wh`, `b`
/// * GRU, per layer: `wx`, `wh`, `bx`, `bh` with gates stacked `r, z, n`
/// * LSTM, per layer: `wx`, `wh`, `b` with gates stacked `i, f, g, o`
///
/// Recurrent families end with `out.w`, `out.b` reading the last hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub family: ProbeFamily,
    pub input_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub classes: usize,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, LSTM forget bias 1.
    pub fn init(cfg: &ProbeConfig, input_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut tensors = Vec::new();
        let (hidden, num_layers) = match cfg.family {
            ProbeFamily::Lr => {
                tensors.push(Tensor::uniform("out.w", classes, input_dim, rng));
                tensors.push(Tensor::zeros("out.b", classes, 1));
                (0, 0)
            }
            ProbeFamily::Mlp => {
                let d = input_dim;
                tensors.push(Tensor::uniform("fc1.w", d, d, rng));
                tensors.push(Tensor::zeros("fc1.b", d, 1));
                tensors.push(Tensor::uniform("fc2.w", d, d, rng));
                tensors.push(Tensor::zeros("fc2.b", d, 1));
                tensors.push(Tensor::uniform("out.w", classes, d, rng));
                tensors.push(Tensor::zeros("out.b", classes, 1));
                (d, 2)
            }
            family => {
                let h = cfg.hidden;
                let gates = gate_count(family);
                for l in 0..cfg.num_layers {
                    let in_dim = if l == 0 { input_dim } else { h };
                    let p = format!("{}{l}", family_prefix(family));
                    tensors.push(Tensor::uniform(format!("{p}.wx"), gates * h, in_dim, rng));
                    tensors.push(Tensor::uniform(format!("{p}.wh"), gates * h, h, rng));
                    if family == ProbeFamily::Gru {
                        tensors.push(Tensor::zeros(format!("{p}.bx"), gates * h, 1));
                        tensors.push(Tensor::zeros(format!("{p}.bh"), gates * h, 1));
                    } else {
                        let mut b = Tensor::zeros(format!("{p}.b"), gates * h, 1);
                        if family == ProbeFamily::Lstm {
                            b.data[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                        }
                        tensors.push(b);
                    }
                }
                tensors.push(Tensor::uniform("out.w", classes, h, rng));
                tensors.push(Tensor::zeros("out.b", classes, 1));
                (h, cfg.num_layers)
            }
        };
        Self {
            family: cfg.family,
            input_dim,
            hidden,
            num_layers,
            classes,
            tensors,
        }
    }

    /// Same shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Tensors per recurrent layer.
    pub(crate) fn per_layer(&self) -> usize {
        if self.family == ProbeFamily::Gru {
            4
        } else {
            3
        }
    }

    pub(crate) fn output(&self) -> (&Tensor, &Tensor) {
        let n = self.tensors.len();
        (&self.tensors[n - 2], &self.tensors[n - 1])
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.data.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }
}

pub(crate) fn gate_count(family: ProbeFamily) -> usize {
    match family {
        ProbeFamily::Gru => 3,
        ProbeFamily::Lstm => 4,
        _ => 1,
    }
}

fn family_prefix(family: ProbeFamily) -> &'static str {
    match family {
        ProbeFamily::Elman => "rnn",
        ProbeFamily::Gru => "gru",
        ProbeFamily::Lstm => "lstm",
        ProbeFamily::Lr | ProbeFamily::Mlp => "",
    }
}
