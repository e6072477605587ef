//! Forward passes with activation caches and their exact reverse-mode
//! gradients (backpropagation through time for the recurrent families).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu, gelu_grad, gemv_acc, gemv_t_acc, ger_acc, sigmoid};
use super::params::{gate_count, ModelParams, Tensor};
use super::{ClassifierError, ProbeFamily, ProbeInput, Result};

/// Dropout is only sampled in training mode, between stacked recurrent layers.
pub enum DropoutMode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, rate: f64 },
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Hidden states, `frames x hidden`.
    hs: Vec<f64>,
    /// Activated gates, `frames x gates*hidden` (GRU: r,z,n; LSTM: i,f,g,o).
    gates: Vec<f64>,
    /// GRU: `W_hn h + b_hn`; LSTM: cell states.
    aux: Vec<f64>,
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Lr {
        x: Vec<f64>,
    },
    Mlp {
        x: Vec<f64>,
        z1: Vec<f64>,
        a1: Vec<f64>,
        z2: Vec<f64>,
        a2: Vec<f64>,
    },
    Recurrent {
        frames: usize,
        /// Input sequence seen by each layer (after dropout for layers > 0).
        inputs: Vec<Vec<f64>>,
        layers: Vec<LayerCache>,
        /// Inverted-dropout multipliers applied to the output of layer `l`
        /// before it feeds layer `l + 1`.
        masks: Vec<Option<Vec<f64>>>,
    },
}

impl ModelParams {
    /// Computes class logits; returns the activation cache for `backward`.
    pub fn forward(&self, input: &ProbeInput, mode: DropoutMode<'_>) -> Result<(Vec<f64>, Cache)> {
        if input.dim() != self.input_dim {
            return Err(ClassifierError::ShapeMismatch(format!(
                "input dim {} vs model dim {}",
                input.dim(),
                self.input_dim
            )));
        }
        match self.family {
            ProbeFamily::Lr => {
                let x = input.pooled().into_owned();
                let logits = affine(&self.tensors[0], &self.tensors[1], &x);
                Ok((logits, Cache::Lr { x }))
            }
            ProbeFamily::Mlp => {
                let x = input.pooled().into_owned();
                let z1 = affine(&self.tensors[0], &self.tensors[1], &x);
                let a1: Vec<f64> = z1.iter().map(|&v| gelu(v)).collect();
                let z2 = affine(&self.tensors[2], &self.tensors[3], &a1);
                let a2: Vec<f64> = z2.iter().map(|&v| gelu(v)).collect();
                let logits = affine(&self.tensors[4], &self.tensors[5], &a2);
                Ok((logits, Cache::Mlp { x, z1, a1, z2, a2 }))
            }
            _ => self.forward_recurrent(input, mode),
        }
    }

    /// Logits only, evaluation mode.
    pub fn scores(&self, input: &ProbeInput) -> Result<Vec<f64>> {
        self.forward(input, DropoutMode::Eval).map(|(l, _)| l)
    }

    fn forward_recurrent(&self, input: &ProbeInput, mut mode: DropoutMode<'_>) -> Result<(Vec<f64>, Cache)> {
        let (frames, values) = match input {
            ProbeInput::Sequence { temporal: false, .. } => return Err(ClassifierError::NonTemporalInput),
            ProbeInput::Sequence { frames, values, .. } if *frames > 0 => (*frames, values),
            ProbeInput::Sequence { .. } => {
                return Err(ClassifierError::ShapeMismatch("sequence has no frames".into()))
            }
            ProbeInput::Vector(_) => {
                return Err(ClassifierError::ShapeMismatch(
                    "recurrent probe needs a frame sequence, got a pooled vector".into(),
                ))
            }
        };
        let h = self.hidden;
        let per = self.per_layer();
        let mut inputs = Vec::with_capacity(self.num_layers);
        let mut layers = Vec::with_capacity(self.num_layers);
        let mut masks = Vec::with_capacity(self.num_layers);
        let mut current = values.clone();
        for l in 0..self.num_layers {
            let in_dim = if l == 0 { self.input_dim } else { h };
            let t = &self.tensors[l * per..(l + 1) * per];
            let cache = layer_forward(self.family, t, &current, frames, in_dim, h);
            let mut next = cache.hs.clone();
            let mask = match &mut mode {
                DropoutMode::Train { rng, rate } if *rate > 0.0 && l + 1 < self.num_layers => {
                    let keep = 1.0 - *rate;
                    let m: Vec<f64> = (0..next.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    next.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            inputs.push(std::mem::replace(&mut current, next));
            layers.push(cache);
            masks.push(mask);
        }
        let top = layers.last().expect("at least one layer");
        let last = &top.hs[(frames - 1) * h..frames * h];
        let (w, b) = self.output();
        let logits = affine(w, b, last);
        Ok((
            logits,
            Cache::Recurrent {
                frames,
                inputs,
                layers,
                masks,
            },
        ))
    }

    /// Final hidden state of the top recurrent layer (evaluation mode).
    pub fn final_hidden(&self, input: &ProbeInput) -> Result<Vec<f64>> {
        let (_, cache) = self.forward(input, DropoutMode::Eval)?;
        match cache {
            Cache::Recurrent { frames, layers, .. } => {
                let h = self.hidden;
                Ok(layers.last().expect("layer").hs[(frames - 1) * h..frames * h].to_vec())
            }
            _ => Err(ClassifierError::ShapeMismatch("not a recurrent probe".into())),
        }
    }

    /// Accumulates the gradient of the loss into `grads` given the loss
    /// gradient with respect to the logits.
    pub fn backward(&self, cache: &Cache, dlogits: &[f64], grads: &mut ModelParams) {
        match cache {
            Cache::Lr { x } => {
                affine_backward(&self.tensors[0], dlogits, x, &mut grads.tensors[0..2], None);
            }
            Cache::Mlp { x, z1, a1, z2, a2 } => {
                let d = self.input_dim;
                let mut da2 = vec![0.0; d];
                affine_backward(&self.tensors[4], dlogits, a2, &mut grads.tensors[4..6], Some(&mut da2));
                let dz2: Vec<f64> = da2.iter().zip(z2).map(|(g, &z)| g * gelu_grad(z)).collect();
                let mut da1 = vec![0.0; d];
                affine_backward(&self.tensors[2], &dz2, a1, &mut grads.tensors[2..4], Some(&mut da1));
                let dz1: Vec<f64> = da1.iter().zip(z1).map(|(g, &z)| g * gelu_grad(z)).collect();
                affine_backward(&self.tensors[0], &dz1, x, &mut grads.tensors[0..2], None);
            }
            Cache::Recurrent {
                frames,
                inputs,
                layers,
                masks,
            } => {
                let (frames, h, per) = (*frames, self.hidden, self.per_layer());
                let n = self.tensors.len();
                let top = layers.last().expect("layer");
                let last = &top.hs[(frames - 1) * h..frames * h];
                let mut dlast = vec![0.0; h];
                let (w_out, _) = self.output();
                affine_backward(w_out, dlogits, last, &mut grads.tensors[n - 2..n], Some(&mut dlast));

                // gradient w.r.t. every hidden state of the current layer
                let mut dhs = vec![0.0; frames * h];
                dhs[(frames - 1) * h..].copy_from_slice(&dlast);
                for l in (0..self.num_layers).rev() {
                    let in_dim = if l == 0 { self.input_dim } else { h };
                    let params = &self.tensors[l * per..(l + 1) * per];
                    let g = &mut grads.tensors[l * per..(l + 1) * per];
                    let need_dx = l > 0;
                    let dx = layer_backward(
                        self.family,
                        params,
                        g,
                        &layers[l],
                        &inputs[l],
                        &dhs,
                        frames,
                        in_dim,
                        h,
                        need_dx,
                    );
                    if need_dx {
                        dhs = dx;
                        if let Some(m) = &masks[l - 1] {
                            dhs.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
                        }
                    }
                }
            }
        }
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut out = b.data.clone();
    gemv_acc(&w.data, w.rows, w.cols, x, &mut out);
    out
}

/// Gradients of `y = W x + b`: accumulates into `[dW, db]`, and into `dx`
/// when requested.
fn affine_backward(w: &Tensor, dy: &[f64], x: &[f64], g: &mut [Tensor], dx: Option<&mut [f64]>) {
    let (gw, gb) = g.split_at_mut(1);
    ger_acc(&mut gw[0].data, dy, x);
    gb[0].data.iter_mut().zip(dy).for_each(|(a, d)| *a += d);
    if let Some(dx) = dx {
        gemv_t_acc(&w.data, w.rows, w.cols, dy, dx);
    }
}

fn layer_forward(family: ProbeFamily, t: &[Tensor], xs: &[f64], frames: usize, in_dim: usize, h: usize) -> LayerCache {
    let gates = gate_count(family);
    let gh = gates * h;
    let mut hs = vec![0.0; frames * h];
    let mut gate_acts = vec![0.0; if family == ProbeFamily::Elman { 0 } else { frames * gh }];
    let mut aux = vec![0.0; if family == ProbeFamily::Elman { 0 } else { frames * h }];
    let zero = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for step in 0..frames {
        let x = &xs[step * in_dim..(step + 1) * in_dim];
        let h_prev: Vec<f64> = if step == 0 {
            zero.clone()
        } else {
            hs[(step - 1) * h..step * h].to_vec()
        };
        let h_out = &mut hs[step * h..(step + 1) * h];
        match family {
            ProbeFamily::Elman => {
                let (wx, wh, b) = (&t[0], &t[1], &t[2]);
                let mut a = b.data.clone();
                gemv_acc(&wx.data, gh, in_dim, x, &mut a);
                gemv_acc(&wh.data, gh, h, &h_prev, &mut a);
                h_out.iter_mut().zip(&a).for_each(|(o, v)| *o = v.tanh());
            }
            ProbeFamily::Gru => {
                let (wx, wh, bx, bh) = (&t[0], &t[1], &t[2], &t[3]);
                let mut ax = bx.data.clone();
                gemv_acc(&wx.data, gh, in_dim, x, &mut ax);
                let mut ah = bh.data.clone();
                gemv_acc(&wh.data, gh, h, &h_prev, &mut ah);
                let g = &mut gate_acts[step * gh..(step + 1) * gh];
                let hn = &mut aux[step * h..(step + 1) * h];
                for j in 0..h {
                    let r = sigmoid(ax[j] + ah[j]);
                    let z = sigmoid(ax[h + j] + ah[h + j]);
                    let n = (ax[2 * h + j] + r * ah[2 * h + j]).tanh();
                    g[j] = r;
                    g[h + j] = z;
                    g[2 * h + j] = n;
                    hn[j] = ah[2 * h + j];
                    h_out[j] = (1.0 - z) * n + z * h_prev[j];
                }
            }
            ProbeFamily::Lstm => {
                let (wx, wh, b) = (&t[0], &t[1], &t[2]);
                let mut a = b.data.clone();
                gemv_acc(&wx.data, gh, in_dim, x, &mut a);
                gemv_acc(&wh.data, gh, h, &h_prev, &mut a);
                let g = &mut gate_acts[step * gh..(step + 1) * gh];
                let cs = &mut aux[step * h..(step + 1) * h];
                for j in 0..h {
                    let i = sigmoid(a[j]);
                    let f = sigmoid(a[h + j]);
                    let gg = a[2 * h + j].tanh();
                    let o = sigmoid(a[3 * h + j]);
                    g[j] = i;
                    g[h + j] = f;
                    g[2 * h + j] = gg;
                    g[3 * h + j] = o;
                    let c = f * c_prev[j] + i * gg;
                    cs[j] = c;
                    h_out[j] = o * c.tanh();
                }
                c_prev.copy_from_slice(cs);
            }
            ProbeFamily::Lr | ProbeFamily::Mlp => unreachable!("not a recurrent family"),
        }
    }
    LayerCache {
        hs,
        gates: gate_acts,
        aux,
    }
}

/// Backpropagation through time for one layer. `dhs_ext` holds the
/// gradient arriving at each hidden state from above. Returns the gradient
/// with respect to the layer inputs when `need_dx` is set.
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    family: ProbeFamily,
    t: &[Tensor],
    g: &mut [Tensor],
    cache: &LayerCache,
    xs: &[f64],
    dhs_ext: &[f64],
    frames: usize,
    in_dim: usize,
    h: usize,
    need_dx: bool,
) -> Vec<f64> {
    let gates = gate_count(family);
    let gh = gates * h;
    let mut dx_all = if need_dx { vec![0.0; frames * in_dim] } else { Vec::new() };
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let zero = vec![0.0; h];
    for step in (0..frames).rev() {
        let x = &xs[step * in_dim..(step + 1) * in_dim];
        let h_prev: &[f64] = if step == 0 { &zero } else { &cache.hs[(step - 1) * h..step * h] };
        let dh: Vec<f64> = dhs_ext[step * h..(step + 1) * h]
            .iter()
            .zip(&dh_next)
            .map(|(a, b)| a + b)
            .collect();
        let mut dh_prev = vec![0.0; h];
        match family {
            ProbeFamily::Elman => {
                let hcur = &cache.hs[step * h..(step + 1) * h];
                let da: Vec<f64> = dh.iter().zip(hcur).map(|(d, v)| d * (1.0 - v * v)).collect();
                ger_acc(&mut g[0].data, &da, x);
                ger_acc(&mut g[1].data, &da, h_prev);
                g[2].data.iter_mut().zip(&da).for_each(|(a, d)| *a += d);
                gemv_t_acc(&t[1].data, gh, h, &da, &mut dh_prev);
                if need_dx {
                    gemv_t_acc(&t[0].data, gh, in_dim, &da, &mut dx_all[step * in_dim..(step + 1) * in_dim]);
                }
            }
            ProbeFamily::Gru => {
                let ga = &cache.gates[step * gh..(step + 1) * gh];
                let hn = &cache.aux[step * h..(step + 1) * h];
                let mut dax = vec![0.0; gh];
                let mut dah = vec![0.0; gh];
                for j in 0..h {
                    let (r, z, n) = (ga[j], ga[h + j], ga[2 * h + j]);
                    let dn = dh[j] * (1.0 - z);
                    let dz = dh[j] * (h_prev[j] - n);
                    dh_prev[j] += dh[j] * z;
                    let dan = dn * (1.0 - n * n);
                    let dr = dan * hn[j];
                    let dar = dr * r * (1.0 - r);
                    let daz = dz * z * (1.0 - z);
                    dax[j] = dar;
                    dax[h + j] = daz;
                    dax[2 * h + j] = dan;
                    dah[j] = dar;
                    dah[h + j] = daz;
                    dah[2 * h + j] = dan * r;
                }
                ger_acc(&mut g[0].data, &dax, x);
                ger_acc(&mut g[1].data, &dah, h_prev);
                g[2].data.iter_mut().zip(&dax).for_each(|(a, d)| *a += d);
                g[3].data.iter_mut().zip(&dah).for_each(|(a, d)| *a += d);
                gemv_t_acc(&t[1].data, gh, h, &dah, &mut dh_prev);
                if need_dx {
                    gemv_t_acc(&t[0].data, gh, in_dim, &dax, &mut dx_all[step * in_dim..(step + 1) * in_dim]);
                }
            }
            ProbeFamily::Lstm => {
                let ga = &cache.gates[step * gh..(step + 1) * gh];
                let c = &cache.aux[step * h..(step + 1) * h];
                let c_prev: &[f64] = if step == 0 { &zero } else { &cache.aux[(step - 1) * h..step * h] };
                let mut da = vec![0.0; gh];
                let mut dc_prev = vec![0.0; h];
                for j in 0..h {
                    let (i, f, gg, o) = (ga[j], ga[h + j], ga[2 * h + j], ga[3 * h + j]);
                    let tc = c[j].tanh();
                    let d_o = dh[j] * tc;
                    let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                    da[j] = dc * gg * i * (1.0 - i);
                    da[h + j] = dc * c_prev[j] * f * (1.0 - f);
                    da[2 * h + j] = dc * i * (1.0 - gg * gg);
                    da[3 * h + j] = d_o * o * (1.0 - o);
                    dc_prev[j] = dc * f;
                }
                ger_acc(&mut g[0].data, &da, x);
                ger_acc(&mut g[1].data, &da, h_prev);
                g[2].data.iter_mut().zip(&da).for_each(|(a, d)| *a += d);
                gemv_t_acc(&t[1].data, gh, h, &da, &mut dh_prev);
                if need_dx {
                    gemv_t_acc(&t[0].data, gh, in_dim, &da, &mut dx_all[step * in_dim..(step + 1) * in_dim]);
                }
                dc_next = dc_prev;
            }
            ProbeFamily::Lr | ProbeFamily::Mlp => unreachable!("not a recurrent family"),
        }
        dh_next = dh_prev;
    }
    dx_all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{softmax_cross_entropy, ProbeConfig};
    use rand::SeedableRng;

    fn seq(frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> ProbeInput {
        ProbeInput::sequence(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), true)
    }

    fn cfg(family: ProbeFamily, layers: usize) -> ProbeConfig {
        let mut c = ProbeConfig::new(family);
        c.hidden = 4;
        c.num_layers = layers;
        c
    }

    #[test]
    fn zero_lr_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::init(&cfg(ProbeFamily::Lr, 1), 3, 4, &mut rng).zeros_like();
        assert_eq!(p.scores(&ProbeInput::Vector(vec![5.0, -2.0, 1.0])).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn zero_recurrent_params_give_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for family in [ProbeFamily::Elman, ProbeFamily::Gru, ProbeFamily::Lstm] {
            for layers in [1, 2] {
                let p = ModelParams::init(&cfg(family, layers), 3, 2, &mut rng).zeros_like();
                let h = p.final_hidden(&seq(6, 3, &mut rng)).unwrap();
                assert_eq!(h, vec![0.0; 4], "{family:?}");
            }
        }
    }

    #[test]
    fn input_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gru = ModelParams::init(&cfg(ProbeFamily::Gru, 1), 3, 2, &mut rng);
        let spec = ProbeInput::sequence(2, 3, vec![0.0; 6], false);
        assert!(matches!(gru.scores(&spec), Err(ClassifierError::NonTemporalInput)));
        assert!(matches!(
            gru.scores(&ProbeInput::Vector(vec![0.0; 3])),
            Err(ClassifierError::ShapeMismatch(_))
        ));
        assert!(matches!(gru.scores(&seq(2, 4, &mut rng)), Err(ClassifierError::ShapeMismatch(_))));
        // pooled probes accept either form
        let lr = ModelParams::init(&cfg(ProbeFamily::Lr, 1), 3, 2, &mut rng);
        assert!(lr.scores(&spec).is_ok());
    }

    #[test]
    fn pooled_probes_ignore_frame_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for family in [ProbeFamily::Lr, ProbeFamily::Mlp] {
            let p = ModelParams::init(&cfg(family, 1), 3, 3, &mut rng);
            let s = seq(5, 3, &mut rng);
            let ProbeInput::Sequence { values, .. } = &s else { unreachable!() };
            let rows: Vec<&[f64]> = values.chunks(3).collect();
            let reversed: Vec<f64> = rows.iter().rev().flat_map(|r| r.iter().copied()).collect();
            let a = p.scores(&s).unwrap();
            let b = p.scores(&ProbeInput::sequence(5, 3, reversed, true)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_param_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for family in ProbeFamily::ALL {
            let p = ModelParams::init(&cfg(family, 2), 3, 3, &mut rng);
            let (_, cache) = p.forward(&seq(5, 3, &mut rng), DropoutMode::Eval).unwrap();
            let mut g = p.zeros_like();
            p.backward(&cache, &[0.0; 3], &mut g);
            assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn dropout_only_between_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = cfg(ProbeFamily::Gru, 1);
        c.dropout = 0.5;
        let p = ModelParams::init(&c, 3, 2, &mut rng);
        let x = seq(4, 3, &mut rng);
        let mut drng = ChaCha8Rng::seed_from_u64(9);
        let (train, _) = p.forward(&x, DropoutMode::Train { rng: &mut drng, rate: 0.5 }).unwrap();
        assert_eq!(train, p.scores(&x).unwrap());

        c.num_layers = 2;
        let p = ModelParams::init(&c, 3, 2, &mut rng);
        let (train, cache) = p.forward(&x, DropoutMode::Train { rng: &mut drng, rate: 0.5 }).unwrap();
        let Cache::Recurrent { masks, .. } = cache else { unreachable!() };
        assert!(masks[0].is_some() && masks[1].is_none());
        assert!(masks[0].as_ref().unwrap().iter().all(|&m| m == 0.0 || m == 2.0));
        assert_ne!(train, p.scores(&x).unwrap());
    }

    #[test]
    fn backward_is_deterministic_without_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ModelParams::init(&cfg(ProbeFamily::Lstm, 2), 3, 3, &mut rng);
        let x = seq(5, 3, &mut rng);
        let run = || {
            let mut drng = ChaCha8Rng::seed_from_u64(1);
            let (logits, cache) = p.forward(&x, DropoutMode::Train { rng: &mut drng, rate: 0.0 }).unwrap();
            let (_, dl) = softmax_cross_entropy(&logits, 1);
            let mut g = p.zeros_like();
            p.backward(&cache, &dl, &mut g);
            g
        };
        assert_eq!(run(), run());
    }
}
