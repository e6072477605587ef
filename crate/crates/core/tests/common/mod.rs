//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use callprobe::classifiers::{softmax_cross_entropy, DropoutMode, ModelParams, ProbeConfig, ProbeFamily, ProbeInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise AUC: every positive/negative pair, ties worth one half.
pub fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let mut pairs = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for (i, &pi) in pos.iter().enumerate() {
        if !pi {
            nn += 1;
            continue;
        }
        np += 1;
        for (j, &pj) in pos.iter().enumerate() {
            if pj {
                continue;
            }
            if scores[i] > scores[j] {
                pairs += 1.0;
            } else if scores[i] == scores[j] {
                pairs += 0.5;
            }
        }
    }
    pairs / (np as f64 * nn as f64)
}

/// AP by enumerating every distinct threshold from the top.
pub fn prefix_ap(scores: &[f64], pos: &[bool]) -> f64 {
    let total_pos = pos.iter().filter(|&&p| p).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(pos).filter(|(&s, &p)| s >= t && p).count();
        let fp = scores.iter().zip(pos).filter(|(&s, &p)| s >= t && !p).count();
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Random fixture with scores drawn from `levels` distinct values, so small
/// `levels` gives heavy ties. Guarantees both classes are present.
pub fn tied_fixture(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    pos[0] = true;
    pos[n - 1] = false;
    (scores, pos)
}

fn htk_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn htk_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

pub struct MfccOracleConfig {
    pub frame_len: f64,
    pub stride: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub floor: f64,
}

/// Direct-summation MFCC: periodic Hann frames, naive DFT, HTK-mel
/// triangles of unit peak over [0, sr/2], natural log with floor and an
/// orthonormal DCT-II.
pub fn oracle_mfcc(x: &[f64], sr: u32, c: &MfccOracleConfig) -> Vec<Vec<f64>> {
    let l = (c.frame_len * sr as f64).round() as usize;
    let s = (c.stride * sr as f64).round() as usize;
    let frames = if x.len() < l { 0 } else { 1 + (x.len() - l) / s };
    let bins = c.n_fft / 2 + 1;

    let mel_lo = htk_mel(0.0);
    let mel_hi = htk_mel(sr as f64 / 2.0);
    let pts: Vec<f64> = (0..c.n_mels + 2)
        .map(|i| htk_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (c.n_mels + 1) as f64))
        .collect();
    let weight = |m: usize, f: f64| -> f64 {
        let (a, b, d) = (pts[m], pts[m + 1], pts[m + 2]);
        if f <= a || f >= d {
            0.0
        } else if f <= b {
            (f - a) / (b - a)
        } else {
            (d - f) / (d - b)
        }
    };

    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame: Vec<f64> = (0..l)
            .map(|n| x[t * s + n] * (0.5 - 0.5 * (2.0 * PI * n as f64 / l as f64).cos()))
            .collect();
        let power: Vec<f64> = (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in frame.iter().enumerate() {
                    let ang = 2.0 * PI * ((k * n) % c.n_fft) as f64 / c.n_fft as f64;
                    re += v * ang.cos();
                    im -= v * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let logmel: Vec<f64> = (0..c.n_mels)
            .map(|m| {
                let e: f64 = (0..bins)
                    .map(|k| weight(m, k as f64 * sr as f64 / c.n_fft as f64) * power[k])
                    .sum();
                e.max(c.floor).ln()
            })
            .collect();
        let mm = c.n_mels as f64;
        let ceps: Vec<f64> = (0..c.n_ceps)
            .map(|k| {
                let scale = if k == 0 { (1.0 / mm).sqrt() } else { (2.0 / mm).sqrt() };
                scale
                    * logmel
                        .iter()
                        .enumerate()
                        .map(|(m, v)| v * (PI * k as f64 * (m as f64 + 0.5) / mm).cos())
                        .sum::<f64>()
            })
            .collect();
        out.push(ceps);
    }
    out
}

pub const GRAD_DIM: usize = 3;
pub const GRAD_HIDDEN: usize = 4;
pub const GRAD_FRAMES: usize = 5;
pub const GRAD_CLASSES: usize = 3;

/// Global relative error between backprop and central differences for one
/// random draw: `|g_a - g_n| / max(|g_a|, |g_n|)`. Two-layer recurrent
/// draws use dropout 0.25 with a fixed mask stream.
pub fn gradient_check(family: ProbeFamily, layers: usize, draw: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(draw * 1000 + family as u64 * 10 + layers as u64);
    let cfg = ProbeConfig {
        hidden: GRAD_HIDDEN,
        num_layers: layers,
        ..ProbeConfig::new(family)
    };
    let mut params = ModelParams::init(&cfg, GRAD_DIM, GRAD_CLASSES, &mut rng);
    for t in &mut params.tensors {
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
    }
    let values: Vec<f64> = (0..GRAD_FRAMES * GRAD_DIM).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let input = if family.is_recurrent() {
        ProbeInput::sequence(GRAD_FRAMES, GRAD_DIM, values, true)
    } else {
        ProbeInput::Vector(values[..GRAD_DIM].to_vec())
    };
    let target = rng.gen_range(0..GRAD_CLASSES);
    let rate = if family.is_recurrent() && layers == 2 { 0.25 } else { 0.0 };
    let mask_rng = ChaCha8Rng::seed_from_u64(draw + 77);

    let loss = |p: &ModelParams| -> f64 {
        let mut r = mask_rng.clone();
        let (logits, _) = p.forward(&input, DropoutMode::Train { rng: &mut r, rate }).unwrap();
        softmax_cross_entropy(&logits, target).0
    };

    let mut r = mask_rng.clone();
    let (logits, cache) = params.forward(&input, DropoutMode::Train { rng: &mut r, rate }).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, target);
    let mut grads = params.zeros_like();
    params.backward(&cache, &dlogits, &mut grads);

    let h = 1e-5;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for ti in 0..params.tensors.len() {
        for i in 0..params.tensors[ti].data.len() {
            let orig = params.tensors[ti].data[i];
            params.tensors[ti].data[i] = orig + h;
            let up = loss(&params);
            params.tensors[ti].data[i] = orig - h;
            let down = loss(&params);
            params.tensors[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[ti].data[i];
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}
