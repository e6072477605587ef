//! Baseline spectral features: framed MFCC sequences and BEANS-style
//! aggregate vectors.
//!
//! The pipeline is periodic Hann window, zero-padded real DFT, power
//! spectrum, HTK mel filterbank, natural log with a floor, orthonormal
//! DCT-II. No pre-emphasis and no liftering are applied.

mod wav;

pub use wav::read_wav;

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal of {samples} samples is shorter than one frame of {frame} samples")]
    SignalTooShort { samples: usize, frame: usize },
    #[error("invalid spectral configuration: {0}")]
    Config(String),
    #[error("feature sequence has no frames")]
    EmptySequence,
    #[error("waveform contains non-finite samples")]
    NonFinite,
    #[error("invalid waveform: {0}")]
    Waveform(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio signal. Multi-channel input is averaged on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
    channels: u16,
}

impl Waveform {
    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::from_interleaved(&samples, 1, sample_rate)
    }

    /// Builds a waveform from interleaved frames, averaging the channels.
    pub fn from_interleaved(interleaved: &[f64], channels: u16, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Waveform("sample rate must be positive".into()));
        }
        if channels == 0 {
            return Err(DspError::Waveform("channel count must be positive".into()));
        }
        let ch = channels as usize;
        if interleaved.len() % ch != 0 {
            return Err(DspError::Waveform(format!(
                "{} samples do not divide into {ch} channels",
                interleaved.len()
            )));
        }
        if interleaved.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite);
        }
        let samples = if ch == 1 {
            interleaved.to_vec()
        } else {
            interleaved
                .chunks_exact(ch)
                .map(|f| f.iter().sum::<f64>() / ch as f64)
                .collect()
        };
        Ok(Self {
            samples,
            sample_rate,
            channels,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Channel count of the source before mixdown.
    pub fn source_channels(&self) -> u16 {
        self.channels
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Cuts `[start, end)` seconds, clamped to the signal.
    pub fn slice_seconds(&self, start: f64, end: f64) -> Waveform {
        let sr = self.sample_rate as f64;
        let n = self.samples.len();
        let a = ((start.max(0.0) * sr).round() as usize).min(n);
        let b = ((end.max(0.0) * sr).round() as usize).clamp(a, n);
        Waveform {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
            channels: 1,
        }
    }

    /// Scales every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
            channels: self.channels,
        }
    }

    /// Right-pads with zeros up to `len` samples.
    pub fn padded_to(&self, len: usize) -> Waveform {
        let mut samples = self.samples.clone();
        if samples.len() < len {
            samples.resize(len, 0.0);
        }
        Waveform {
            samples,
            sample_rate: self.sample_rate,
            channels: self.channels,
        }
    }
}

/// Framing and filterbank settings. Times are in seconds, frequencies in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    pub frame_len: f64,
    pub stride: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency of the signal.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl SpectralConfig {
    /// 25 ms frames, 10 ms stride, 1024-point FFT, 128 mel filters, 40 cepstra.
    pub fn mfcc() -> Self {
        Self {
            frame_len: 0.025,
            stride: 0.010,
            n_fft: 1024,
            n_mels: 128,
            n_ceps: 40,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
        }
    }

    /// 50 ms frames, 10 ms stride, FFT size the next power of two covering
    /// one frame at `sample_rate`.
    pub fn beans(n_ceps: usize, sample_rate: u32) -> Self {
        let mut cfg = Self {
            frame_len: 0.050,
            stride: 0.010,
            n_ceps,
            ..Self::mfcc()
        };
        cfg.n_fft = cfg.frame_samples(sample_rate).next_power_of_two();
        cfg
    }

    /// Grows `n_fft` to the next power of two when a frame at `sample_rate`
    /// would not fit (e.g. 25 ms at 44.1 kHz).
    pub fn fitted_to(mut self, sample_rate: u32) -> Self {
        let l = self.frame_samples(sample_rate);
        if l > self.n_fft {
            self.n_fft = l.next_power_of_two();
        }
        self
    }

    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len * sample_rate as f64).round() as usize
    }

    pub fn stride_samples(&self, sample_rate: u32) -> usize {
        (self.stride * sample_rate as f64).round() as usize
    }

    pub fn upper_frequency(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let err = |m: String| Err(DspError::Config(m));
        if sample_rate == 0 {
            return err("sample rate must be positive".into());
        }
        let l = self.frame_samples(sample_rate);
        let s = self.stride_samples(sample_rate);
        if s == 0 || l < s {
            return err(format!("need frame length >= stride > 0, got {l} and {s} samples"));
        }
        if l > self.n_fft {
            return err(format!("frame of {l} samples exceeds n_fft {}", self.n_fft));
        }
        let bins = self.n_fft / 2 + 1;
        if self.n_ceps == 0 || self.n_ceps > self.n_mels || self.n_mels > bins {
            return err(format!(
                "need 0 < n_ceps <= n_mels <= n_fft/2+1, got {} / {} / {bins}",
                self.n_ceps, self.n_mels
            ));
        }
        let fmax = self.upper_frequency(sample_rate);
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
            return err(format!("need 0 <= fmin < fmax <= sr/2, got {} and {fmax}", self.fmin));
        }
        if !(self.log_floor > 0.0) {
            return err("log floor must be positive".into());
        }
        Ok(())
    }
}

/// Windowed frames of one signal.
#[derive(Debug, Clone)]
pub struct FramedSignal {
    pub frames: Matrix,
    pub sample_rate: u32,
    pub stride: usize,
}

/// Per-frame feature vectors with frame-centre time stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Matrix,
    pub frame_times: Vec<f64>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Mean over frames, the pooled MFCC embedding.
    pub fn mean(&self) -> Result<Vec<f64>> {
        self.frames.column_means().ok_or(DspError::EmptySequence)
    }
}

/// Number of full frames: `1 + (n - l) / s`, or zero when `n < l`.
pub fn frame_count(n: usize, l: usize, s: usize) -> usize {
    if n < l || s == 0 {
        0
    } else {
        1 + (n - l) / s
    }
}

/// Periodic Hann window of length `len`.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies of the `n_mels` triangular filters (plus the two
/// outer edges) equally spaced on the mel scale.
pub fn mel_band_edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let lo = hz_to_mel(fmin);
    let hi = hz_to_mel(fmax);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels` rows by `n_fft/2+1` bins, peak 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Matrix {
    let bins = n_fft / 2 + 1;
    let edges = mel_band_edges(n_mels, fmin, fmax);
    let mut fb = Matrix::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let rise = (f - lo) / (centre - lo);
            let fall = (hi - f) / (hi - centre);
            *w = rise.min(fall).max(0.0);
        }
    }
    fb
}

/// Slices `w` into Hann-windowed frames. No padding past the last full frame.
pub fn frame_signal(w: &Waveform, cfg: &SpectralConfig) -> Result<FramedSignal> {
    cfg.validate(w.sample_rate())?;
    let l = cfg.frame_samples(w.sample_rate());
    let s = cfg.stride_samples(w.sample_rate());
    let n = w.samples().len();
    if n < l {
        return Err(DspError::SignalTooShort { samples: n, frame: l });
    }
    let t = frame_count(n, l, s);
    let window = hann_window(l);
    let mut frames = Matrix::zeros(t, l);
    for i in 0..t {
        let src = &w.samples()[i * s..i * s + l];
        for ((dst, x), h) in frames.row_mut(i).iter_mut().zip(src).zip(&window) {
            *dst = x * h;
        }
    }
    Ok(FramedSignal {
        frames,
        sample_rate: w.sample_rate(),
        stride: s,
    })
}

/// Log mel energies per frame: `ln(max(fb · |DFT|², floor))`.
pub fn mel_power_spectrogram(framed: &FramedSignal, cfg: &SpectralConfig) -> Result<Matrix> {
    let l = framed.frames.cols();
    if l > cfg.n_fft {
        return Err(DspError::Config(format!(
            "frame of {l} samples exceeds n_fft {}",
            cfg.n_fft
        )));
    }
    let sr = framed.sample_rate;
    let fb = mel_filterbank(cfg.n_mels, cfg.n_fft, sr, cfg.fmin, cfg.upper_frequency(sr));
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; bins];
    let mut out = Matrix::zeros(framed.frames.rows(), cfg.n_mels);
    for (t, frame) in framed.frames.iter_rows().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &x) in buf.iter_mut().zip(frame) {
            c.re = x;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, dst) in out.row_mut(t).iter_mut().enumerate() {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            *dst = e.max(cfg.log_floor).ln();
        }
    }
    Ok(out)
}

/// First `n_ceps` rows of the orthonormal DCT-II matrix of size `n`.
pub fn dct_matrix(n_ceps: usize, n: usize) -> Matrix {
    let mut m = Matrix::zeros(n_ceps, n);
    for k in 0..n_ceps {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for (i, v) in m.row_mut(k).iter_mut().enumerate() {
            *v = scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

pub fn mfcc_sequence(w: &Waveform, cfg: &SpectralConfig) -> Result<FeatureSequence> {
    let framed = frame_signal(w, cfg)?;
    let logmel = mel_power_spectrogram(&framed, cfg)?;
    let dct = dct_matrix(cfg.n_ceps, cfg.n_mels);
    let t = logmel.rows();
    let mut frames = Matrix::zeros(t, cfg.n_ceps);
    for i in 0..t {
        let row = logmel.row(i);
        for (k, dst) in frames.row_mut(i).iter_mut().enumerate() {
            *dst = dct.row(k).iter().zip(row).map(|(a, b)| a * b).sum();
        }
    }
    let sr = framed.sample_rate as f64;
    let l = framed.frames.cols() as f64;
    let frame_times = (0..t)
        .map(|i| (i as f64 * framed.stride as f64 + l / 2.0) / sr)
        .collect();
    Ok(FeatureSequence { frames, frame_times })
}

/// `[mean; std; min; max]` per column, population standard deviation.
pub fn beans_embedding(seq: &FeatureSequence) -> Result<Vec<f64>> {
    let frames = &seq.frames;
    let mean = frames.column_means().ok_or(DspError::EmptySequence)?;
    let c = frames.cols();
    let t = frames.rows() as f64;
    let mut var = vec![0.0; c];
    let mut min = vec![f64::INFINITY; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for row in frames.iter_rows() {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
            min[j] = min[j].min(row[j]);
            max[j] = max[j].max(row[j]);
        }
    }
    let std = var.iter().map(|v| (v / t).sqrt());
    let mut out = Vec::with_capacity(4 * c);
    out.extend_from_slice(&mean);
    out.extend(std);
    out.extend_from_slice(&min);
    out.extend_from_slice(&max);
    Ok(out)
}
