use std::path::Path;

use hound::{SampleFormat, WavReader};

use super::{DspError, Result, Waveform};

/// Reads a 16- or 24-bit integer PCM WAV file and mixes it down to mono,
/// scaling samples into [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || !matches!(spec.bits_per_sample, 16 | 24) {
        return Err(DspError::Waveform(format!(
            "unsupported wav encoding: {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
    let samples = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| v as f64 / scale))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::from_interleaved(&samples, spec.channels, spec.sample_rate)
}
