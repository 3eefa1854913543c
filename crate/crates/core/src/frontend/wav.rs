use std::path::Path;

use crate::error::{Error, Result};

/// Reads a 16-bit PCM mono WAV file as samples scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<(u32, Vec<f64>)> {
    let reader = hound::WavReader::open(path).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::data(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_error)?;
    Ok((spec.sample_rate, samples))
}

/// Writes samples in [-1, 1] as 16-bit PCM mono.
pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_error)?;
    for s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wav_error)?;
    }
    w.finalize().map_err(wav_error)
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::data(format!("wav: {other}")),
    }
}
