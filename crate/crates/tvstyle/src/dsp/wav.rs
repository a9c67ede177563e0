use std::path::Path;

use tvstyle_core::Waveform;

use crate::error::{Error, Result};

/// Reads a PCM or float WAV, downmixing multi-channel audio by averaging.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let full = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / full))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

/// Writes 16-bit mono PCM; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn quantize(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16
}

/// Integer-factor rate conversion: block averaging when decimating, linear
/// interpolation when upsampling.
pub fn resample_integer(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    let from = w.sample_rate;
    if from == target_rate {
        return Ok(w.clone());
    }
    if from.is_multiple_of(target_rate) {
        let k = (from / target_rate) as usize;
        let samples = w
            .samples
            .chunks(k)
            .map(|c| c.iter().sum::<f32>() / c.len() as f32)
            .collect();
        return Ok(Waveform::new(samples, target_rate)?);
    }
    if target_rate.is_multiple_of(from) {
        let k = (target_rate / from) as usize;
        let n = w.samples.len();
        let mut samples = Vec::with_capacity(n * k);
        for i in 0..n {
            let a = w.samples[i];
            let b = if i + 1 < n { w.samples[i + 1] } else { a };
            for j in 0..k {
                samples.push(a + (b - a) * j as f32 / k as f32);
            }
        }
        return Ok(Waveform::new(samples, target_rate)?);
    }
    Err(Error::Config(format!(
        "cannot convert {from} Hz to {target_rate} Hz: only integer rate ratios are supported"
    )))
}
