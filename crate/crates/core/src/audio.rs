//! Mono waveform helpers: level measurement, WAV I/O and resampling.

use std::path::Path;

use rubato::{FftFixedInOut, Resampler};

use crate::error::{Error, Result};

/// Root-mean-square level in dBFS. Digital silence maps to negative infinity.
pub fn rms_dbfs(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return f64::NEG_INFINITY;
    }
    let energy: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    let rms = (energy / samples.len() as f64).sqrt();
    if rms == 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * rms.log10()
    }
}

pub fn is_silent(samples: &[f32], threshold_db: f64) -> bool {
    rms_dbfs(samples) <= threshold_db
}

pub fn peak(samples: &[f32]) -> f32 {
    samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
}

/// Writes a mono IEEE-float WAV so that written samples read back bit-exactly.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a PCM-16/24/32 or float WAV, downmixes to mono and returns
/// `(samples, native_sample_rate)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let ingest_err = |e: hound::Error| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(ingest_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(ingest_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(ingest_err)?
        }
    };
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok((mono, spec.sample_rate))
}

/// Reads a WAV and converts it to mono at `sample_rate`.
pub fn read_wav_at(path: &Path, sample_rate: u32) -> Result<Vec<f32>> {
    let (samples, native) = read_wav(path)?;
    resample(&samples, native, sample_rate).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Band-limited resampling; output length is `round(len * to / from)`.
pub fn resample(samples: &[f32], from_hz: u32, to_hz: u32) -> Result<Vec<f32>> {
    if from_hz == 0 || to_hz == 0 {
        return Err(Error::param("sample rates must be positive"));
    }
    if from_hz == to_hz || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    let target_len =
        ((samples.len() as u64 * to_hz as u64 + from_hz as u64 / 2) / from_hz as u64) as usize;
    let mut resampler = FftFixedInOut::<f32>::new(from_hz as usize, to_hz as usize, 1024, 1)
        .map_err(|e| Error::param(e.to_string()))?;
    let delay = resampler.output_delay();
    let mut out = Vec::with_capacity(target_len + delay + 4096);
    let mut pos = 0;
    while out.len() < target_len + delay {
        let need = resampler.input_frames_next();
        let mut chunk = vec![0.0f32; need];
        if pos < samples.len() {
            let end = (pos + need).min(samples.len());
            chunk[..end - pos].copy_from_slice(&samples[pos..end]);
        }
        pos += need;
        let produced = resampler
            .process(&[chunk], None)
            .map_err(|e| Error::param(e.to_string()))?;
        out.extend_from_slice(&produced[0]);
    }
    Ok(out[delay..delay + target_len].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_minus_infinity() {
        assert_eq!(rms_dbfs(&[0.0; 100]), f64::NEG_INFINITY);
        assert!(is_silent(&[0.0; 10], -200.0));
    }

    #[test]
    fn full_scale_square_is_zero_db() {
        let x: Vec<f32> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(rms_dbfs(&x).abs() < 1e-9);
    }

    #[test]
    fn wav_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let x: Vec<f32> = (0..500).map(|i| (i as f32 * 0.01).sin() * 0.3).collect();
        write_wav(&path, &x, 16_000).unwrap();
        let (y, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(x, y);
    }

    #[test]
    fn resample_preserves_low_tone() {
        let x: Vec<f32> = (0..44_100)
            .map(|i| (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 44_100.0).sin())
            .collect();
        let y = resample(&x, 44_100, 16_000).unwrap();
        assert_eq!(y.len(), 16_000);
        let reference: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16_000.0).sin())
            .collect();
        let (ys, rs) = (&y[1000..15_000], &reference[1000..15_000]);
        let dot: f32 = ys.iter().zip(rs).map(|(a, b)| a * b).sum();
        let corr = dot / (ys.iter().map(|a| a * a).sum::<f32>() * rs.iter().map(|b| b * b).sum::<f32>()).sqrt();
        assert!(corr > 0.999, "correlation {corr}");
        let rms = (ys.iter().map(|a| a * a).sum::<f32>() / ys.len() as f32).sqrt();
        assert!((rms - std::f32::consts::FRAC_1_SQRT_2).abs() < 0.01, "rms {rms}");
    }
}
