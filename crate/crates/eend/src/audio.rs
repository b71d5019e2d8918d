//! Waveforms, multi-channel session audio, and PCM WAV file I/O.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav format: {0}")]
    Unsupported(String),
    #[error("channel length mismatch: {0} vs {1}")]
    ChannelLength(usize, usize),
}

pub type Result<V> = std::result::Result<V, AudioError>;

/// A mono waveform: floating-point samples in `[-1, 1]` at a fixed rate.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn silence(duration_seconds: f64, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; (duration_seconds * sample_rate as f64).round() as usize],
            sample_rate,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// A recorded session: frame-aligned channels plus the reference speaker
/// activity that generated it. `reference[s]` lists `(onset, offset)` seconds
/// for speaker `s`, non-overlapping and merged.
#[derive(Clone, Debug)]
pub struct SessionAudio {
    pub channels: Vec<Waveform>,
    pub sample_rate: u32,
    pub reference: Vec<Vec<(f64, f64)>>,
}

impl SessionAudio {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.channels
            .first()
            .map_or(0.0, Waveform::duration_seconds)
    }
}

/// Read a PCM WAV file (16-bit integer or 32-bit float, little-endian),
/// splitting interleaved channels.
pub fn read_wav(path: &Path) -> Result<Vec<Waveform>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); n_ch];
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            for (i, s) in reader.samples::<i16>().enumerate() {
                channels[i % n_ch].push(s? as f64 / 32768.0);
            }
        }
        (hound::SampleFormat::Float, 32) => {
            for (i, s) in reader.samples::<f32>().enumerate() {
                channels[i % n_ch].push(s? as f64);
            }
        }
        (fmt, bits) => {
            return Err(AudioError::Unsupported(format!("{fmt:?} at {bits} bits")));
        }
    }
    Ok(channels
        .into_iter()
        .map(|samples| Waveform {
            samples,
            sample_rate: spec.sample_rate,
        })
        .collect())
}

/// Read a mono WAV; multi-channel input takes channel 0.
pub fn read_wav_mono(path: &Path) -> Result<Waveform> {
    let mut channels = read_wav(path)?;
    if channels.is_empty() {
        return Err(AudioError::Unsupported("no channels".into()));
    }
    Ok(channels.swap_remove(0))
}

/// Write a mono 16-bit little-endian PCM WAV. Samples are clipped to
/// `[-1, 1]` and quantized deterministically.
pub fn write_wav_mono(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip_mono_i16() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let wave = Waveform {
            samples: (0..800).map(|i| (i as f64 / 100.0).sin() * 0.5).collect(),
            sample_rate: 8000,
        };
        write_wav_mono(&path, &wave).unwrap();
        let back = read_wav_mono(&path).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.samples.len(), 800);
        let max_err = wave
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1.0 / 32768.0 + 1e-9, "quantization error {max_err}");
    }
}
