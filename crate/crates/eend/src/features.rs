//! Acoustic front end: log-mel filterbanks at a 10 ms hop, +/-7 frame
//! splicing to 345 dimensions, then 10x subsampling to a 100 ms frame clock.
//! Applied per channel; channels stay frame-aligned.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use thiserror::Error;

use crate::audio::{SessionAudio, Waveform};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const N_MELS: usize = 23;
pub const SPLICE_CONTEXT: usize = 7;
pub const FEAT_DIM: usize = N_MELS * (2 * SPLICE_CONTEXT + 1); // 345
pub const SUBSAMPLE_FACTOR: usize = 10;
pub const WINDOW_SECONDS: f64 = 0.025;
pub const HOP_SECONDS: f64 = 0.010;
/// Frame hop of the final feature clock.
pub const FRAME_HOP_SECONDS: f64 = HOP_SECONDS * SUBSAMPLE_FACTOR as f64;
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("input too short: {samples} samples, need at least {min} (one window)")]
    InputTooShort { samples: usize, min: usize },
    #[error("channels disagree: {0}")]
    ChannelMismatch(String),
}

pub type Result<V> = std::result::Result<V, FeatureError>;

/// Per-channel feature matrices on a common 100 ms frame clock.
///
/// Every channel is `FEAT_DIM x frames`.
#[derive(Clone, Debug)]
pub struct FeatureStack<T> {
    pub channels: Vec<Tensor<T>>,
    pub frame_hop_seconds: f64,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn frames(&self) -> usize {
        self.channels.first().map_or(0, Tensor::cols)
    }

    /// New stack holding the selected channels, in the given order.
    pub fn select(&self, idx: &[usize]) -> FeatureStack<T> {
        FeatureStack {
            channels: idx.iter().map(|&i| self.channels[i].clone()).collect(),
            frame_hop_seconds: self.frame_hop_seconds,
        }
    }
}

/// Precomputed mel filterbank + FFT plan for one sample rate.
pub struct MelBank {
    sample_rate: u32,
    window_len: usize,
    hop_len: usize,
    nfft: usize,
    hann: Vec<f64>,
    /// `N_MELS x (nfft/2 + 1)` triangle weights, row-major.
    filters: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangle edge frequencies: `N_MELS + 2` points equally spaced in mel
/// between 0 Hz and Nyquist.
pub fn mel_edges(sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..N_MELS + 2)
        .map(|k| mel_to_hz(top * k as f64 / (N_MELS + 1) as f64))
        .collect()
}

impl MelBank {
    pub fn new(sample_rate: u32) -> Self {
        let window_len = (WINDOW_SECONDS * sample_rate as f64).round() as usize;
        let hop_len = (HOP_SECONDS * sample_rate as f64).round() as usize;
        let nfft = window_len.next_power_of_two();
        let hann: Vec<f64> = (0..window_len)
            .map(|n| {
                0.5 * (1.0
                    - (2.0 * std::f64::consts::PI * n as f64 / (window_len - 1) as f64).cos())
            })
            .collect();

        let bins = nfft / 2 + 1;
        let edges = mel_edges(sample_rate);
        let mut filters = vec![0.0; N_MELS * bins];
        for m in 0..N_MELS {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for (k, w) in filters[m * bins..eof_row(m, bins)].iter_mut().enumerate() {
                let f = k as f64 * sample_rate as f64 / nfft as f64;
                *w = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(nfft);
        MelBank {
            sample_rate,
            window_len,
            hop_len,
            nfft,
            hann,
            filters,
            fft,
        }
    }

    /// Frame count for a waveform of `samples` length, or None if too short.
    pub fn n_frames(&self, samples: usize) -> Option<usize> {
        if samples < self.window_len {
            None
        } else {
            Some((samples - self.window_len) / self.hop_len + 1)
        }
    }

    /// 23-band log-mel filterbank features: `N_MELS x frames`.
    pub fn logmel<T: Scalar>(&self, wave: &Waveform) -> Result<Tensor<T>> {
        assert_eq!(
            wave.sample_rate, self.sample_rate,
            "waveform rate does not match this MelBank"
        );
        let frames = self
            .n_frames(wave.samples.len())
            .ok_or(FeatureError::InputTooShort {
                samples: wave.samples.len(),
                min: self.window_len,
            })?;
        let bins = self.nfft / 2 + 1;
        let mut out = Tensor::zeros(&[N_MELS, frames]);
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        let mut power = vec![0.0; bins];
        for t in 0..frames {
            let start = t * self.hop_len;
            for i in 0..self.nfft {
                let s = if i < self.window_len {
                    wave.samples[start + i] * self.hann[i]
                } else {
                    0.0
                };
                buf[i] = Complex::new(s, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
            for m in 0..N_MELS {
                let row = &self.filters[m * bins..(m + 1) * bins];
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.data_mut()[m * frames + t] = T::fl(e.max(LOG_FLOOR).ln());
            }
        }
        Ok(out)
    }
}

#[inline]
fn eof_row(m: usize, bins: usize) -> usize {
    (m + 1) * bins
}

/// Frame splicing: column `t` becomes the vertical concatenation of columns
/// `t-7 ..= t+7`, with out-of-range indices clamped to the nearest valid
/// frame. `23 x T` becomes `345 x T`.
pub fn splice<T: Scalar>(m: &Tensor<T>, context: usize) -> Tensor<T> {
    let (rows, cols) = (m.rows(), m.cols());
    let span = 2 * context + 1;
    let mut out = Tensor::zeros(&[rows * span, cols]);
    let src = m.data();
    let od = out.data_mut();
    let ocols = cols;
    for (block, off) in (-(context as isize)..=context as isize).enumerate() {
        for t in 0..cols {
            let tt = (t as isize + off).clamp(0, cols as isize - 1) as usize;
            for r in 0..rows {
                od[(block * rows + r) * ocols + t] = src[r * cols + tt];
            }
        }
    }
    out
}

/// Decimate columns, keeping `0, factor, 2*factor, ...`; the output frame
/// count is `ceil(cols / factor)`.
pub fn subsample<T: Scalar>(m: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (rows, cols) = (m.rows(), m.cols());
    let out_cols = cols.div_ceil(factor);
    let mut out = Tensor::zeros(&[rows, out_cols]);
    let src = m.data();
    let od = out.data_mut();
    for r in 0..rows {
        for (j, t) in (0..cols).step_by(factor).enumerate() {
            od[r * out_cols + j] = src[r * cols + t];
        }
    }
    out
}

/// Full pipeline for one channel: logmel -> splice -> subsample.
pub fn extract_channel<T: Scalar>(bank: &MelBank, wave: &Waveform) -> Result<Tensor<T>> {
    let lm = bank.logmel::<T>(wave)?;
    Ok(subsample(&splice(&lm, SPLICE_CONTEXT), SUBSAMPLE_FACTOR))
}

/// Apply the pipeline to every channel of a session. All channels must share
/// a length and rate, so the outputs stay frame-aligned.
pub fn extract_stack<T: Scalar>(audio: &SessionAudio) -> Result<FeatureStack<T>> {
    let bank = MelBank::new(audio.sample_rate);
    extract_stack_with(&bank, audio)
}

/// Same as [`extract_stack`] with a caller-managed [`MelBank`], so corpus
/// loaders can reuse one FFT plan.
pub fn extract_stack_with<T: Scalar>(
    bank: &MelBank,
    audio: &SessionAudio,
) -> Result<FeatureStack<T>> {
    if let Some(first) = audio.channels.first() {
        for ch in &audio.channels {
            if ch.samples.len() != first.samples.len() {
                return Err(FeatureError::ChannelMismatch(format!(
                    "lengths {} vs {}",
                    first.samples.len(),
                    ch.samples.len()
                )));
            }
        }
    }
    let channels = audio
        .channels
        .iter()
        .map(|w| extract_channel::<T>(bank, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack {
        channels,
        frame_hop_seconds: FRAME_HOP_SECONDS,
    })
}
