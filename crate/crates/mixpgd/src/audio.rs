//! WAV I/O and log-mel feature extraction.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Log-mel featurization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub mel_bins: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub log_floor: f64,
    /// Per-utterance mean/variance normalization after log compression.
    pub normalize: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            mel_bins: 128,
            win_length: 400,
            hop_length: 160,
            log_floor: 1e-6,
            normalize: true,
        }
    }
}

impl MelConfig {
    /// Number of STFT frames for a waveform of `samples` samples.
    pub fn n_frames(&self, samples: usize) -> usize {
        if samples < self.win_length {
            0
        } else {
            (samples - self.win_length) / self.hop_length + 1
        }
    }
}

/// Read a 16 kHz mono PCM WAV file into f64 samples in [-1, 1].
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Manifest(format!("cannot open wav {}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Manifest(format!(
            "wav {} must be {SAMPLE_RATE} Hz mono, got {} Hz {} ch",
            path.display(),
            spec.sample_rate,
            spec.channels
        )));
    }
    match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| {
                    s.map(|v| v as f64 / scale)
                        .map_err(|e| Error::Manifest(format!("wav decode: {e}")))
                })
                .collect()
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| {
                s.map(|v| v as f64)
                    .map_err(|e| Error::Manifest(format!("wav decode: {e}")))
            })
            .collect(),
    }
}

/// Write f64 samples as 16-bit PCM mono WAV at 16 kHz.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Manifest(format!("cannot create wav {}: {e}", path.display())))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Manifest(format!("wav write: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Manifest(format!("wav finalize: {e}")))?;
    Ok(())
}

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, rows are filters over `n_fft/2 + 1` bins.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / n_fft as f64;
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo).max(1e-12)
            } else {
                (hi - f) / (hi - center).max(1e-12)
            };
            fb[[m, b]] = w;
        }
    }
    fb
}

/// Log-mel spectrogram of a waveform: `[mel_bins, frames]`.
///
/// Frames = floor((samples - win_length)/hop_length) + 1; deterministic for
/// fixed input and config. Errors if the waveform is shorter than one window.
pub fn featurize(id: &str, waveform: &[f64], cfg: &MelConfig) -> Result<Array2<f64>> {
    let n_frames = cfg.n_frames(waveform.len());
    if n_frames == 0 {
        return Err(Error::Audio {
            id: id.to_string(),
            msg: format!(
                "waveform of {} samples shorter than one window ({})",
                waveform.len(),
                cfg.win_length
            ),
        });
    }
    let n_fft = cfg.win_length;
    let n_bins = n_fft / 2 + 1;
    let window = hann_window(n_fft);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);

    let fb = mel_filterbank(cfg.mel_bins, n_fft, SAMPLE_RATE as f64);
    let mut power = Array2::zeros((n_bins, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for i in 0..n_fft {
            buf[i] = Complex::new(waveform[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            power[[b, t]] = buf[b].norm_sqr();
        }
    }
    let mel = fb.dot(&power);
    let mut logmel = mel.mapv(|v| (v + cfg.log_floor).ln());
    if cfg.normalize {
        normalize_per_utterance(&mut logmel);
    }
    debug_assert!(logmel.iter().all(|v| v.is_finite()));
    Ok(logmel)
}

/// Per-utterance mean/variance normalization, in place.
pub fn normalize_per_utterance(features: &mut Array2<f64>) {
    let n = features.len() as f64;
    let mean = features.sum() / n;
    let var = features.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    let std = var.sqrt().max(1e-8);
    features.mapv_inplace(|v| (v - mean) / std);
}
