//! Waveform to log-mel (+ optional pitch) features, and SpecAug masking.

pub mod specaug;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use specaug::{apply_specaug, keep_mask, mask_rects, MaskAxis, MaskRect, SpecAugPolicy};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
pub const PITCH_DIMS: usize = 3;

const MEL_LOW_HZ: f64 = 20.0;
const PITCH_MIN_HZ: f64 = 60.0;
const PITCH_MAX_HZ: f64 = 400.0;

/// Frame-major feature matrix for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    pub values: Mat<f32>,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl AcousticFeatures {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dims(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub use_pitch: bool,
    /// Subtract the per-utterance mean of every feature dimension.
    pub mean_norm: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_mels: 80,
            use_pitch: false,
            mean_norm: true,
        }
    }
}

impl FrontendConfig {
    pub fn feature_dim(&self) -> usize {
        self.n_mels + if self.use_pitch { PITCH_DIMS } else { 0 }
    }
}

pub fn num_frames(samples: usize) -> Option<usize> {
    (samples >= WINDOW_SAMPLES).then(|| 1 + (samples - WINDOW_SAMPLES) / HOP_SAMPLES)
}

fn frames_or_err(waveform: &[i16]) -> Result<usize> {
    num_frames(waveform.len()).ok_or_else(|| {
        Error::invalid(format!(
            "waveform of {} samples is shorter than one {WINDOW_SAMPLES}-sample window",
            waveform.len()
        ))
    })
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-style filters, `n_mels x (FFT_SIZE / 2 + 1)`.
pub fn mel_filterbank(n_mels: usize) -> Mat<f64> {
    let bins = FFT_SIZE / 2 + 1;
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    Mat::from_fn(n_mels, bins, |m, k| {
        let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= l || f >= r {
            0.0
        } else if f <= c {
            (f - l) / (c - l)
        } else {
            (r - f) / (r - c)
        }
    })
}

pub fn mel_center_hz(n_mels: usize, bin: usize) -> f64 {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(nyquist));
    mel_to_hz(lo + (hi - lo) * (bin + 1) as f64 / (n_mels + 1) as f64)
}

fn hamming() -> Vec<f64> {
    (0..WINDOW_SAMPLES)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WINDOW_SAMPLES - 1) as f64).cos())
        .collect()
}

fn to_unit(s: i16) -> f64 {
    s as f64 / 32768.0
}

/// Power spectra of every frame, `frames x (FFT_SIZE / 2 + 1)`.
pub fn power_spectrogram(waveform: &[i16]) -> Result<Mat<f64>> {
    let frames = frames_or_err(waveform)?;
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(FFT_SIZE);
    let window = hamming();
    let bins = FFT_SIZE / 2 + 1;
    let mut out = Mat::zeros(frames, bins);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for t in 0..frames {
        let start = t * HOP_SAMPLES;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < WINDOW_SAMPLES {
                Complex::new(to_unit(waveform[start + i]) * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, o) in out.row_mut(t).iter_mut().enumerate().take(bins) {
            *o = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

/// Log mel energies with a `1e-10` floor: 25 ms Hamming window, 10 ms hop, 16 kHz.
pub fn compute_log_mel(waveform: &[i16], n_mels: usize) -> Result<AcousticFeatures> {
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be at least 1"));
    }
    let power = power_spectrogram(waveform)?;
    let bank = mel_filterbank(n_mels);
    let energies = power.matmul(false, &bank, true);
    let values = Mat::from_vec(
        energies.rows(),
        energies.cols(),
        energies.data().iter().map(|&e| (e + LOG_FLOOR).ln() as f32).collect(),
    );
    Ok(AcousticFeatures {
        values,
        frame_shift: HOP_SAMPLES as f64 / SAMPLE_RATE as f64,
        frame_length: WINDOW_SAMPLES as f64 / SAMPLE_RATE as f64,
    })
}

/// Per-frame (pitch Hz, voicing in [0, 1], delta pitch) from normalized autocorrelation
/// with parabolic peak refinement. Silent frames report zero pitch and zero voicing.
pub fn compute_pitch(waveform: &[i16]) -> Result<Mat<f32>> {
    let frames = frames_or_err(waveform)?;
    let sr = SAMPLE_RATE as f64;
    let min_lag = (sr / PITCH_MAX_HZ).floor() as usize;
    let max_lag = ((sr / PITCH_MIN_HZ).ceil() as usize).min(WINDOW_SAMPLES - 2);
    let mut pitch = vec![0.0f64; frames];
    let mut voicing = vec![0.0f64; frames];
    for t in 0..frames {
        let x: Vec<f64> = waveform[t * HOP_SAMPLES..t * HOP_SAMPLES + WINDOW_SAMPLES]
            .iter()
            .map(|&s| to_unit(s))
            .collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let x: Vec<f64> = x.iter().map(|v| v - mean).collect();
        if x.iter().all(|&v| v == 0.0) {
            continue;
        }
        let ncc = |lag: usize| {
            let n = x.len() - lag;
            let (mut num, mut e0, mut e1) = (0.0, 0.0, 0.0);
            for i in 0..n {
                num += x[i] * x[i + lag];
                e0 += x[i] * x[i];
                e1 += x[i + lag] * x[i + lag];
            }
            if e0 <= 0.0 || e1 <= 0.0 {
                0.0
            } else {
                num / (e0 * e1).sqrt()
            }
        };
        let scores: Vec<f64> = (min_lag - 1..=max_lag + 1).map(ncc).collect();
        let (mut best, mut best_score) = (1usize, f64::NEG_INFINITY);
        for i in 1..scores.len() - 1 {
            if scores[i] > best_score {
                best = i;
                best_score = scores[i];
            }
        }
        let (a, b, c) = (scores[best - 1], scores[best], scores[best + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let lag = (min_lag - 1 + best) as f64 + shift;
        pitch[t] = sr / lag;
        voicing[t] = best_score.clamp(0.0, 1.0);
    }
    Ok(Mat::from_fn(frames, PITCH_DIMS, |t, c| {
        (match c {
            0 => pitch[t],
            1 => voicing[t],
            _ => {
                if t == 0 {
                    0.0
                } else {
                    pitch[t] - pitch[t - 1]
                }
            }
        }) as f32
    }))
}

/// Full feature pipeline for the model input.
pub fn extract(waveform: &[i16], config: &FrontendConfig) -> Result<AcousticFeatures> {
    let mut feats = compute_log_mel(waveform, config.n_mels)?;
    if config.use_pitch {
        let pitch = compute_pitch(waveform)?;
        feats.values = Mat::concat_cols(&[&feats.values, &pitch]);
    }
    if config.mean_norm {
        let (rows, cols) = feats.values.shape();
        for c in 0..cols {
            let mean = (0..rows).map(|r| feats.values.get(r, c) as f64).sum::<f64>() / rows as f64;
            for r in 0..rows {
                let v = feats.values.get(r, c);
                feats.values.set(r, c, (v as f64 - mean) as f32);
            }
        }
    }
    Ok(feats)
}
