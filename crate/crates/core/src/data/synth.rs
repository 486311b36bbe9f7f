//! Seeded synthetic corpora standing in for a large clean source domain and a
//! small, band-limited, noisier target domain.
//!
//! Every symbol of the 24-letter alphabet `a..x` renders as a fixed 120 ms
//! chord of two sines; a domain picks a subset of symbols, a bigram model over
//! them, a band-pass channel and an SNR.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Audio, Utterance};
use crate::error::{Error, Result};
use crate::frontend::SAMPLE_RATE;

pub const TOKEN_MS: usize = 120;
pub const TOKEN_SAMPLES: usize = SAMPLE_RATE as usize * TOKEN_MS / 1000;
pub const ALPHABET_SIZE: usize = 24;
const RAMP_SAMPLES: usize = 80;
const TONE_AMPLITUDE: f64 = 0.3;

pub fn alphabet() -> Vec<char> {
    (0..ALPHABET_SIZE as u8).map(|i| (b'a' + i) as char).collect()
}

/// The two chord frequencies (Hz) of an alphabet symbol.
pub fn chord(symbol: char) -> Option<(f64, f64)> {
    let i = (symbol as u32).checked_sub('a' as u32)? as usize;
    if i >= ALPHABET_SIZE {
        return None;
    }
    let low = 220.0 * 2f64.powf(i as f64 / 12.0);
    let high = 1000.0 + 250.0 * ((7 * i) % ALPHABET_SIZE) as f64;
    Some((low, high))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub token_inventory: Vec<char>,
    /// `bigram_weights[i][j]`: weight of symbol `j` following symbol `i` (inventory order).
    pub bigram_weights: Vec<Vec<f64>>,
    /// Band-pass channel `(low_hz, high_hz)`.
    pub channel: (f64, f64),
    pub noise_snr_db: f64,
    /// Inclusive token-count range per utterance.
    pub utterance_length_range: (usize, usize),
}

/// Peaked bigram table: symbol `i` mostly moves to `i + step` for each `(step, weight)`.
fn ring_bigrams(n: usize, moves: &[(usize, f64)], floor: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![floor; n];
            for &(step, w) in moves {
                row[(i + step) % n] += w;
            }
            row
        })
        .collect()
}

impl DomainSpec {
    /// Wide channel (100-7500 Hz), 30 dB SNR, all 24 symbols, bigram table A.
    pub fn source() -> Self {
        DomainSpec {
            name: "source".into(),
            token_inventory: alphabet(),
            bigram_weights: ring_bigrams(ALPHABET_SIZE, &[(1, 6.0), (5, 3.0), (11, 1.0)], 0.1),
            channel: (100.0, 7500.0),
            noise_snr_db: 30.0,
            utterance_length_range: (4, 8),
        }
    }

    /// Narrow channel (300-3400 Hz), 15 dB SNR, a 16-symbol subset, bigram table B.
    pub fn target() -> Self {
        let inventory: Vec<char> = alphabet()[6..22].to_vec();
        DomainSpec {
            name: "target".into(),
            bigram_weights: ring_bigrams(inventory.len(), &[(3, 6.0), (10, 3.0)], 0.1),
            token_inventory: inventory,
            channel: (300.0, 3400.0),
            noise_snr_db: 15.0,
            utterance_length_range: (4, 8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("domain {}: {m}", self.name)));
        let n = self.token_inventory.len();
        if n == 0 {
            return bad("empty token inventory".into());
        }
        if let Some(c) = self.token_inventory.iter().find(|&&c| chord(c).is_none()) {
            return bad(format!("symbol {c:?} has no chord"));
        }
        if self.bigram_weights.len() != n || self.bigram_weights.iter().any(|r| r.len() != n) {
            return bad(format!("bigram table must be {n} x {n}"));
        }
        for (i, row) in self.bigram_weights.iter().enumerate() {
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) || !row.iter().any(|&w| w > 0.0) {
                return bad(format!("bigram row {i} needs non-negative weights with one positive"));
            }
        }
        let (lo, hi) = self.channel;
        if !(lo >= 0.0 && lo < hi && hi < SAMPLE_RATE as f64 / 2.0) {
            return bad(format!("channel ({lo}, {hi}) must satisfy 0 <= low < high < 8000"));
        }
        let (a, b) = self.utterance_length_range;
        if a == 0 || a > b {
            return bad(format!("utterance length range ({a}, {b}) invalid"));
        }
        Ok(())
    }
}

/// Distinct stream per utterance so generation can be split across workers.
fn utterance_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5EED
}

pub fn sample_tokens(spec: &DomainSpec, rng: &mut impl Rng) -> Vec<char> {
    let (lo, hi) = spec.utterance_length_range;
    let len = rng.random_range(lo..=hi);
    let n = spec.token_inventory.len();
    let mut idx = rng.random_range(0..n);
    let mut out = vec![spec.token_inventory[idx]];
    for _ in 1..len {
        let dist = WeightedIndex::new(&spec.bigram_weights[idx]).expect("validated bigram row");
        idx = dist.sample(rng);
        out.push(spec.token_inventory[idx]);
    }
    out
}

/// Clean chord rendering of a symbol sequence (no channel, no noise).
pub fn render(tokens: &[char]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tokens.len() * TOKEN_SAMPLES);
    for &c in tokens {
        let (f1, f2) = chord(c).expect("symbol in alphabet");
        for n in 0..TOKEN_SAMPLES {
            let t = n as f64 / SAMPLE_RATE as f64;
            let ramp = {
                let edge = n.min(TOKEN_SAMPLES - 1 - n);
                if edge < RAMP_SAMPLES {
                    0.5 - 0.5 * (PI * edge as f64 / RAMP_SAMPLES as f64).cos()
                } else {
                    1.0
                }
            };
            out.push(ramp * TONE_AMPLITUDE * ((2.0 * PI * f1 * t).sin() + (2.0 * PI * f2 * t).sin()));
        }
    }
    out
}

/// Zeroes every spectral component outside `[low_hz, high_hz]`.
pub fn bandpass(signal: &[f64], low_hz: f64, high_hz: f64) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let sr = SAMPLE_RATE as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * sr / n as f64;
        if f < low_hz || f > high_hz {
            *b = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn quantize(x: f64) -> i16 {
    (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn synth_utterance(spec: &DomainSpec, seed: u64, utt_id: String) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = sample_tokens(spec, &mut rng);
    let clean = bandpass(&render(&tokens), spec.channel.0, spec.channel.1);
    let power = clean.iter().map(|x| x * x).sum::<f64>() / clean.len() as f64;
    let sigma = (power / 10f64.powf(spec.noise_snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let samples = clean.iter().map(|&x| quantize(x + noise.sample(&mut rng))).collect();
    Utterance {
        utt_id,
        audio: Audio::Pcm(samples),
        transcript: tokens.into_iter().collect(),
    }
}

/// `num_utts` utterances named `<domain>-<seed>-<index>`; deterministic in `(spec, seed)`.
pub fn synth_generate(spec: &DomainSpec, num_utts: usize, seed: u64) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if num_utts == 0 {
        return Err(Error::invalid("num_utts must be at least 1"));
    }
    Ok((0..num_utts)
        .map(|i| synth_utterance(spec, utterance_seed(seed, i), format!("{}-{seed}-{i:05}", spec.name)))
        .collect())
}
