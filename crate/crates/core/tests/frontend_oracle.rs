//! Feature extraction against a direct DFT, pitch on a pulse train, and SpecAug invariants.

use std::f64::consts::PI;

use proptest::prelude::*;

use tapasr::frontend::{
    apply_specaug, compute_log_mel, compute_pitch, mask_rects, num_frames, MaskAxis, SpecAugPolicy, HOP_SAMPLES,
    WINDOW_SAMPLES,
};
use tapasr::tensor::Mat;

const SR: f64 = 16_000.0;

fn tone(hz: f64, seconds: f64) -> Vec<i16> {
    (0..(SR * seconds) as usize)
        .map(|n| (0.5 * (2.0 * PI * hz * n as f64 / SR).sin() * 32767.0).round() as i16)
        .collect()
}

/// Mel energies of one frame by a direct O(N^2) DFT and hand-built HTK triangles.
fn reference_mel_frame(x: &[i16], n_mels: usize) -> Vec<f64> {
    let n_fft = 512;
    let windowed: Vec<f64> = (0..WINDOW_SAMPLES)
        .map(|n| x[n] as f64 / 32768.0 * (0.54 - 0.46 * (2.0 * PI * n as f64 / (WINDOW_SAMPLES as f64 - 1.0)).cos()))
        .collect();
    let power: Vec<f64> = (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in windowed.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect();
    let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
    let inv = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    let (lo, hi) = (mel(20.0), mel(SR / 2.0));
    let edge = |i: usize| inv(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64);
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
            power
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = k as f64 * SR / n_fft as f64;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    w * p
                })
                .sum()
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn tone_peak_bin_matches_direct_dft() {
    let wave = tone(440.0, 1.0);
    let feats = compute_log_mel(&wave, 80).unwrap();
    let frames = feats.frames();
    let interior = 2..frames - 2;
    let n = interior.len();
    let mut agree = 0;
    for t in interior {
        let reference = reference_mel_frame(&wave[t * HOP_SAMPLES..], 80);
        let ours: Vec<f64> = feats.values.row(t).iter().map(|&v| v as f64).collect();
        if argmax(&ours) == argmax(&reference) {
            agree += 1;
        }
        for (a, b) in ours.iter().zip(&reference) {
            assert!((a - (b + 1e-10).ln()).abs() < 1e-3, "frame {t}: {a} vs {}", (b + 1e-10).ln());
        }
    }
    assert!(agree as f64 >= 0.95 * n as f64, "{agree}/{n}");
}

#[test]
fn pulse_train_pitch() {
    let period = 160;
    let wave: Vec<i16> = (0..16_000).map(|n| if n % period == 0 { 16_000 } else { 0 }).collect();
    let p = compute_pitch(&wave).unwrap();
    let mut voiced: Vec<f64> = (0..p.rows()).filter(|&t| p.get(t, 1) > 0.5).map(|t| p.get(t, 0) as f64).collect();
    assert!(voiced.len() > p.rows() / 2);
    voiced.sort_by(f64::total_cmp);
    let median = voiced[voiced.len() / 2];
    assert!((median - 100.0).abs() <= 5.0, "median pitch {median}");
}

#[test]
fn silence_is_unvoiced_and_floored() {
    let wave = vec![0i16; 4000];
    let p = compute_pitch(&wave).unwrap();
    assert!((0..p.rows()).all(|t| p.get(t, 0) == 0.0 && p.get(t, 1) == 0.0));
    let f = compute_log_mel(&wave, 40).unwrap();
    assert!(f.values.data().iter().all(|&v| (v as f64 - 1e-10f64.ln()).abs() < 1e-4));
}

#[test]
fn different_seeds_give_different_masks() {
    let x = Mat::from_fn(100, 80, |r, c| (r * 80 + c) as f32);
    let policy = SpecAugPolicy::new(27, 10);
    let differ = (0..100u64)
        .filter(|&s| apply_specaug(&x, &policy, 2 * s) != apply_specaug(&x, &policy, 2 * s + 1))
        .count();
    assert!(differ >= 99, "{differ}/100");
}

proptest! {
    #[test]
    fn frame_count_formula(len in 0usize..6000) {
        let wave = vec![1i16; len];
        match compute_log_mel(&wave, 8) {
            Ok(f) => {
                prop_assert!(len >= WINDOW_SAMPLES);
                prop_assert_eq!(f.frames(), 1 + (len - WINDOW_SAMPLES) / HOP_SAMPLES);
                prop_assert_eq!(Some(f.frames()), num_frames(len));
            }
            Err(_) => prop_assert!(len < WINDOW_SAMPLES),
        }
    }

    #[test]
    fn specaug_invariants(
        frames in 1usize..60,
        dims in 1usize..30,
        f in 0usize..12,
        t in 0usize..12,
        nf in 0usize..3,
        nt in 0usize..3,
        seed in any::<u64>(),
        fill in -2.0f64..2.0,
    ) {
        let x = Mat::from_fn(frames, dims, |r, c| (r as f32 * 0.37 + c as f32 * 1.3).sin() + 3.0);
        let policy = SpecAugPolicy { freq_mask_width: f, time_mask_width: t, num_freq_masks: nf, num_time_masks: nt, mask_value: fill };
        let y = apply_specaug(&x, &policy, seed);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(&y, &apply_specaug(&x, &policy, seed));
        let rects = mask_rects(frames, dims, &policy, seed);
        prop_assert_eq!(rects.len(), nf + nt);
        let mut masked = vec![false; frames * dims];
        for r in &rects {
            let (limit, extent) = match r.axis {
                MaskAxis::Freq => (f, dims),
                MaskAxis::Time => (t, frames),
            };
            prop_assert!(r.width <= limit && r.start + r.width <= extent);
            for i in r.start..r.start + r.width {
                match r.axis {
                    MaskAxis::Freq => (0..frames).for_each(|row| masked[row * dims + i] = true),
                    MaskAxis::Time => (0..dims).for_each(|c| masked[i * dims + c] = true),
                }
            }
        }
        for (k, m) in masked.iter().enumerate() {
            if *m {
                prop_assert_eq!(y.data()[k], fill as f32);
            } else {
                prop_assert_eq!(y.data()[k].to_bits(), x.data()[k].to_bits());
            }
        }
        if f == 0 && t == 0 {
            prop_assert_eq!(&y, &x);
        }
    }
}
