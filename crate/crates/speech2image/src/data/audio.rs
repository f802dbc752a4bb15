//! Log-mel feature extraction for raw audio ingestion: Hann-windowed
//! magnitude STFT, triangular mel filterbank, log compression.

use crate::error::{Error, Result};
use crate::speech::SpeechFeatures;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank rows over `n_bins` linear-frequency STFT bins.
pub fn mel_filterbank(n_mels: usize, n_bins: usize, sr: usize) -> Vec<Vec<f32>> {
    let f_max = sr as f64 / 2.0;
    let mel_pts: Vec<f64> = (0..n_mels + 2)
        .map(|i| hz_to_mel(f_max) * i as f64 / (n_mels + 1) as f64)
        .collect();
    let hz_pts: Vec<f64> = mel_pts.iter().map(|&m| mel_to_hz(m)).collect();
    let bin_hz = |b: usize| b as f64 * f_max / (n_bins - 1) as f64;
    let mut bank = vec![vec![0f32; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]);
        for b in 0..n_bins {
            let f = bin_hz(b);
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            bank[m][b] = w as f32;
        }
    }
    bank
}

/// Center frequency (Hz) of each mel band; used to place synthetic tones.
pub fn mel_centers(n_mels: usize, sr: usize) -> Vec<f64> {
    let f_max = sr as f64 / 2.0;
    (1..=n_mels)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Log-mel features of a PCM signal. Frame count is
/// 1 + (samples - win) / hop; the signal must span at least one window.
pub fn log_mel(pcm: &[f32], sr: usize, n_mels: usize, hop: usize, win: usize) -> Result<SpeechFeatures> {
    if pcm.len() < win {
        return Err(Error::Contract(format!(
            "signal of {} samples is shorter than the {win}-sample window",
            pcm.len()
        )));
    }
    if hop == 0 || n_mels == 0 {
        return Err(Error::Config("hop and n_mels must be positive".into()));
    }
    let frames = 1 + (pcm.len() - win) / hop;
    let n_bins = win / 2 + 1;

    // Periodic Hann window.
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / win as f64).cos()))
        .collect();
    let bank = mel_filterbank(n_mels, n_bins, sr);

    let mut out = vec![0f32; frames * n_mels];
    let mut windowed = vec![0f64; win];
    for t in 0..frames {
        let seg = &pcm[t * hop..t * hop + win];
        for i in 0..win {
            windowed[i] = seg[i] as f64 * window[i];
        }
        // Direct DFT magnitudes for the non-negative bins.
        let mut mags = vec![0f32; n_bins];
        for (b, mag) in mags.iter_mut().enumerate() {
            let (mut re, mut im) = (0f64, 0f64);
            let step = std::f64::consts::TAU * b as f64 / win as f64;
            for (i, &x) in windowed.iter().enumerate() {
                let ang = step * i as f64;
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            *mag = ((re * re + im * im).sqrt()) as f32;
        }
        for m in 0..n_mels {
            let e: f32 = bank[m]
                .iter()
                .zip(&mags)
                .map(|(w, v)| w * v)
                .sum();
            out[t * n_mels + m] = (e + 1e-6).ln();
        }
    }
    SpeechFeatures::new(out, frames, n_mels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_gives_log_floor() {
        let pcm = vec![0f32; 800];
        let f = log_mel(&pcm, 8000, 10, 100, 200).unwrap();
        let floor = (1e-6f32).ln();
        assert!(f.frames.iter().all(|&v| (v - floor).abs() < 1e-6));
    }

    #[test]
    fn sine_at_band_center_dominates_that_band() {
        let sr = 8000;
        let n_mels = 12;
        let centers = mel_centers(n_mels, sr);
        for &target in &[3usize, 6, 9] {
            let f0 = centers[target];
            let pcm: Vec<f32> = (0..2400)
                .map(|i| (std::f64::consts::TAU * f0 * i as f64 / sr as f64).sin() as f32)
                .collect();
            let feats = log_mel(&pcm, sr, n_mels, 200, 400).unwrap();
            for t in 0..feats.t {
                let row = &feats.frames[t * n_mels..(t + 1) * n_mels];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, target, "frame {t}: band {argmax} won over {target}");
            }
        }
    }

    #[test]
    fn frame_count_formula_over_a_grid() {
        for &(samples, win, hop) in &[
            (700usize, 400usize, 100usize),
            (999, 400, 100),
            (1000, 400, 100),
            (1600, 256, 128),
            (4000, 512, 160),
        ] {
            let pcm = vec![0.1f32; samples];
            let f = log_mel(&pcm, 8000, 8, hop, win).unwrap();
            assert_eq!(f.t, 1 + (samples - win) / hop, "({samples},{win},{hop})");
        }
        // Shorter than one window, or too few frames for the encoder: error.
        assert!(log_mel(&vec![0.0; 100], 8000, 8, 50, 200).is_err());
        assert!(log_mel(&vec![0.0; 400], 8000, 8, 100, 400).is_err());
    }

    #[test]
    fn filterbank_rows_cover_spectrum() {
        let bank = mel_filterbank(10, 201, 8000);
        for (m, row) in bank.iter().enumerate() {
            assert!(row.iter().any(|&w| w > 0.0), "empty mel band {m}");
        }
    }
}
