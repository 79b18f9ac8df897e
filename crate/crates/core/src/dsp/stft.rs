//! Framed magnitude spectra.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use super::SpecConfig;
use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

/// Number of frames that fit entirely inside a signal of `len` samples.
pub fn frame_count(len: usize, frame_size: usize, hop_size: usize) -> usize {
    if len < frame_size {
        0
    } else {
        1 + (len - frame_size) / hop_size
    }
}

/// Full complex DFT of `frame`, any length.
pub fn dft(frame: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Magnitude STFT, one row per frame and `padded_size / 2 + 1` columns.
///
/// Each frame is Hann-windowed, zero-padded to `frame_size * (1 + zero_pad)`
/// and, with `circular_shift`, rotated left by `frame_size / 2` so the frame
/// centre sits at index 0.
pub fn stft_magnitude(clip: &AudioClip, cfg: &SpecConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = cfg.frame_size;
    let t = frame_count(clip.len(), n, cfg.hop_size);
    if t == 0 {
        return Err(Error::EmptyInput(format!(
            "clip has {} samples, shorter than one {}-sample frame",
            clip.len(),
            n
        )));
    }
    let padded = cfg.padded_size();
    let k = padded / 2 + 1;
    let window = hann(n);
    let fft = FftPlanner::new().plan_fft_forward(padded);

    let rows: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|i| {
            let start = i * cfg.hop_size;
            let mut buf = vec![Complex64::new(0.0, 0.0); padded];
            for (j, (s, w)) in clip.samples[start..start + n].iter().zip(&window).enumerate() {
                buf[j].re = s * w;
            }
            if cfg.circular_shift {
                buf.rotate_left(n / 2);
            }
            fft.process(&mut buf);
            buf[..k].iter().map(|c| c.norm()).collect()
        })
        .collect();

    let mut out = Array2::zeros((t, k));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    Ok(out)
}

/// Centre time in seconds of every analysis frame.
pub fn frame_times(n_frames: usize, cfg: &SpecConfig) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    (0..n_frames)
        .map(|i| (i * cfg.hop_size) as f64 / sr + cfg.frame_size as f64 / (2.0 * sr))
        .collect()
}

/// Frequency in Hz of each non-negative DFT bin.
pub fn bin_frequencies(n_fft_bins: usize, sample_rate: u32) -> Vec<f64> {
    let padded = 2 * (n_fft_bins - 1);
    (0..n_fft_bins)
        .map(|k| k as f64 * sample_rate as f64 / padded as f64)
        .collect()
}
