//! Constant-Q transform by direct windowed complex correlation.
//!
//! Band `k` has centre `fmin * 2^(k / bands_per_octave)` and a Hann-windowed
//! kernel of `ceil(Q * sr / f_k)` samples, `Q = 1 / (2^(1/bands_per_octave) - 1)`.
//! Kernels are centred on the same frame centres as the STFT so both
//! representations have identical frame grids. Samples outside the clip are
//! treated as zero.

use std::f64::consts::PI;

use ndarray::Array2;
use rayon::prelude::*;

use super::stft::{frame_count, hann};
use super::SpecConfig;
use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub fn q_factor(bands_per_octave: u32) -> f64 {
    1.0 / (2f64.powf(1.0 / bands_per_octave as f64) - 1.0)
}

/// Centre frequencies of the CQT bands, `fmin * 2^(k/nb)` up to `fmax`.
pub fn cqt_frequencies(cfg: &SpecConfig) -> Vec<f64> {
    let nb = cfg.bands_per_octave as f64;
    let n = ((cfg.fmax / cfg.fmin).log2() * nb + 1e-9).floor() as usize + 1;
    (0..n).map(|k| cfg.fmin * 2f64.powf(k as f64 / nb)).collect()
}

pub fn kernel_length(q: f64, sample_rate: u32, freq: f64) -> usize {
    (q * sample_rate as f64 / freq).ceil() as usize
}

struct Kernel {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Kernel {
    fn new(freq: f64, len: usize, sample_rate: u32) -> Self {
        let w = hann(len);
        let half = len as f64 / 2.0;
        let scale = 1.0 / len as f64;
        let (re, im) = w
            .iter()
            .enumerate()
            .map(|(n, &wn)| {
                let phase = -2.0 * PI * freq * (n as f64 - half) / sample_rate as f64;
                (wn * phase.cos() * scale, wn * phase.sin() * scale)
            })
            .unzip();
        Kernel { re, im }
    }

    fn response(&self, samples: &[f64], centre: isize) -> f64 {
        let len = self.re.len() as isize;
        let start = centre - len / 2;
        let lo = (-start).max(0);
        let hi = (samples.len() as isize - start).min(len);
        let (mut re, mut im) = (0.0, 0.0);
        for n in lo..hi {
            let x = samples[(start + n) as usize];
            re += x * self.re[n as usize];
            im += x * self.im[n as usize];
        }
        (re * re + im * im).sqrt()
    }
}

/// Raw CQT magnitudes (`frames x bands`) and the band centre frequencies.
pub fn cqt_magnitude(clip: &AudioClip, cfg: &SpecConfig) -> Result<(Array2<f64>, Vec<f64>)> {
    cfg.validate()?;
    let t = frame_count(clip.len(), cfg.frame_size, cfg.hop_size);
    if t == 0 {
        return Err(Error::EmptyInput(format!(
            "clip has {} samples, shorter than one {}-sample frame",
            clip.len(),
            cfg.frame_size
        )));
    }
    let q = q_factor(cfg.bands_per_octave);
    let freqs = cqt_frequencies(cfg);
    let longest = kernel_length(q, cfg.sample_rate, freqs[0]);
    if longest > clip.len() {
        let min_fmin = q * cfg.sample_rate as f64 / clip.len() as f64;
        return Err(Error::Config(format!(
            "fmin {} Hz needs a {longest}-sample kernel but the clip has {} samples; \
             minimum feasible fmin is {min_fmin:.3} Hz",
            cfg.fmin,
            clip.len()
        )));
    }
    let kernels: Vec<Kernel> = freqs
        .iter()
        .map(|&f| Kernel::new(f, kernel_length(q, cfg.sample_rate, f), cfg.sample_rate))
        .collect();

    let rows: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|i| {
            let centre = (i * cfg.hop_size + cfg.frame_size / 2) as isize;
            kernels
                .iter()
                .map(|k| k.response(&clip.samples, centre))
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((t, freqs.len()));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok((out, freqs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SpecType;

    fn cfg() -> SpecConfig {
        let mut c = SpecConfig::new(SpecType::CQT, 22050);
        c.bands_per_octave = 12;
        c.fmin = 110.0;
        c.fmax = 3520.0;
        c
    }

    #[test]
    fn q_for_twelve_bands() {
        let expect = 1.0 / (2f64.powf(1.0 / 12.0) - 1.0);
        assert!((q_factor(12) - expect).abs() < 1e-12);
        assert!((q_factor(12) - 16.817).abs() < 1e-3);
    }

    #[test]
    fn band_layout() {
        let f = cqt_frequencies(&cfg());
        assert_eq!(f.len(), 61);
        assert!((f[12] - 220.0).abs() < 1e-9);
        assert!((f[60] - 3520.0).abs() < 1e-6);
    }

    #[test]
    fn tone_peaks_in_its_band() {
        let c = cfg();
        let freqs = cqt_frequencies(&c);
        let k = 27;
        let sr = c.sample_rate as f64;
        let x: Vec<f64> = (0..22050)
            .map(|n| (2.0 * PI * freqs[k] * n as f64 / sr).sin())
            .collect();
        let clip = AudioClip::new(x.clone(), c.sample_rate).unwrap();
        let (mag, _) = cqt_magnitude(&clip, &c).unwrap();
        // naive direct-convolution oracle for one interior frame
        let q = q_factor(12);
        let frame = mag.nrows() / 2;
        let centre = (frame * c.hop_size + c.frame_size / 2) as isize;
        for (j, &f) in freqs.iter().enumerate() {
            let len = kernel_length(q, c.sample_rate, f);
            let w = hann(len);
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..len {
                let idx = centre - (len as isize) / 2 + n as isize;
                if idx < 0 || idx as usize >= x.len() {
                    continue;
                }
                let ph = -2.0 * PI * f * (n as f64 - len as f64 / 2.0) / sr;
                re += x[idx as usize] * w[n] * ph.cos() / len as f64;
                im += x[idx as usize] * w[n] * ph.sin() / len as f64;
            }
            assert!(((re * re + im * im).sqrt() - mag[[frame, j]]).abs() < 1e-12);
        }
        for row in mag.rows() {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, k);
        }
    }

    #[test]
    fn silence_and_infeasible_fmin() {
        let c = cfg();
        let clip = AudioClip::new(vec![0.0; 4096], c.sample_rate).unwrap();
        let (mag, _) = cqt_magnitude(&clip, &c).unwrap();
        assert!(mag.iter().all(|&v| v == 0.0));

        let mut low = c.clone();
        low.fmin = 20.0;
        let err = cqt_magnitude(&clip, &low).unwrap_err().to_string();
        assert!(err.contains("minimum feasible fmin"), "{err}");
    }
}
