//! Logarithmically spaced triangular filterbank.
//!
//! Centre frequencies lie on a grid of `bands_per_octave` steps per octave
//! anchored at 440 Hz. Each frequency is snapped to its nearest DFT bin and
//! duplicate bins are merged, which is what makes the bank quasi-linear at
//! low frequencies where the log spacing is finer than the bin spacing.
//! Consecutive triples of the unique bins give (start, centre, stop) of each
//! triangle, so `n` unique bins yield `n - 2` bands.

use ndarray::Array2;

use super::stft::bin_frequencies;
use super::{SpecConfig, REFERENCE_FREQ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    /// `n_bands x n_fft_bins` non-negative weights.
    pub matrix: Array2<f64>,
    pub center_freqs: Vec<f64>,
}

impl Filterbank {
    pub fn n_bands(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Log-spaced frequencies in `[fmin, fmax]` on the 440 Hz-anchored grid.
pub fn log_frequencies(bands_per_octave: u32, fmin: f64, fmax: f64) -> Vec<f64> {
    let bpo = bands_per_octave as f64;
    let left = ((fmin / REFERENCE_FREQ).log2() * bpo).floor() as i64;
    let right = ((fmax / REFERENCE_FREQ).log2() * bpo).ceil() as i64;
    // tolerate float noise at the interval ends
    let eps = 1e-9;
    (left..=right)
        .map(|k| REFERENCE_FREQ * 2f64.powf(k as f64 / bpo))
        .filter(|&f| f >= fmin * (1.0 - eps) && f <= fmax * (1.0 + eps))
        .collect()
}

/// Maps each frequency to the index of its nearest bin (ties go up), then
/// removes duplicates.
pub fn frequencies_to_unique_bins(freqs: &[f64], bin_freqs: &[f64]) -> Vec<usize> {
    let mut bins: Vec<usize> = freqs
        .iter()
        .map(|&f| {
            let idx = bin_freqs.partition_point(|&b| b < f).clamp(1, bin_freqs.len() - 1);
            let (left, right) = (bin_freqs[idx - 1], bin_freqs[idx]);
            if f - left < right - f {
                idx - 1
            } else {
                idx
            }
        })
        .collect();
    bins.dedup();
    bins
}

pub fn build_log_filterbank(cfg: &SpecConfig, n_fft_bins: usize) -> Result<Filterbank> {
    if cfg.bands_per_octave == 0 {
        return Err(Error::Config("bands_per_octave must be positive".into()));
    }
    let nyquist = cfg.sample_rate as f64 / 2.0;
    if cfg.fmax > nyquist {
        return Err(Error::Config(format!(
            "fmax {} Hz exceeds the Nyquist frequency {} Hz",
            cfg.fmax, nyquist
        )));
    }
    if !(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax) {
        return Err(Error::Config(format!(
            "need 0 < fmin < fmax (got fmin={}, fmax={})",
            cfg.fmin, cfg.fmax
        )));
    }
    if n_fft_bins < 3 {
        return Err(Error::Config("need at least 3 DFT bins".into()));
    }
    let bin_freqs = bin_frequencies(n_fft_bins, cfg.sample_rate);
    let freqs = log_frequencies(cfg.bands_per_octave, cfg.fmin, cfg.fmax);
    let bins = frequencies_to_unique_bins(&freqs, &bin_freqs);
    if bins.len() < 3 {
        return Err(Error::Config(format!(
            "frequency range {}..{} Hz maps to only {} distinct bins; need 3",
            cfg.fmin,
            cfg.fmax,
            bins.len()
        )));
    }

    let n_bands = bins.len() - 2;
    let mut matrix = Array2::zeros((n_bands, n_fft_bins));
    let mut center_freqs = Vec::with_capacity(n_bands);
    for (band, w) in bins.windows(3).enumerate() {
        let (start, center, stop) = (w[0], w[1], w[2]);
        let mut row = matrix.row_mut(band);
        // rising edge: 0 at `start`, exclusive of `center`
        let rise = center - start;
        for i in 0..rise {
            row[start + i] = i as f64 / rise as f64;
        }
        // falling edge: 1 at `center`, exclusive of `stop`
        let fall = stop - center;
        for i in 0..fall {
            row[center + i] = 1.0 - i as f64 / fall as f64;
        }
        if cfg.area_normed_filters {
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        center_freqs.push(bin_freqs[center]);
    }
    Ok(Filterbank {
        matrix,
        center_freqs,
    })
}

/// `mag · fbᵀ`: projects a `T x K` magnitude matrix onto the filterbank bands.
pub fn apply_filterbank(mag: &Array2<f64>, fb: &Filterbank) -> Result<Array2<f64>> {
    if mag.ncols() != fb.n_inputs() {
        return Err(Error::shape(
            "apply_filterbank",
            &[mag.nrows(), fb.n_inputs()],
            &[mag.nrows(), mag.ncols()],
        ));
    }
    Ok(mag.dot(&fb.matrix.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SpecType;
    use ndarray::array;

    fn bank_cfg(sr: u32, nb: u32, norm: bool) -> SpecConfig {
        let mut c = SpecConfig::new(SpecType::LS, sr);
        c.bands_per_octave = nb;
        c.area_normed_filters = norm;
        c
    }

    #[test]
    fn calibrated_bank_has_229_bands() {
        let cfg = bank_cfg(44100, 48, true);
        let fb = build_log_filterbank(&cfg, cfg.n_fft_bins()).unwrap();
        assert_eq!(fb.n_bands(), 229);
    }

    #[test]
    fn one_octave_at_12_bands_has_13_unmerged_centres() {
        // oracle: 440 * 2^(k/12), k = 0..=12
        let freqs = log_frequencies(12, 440.0, 880.0);
        let expect: Vec<f64> = (0..=12).map(|k| 440.0 * 2f64.powf(k as f64 / 12.0)).collect();
        assert_eq!(freqs.len(), 13);
        for (a, b) in freqs.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut cfg = bank_cfg(44100, 12, true);
        cfg.fmin = 440.0;
        cfg.fmax = 880.0;
        let bins = frequencies_to_unique_bins(&freqs, &bin_frequencies(cfg.n_fft_bins(), 44100));
        assert_eq!(bins.len(), 13, "no merging expected");
        let fb = build_log_filterbank(&cfg, cfg.n_fft_bins()).unwrap();
        assert_eq!(fb.n_bands(), 11);
    }

    #[test]
    fn rows_sum_to_one_when_area_normed() {
        for &sr in &[22050, 44100] {
            for &nb in &[12, 24, 36, 48] {
                let cfg = bank_cfg(sr, nb, true);
                let fb = build_log_filterbank(&cfg, cfg.n_fft_bins()).unwrap();
                for row in fb.matrix.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn peak_is_one_without_norm_and_centres_increase() {
        let cfg = bank_cfg(22050, 36, false);
        let fb = build_log_filterbank(&cfg, cfg.n_fft_bins()).unwrap();
        for row in fb.matrix.rows() {
            let max = row.iter().cloned().fold(0.0, f64::max);
            assert_eq!(max, 1.0);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(fb.center_freqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn low_region_is_merged() {
        // at 48 bands/octave and ~10.8 Hz bins, the lowest bands sit on
        // consecutive DFT bins
        let cfg = bank_cfg(44100, 48, true);
        let fb = build_log_filterbank(&cfg, cfg.n_fft_bins()).unwrap();
        let step = 44100.0 / 4096.0;
        assert!((fb.center_freqs[1] - fb.center_freqs[0] - step).abs() < 1e-9);
        let n = fb.center_freqs.len();
        assert!(fb.center_freqs[n - 1] - fb.center_freqs[n - 2] > 5.0 * step);
    }

    #[test]
    fn fmax_above_nyquist_is_rejected() {
        let mut cfg = bank_cfg(22050, 12, true);
        cfg.fmax = 16000.0;
        assert!(matches!(
            build_log_filterbank(&cfg, cfg.n_fft_bins()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn apply_identity_and_mean() {
        let fb = Filterbank {
            matrix: Array2::eye(4),
            center_freqs: vec![1.0, 2.0, 3.0, 4.0],
        };
        let mag = array![[1.0, 2.0, 3.0, 4.0], [0.5, 0.0, 0.0, 7.0]];
        assert_eq!(apply_filterbank(&mag, &fb).unwrap(), mag);

        let mean = Filterbank {
            matrix: array![[0.25, 0.25, 0.25, 0.25]],
            center_freqs: vec![1.0],
        };
        let out = apply_filterbank(&array![[1.0, 2.0, 3.0, 6.0]], &mean).unwrap();
        assert_eq!(out, array![[3.0]]);

        let zero = apply_filterbank(&Array2::zeros((3, 4)), &mean).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        assert!(apply_filterbank(&Array2::zeros((1, 5)), &mean).is_err());
    }
}
