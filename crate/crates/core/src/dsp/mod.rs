//! Audio to time-frequency representations: linear STFT magnitudes (S),
//! log-filtered spectrograms (LS), log-filtered log-magnitude spectrograms
//! (LM) and the constant-Q transform (CQT).

mod config;
pub mod cqt;
pub mod filterbank;
mod spectrogram;
pub mod stft;

pub use config::{
    default_frame_size, default_hop_size, representation_grid, GridRule, SpecConfig, SpecType,
    DEFAULT_FMAX, DEFAULT_FMIN, GRID_BANDS_PER_OCTAVE, GRID_SAMPLE_RATES, GRID_ZERO_PAD,
    REFERENCE_FREQ,
};
pub use cqt::{cqt_frequencies, q_factor};
pub use filterbank::{apply_filterbank, build_log_filterbank, log_frequencies, Filterbank};
pub use spectrogram::{
    compute_representation, cqt, log_magnitude, normalize_max, read_spectrogram,
    spectrogram_csv, write_spectrogram, Spectrogram,
};
pub use stft::{frame_times, stft_magnitude};
