use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four time-frequency representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpecType {
    /// Linear-bin magnitude spectrogram.
    S,
    /// Log-filtered spectrogram.
    LS,
    /// Log-filtered spectrogram with log-compressed magnitudes.
    LM,
    /// Constant-Q transform.
    CQT,
}

impl SpecType {
    pub const ALL: [SpecType; 4] = [SpecType::S, SpecType::LS, SpecType::LM, SpecType::CQT];

    pub fn name(self) -> &'static str {
        match self {
            SpecType::S => "S",
            SpecType::LS => "LS",
            SpecType::LM => "LM",
            SpecType::CQT => "CQT",
        }
    }

    pub fn uses_stft(self) -> bool {
        !matches!(self, SpecType::CQT)
    }

    pub fn uses_filterbank(self) -> bool {
        matches!(self, SpecType::LS | SpecType::LM)
    }

    pub fn uses_bands_per_octave(self) -> bool {
        !matches!(self, SpecType::S)
    }
}

impl std::str::FromStr for SpecType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S" => Ok(SpecType::S),
            "LS" => Ok(SpecType::LS),
            "LM" => Ok(SpecType::LM),
            "CQT" => Ok(SpecType::CQT),
            other => Err(Error::Config(format!("unknown spectrogram type `{other}`"))),
        }
    }
}

impl std::fmt::Display for SpecType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Lowest frequency of the log filterbank and CQT, Hz.
pub const DEFAULT_FMIN: f64 = 30.0;
/// Highest frequency of the log filterbank and CQT, Hz. Calibrated so that the
/// LS/LM bank at 44.1 kHz, 48 bands per octave, 4096-sample frames and no zero
/// padding has exactly 229 bands.
pub const DEFAULT_FMAX: f64 = 8000.0;
/// Reference pitch the logarithmic frequency grid is anchored to.
pub const REFERENCE_FREQ: f64 = 440.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialSpecConfig")]
pub struct SpecConfig {
    pub spec_type: SpecType,
    pub sample_rate: u32,
    pub frame_size: usize,
    pub hop_size: usize,
    /// Extra zeros appended to each frame, as a multiple of the frame size (0, 1 or 2).
    pub zero_pad: u8,
    pub circular_shift: bool,
    pub bands_per_octave: u32,
    pub area_normed_filters: bool,
    pub fmin: f64,
    pub fmax: f64,
}

/// On-disk form: only `spec_type` and `sample_rate` are required, every
/// other knob falls back to `SpecConfig::new`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSpecConfig {
    spec_type: SpecType,
    sample_rate: u32,
    frame_size: Option<usize>,
    hop_size: Option<usize>,
    zero_pad: Option<u8>,
    circular_shift: Option<bool>,
    bands_per_octave: Option<u32>,
    area_normed_filters: Option<bool>,
    fmin: Option<f64>,
    fmax: Option<f64>,
}

impl From<PartialSpecConfig> for SpecConfig {
    fn from(p: PartialSpecConfig) -> Self {
        let d = SpecConfig::new(p.spec_type, p.sample_rate);
        Self {
            frame_size: p.frame_size.unwrap_or(d.frame_size),
            hop_size: p.hop_size.unwrap_or(d.hop_size),
            zero_pad: p.zero_pad.unwrap_or(d.zero_pad),
            circular_shift: p.circular_shift.unwrap_or(d.circular_shift),
            bands_per_octave: p.bands_per_octave.unwrap_or(d.bands_per_octave),
            area_normed_filters: p.area_normed_filters.unwrap_or(d.area_normed_filters),
            fmin: p.fmin.unwrap_or(d.fmin),
            fmax: p.fmax.unwrap_or(d.fmax),
            ..d
        }
    }
}

impl SpecConfig {
    /// Defaults for a representation at a given sample rate: ~93 ms frames
    /// (4096 samples at 44.1 kHz), 10 ms hop, 48 bands per octave, area-normed filters.
    pub fn new(spec_type: SpecType, sample_rate: u32) -> Self {
        Self {
            spec_type,
            sample_rate,
            frame_size: default_frame_size(sample_rate),
            hop_size: default_hop_size(sample_rate),
            zero_pad: 0,
            circular_shift: false,
            bands_per_octave: 48,
            area_normed_filters: true,
            fmin: DEFAULT_FMIN,
            fmax: DEFAULT_FMAX,
        }
    }

    pub fn padded_size(&self) -> usize {
        self.frame_size * (1 + self.zero_pad as usize)
    }

    /// Number of non-negative-frequency DFT bins.
    pub fn n_fft_bins(&self) -> usize {
        self.padded_size() / 2 + 1
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.frame_size < 2 {
            return Err(Error::Config("frame_size must be at least 2".into()));
        }
        if self.hop_size == 0 || self.hop_size > self.frame_size {
            return Err(Error::Config(format!(
                "hop_size must be in 1..={} (got {})",
                self.frame_size, self.hop_size
            )));
        }
        if self.zero_pad > 2 {
            return Err(Error::Config(format!(
                "zero_pad must be 0, 1 or 2 (got {})",
                self.zero_pad
            )));
        }
        if self.spec_type.uses_bands_per_octave() {
            if self.bands_per_octave == 0 {
                return Err(Error::Config("bands_per_octave must be positive".into()));
            }
            let nyquist = self.sample_rate as f64 / 2.0;
            if !(self.fmin > 0.0 && self.fmin < self.fmax) {
                return Err(Error::Config(format!(
                    "need 0 < fmin < fmax (got fmin={}, fmax={})",
                    self.fmin, self.fmax
                )));
            }
            if self.fmax > nyquist {
                return Err(Error::Config(format!(
                    "fmax {} Hz exceeds the Nyquist frequency {} Hz",
                    self.fmax, nyquist
                )));
            }
        }
        Ok(())
    }

    /// Copy with every parameter the representation type ignores reset to its
    /// default, so configurations that differ only in ignored knobs compare equal.
    pub fn canonical(&self) -> SpecConfig {
        let d = SpecConfig::new(self.spec_type, self.sample_rate);
        let mut c = self.clone();
        match self.spec_type {
            SpecType::S => {
                c.bands_per_octave = d.bands_per_octave;
                c.area_normed_filters = d.area_normed_filters;
                c.fmin = d.fmin;
                c.fmax = d.fmax;
            }
            SpecType::LS | SpecType::LM => {}
            SpecType::CQT => {
                c.zero_pad = d.zero_pad;
                c.circular_shift = d.circular_shift;
                c.area_normed_filters = d.area_normed_filters;
            }
        }
        c
    }

    /// Stable content hash of the canonical configuration.
    /// Reads a configuration from TOML, or JSON when the extension is `.json`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        };
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn config_hash(&self) -> String {
        crate::io::content_hash(&self.canonical())
    }
}

pub fn default_frame_size(sample_rate: u32) -> usize {
    // 4096 at 44.1 kHz, 2048 at 22.05 kHz
    let target = sample_rate as f64 * 4096.0 / 44100.0;
    let exp = target.log2().round().max(1.0) as u32;
    1usize << exp
}

pub fn default_hop_size(sample_rate: u32) -> usize {
    ((sample_rate as f64 / 100.0).round() as usize).max(1)
}

/// Which representation types the Table-1 style grid enumerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GridRule {
    /// S, LS and LM crosses: 12 + 96 + 96 = 204 configurations.
    #[default]
    StftFamily,
    /// Adds the 8 CQT crosses (sample rate x bands per octave): 212 configurations.
    AllTypes,
}

pub const GRID_SAMPLE_RATES: [u32; 2] = [22050, 44100];
pub const GRID_ZERO_PAD: [u8; 3] = [0, 1, 2];
pub const GRID_BANDS_PER_OCTAVE: [u32; 4] = [12, 24, 36, 48];

/// Enumerates the representation grid, varying for each type only the
/// parameters that apply to it.
pub fn representation_grid(rule: GridRule) -> Vec<SpecConfig> {
    let types: &[SpecType] = match rule {
        GridRule::StftFamily => &[SpecType::S, SpecType::LS, SpecType::LM],
        GridRule::AllTypes => &SpecType::ALL,
    };
    let mut out = Vec::new();
    for &ty in types {
        for &sr in &GRID_SAMPLE_RATES {
            let base = SpecConfig::new(ty, sr);
            let zps: &[u8] = if ty.uses_stft() { &GRID_ZERO_PAD } else { &[0] };
            let css: &[bool] = if ty.uses_stft() { &[false, true] } else { &[false] };
            let nbs: &[u32] = if ty.uses_bands_per_octave() {
                &GRID_BANDS_PER_OCTAVE
            } else {
                &[48]
            };
            let norms: &[bool] = if ty.uses_filterbank() {
                &[true, false]
            } else {
                &[true]
            };
            for &zp in zps {
                for &cs in css {
                    for &nb in nbs {
                        for &norm in norms {
                            out.push(SpecConfig {
                                zero_pad: zp,
                                circular_shift: cs,
                                bands_per_octave: nb,
                                area_normed_filters: norm,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
    }
    out
}
