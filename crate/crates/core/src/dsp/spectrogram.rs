use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::cqt::cqt_magnitude;
use super::filterbank::{apply_filterbank, build_log_filterbank};
use super::stft::{bin_frequencies, frame_times, stft_magnitude};
use super::{SpecConfig, SpecType};
use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// A `T x B` time-frequency representation scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Array2<f64>,
    pub config: SpecConfig,
    /// Centre time of each frame in seconds.
    pub frame_times: Vec<f64>,
    /// Centre frequency of each column in Hz.
    pub band_freqs: Vec<f64>,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.frames.ncols()
    }
}

/// Elementwise `ln(1 + x)`.
pub fn log_magnitude(x: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidValue(format!(
            "log_magnitude expects non-negative input, found {v}"
        )));
    }
    Ok(x.mapv(f64::ln_1p))
}

/// Divides by the global maximum so the largest value becomes 1. All-zero
/// input is returned unchanged.
pub fn normalize_max(mut x: Array2<f64>) -> Array2<f64> {
    let max = x.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        x.mapv_inplace(|v| v / max);
    }
    x
}

/// Normalized constant-Q spectrogram.
pub fn cqt(clip: &AudioClip, cfg: &SpecConfig) -> Result<Spectrogram> {
    let (mag, freqs) = cqt_magnitude(clip, cfg)?;
    let n = mag.nrows();
    Ok(Spectrogram {
        frames: normalize_max(mag),
        config: cfg.clone(),
        frame_times: frame_times(n, cfg),
        band_freqs: freqs,
    })
}

/// Computes the configured representation and rescales it to `[0, 1]`.
pub fn compute_representation(clip: &AudioClip, cfg: &SpecConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip sample rate {} Hz does not match configured {} Hz; resample explicitly",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    if cfg.spec_type == SpecType::CQT {
        return cqt(clip, cfg);
    }
    let mag = stft_magnitude(clip, cfg)?;
    let n_frames = mag.nrows();
    let (raw, band_freqs) = match cfg.spec_type {
        SpecType::S => {
            let freqs = bin_frequencies(mag.ncols(), cfg.sample_rate);
            (mag, freqs)
        }
        SpecType::LS | SpecType::LM => {
            let fb = build_log_filterbank(cfg, mag.ncols())?;
            let mut filtered = apply_filterbank(&mag, &fb)?;
            if cfg.spec_type == SpecType::LM {
                filtered = log_magnitude(&filtered)?;
            }
            (filtered, fb.center_freqs)
        }
        SpecType::CQT => unreachable!(),
    };
    Ok(Spectrogram {
        frames: normalize_max(raw),
        config: cfg.clone(),
        frame_times: frame_times(n_frames, cfg),
        band_freqs,
    })
}

const MAGIC: &[u8; 8] = b"FWSPEC01";

#[derive(Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
    config: SpecConfig,
    config_hash: String,
}

/// Binary container: magic, little-endian u64 header length, JSON header,
/// then `rows*cols` frame values, `rows` frame times and `cols` band
/// frequencies as little-endian f64.
pub fn write_spectrogram(path: &Path, spec: &Spectrogram) -> Result<()> {
    let header = Header {
        rows: spec.n_frames(),
        cols: spec.n_bands(),
        config: spec.config.clone(),
        config_hash: spec.config.config_hash(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * (spec.frames.len() + 2 * header.rows));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in spec
        .frames
        .iter()
        .chain(&spec.frame_times)
        .chain(&spec.band_freqs)
    {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    crate::io::write_atomic(path, &buf)
}

pub fn read_spectrogram(path: &Path) -> Result<Spectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a spectrogram container"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    if header.config.config_hash() != header.config_hash {
        return Err(Error::format(path, "config hash mismatch"));
    }
    let n = header.rows * header.cols + header.rows + header.cols;
    let data = &bytes[16 + hlen..];
    if data.len() != 8 * n {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (grid, rest) = values.split_at(header.rows * header.cols);
    let (times, freqs) = rest.split_at(header.rows);
    Ok(Spectrogram {
        frames: Array2::from_shape_vec((header.rows, header.cols), grid.to_vec())
            .expect("checked size"),
        config: header.config,
        frame_times: times.to_vec(),
        band_freqs: freqs.to_vec(),
    })
}

/// CSV with a `time` column followed by one column per band.
pub fn spectrogram_csv(spec: &Spectrogram, max_rows: Option<usize>) -> String {
    let mut out = Vec::new();
    write!(out, "time").unwrap();
    for f in &spec.band_freqs {
        write!(out, ",{f:.3}").unwrap();
    }
    writeln!(out).unwrap();
    let rows = max_rows.unwrap_or(usize::MAX).min(spec.n_frames());
    for (t, row) in spec.frames.rows().into_iter().take(rows).enumerate() {
        write!(out, "{:.6}", spec.frame_times[t]).unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out).unwrap();
    }
    String::from_utf8(out).unwrap()
}
