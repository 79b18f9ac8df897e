//! Mono audio clips and WAV I/O.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Band-limited resampling with a Hann-windowed sinc kernel.
    ///
    /// Nothing in the pipeline resamples implicitly; callers that need a
    /// different rate must go through this method.
    pub fn resample(&self, target_rate: u32) -> Result<AudioClip> {
        if target_rate == 0 {
            return Err(Error::Config("target sample rate must be positive".into()));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        const HALF_TAPS: isize = 32;
        let ratio = target_rate as f64 / self.sample_rate as f64;
        // low-pass at the lower of the two Nyquist frequencies
        let cutoff = ratio.min(1.0);
        let out_len = (self.samples.len() as f64 * ratio).round() as usize;
        let n_in = self.samples.len() as isize;
        let mut out = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let pos = i as f64 / ratio;
            let centre = pos.floor() as isize;
            let mut acc = 0.0;
            for k in (centre - HALF_TAPS + 1)..=(centre + HALF_TAPS) {
                if k < 0 || k >= n_in {
                    continue;
                }
                let x = pos - k as f64;
                let w = 0.5 + 0.5 * (PI * x / HALF_TAPS as f64).cos();
                if x.abs() >= HALF_TAPS as f64 {
                    continue;
                }
                acc += self.samples[k as usize] * cutoff * sinc(cutoff * x) * w;
            }
            out.push(acc);
        }
        AudioClip::new(out, target_rate)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Reads a mono PCM WAV file (16/24/32-bit integer or 32-bit float).
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected mono audio, found {} channels", spec.channels),
        ));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a clip as 32-bit float mono WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
        for &s in &clip.samples {
            writer.write_sample(s as f32)?;
        }
        writer.finalize()?;
    }
    crate::io::write_atomic(path, &cursor.into_inner())
}
