use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::notes::NoteEvent;
use crate::error::{Error, Result};
use crate::zoo::N_KEYS;

/// Binary T×88 activation matrix; column `j` is MIDI pitch `j + 21`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PianoRoll {
    pub frames: Array2<u8>,
    pub frame_rate: f64,
}

impl PianoRoll {
    pub fn zeros(n_frames: usize, frame_rate: f64) -> Self {
        Self {
            frames: Array2::zeros((n_frames, N_KEYS)),
            frame_rate,
        }
    }

    /// Thresholds probabilities with a strict `> threshold` rule.
    pub fn from_probabilities(probs: &Array2<f64>, threshold: f64, frame_rate: f64) -> Result<Self> {
        if probs.ncols() != N_KEYS {
            return Err(Error::shape("probability matrix", &[probs.nrows(), N_KEYS], &[probs.nrows(), probs.ncols()]));
        }
        Ok(Self {
            frames: probs.mapv(|p| u8::from(p > threshold)),
            frame_rate,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn active_cells(&self) -> usize {
        self.frames.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.frames.mapv(f64::from)
    }
}

/// Frame `t` is centred at `t / frame_rate`.
pub fn notes_to_pianoroll(notes: &[NoteEvent], frame_rate: f64, n_frames: usize) -> Result<PianoRoll> {
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(Error::Config(format!("frame rate must be positive, got {frame_rate}")));
    }
    let times: Vec<f64> = (0..n_frames).map(|t| t as f64 / frame_rate).collect();
    notes_to_pianoroll_at(notes, &times, frame_rate)
}

/// Marks cell (t, j) when `times[t]` lies in `[onset, offset)` of some note
/// with pitch `j + 21`. `times` must be non-decreasing.
pub fn notes_to_pianoroll_at(notes: &[NoteEvent], times: &[f64], frame_rate: f64) -> Result<PianoRoll> {
    let mut roll = PianoRoll::zeros(times.len(), frame_rate);
    for note in notes {
        note.validate()?;
        let start = times.partition_point(|&t| t < note.onset);
        let stop = times.partition_point(|&t| t < note.offset);
        let key = note.key();
        for t in start..stop {
            roll.frames[[t, key]] = 1;
        }
    }
    Ok(roll)
}
