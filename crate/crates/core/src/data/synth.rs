//! Additive piano-like test signals with exact note annotations.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::notes::{NoteEvent, HIGHEST_PITCH, LOWEST_PITCH};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::io::derive_seed;

const ATTACK_SECONDS: f64 = 0.005;
const RELEASE_SECONDS: f64 = 0.01;
const PEAK_LEVEL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_tracks: usize,
    /// Seconds per track.
    pub duration: f64,
    pub sample_rate: u32,
    /// Inclusive range of simultaneous notes per chord.
    pub polyphony: [usize; 2],
    /// Inclusive MIDI pitch range.
    pub pitch_range: [u8; 2],
    /// Beats per minute; one chord lasts half a beat to two beats.
    pub tempo_range: [f64; 2],
    pub partials: usize,
    /// Amplitude decay rate of the fundamental, 1/s.
    pub decay: f64,
    /// Additional decay rate per partial index, 1/s.
    pub decay_per_partial: f64,
    /// Peak amplitude of additive uniform noise.
    pub noise_floor: f64,
    pub seed: u64,
    /// Instrument tag attached to generated tracks.
    pub instrument: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_tracks: 10,
            duration: 10.0,
            sample_rate: 22_050,
            polyphony: [1, 3],
            pitch_range: [36, 96],
            tempo_range: [80.0, 160.0],
            partials: 6,
            decay: 1.5,
            decay_per_partial: 0.8,
            noise_floor: 1e-3,
            seed: 0,
            instrument: "synth".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [pmin, pmax] = self.polyphony;
        let [lo, hi] = self.pitch_range;
        if pmin == 0 || pmin > pmax {
            return Err(Error::Config(format!("invalid polyphony range {:?}", self.polyphony)));
        }
        if lo < LOWEST_PITCH || hi > HIGHEST_PITCH || lo > hi {
            return Err(Error::Config(format!("invalid pitch range {:?}", self.pitch_range)));
        }
        if usize::from(hi - lo) + 1 < pmax {
            return Err(Error::Config("pitch range smaller than maximum polyphony".into()));
        }
        let [t0, t1] = self.tempo_range;
        if !(t0 > 0.0 && t0 <= t1 && t1.is_finite()) {
            return Err(Error::Config(format!("invalid tempo range {:?}", self.tempo_range)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) || self.sample_rate == 0 {
            return Err(Error::Config("duration and sample rate must be positive".into()));
        }
        if self.partials == 0 || self.decay < 0.0 || self.decay_per_partial < 0.0 || self.noise_floor < 0.0 {
            return Err(Error::Config("partials must be positive and decay/noise non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrack {
    pub id: String,
    pub instrument: String,
    pub clip: AudioClip,
    pub notes: Vec<NoteEvent>,
}

pub fn synthesize(spec: &SynthSpec) -> Result<Vec<SynthTrack>> {
    spec.validate()?;
    (0..spec.n_tracks)
        .map(|i| synthesize_track(spec, i))
        .collect()
}

fn synthesize_track(spec: &SynthSpec, index: usize) -> Result<SynthTrack> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[index as u64]));
    let notes = compose(spec, &mut rng)?;
    let clip = render(spec, &notes, &mut rng)?;
    Ok(SynthTrack {
        id: format!("synth_{:04}", index),
        instrument: spec.instrument.clone(),
        clip,
        notes,
    })
}

fn compose(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<NoteEvent>> {
    const BEAT_MULTIPLES: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
    let [lo, hi] = spec.pitch_range;
    let span = usize::from(hi - lo) + 1;
    let mut notes = Vec::new();
    let mut t = 0.05;
    while t < spec.duration - 0.1 {
        let beat = 60.0 / rng.gen_range(spec.tempo_range[0]..=spec.tempo_range[1]);
        let ioi = beat * BEAT_MULTIPLES[rng.gen_range(0..BEAT_MULTIPLES.len())];
        let k = rng.gen_range(spec.polyphony[0]..=spec.polyphony[1]);
        let length = (ioi * rng.gen_range(0.6..=1.0)).min(spec.duration - t);
        for j in sample(rng, span, k).into_vec() {
            notes.push(NoteEvent::new(lo + j as u8, t, t + length)?);
        }
        t += ioi;
    }
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    Ok(notes)
}

fn render(spec: &SynthSpec, notes: &[NoteEvent], rng: &mut ChaCha8Rng) -> Result<AudioClip> {
    let sr = f64::from(spec.sample_rate);
    let n = (spec.duration * sr).round() as usize;
    let mut out = vec![0.0; n];
    let nyquist = sr / 2.0;
    for note in notes {
        let f0 = 440.0 * 2f64.powf((f64::from(note.pitch) - 69.0) / 12.0);
        let velocity = rng.gen_range(0.4..=1.0);
        let phases: Vec<f64> = (0..spec.partials)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let start = (note.onset * sr).round() as usize;
        let hold = note.offset - note.onset;
        let stop = (((note.offset + 5.0 * RELEASE_SECONDS) * sr).round() as usize).min(n);
        for (h, phase) in phases.iter().enumerate() {
            let freq = f0 * (h + 1) as f64;
            if freq >= nyquist {
                break;
            }
            let amp = velocity / (h + 1) as f64;
            let rate = spec.decay + spec.decay_per_partial * h as f64;
            let w = std::f64::consts::TAU * freq / sr;
            for (s, o) in out.iter_mut().enumerate().take(stop).skip(start) {
                let tr = (s - start) as f64 / sr;
                let mut env = (tr / ATTACK_SECONDS).min(1.0) * (-rate * tr).exp();
                if tr > hold {
                    env *= (-(tr - hold) / RELEASE_SECONDS).exp();
                }
                *o += amp * env * (w * (s - start) as f64 + phase).sin();
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LEVEL {
        out.iter_mut().for_each(|v| *v *= PEAK_LEVEL / peak);
    }
    if spec.noise_floor > 0.0 {
        for v in out.iter_mut() {
            *v += rng.gen_range(-spec.noise_floor..=spec.noise_floor);
        }
    }
    AudioClip::new(out, spec.sample_rate)
}
