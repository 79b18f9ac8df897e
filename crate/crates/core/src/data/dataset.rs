use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::batches::FrameDataset;
use super::notes::{read_notes, NoteEvent};
use super::pianoroll::{notes_to_pianoroll_at, PianoRoll};
use super::splits::TrackInfo;
use super::synth::SynthTrack;
use crate::audio::{read_wav, AudioClip};
use crate::dsp::{compute_representation, read_spectrogram, write_spectrogram, SpecConfig, Spectrogram};
use crate::error::{Error, Result};

const ANNOTATION_EXTENSIONS: [&str; 4] = ["tsv", "txt", "mid", "midi"];

/// A spectrogram and its frame-aligned ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: String,
    pub instrument: String,
    pub spectrogram: Spectrogram,
    pub roll: PianoRoll,
}

impl Track {
    /// Computes the representation (resampling the audio if needed) and marks
    /// the piano roll at the spectrogram's frame centres.
    pub fn from_audio(
        id: impl Into<String>,
        instrument: impl Into<String>,
        clip: &AudioClip,
        notes: &[NoteEvent],
        cfg: &SpecConfig,
    ) -> Result<Self> {
        let spectrogram = if clip.sample_rate == cfg.sample_rate {
            compute_representation(clip, cfg)?
        } else {
            compute_representation(&clip.resample(cfg.sample_rate)?, cfg)?
        };
        Self::from_spectrogram(id, instrument, spectrogram, notes)
    }

    pub fn from_spectrogram(
        id: impl Into<String>,
        instrument: impl Into<String>,
        spectrogram: Spectrogram,
        notes: &[NoteEvent],
    ) -> Result<Self> {
        let roll = notes_to_pianoroll_at(notes, &spectrogram.frame_times, spectrogram.config.frame_rate())?;
        let track = Self {
            id: id.into(),
            instrument: instrument.into(),
            spectrogram,
            roll,
        };
        track.check_alignment()?;
        Ok(track)
    }

    pub fn from_synth(t: &SynthTrack, cfg: &SpecConfig) -> Result<Self> {
        Self::from_audio(&t.id, &t.instrument, &t.clip, &t.notes, cfg)
    }

    pub fn check_alignment(&self) -> Result<()> {
        if self.spectrogram.n_frames() != self.roll.n_frames() {
            return Err(Error::Alignment {
                spec_frames: self.spectrogram.n_frames(),
                roll_frames: self.roll.n_frames(),
            });
        }
        Ok(())
    }

    pub fn info(&self) -> TrackInfo {
        TrackInfo::new(&self.id, &self.instrument)
    }
}

/// Pools the frames of several tracks for training or evaluation.
pub fn frame_dataset(tracks: &[&Track]) -> Result<FrameDataset> {
    FrameDataset::new(
        tracks
            .iter()
            .map(|t| (t.spectrogram.frames.clone(), t.roll.frames.clone()))
            .collect(),
    )
}

/// An audio file and its annotation file, sharing a stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackSource {
    pub id: String,
    pub audio: PathBuf,
    pub annotation: PathBuf,
}

/// Lists `<id>.wav` files of `dir` that have a `<id>.tsv|.txt|.mid|.midi`
/// annotation beside them, sorted by id.
pub fn discover_tracks(dir: &Path) -> Result<Vec<TrackSource>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut sources = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if !is_wav {
            continue;
        }
        let Some(stem) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        let annotation = ANNOTATION_EXTENSIONS
            .iter()
            .map(|ext| path.with_extension(ext))
            .find(|p| p.is_file());
        if let Some(annotation) = annotation {
            sources.insert(
                stem.clone(),
                TrackSource {
                    id: stem,
                    audio: path,
                    annotation,
                },
            );
        }
    }
    if sources.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no annotated .wav files in {}",
            dir.display()
        )));
    }
    Ok(sources.into_values().collect())
}

/// Loads one track, reusing a cached spectrogram from `cache_dir` when its
/// configuration hash matches.
pub fn load_track(src: &TrackSource, instrument: &str, cfg: &SpecConfig, cache_dir: Option<&Path>) -> Result<Track> {
    let notes = read_notes(&src.annotation)?;
    let cache_path = cache_dir.map(|d| d.join(format!("{}_{}.fwspec", src.id, &cfg.config_hash()[..16])));
    if let Some(path) = cache_path.as_deref().filter(|p| p.is_file()) {
        if let Ok(spec) = read_spectrogram(path) {
            if spec.config.config_hash() == cfg.config_hash() {
                return Track::from_spectrogram(&src.id, instrument, spec, &notes);
            }
        }
    }
    let clip = read_wav(&src.audio)?;
    let track = Track::from_audio(&src.id, instrument, &clip, &notes, cfg)?;
    if let Some(path) = cache_path {
        write_spectrogram(&path, &track.spectrogram)?;
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use crate::data::{synthesize, write_note_list, SynthSpec};
    use crate::dsp::SpecType;

    #[test]
    fn roll_follows_spectrogram_frames() {
        let spec = SynthSpec {
            n_tracks: 1,
            duration: 1.5,
            ..SynthSpec::default()
        };
        let t = &synthesize(&spec).unwrap()[0];
        let cfg = SpecConfig::new(SpecType::LM, 22_050);
        let track = Track::from_synth(t, &cfg).unwrap();
        assert_eq!(track.spectrogram.n_frames(), track.roll.n_frames());
        let n = &t.notes[0];
        let times = &track.spectrogram.frame_times;
        for (f, &time) in times.iter().enumerate() {
            let on = track.roll.frames[[f, n.key()]] == 1;
            if time >= n.onset && time < n.offset {
                assert!(on);
            }
        }
    }

    #[test]
    fn directory_round_trip_with_cache() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_tracks: 2,
            duration: 1.0,
            ..SynthSpec::default()
        };
        for t in synthesize(&spec).unwrap() {
            write_wav(&dir.path().join(format!("{}.wav", t.id)), &t.clip).unwrap();
            write_note_list(&dir.path().join(format!("{}.tsv", t.id)), &t.notes).unwrap();
        }
        std::fs::write(dir.path().join("orphan.wav"), b"x").unwrap();
        let sources = discover_tracks(dir.path()).unwrap();
        assert_eq!(sources.len(), 2);
        let cfg = SpecConfig::new(SpecType::LS, 22_050);
        let cache = dir.path().join("cache");
        let first = load_track(&sources[0], "synth", &cfg, Some(&cache)).unwrap();
        assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
        let second = load_track(&sources[0], "synth", &cfg, Some(&cache)).unwrap();
        assert_eq!(first, second);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(discover_tracks(empty.path()), Err(Error::EmptyInput(_))));
    }
}
