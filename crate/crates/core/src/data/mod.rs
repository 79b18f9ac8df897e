//! Annotations, ground-truth piano rolls, dataset splits, synthetic data and
//! mini-batch assembly.

mod batches;
mod dataset;
pub mod midi;
mod notes;
mod pianoroll;
mod splits;
mod synth;

pub use batches::{make_batches, Batches, FrameDataset, InputSource, DEFAULT_BATCH_SIZE};
pub use dataset::{discover_tracks, frame_dataset, load_track, Track, TrackSource};
pub use notes::{
    format_note_list, parse_note_list, read_notes, write_note_list, NoteEvent, HIGHEST_PITCH,
    LOWEST_PITCH,
};
pub use pianoroll::{notes_to_pianoroll, notes_to_pianoroll_at, PianoRoll};
pub use splits::{
    configuration_i, configuration_ii, custom_split, is_real_piano, load_split, Fold, SplitConfig,
    SplitName, TrackInfo, CONFIG_II_SIZES, CONFIG_I_SIZES, DEFAULT_FOLDS, REAL_PIANO_TAGS,
};
pub use synth::{synthesize, SynthSpec, SynthTrack};
