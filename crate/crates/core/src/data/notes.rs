use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOWEST_PITCH: u8 = 21;
pub const HIGHEST_PITCH: u8 = 108;

/// A sounding note with MIDI pitch and onset/offset in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: f64,
    pub offset: f64,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: f64, offset: f64) -> Result<Self> {
        let note = Self { pitch, onset, offset };
        note.validate()?;
        Ok(note)
    }

    pub fn validate(&self) -> Result<()> {
        if !(LOWEST_PITCH..=HIGHEST_PITCH).contains(&self.pitch) {
            return Err(Error::InvalidValue(format!(
                "pitch {} outside the piano range {LOWEST_PITCH}-{HIGHEST_PITCH}",
                self.pitch
            )));
        }
        if !(self.onset.is_finite() && self.offset.is_finite()) || self.onset < 0.0 {
            return Err(Error::InvalidValue(format!(
                "note times must be finite and non-negative, got {}..{}",
                self.onset, self.offset
            )));
        }
        if self.onset >= self.offset {
            return Err(Error::InvalidValue(format!(
                "note onset {} is not before its offset {}",
                self.onset, self.offset
            )));
        }
        Ok(())
    }

    /// Piano-roll column, 0 for A0.
    pub fn key(&self) -> usize {
        usize::from(self.pitch - LOWEST_PITCH)
    }
}

/// Parses the tab/whitespace separated `onset offset pitch` format. Blank
/// lines and `#` comments are skipped; a first line that does not start with a
/// number is treated as a header.
pub fn parse_note_list(text: &str, origin: &Path) -> Result<Vec<NoteEvent>> {
    let mut notes = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if no == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        let bad = |what: &str| Error::format(origin, format!("line {}: {what}", no + 1));
        if fields.len() < 3 {
            return Err(bad("expected onset, offset and pitch"));
        }
        let onset: f64 = fields[0].parse().map_err(|_| bad("onset is not a number"))?;
        let offset: f64 = fields[1].parse().map_err(|_| bad("offset is not a number"))?;
        let pitch: f64 = fields[2].parse().map_err(|_| bad("pitch is not a number"))?;
        if pitch.fract() != 0.0 || !(0.0..=127.0).contains(&pitch) {
            return Err(bad("pitch must be an integer MIDI number"));
        }
        let note = NoteEvent::new(pitch as u8, onset, offset).map_err(|e| bad(&e.to_string()))?;
        notes.push(note);
    }
    Ok(notes)
}

pub fn format_note_list(notes: &[NoteEvent]) -> String {
    let mut out = String::from("onset\toffset\tpitch\n");
    for n in notes {
        out.push_str(&format!("{}\t{}\t{}\n", n.onset, n.offset, n.pitch));
    }
    out
}

/// Reads annotations from a MIDI file (`.mid`, `.midi`) or a note list.
pub fn read_notes(path: &Path) -> Result<Vec<NoteEvent>> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if ext == "mid" || ext == "midi" {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        super::midi::parse_midi(&bytes, path)
    } else {
        parse_note_list(&crate::io::read_to_string(path)?, path)
    }
}

pub fn write_note_list(path: &Path, notes: &[NoteEvent]) -> Result<()> {
    crate::io::write_atomic(path, format_note_list(notes).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_and_without_header() {
        let p = Path::new("t.tsv");
        let a = parse_note_list("onset\toffset\tpitch\n0.5\t1.0\t60\n", p).unwrap();
        let b = parse_note_list("# comment\n0.5 1.0 60\n\n", p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![NoteEvent::new(60, 0.5, 1.0).unwrap()]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_note_list("0.5\t1.0\t60\n1.0\t0.5\t61\n", Path::new("t.tsv")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_note_list("0 1 200\n", Path::new("x")).is_err());
        assert!(parse_note_list("0 1 60.5\n", Path::new("x")).is_err());
        assert!(parse_note_list("0 1\n", Path::new("x")).is_err());
    }

    #[test]
    fn format_round_trip() {
        let notes = vec![
            NoteEvent::new(21, 0.0, 0.125).unwrap(),
            NoteEvent::new(108, 1.0 / 3.0, 2.0).unwrap(),
        ];
        let back = parse_note_list(&format_note_list(&notes), Path::new("x")).unwrap();
        assert_eq!(back, notes);
    }

    #[test]
    fn validation() {
        assert!(NoteEvent::new(20, 0.0, 1.0).is_err());
        assert!(NoteEvent::new(109, 0.0, 1.0).is_err());
        assert!(NoteEvent::new(60, 1.0, 1.0).is_err());
        assert!(NoteEvent::new(60, f64::NAN, 1.0).is_err());
        assert_eq!(NoteEvent::new(60, 0.0, 1.0).unwrap().key(), 39);
    }
}
