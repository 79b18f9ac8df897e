//! Reader for Standard MIDI Files (formats 0 and 1), reduced to note events.

use std::collections::HashMap;
use std::path::Path;

use super::notes::NoteEvent;
use crate::error::{Error, Result};

const DEFAULT_TEMPO: u32 = 500_000;

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, what: &str) -> Error {
        Error::format(self.origin, format!("byte {}: {what}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail("unexpected end of data")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn varlen(&mut self) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(self.fail("variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    On { channel: u8, key: u8 },
    Off { channel: u8, key: u8 },
    Tempo(u32),
}

fn read_track(cur: &mut Cursor<'_>, len: usize) -> Result<Vec<(u64, Event)>> {
    let end = cur.pos + len;
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut events = Vec::new();
    while cur.pos < end {
        tick += u64::from(cur.varlen()?);
        let mut status = cur.u8()?;
        let first_data = if status < 0x80 {
            let first = status;
            status = running.ok_or_else(|| cur.fail("data byte without running status"))?;
            Some(first)
        } else {
            None
        };
        match status {
            0xff => {
                let kind = cur.u8()?;
                let n = cur.varlen()? as usize;
                let body = cur.take(n)?;
                if kind == 0x51 && n == 3 {
                    let t = u32::from(body[0]) << 16 | u32::from(body[1]) << 8 | u32::from(body[2]);
                    events.push((tick, Event::Tempo(t)));
                }
                if kind == 0x2f {
                    break;
                }
            }
            0xf0 | 0xf7 => {
                let n = cur.varlen()? as usize;
                cur.take(n)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let a = match first_data {
                    Some(b) => b,
                    None => cur.u8()?,
                };
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let b = if kind == 0xc0 || kind == 0xd0 { 0 } else { cur.u8()? };
                match kind {
                    0x90 if b > 0 => events.push((tick, Event::On { channel, key: a })),
                    0x80 | 0x90 => events.push((tick, Event::Off { channel, key: a })),
                    _ => {}
                }
            }
            _ => return Err(cur.fail(&format!("unsupported status byte {status:#04x}"))),
        }
    }
    cur.pos = end;
    Ok(events)
}

/// Extracts notes from an SMF byte stream. Tempo changes in any track apply
/// to all tracks; overlapping notes on the same key and channel are closed
/// first-in first-out. Notes left open at the end of the data are dropped.
pub fn parse_midi(bytes: &[u8], origin: &Path) -> Result<Vec<NoteEvent>> {
    let mut cur = Cursor { data: bytes, pos: 0, origin };
    if cur.take(4)? != b"MThd" {
        return Err(cur.fail("missing MThd header"));
    }
    let hlen = cur.u32()? as usize;
    if hlen < 6 {
        return Err(cur.fail("header chunk too short"));
    }
    let format = cur.u16()?;
    let ntracks = cur.u16()?;
    let division = cur.u16()?;
    cur.take(hlen - 6)?;
    if format > 1 {
        return Err(cur.fail(&format!("MIDI format {format} is not supported")));
    }
    let mut events: Vec<(u64, usize, Event)> = Vec::new();
    let mut seq = 0usize;
    let mut found = 0;
    while found < ntracks && cur.pos < bytes.len() {
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        if cur.pos + len > bytes.len() {
            return Err(cur.fail("track chunk runs past end of file"));
        }
        if id == b"MTrk" {
            for (tick, ev) in read_track(&mut cur, len)? {
                events.push((tick, seq, ev));
                seq += 1;
            }
            found += 1;
        } else {
            cur.take(len)?;
        }
    }
    events.sort_by_key(|&(tick, s, ev)| (tick, matches!(ev, Event::Tempo(_)) as u8 ^ 1, s));

    let seconds_per_tick_at = |tempo: u32| -> f64 {
        if division & 0x8000 != 0 {
            let fps = f64::from(256 - u32::from(division >> 8));
            let per_frame = f64::from(division & 0xff);
            1.0 / (fps * per_frame)
        } else {
            f64::from(tempo) * 1e-6 / f64::from(division.max(1))
        }
    };

    let mut tempo = DEFAULT_TEMPO;
    let mut last_tick = 0u64;
    let mut now = 0.0f64;
    let mut open: HashMap<(u8, u8), Vec<f64>> = HashMap::new();
    let mut notes = Vec::new();
    for (tick, _, ev) in events {
        now += (tick - last_tick) as f64 * seconds_per_tick_at(tempo);
        last_tick = tick;
        match ev {
            Event::Tempo(t) => tempo = t,
            Event::On { channel, key } => open.entry((channel, key)).or_default().push(now),
            Event::Off { channel, key } => {
                if let Some(stack) = open.get_mut(&(channel, key)) {
                    if !stack.is_empty() {
                        let onset = stack.remove(0);
                        if now > onset {
                            let note = NoteEvent::new(key, onset, now)
                                .map_err(|e| Error::format(origin, e.to_string()))?;
                            notes.push(note);
                        }
                    }
                }
            }
        }
    }
    notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.pitch.cmp(&b.pitch)));
    Ok(notes)
}
