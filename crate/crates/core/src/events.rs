//! Event data model, stream I/O and time-window slicing.
//!
//! Timestamps are integer microseconds. On disk polarity is a single bit
//! (`0` = OFF, `1` = ON); in memory it is the signed [`Polarity`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "t_us,x,y,p";
pub const BIN_MAGIC: &[u8; 4] = b"EVS1";

/// Size of one packed binary record: u64 t, u16 x, u16 y, u8 p.
const BIN_RECORD_LEN: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    /// `+1` or `-1`.
    pub fn sign(self) -> i32 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    /// Channel index used by per-polarity grids: ON = 0, OFF = 1.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    /// DAVIS346 resolution.
    pub const DAVIS346: SensorGeometry = SensorGeometry {
        width: 346,
        height: 260,
    };

    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "sensor geometry must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        u32::from(x) < self.width && u32::from(y) < self.height
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self::DAVIS346
    }
}

/// A validated, time-ordered sequence of events on a fixed sensor.
///
/// Immutable once built; every event lies inside the geometry and
/// timestamps never decrease.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    geometry: SensorGeometry,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream from already-ordered events.
    pub fn new(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self> {
        validate_bounds(&geometry, &events)?;
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Validation {
                index: i + 1,
                message: format!(
                    "timestamp {} precedes previous timestamp {}",
                    events[i + 1].t,
                    events[i].t
                ),
            });
        }
        Ok(Self { geometry, events })
    }

    /// Builds a stream, stably sorting by timestamp when needed. The flag is
    /// `true` when the input was out of order.
    pub fn from_unsorted(geometry: SensorGeometry, mut events: Vec<Event>) -> Result<(Self, bool)> {
        validate_bounds(&geometry, &events)?;
        let unsorted = events.windows(2).any(|w| w[1].t < w[0].t);
        if unsorted {
            events.sort_by_key(|e| e.t);
        }
        Ok((Self { geometry, events }, unsorted))
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        Self {
            geometry,
            events: Vec::new(),
        }
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn first_t(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }

    /// Events with `t0 <= t < t0 + dt`, order preserved.
    pub fn slice_window(&self, t0: u64, dt: u64) -> EventStream {
        let end = t0.saturating_add(dt);
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t < end);
        EventStream {
            geometry: self.geometry,
            events: self.events[lo..hi.max(lo)].to_vec(),
        }
    }

    /// Number of events with `t0 <= t < t0 + dt`, without copying.
    pub fn count_in_window(&self, t0: u64, dt: u64) -> usize {
        let end = t0.saturating_add(dt);
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t < end);
        hi.saturating_sub(lo)
    }

    /// Stable time-ordered merge of two streams on the same sensor.
    pub fn merge(&self, other: &EventStream) -> Result<EventStream> {
        if self.geometry != other.geometry {
            return Err(Error::Parameter(
                "cannot merge streams with different geometry".into(),
            ));
        }
        let mut events = Vec::with_capacity(self.len() + other.len());
        events.extend_from_slice(&self.events);
        events.extend_from_slice(&other.events);
        events.sort_by_key(|e| e.t);
        Ok(EventStream {
            geometry: self.geometry,
            events,
        })
    }

    /// Shifts every timestamp by `offset` microseconds.
    pub fn translate(&self, offset: u64) -> EventStream {
        EventStream {
            geometry: self.geometry,
            events: self
                .events
                .iter()
                .map(|e| Event {
                    t: e.t + offset,
                    ..*e
                })
                .collect(),
        }
    }
}

pub fn count_events(stream: &EventStream) -> usize {
    stream.len()
}

fn validate_bounds(geometry: &SensorGeometry, events: &[Event]) -> Result<()> {
    match events.iter().position(|e| !geometry.contains(e.x, e.y)) {
        Some(index) => {
            let e = events[index];
            Err(Error::Validation {
                index,
                message: format!(
                    "coordinate ({}, {}) outside {}x{} sensor",
                    e.x, e.y, geometry.width, geometry.height
                ),
            })
        }
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Bin,
}

impl EventFormat {
    /// Guesses the format from a file extension; anything other than `.csv`
    /// is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Bin,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedStream {
    pub stream: EventStream,
    /// The source was not time-ordered and has been stably re-sorted.
    pub resorted: bool,
}

/// Loads a stream. CSV carries no geometry, so `csv_geometry` applies to it;
/// binary files carry their own.
pub fn load_events(
    path: impl AsRef<Path>,
    format: EventFormat,
    csv_geometry: SensorGeometry,
) -> Result<LoadedStream> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let (geometry, events) = match format {
        EventFormat::Csv => (csv_geometry, read_csv(reader)?),
        EventFormat::Bin => read_bin(reader)?,
    };
    let (stream, resorted) = EventStream::from_unsorted(geometry, events)?;
    Ok(LoadedStream { stream, resorted })
}

pub fn save_events(
    path: impl AsRef<Path>,
    format: EventFormat,
    stream: &EventStream,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        EventFormat::Csv => write_csv(&mut writer, stream),
        EventFormat::Bin => write_bin(&mut writer, stream),
    }
    .and_then(|_| writer.flush())
    .map_err(|e| Error::io(path, e))
}

pub fn read_csv<R: BufRead>(reader: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(format!("line {lineno}"), e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(Error::parse(
                    format!("line {lineno}"),
                    format!("expected header `{CSV_HEADER}`, found `{line}`"),
                ));
            }
            saw_header = true;
            continue;
        }
        events.push(parse_csv_row(line).map_err(|m| Error::parse(format!("line {lineno}"), m))?);
    }
    Ok(events)
}

fn parse_csv_row(line: &str) -> std::result::Result<Event, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let t = fields[0]
        .parse::<u64>()
        .map_err(|e| format!("bad timestamp `{}`: {e}", fields[0]))?;
    let x = fields[1]
        .parse::<u16>()
        .map_err(|e| format!("bad x `{}`: {e}", fields[1]))?;
    let y = fields[2]
        .parse::<u16>()
        .map_err(|e| format!("bad y `{}`: {e}", fields[2]))?;
    let polarity = fields[3]
        .parse::<u8>()
        .ok()
        .and_then(Polarity::from_bit)
        .ok_or_else(|| format!("bad polarity `{}` (expected 0 or 1)", fields[3]))?;
    Ok(Event { t, x, y, polarity })
}

pub fn write_csv<W: Write>(mut writer: W, stream: &EventStream) -> std::io::Result<()> {
    writeln!(writer, "{CSV_HEADER}")?;
    for e in stream.events() {
        writeln!(writer, "{},{},{},{}", e.t, e.x, e.y, e.polarity.bit())?;
    }
    Ok(())
}

pub fn read_bin<R: Read>(mut reader: R) -> Result<(SensorGeometry, Vec<Event>)> {
    let at = |offset: u64| format!("byte offset {offset}");
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::parse(at(0), format!("missing magic: {e}")))?;
    if &magic != BIN_MAGIC {
        return Err(Error::parse(at(0), format!("bad magic {magic:?}")));
    }
    let width = reader
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::parse(at(4), e.to_string()))?;
    let height = reader
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::parse(at(8), e.to_string()))?;
    let geometry = SensorGeometry::new(width, height)
        .map_err(|_| Error::parse(at(4), format!("invalid geometry {width}x{height}")))?;
    let count = reader
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::parse(at(12), e.to_string()))?;

    let header_len = 20u64;
    // Do not trust the header count for preallocation beyond a sane bound.
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut record = [0u8; BIN_RECORD_LEN];
    for i in 0..count {
        let offset = header_len + i * BIN_RECORD_LEN as u64;
        reader.read_exact(&mut record).map_err(|e| {
            Error::parse(at(offset), format!("truncated record {i} of {count}: {e}"))
        })?;
        let mut r = &record[..];
        let t = r.read_u64::<LittleEndian>().expect("sized buffer");
        let x = r.read_u16::<LittleEndian>().expect("sized buffer");
        let y = r.read_u16::<LittleEndian>().expect("sized buffer");
        let p = r.read_u8().expect("sized buffer");
        let polarity = Polarity::from_bit(p).ok_or_else(|| {
            Error::parse(
                at(offset + 12),
                format!("bad polarity byte {p} in record {i}"),
            )
        })?;
        events.push(Event { t, x, y, polarity });
    }
    let mut trailing = [0u8; 1];
    if reader
        .read(&mut trailing)
        .map_err(|e| Error::parse(at(0), e.to_string()))?
        != 0
    {
        let offset = header_len + count * BIN_RECORD_LEN as u64;
        return Err(Error::parse(at(offset), "trailing bytes after last record"));
    }
    Ok((geometry, events))
}

pub fn write_bin<W: Write>(mut writer: W, stream: &EventStream) -> std::io::Result<()> {
    writer.write_all(BIN_MAGIC)?;
    writer.write_u32::<LittleEndian>(stream.geometry.width)?;
    writer.write_u32::<LittleEndian>(stream.geometry.height)?;
    writer.write_u64::<LittleEndian>(stream.len() as u64)?;
    for e in stream.events() {
        writer.write_u64::<LittleEndian>(e.t)?;
        writer.write_u16::<LittleEndian>(e.x)?;
        writer.write_u16::<LittleEndian>(e.y)?;
        writer.write_u8(e.polarity.bit())?;
    }
    Ok(())
}
