use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u32,
    pub height: u32,
}

impl SensorSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_sign(v: i64) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// One brightness change: pixel column `x`, row `y`, time `t` in µs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t: u64,
    pub p: Polarity,
}

/// Events sorted by timestamp, all inside the sensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventStream {
    events: Vec<Event>,
}

impl EventStream {
    /// Validates coordinates and sorts stably by time.
    pub fn new(mut events: Vec<Event>, sensor: SensorSize) -> Result<Self> {
        if let Some(e) = events
            .iter()
            .find(|e| e.x >= sensor.width || e.y >= sensor.height)
        {
            return Err(Error::Validation(format!(
                "event at ({}, {}) outside {}x{} sensor",
                e.x, e.y, sensor.width, sensor.height
            )));
        }
        events.sort_by_key(|e| e.t);
        Ok(Self { events })
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

    /// Events with `lo ≤ t ≤ hi`.
    pub fn window(&self, lo: u64, hi: u64) -> &[Event] {
        let a = self.events.partition_point(|e| e.t < lo);
        let b = self.events.partition_point(|e| e.t <= hi);
        &self.events[a..b.max(a)]
    }
}

/// Parses `t,x,y,p` rows. A leading `t,x,y,p` header and blank lines are
/// skipped. Line numbers in errors are 1-based.
pub fn parse_events_str(text: &str, sensor: SensorSize) -> Result<EventStream> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || (events.is_empty() && row.replace(' ', "") == "t,x,y,p") {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, name: &str| -> Result<i64> {
            s.parse::<i64>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad {name} {s:?}: {e}"),
            })
        };
        let (t, x, y, p) = (
            num(fields[0], "t")?,
            num(fields[1], "x")?,
            num(fields[2], "y")?,
            num(fields[3], "p")?,
        );
        let p = Polarity::from_sign(p).ok_or_else(|| {
            Error::Validation(format!("line {line}: polarity must be 1 or -1, got {p}"))
        })?;
        if t < 0 || x < 0 || y < 0 {
            return Err(Error::Validation(format!(
                "line {line}: negative time or coordinate"
            )));
        }
        if x >= sensor.width as i64 || y >= sensor.height as i64 {
            return Err(Error::Validation(format!(
                "line {line}: ({x}, {y}) outside {}x{} sensor",
                sensor.width, sensor.height
            )));
        }
        events.push(Event {
            x: x as u32,
            y: y as u32,
            t: t as u64,
            p,
        });
    }
    EventStream::new(events, sensor)
}

pub fn parse_events(path: &Path, sensor: SensorSize) -> Result<EventStream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events_str(&text, sensor)
}

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    let mut out = String::from("t,x,y,p\n");
    for e in stream.events() {
        let p = if e.p == Polarity::Positive { 1 } else { -1 };
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, p).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SENSOR: SensorSize = SensorSize { width: 8, height: 8 };

    #[test]
    fn parses_two_rows() {
        let s = parse_events_str("0,3,4,1\n5,3,4,-1", SENSOR).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.events()[0].p, Polarity::Positive);
        assert_eq!(s.events()[1].t, 5);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        assert!(parse_events_str("", SENSOR).unwrap().is_empty());
        assert!(parse_events_str("t,x,y,p\n", SENSOR).unwrap().is_empty());
    }

    #[test]
    fn sorts_by_time() {
        let s = parse_events_str("t,x,y,p\n9,0,0,1\n2,1,1,-1\n5,2,2,1", SENSOR).unwrap();
        let ts: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![2, 5, 9]);
    }

    #[test]
    fn bad_polarity_is_validation_error() {
        let err = parse_events_str("0,3,4,2", SENSOR).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_row_names_line() {
        let err = parse_events_str("0,1,1,1\n\n4,x,1,1", SENSOR).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_events_str("0,1,1", SENSOR).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn out_of_bounds_is_validation_error() {
        assert!(matches!(
            parse_events_str("0,8,0,1", SENSOR),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ev.csv");
        let s = parse_events_str("0,3,4,1\n5,3,4,-1\n7,7,7,1", SENSOR).unwrap();
        write_events(&path, &s).unwrap();
        assert_eq!(parse_events(&path, SENSOR).unwrap(), s);
    }

    #[test]
    fn window_is_inclusive() {
        let s = parse_events_str("1,0,0,1\n3,0,0,1\n5,0,0,1\n7,0,0,1", SENSOR).unwrap();
        assert_eq!(s.window(3, 5).len(), 2);
        assert_eq!(s.window(8, 9).len(), 0);
    }
}
