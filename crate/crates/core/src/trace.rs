//! Latency traces and their CSV form.
//!
//! ```text
//! timestamp_ns,latency_ns
//! 0,21390
//! 23390,21011
//! ```

use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::ProbeMode;

pub const CSV_HEADER: &str = "timestamp_ns,latency_ns";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sample {index}: timestamp {timestamp} precedes previous timestamp {prev}")]
    NonMonotonic {
        index: usize,
        timestamp: u64,
        prev: u64,
    },
    #[error("sample {index}: latency must be positive")]
    ZeroLatency { index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One timed fsync. Times are nanoseconds; `timestamp` is the call start
/// relative to the session start, `latency` the duration of the call alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatencySample {
    pub timestamp: u64,
    pub latency: u64,
}

impl LatencySample {
    pub fn new(timestamp: u64, latency: u64) -> Self {
        Self { timestamp, latency }
    }

    pub fn end(&self) -> u64 {
        self.timestamp + self.latency
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceMeta {
    pub probe_mode: Option<ProbeMode>,
    pub session_id: String,
    pub clock_resolution_ns: u64,
    /// Leading samples taken while caches and the journal were warming up.
    pub warmup_samples: usize,
}

/// Samples ordered by timestamp, each with a positive latency.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatencyTrace {
    samples: Vec<LatencySample>,
    pub meta: TraceMeta,
}

impl LatencyTrace {
    pub fn new(samples: Vec<LatencySample>, meta: TraceMeta) -> Result<Self, TraceError> {
        validate(&samples)?;
        Ok(Self { samples, meta })
    }

    pub fn from_samples(samples: Vec<LatencySample>) -> Result<Self, TraceError> {
        Self::new(samples, TraceMeta::default())
    }

    /// Caller guarantees ordering and positive latencies.
    pub(crate) fn from_sorted(samples: Vec<LatencySample>, meta: TraceMeta) -> Self {
        debug_assert!(validate(&samples).is_ok());
        Self { samples, meta }
    }

    pub fn samples(&self) -> &[LatencySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples after the warm-up prefix.
    pub fn steady_samples(&self) -> &[LatencySample] {
        &self.samples[self.meta.warmup_samples.min(self.samples.len())..]
    }

    /// True when no sample starts before the previous one has finished,
    /// as holds for anything a single sequential prober records.
    pub fn is_sequential(&self) -> bool {
        self.samples
            .windows(2)
            .all(|w| w[1].timestamp >= w[0].end())
    }

    pub fn latencies(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.latency)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for s in &self.samples {
            writeln!(w, "{},{}", s.timestamp, s.latency)?;
        }
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ASCII output")
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut samples = Vec::new();
        let mut lines = r.lines();
        match lines.next() {
            Some(line) => {
                let line = line?;
                if line.trim_end_matches('\r') != CSV_HEADER {
                    return Err(TraceError::Parse {
                        line: 1,
                        msg: format!("expected header {CSV_HEADER:?}, found {line:?}"),
                    });
                }
            }
            None => {
                return Err(TraceError::Parse {
                    line: 1,
                    msg: "missing header".into(),
                })
            }
        }
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            samples.push(parse_row(line, lineno)?);
        }
        Self::from_samples(samples)
    }

    pub fn from_csv_str(s: &str) -> Result<Self, TraceError> {
        Self::read_csv(s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(io::BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(io::BufWriter::new(f))?;
        Ok(())
    }
}

fn parse_row(line: &str, lineno: usize) -> Result<LatencySample, TraceError> {
    let err = |msg: String| TraceError::Parse { line: lineno, msg };
    let mut fields = line.split(',');
    let mut field = |name: &str| -> Result<u64, TraceError> {
        let raw = fields
            .next()
            .ok_or_else(|| err(format!("missing {name}")))?;
        raw.parse::<u64>()
            .map_err(|e| err(format!("bad {name} {raw:?}: {e}")))
    };
    let timestamp = field("timestamp_ns")?;
    let latency = field("latency_ns")?;
    if fields.next().is_some() {
        return Err(err("expected 2 fields".into()));
    }
    Ok(LatencySample { timestamp, latency })
}

fn validate(samples: &[LatencySample]) -> Result<(), TraceError> {
    let mut prev = 0;
    for (index, s) in samples.iter().enumerate() {
        if s.latency == 0 {
            return Err(TraceError::ZeroLatency { index });
        }
        if s.timestamp < prev {
            return Err(TraceError::NonMonotonic {
                index,
                timestamp: s.timestamp,
                prev,
            });
        }
        prev = s.timestamp;
    }
    Ok(())
}
