//! Real fsync latency measurement on a caller-supplied file.

use std::fs::{File, OpenOptions};
use std::io::{self, Seek, SeekFrom, Write};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ProbeMode;
use crate::trace::{LatencySample, LatencyTrace, TraceMeta};

pub const WRITE_BUF_LEN: usize = 1024;
pub const WARMUP_SAMPLES: u64 = 16;
pub const DEFAULT_TRUNCATE_RANGE: (u64, u64) = (1024, 64 * 1024);

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("duration must be positive")]
    ZeroDuration,
    #[error("invalid truncate range [{0}, {1}]")]
    TruncateRange(u64, u64),
    #[error("fsync failed (os error {code:?}): {source}")]
    Fsync { code: Option<i32>, source: io::Error },
    #[error("{op} failed before fsync: {source}")]
    Mutation { op: &'static str, source: io::Error },
    #[error("cannot open probe file: {0}")]
    Open(io::Error),
    #[error("monotonic clock went backwards ({before} -> {after})")]
    ClockFault { before: u64, after: u64 },
}

#[cfg(target_os = "linux")]
const CLOCK: libc::clockid_t = libc::CLOCK_MONOTONIC_RAW;
#[cfg(not(target_os = "linux"))]
const CLOCK: libc::clockid_t = libc::CLOCK_MONOTONIC;

/// Nanoseconds on the raw monotonic clock.
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(CLOCK, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime on a monotonic clock cannot fail");
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

pub fn clock_resolution_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid, writable timespec.
    let rc = unsafe { libc::clock_getres(CLOCK, &mut ts) };
    if rc != 0 {
        return 1;
    }
    (ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64).max(1)
}

/// Sleeps coarsely, then spins for the final stretch to land close to `deadline`.
pub fn sleep_until_ns(deadline: u64) {
    const SPIN_NS: u64 = 80_000;
    loop {
        let now = monotonic_ns();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN_NS {
            std::thread::sleep(Duration::from_nanos(left - SPIN_NS));
        } else {
            std::hint::spin_loop();
        }
    }
}

/// An open, caller-owned probe file plus the state of one measurement session.
#[derive(Debug)]
pub struct ProbeHandle {
    file: File,
    mode: ProbeMode,
    write_buf: Vec<u8>,
    truncate_range: (u64, u64),
    rng: ChaCha8Rng,
    session_start: u64,
    resolution_ns: u64,
    issued: u64,
    session_id: String,
    deadline: Option<u64>,
}

impl ProbeHandle {
    /// Opens an existing file read-write. The file is never created here.
    pub fn open(path: &Path, mode: ProbeMode, seed: u64) -> Result<Self, ProbeError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(ProbeError::Open)?;
        Self::from_file(file, mode, seed)
    }

    pub fn from_file(mut file: File, mode: ProbeMode, seed: u64) -> Result<Self, ProbeError> {
        let write_buf = vec![0xa5; WRITE_BUF_LEN];
        if mode == ProbeMode::WriteFsync {
            let len = file
                .metadata()
                .map_err(|source| ProbeError::Mutation { op: "stat", source })?
                .len();
            if len < WRITE_BUF_LEN as u64 {
                file.seek(SeekFrom::Start(0))
                    .and_then(|_| file.write_all(&write_buf))
                    .map_err(|source| ProbeError::Mutation { op: "write", source })?;
            }
        }
        let session_start = monotonic_ns();
        Ok(Self {
            file,
            mode,
            write_buf,
            truncate_range: DEFAULT_TRUNCATE_RANGE,
            rng: ChaCha8Rng::seed_from_u64(seed),
            session_start,
            resolution_ns: clock_resolution_ns(),
            issued: 0,
            session_id: format!("probe-{session_start:x}"),
            deadline: None,
        })
    }

    pub fn with_truncate_range(mut self, min: u64, max: u64) -> Result<Self, ProbeError> {
        if min > max {
            return Err(ProbeError::TruncateRange(min, max));
        }
        self.truncate_range = (min, max);
        Ok(self)
    }

    pub fn mode(&self) -> ProbeMode {
        self.mode
    }

    /// Probes issued since the session started.
    pub fn issued(&self) -> u64 {
        self.issued
    }

    /// Nanoseconds since the session started.
    pub fn elapsed_ns(&self) -> u64 {
        monotonic_ns() - self.session_start
    }

    /// Makes [`crate::modem::SampleSource::next_sample`] report exhaustion once
    /// `elapsed_ns` passes `deadline_ns`.
    pub fn set_deadline(&mut self, deadline_ns: Option<u64>) {
        self.deadline = deadline_ns;
    }

    fn mutate(&mut self) -> Result<(), ProbeError> {
        match self.mode {
            ProbeMode::FsyncOnly => Ok(()),
            ProbeMode::WriteFsync => {
                use std::os::unix::fs::FileExt;
                self.file
                    .write_all_at(&self.write_buf, 0)
                    .map_err(|source| ProbeError::Mutation { op: "write", source })
            }
            ProbeMode::FtruncateFsync => {
                let (lo, hi) = self.truncate_range;
                let size = self.rng.random_range(lo..=hi);
                self.file
                    .set_len(size)
                    .map_err(|source| ProbeError::Mutation { op: "ftruncate", source })
            }
        }
    }

    fn timed_fsync(&mut self) -> Result<LatencySample, ProbeError> {
        let before = monotonic_ns();
        self.file.sync_all().map_err(|source| ProbeError::Fsync {
            code: source.raw_os_error(),
            source,
        })?;
        let after = monotonic_ns();
        if after < before {
            return Err(ProbeError::ClockFault { before, after });
        }
        self.issued += 1;
        Ok(LatencySample {
            timestamp: before - self.session_start,
            latency: (after - before).max(1),
        })
    }

    /// Mutation per the probe mode, then one fsync; only the fsync is timed.
    pub fn probe_once(&mut self) -> Result<LatencySample, ProbeError> {
        self.mutate()?;
        self.timed_fsync()
    }

    /// Probes back to back until `duration_us` has elapsed; always at least once.
    pub fn probe_for(&mut self, duration_us: u64) -> Result<LatencyTrace, ProbeError> {
        if duration_us == 0 {
            return Err(ProbeError::ZeroDuration);
        }
        let first_index = self.issued;
        let start = monotonic_ns();
        let end = start + duration_us * 1_000;
        let mut samples = Vec::new();
        loop {
            samples.push(self.probe_once()?);
            if monotonic_ns() >= end {
                break;
            }
        }
        let warmup = WARMUP_SAMPLES.saturating_sub(first_index).min(samples.len() as u64);
        Ok(LatencyTrace::from_sorted(samples, self.meta(warmup as usize)))
    }

    /// Sender side of a '1': mutation+fsync in a loop for the whole duration.
    pub fn busy_fsync_for(&mut self, duration_us: u64) -> Result<u64, ProbeError> {
        if duration_us == 0 {
            return Err(ProbeError::ZeroDuration);
        }
        let end = monotonic_ns() + duration_us * 1_000;
        self.busy_until(end)
    }

    /// Fsync loop until the absolute monotonic instant `end_ns`; at least one call.
    pub fn busy_until(&mut self, end_ns: u64) -> Result<u64, ProbeError> {
        let mut count = 0;
        loop {
            self.mutate()?;
            self.timed_fsync()?;
            count += 1;
            if monotonic_ns() >= end_ns {
                return Ok(count);
            }
        }
    }

    pub fn session_start_ns(&self) -> u64 {
        self.session_start
    }

    pub(crate) fn meta(&self, warmup: usize) -> TraceMeta {
        TraceMeta {
            probe_mode: Some(self.mode),
            session_id: self.session_id.clone(),
            clock_resolution_ns: self.resolution_ns,
            warmup_samples: warmup,
        }
    }

    pub(crate) fn deadline(&self) -> Option<u64> {
        self.deadline
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handle(mode: ProbeMode) -> (tempfile::NamedTempFile, ProbeHandle) {
        let tmp = tempfile::NamedTempFile::new().unwrap();
        let h = ProbeHandle::open(tmp.path(), mode, 1).unwrap();
        (tmp, h)
    }

    #[test]
    fn open_does_not_create() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent");
        assert!(matches!(
            ProbeHandle::open(&missing, ProbeMode::FsyncOnly, 0),
            Err(ProbeError::Open(_))
        ));
        assert!(!missing.exists());
    }

    #[test]
    fn consecutive_probes_are_sequential() {
        for mode in ProbeMode::ALL {
            let (_tmp, mut h) = handle(mode);
            let a = h.probe_once().unwrap();
            let b = h.probe_once().unwrap();
            assert!(a.latency > 0 && b.latency > 0);
            assert!(b.timestamp >= a.timestamp + a.latency);
        }
    }

    #[test]
    fn write_mode_presizes_file() {
        let (tmp, _h) = handle(ProbeMode::WriteFsync);
        assert!(std::fs::metadata(tmp.path()).unwrap().len() >= WRITE_BUF_LEN as u64);
    }

    #[test]
    fn truncate_stays_in_range() {
        let (tmp, h) = handle(ProbeMode::FtruncateFsync);
        let mut h = h.with_truncate_range(2048, 4096).unwrap();
        for _ in 0..5 {
            h.probe_once().unwrap();
            let len = std::fs::metadata(tmp.path()).unwrap().len();
            assert!((2048..=4096).contains(&len));
        }
        assert!(matches!(
            handle(ProbeMode::FtruncateFsync).1.with_truncate_range(5, 1),
            Err(ProbeError::TruncateRange(5, 1))
        ));
    }

    #[test]
    fn probe_for_contract() {
        let (_tmp, mut h) = handle(ProbeMode::FsyncOnly);
        assert!(matches!(h.probe_for(0), Err(ProbeError::ZeroDuration)));
        // 1µs is shorter than any fsync.
        let t = h.probe_for(1).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.meta.warmup_samples, 1);
        let t = h.probe_for(2_000).unwrap();
        assert!(!t.is_empty());
        assert!(t.is_sequential());
        assert_eq!(t.meta.probe_mode, Some(ProbeMode::FsyncOnly));
        assert!(t.meta.clock_resolution_ns >= 1);
    }

    #[test]
    fn busy_loop_counts() {
        let (_tmp, mut h) = handle(ProbeMode::FsyncOnly);
        assert!(matches!(h.busy_fsync_for(0), Err(ProbeError::ZeroDuration)));
        assert!(h.busy_fsync_for(1).unwrap() >= 1);
    }
}
