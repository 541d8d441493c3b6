//! Deterministic virtual-clock model of fsync contention.
//!
//! A [`SimChannel`] plays the receiver: each probe draws a latency from the
//! standalone distribution, or from the contended one when the probe meets
//! sender activity or a noise burst. Everything is a pure function of the
//! inputs and the seed.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use thiserror::Error;

use crate::bits::BitStream;
use crate::config::{ChannelConfig, ProbeMode};
use crate::trace::{LatencySample, LatencyTrace, TraceMeta};

pub mod workload;

/// Syscall and loop cost added between consecutive simulated probes.
pub const DEFAULT_PROBE_OVERHEAD_NS: u64 = 2_000;
pub const DEFAULT_FLOOR_NS: f64 = 1_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("distribution mean must be positive, got {0}")]
    NonPositiveMean(f64),
    #[error("distribution stddev must be non-negative, got {0}")]
    NegativeStddev(f64),
    #[error("distribution floor must be positive, got {0}")]
    NonPositiveFloor(f64),
    #[error("contended mean {contended} must exceed standalone mean {standalone}")]
    NoContrast { standalone: f64, contended: f64 },
    #[error("burst rate must be non-negative and finite, got {0}")]
    BadBurstRate(f64),
    #[error("noise degree none requires a zero burst rate")]
    NoneWithBursts,
    #[error("interval [{start}, {end}) is empty or overlaps its predecessor")]
    BadInterval { start: u64, end: u64 },
    #[error("line {line}: {msg}")]
    Params { line: usize, msg: String },
    #[error("unknown operation class {0:?}")]
    UnknownClass(String),
}

/// Gaussian truncated below at `floor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyDistribution {
    mean: f64,
    stddev: f64,
    floor: f64,
}

impl LatencyDistribution {
    pub fn new(mean_ns: f64, stddev_ns: f64) -> Result<Self, SimError> {
        Self::with_floor(mean_ns, stddev_ns, DEFAULT_FLOOR_NS)
    }

    pub fn with_floor(mean_ns: f64, stddev_ns: f64, floor_ns: f64) -> Result<Self, SimError> {
        if !(mean_ns > 0.0) {
            return Err(SimError::NonPositiveMean(mean_ns));
        }
        if !(stddev_ns >= 0.0) {
            return Err(SimError::NegativeStddev(stddev_ns));
        }
        if !(floor_ns > 0.0) {
            return Err(SimError::NonPositiveFloor(floor_ns));
        }
        Ok(Self {
            mean: mean_ns,
            stddev: stddev_ns,
            floor: floor_ns,
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn stddev(&self) -> f64 {
        self.stddev
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Rejection-samples the truncated Gaussian; falls back to the floor when
    /// the mass above it is negligible.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.stddev == 0.0 {
            return self.mean.max(self.floor).round() as u64;
        }
        let normal = Normal::new(self.mean, self.stddev).expect("validated parameters");
        for _ in 0..64 {
            let x = normal.sample(rng);
            if x >= self.floor {
                return x.round().max(1.0) as u64;
            }
        }
        self.floor.round() as u64
    }
}

/// fsync latency measurements on a SATA SSD (Ext4): standalone mean and
/// stddev per probe mode, then contended mean and stddev indexed by
/// (receiver mode, competitor mode).
pub mod measured {
    use super::ProbeMode;

    pub fn standalone(mode: ProbeMode) -> (f64, f64) {
        match mode {
            ProbeMode::FtruncateFsync => (124_725.81, 5_067.66),
            ProbeMode::WriteFsync => (55_707.18, 21_756.38),
            ProbeMode::FsyncOnly => (21_390.42, 2_478.57),
        }
    }

    pub fn contended(receiver: ProbeMode, competitor: ProbeMode) -> (f64, f64) {
        use ProbeMode::*;
        match (receiver, competitor) {
            (FtruncateFsync, FtruncateFsync) => (186_635.09, 4_035.34),
            (FtruncateFsync, WriteFsync) => (165_046.60, 20_210.83),
            (FtruncateFsync, FsyncOnly) => (165_989.67, 17_878.06),
            (WriteFsync, FtruncateFsync) => (104_521.34, 24_380.61),
            (WriteFsync, WriteFsync) => (84_345.38, 27_756.34),
            (WriteFsync, FsyncOnly) => (102_094.32, 26_968.84),
            (FsyncOnly, FtruncateFsync) => (47_428.24, 21_527.58),
            (FsyncOnly, WriteFsync) => (51_112.34, 9_088.28),
            (FsyncOnly, FsyncOnly) => (43_133.73, 2_521.81),
        }
    }

    /// Receiver on an Ext4 disk, competitor on a separate XFS disk.
    pub fn cross_disk_standalone(mode: ProbeMode) -> (f64, f64) {
        match mode {
            ProbeMode::FtruncateFsync => (126_149.89, 5_196.48),
            ProbeMode::WriteFsync => (54_009.40, 757.91),
            ProbeMode::FsyncOnly => (21_045.51, 316.97),
        }
    }

    pub fn cross_disk_contended(receiver: ProbeMode, competitor: ProbeMode) -> (f64, f64) {
        use ProbeMode::*;
        match (receiver, competitor) {
            (FtruncateFsync, FtruncateFsync) => (137_153.42, 7_582.32),
            (FtruncateFsync, WriteFsync) => (137_590.93, 8_724.20),
            (FtruncateFsync, FsyncOnly) => (143_103.89, 6_178.59),
            (WriteFsync, FtruncateFsync) => (59_385.93, 5_190.36),
            (WriteFsync, WriteFsync) => (59_234.47, 1_907.39),
            (WriteFsync, FsyncOnly) => (61_648.70, 4_088.88),
            (FsyncOnly, FtruncateFsync) => (22_456.78, 2_770.05),
            (FsyncOnly, WriteFsync) => (24_262.37, 4_272.32),
            (FsyncOnly, FsyncOnly) => (22_253.03, 1_611.29),
        }
    }
}

/// Component latencies of one fsync commit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecomposedModel {
    pub t_data_ns: u64,
    pub t_flush_ns: u64,
    pub t_meta_per_block_ns: u64,
    pub n_meta_blocks: u64,
    /// Wait for a previously committing transaction to finish.
    pub upsilon_prev: LatencyDistribution,
}

impl DecomposedModel {
    /// Data write, metadata blocks and device flush, without any wait.
    pub fn total_ns(&self) -> u64 {
        self.t_data_ns + self.n_meta_blocks * self.t_meta_per_block_ns + self.t_flush_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContentionModel {
    Empirical {
        standalone: LatencyDistribution,
        contended: LatencyDistribution,
    },
    Decomposed(DecomposedModel),
}

impl ContentionModel {
    pub fn empirical(
        standalone: LatencyDistribution,
        contended: LatencyDistribution,
    ) -> Result<Self, SimError> {
        if contended.mean <= standalone.mean {
            return Err(SimError::NoContrast {
                standalone: standalone.mean,
                contended: contended.mean,
            });
        }
        Ok(Self::Empirical {
            standalone,
            contended,
        })
    }

    /// Same-disk SSD measurements for the given receiver and competitor modes.
    pub fn measured(receiver: ProbeMode, competitor: ProbeMode) -> Self {
        let (sm, ss) = measured::standalone(receiver);
        let (cm, cs) = measured::contended(receiver, competitor);
        Self::empirical(
            LatencyDistribution::new(sm, ss).unwrap(),
            LatencyDistribution::new(cm, cs).unwrap(),
        )
        .unwrap()
    }

    /// Fsync-only prober against an fsync-only competitor on the same SSD.
    pub fn sata_fsync_only() -> Self {
        Self::measured(ProbeMode::FsyncOnly, ProbeMode::FsyncOnly)
    }

    /// Ext4 receiver with an XFS competitor on another disk.
    pub fn cross_disk(receiver: ProbeMode, competitor: ProbeMode) -> Self {
        let (sm, ss) = measured::cross_disk_standalone(receiver);
        let (cm, cs) = measured::cross_disk_contended(receiver, competitor);
        Self::empirical(
            LatencyDistribution::new(sm, ss).unwrap(),
            LatencyDistribution::new(cm, cs).unwrap(),
        )
        .unwrap()
    }

    pub fn quiet_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            Self::Empirical { standalone, .. } => standalone.sample(rng),
            Self::Decomposed(d) => d.total_ns().max(1),
        }
    }

    pub fn contended_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            Self::Empirical { contended, .. } => contended.sample(rng),
            Self::Decomposed(d) => d.total_ns() + d.upsilon_prev.sample(rng),
        }
    }

    pub fn quiet_mean(&self) -> f64 {
        match self {
            Self::Empirical { standalone, .. } => standalone.mean,
            Self::Decomposed(d) => d.total_ns() as f64,
        }
    }

    pub fn quiet_std(&self) -> f64 {
        match self {
            Self::Empirical { standalone, .. } => standalone.stddev,
            Self::Decomposed(_) => 0.0,
        }
    }

    /// Distribution a competing burst's duration is drawn from.
    pub fn burst_distribution(&self) -> LatencyDistribution {
        match self {
            Self::Empirical { contended, .. } => *contended,
            Self::Decomposed(d) => LatencyDistribution::with_floor(
                d.total_ns() as f64 + d.upsilon_prev.mean,
                d.upsilon_prev.stddev,
                d.upsilon_prev.floor,
            )
            .unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseDegree {
    None,
    Low,
    Medium,
    High,
    Critical,
}

impl NoiseDegree {
    pub const ALL: [NoiseDegree; 5] = [
        NoiseDegree::None,
        NoiseDegree::Low,
        NoiseDegree::Medium,
        NoiseDegree::High,
        NoiseDegree::Critical,
    ];

    /// Default bursts per second for each degree.
    pub fn burst_rate_hz(self) -> f64 {
        match self {
            NoiseDegree::None => 0.0,
            NoiseDegree::Low => 5.0,
            NoiseDegree::Medium => 50.0,
            NoiseDegree::High => 500.0,
            NoiseDegree::Critical => 5000.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseDegree::None => "none",
            NoiseDegree::Low => "low",
            NoiseDegree::Medium => "medium",
            NoiseDegree::High => "high",
            NoiseDegree::Critical => "critical",
        }
    }
}

impl fmt::Display for NoiseDegree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseDegree {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NoiseDegree::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown noise degree {s:?}"))
    }
}

/// Background fsync bursts arriving as a Poisson process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseProcess {
    degree: NoiseDegree,
    burst_rate_hz: f64,
    burst_len: LatencyDistribution,
}

impl NoiseProcess {
    pub fn none() -> Self {
        Self {
            degree: NoiseDegree::None,
            burst_rate_hz: 0.0,
            burst_len: LatencyDistribution::new(1.0, 0.0).unwrap(),
        }
    }

    /// Default rate for `degree`, bursts lasting like a contended fsync of `model`.
    pub fn from_degree(degree: NoiseDegree, model: &ContentionModel) -> Self {
        Self {
            degree,
            burst_rate_hz: degree.burst_rate_hz(),
            burst_len: model.burst_distribution(),
        }
    }

    pub fn new(
        degree: NoiseDegree,
        burst_rate_hz: f64,
        burst_len: LatencyDistribution,
    ) -> Result<Self, SimError> {
        if !(burst_rate_hz >= 0.0) || !burst_rate_hz.is_finite() {
            return Err(SimError::BadBurstRate(burst_rate_hz));
        }
        if degree == NoiseDegree::None && burst_rate_hz != 0.0 {
            return Err(SimError::NoneWithBursts);
        }
        Ok(Self {
            degree,
            burst_rate_hz,
            burst_len,
        })
    }

    pub fn degree(&self) -> NoiseDegree {
        self.degree
    }

    pub fn burst_rate_hz(&self) -> f64 {
        self.burst_rate_hz
    }

    pub fn burst_len(&self) -> LatencyDistribution {
        self.burst_len
    }
}

/// Lazily generated burst intervals, queried with nondecreasing times.
#[derive(Debug, Clone)]
struct NoiseGen {
    rate_per_ns: f64,
    burst_len: LatencyDistribution,
    rng: ChaCha8Rng,
    next_arrival: f64,
    bursts: VecDeque<(u64, u64)>,
}

impl NoiseGen {
    fn new(noise: &NoiseProcess, seed: u64) -> Self {
        let mut gen = Self {
            rate_per_ns: noise.burst_rate_hz / 1e9,
            burst_len: noise.burst_len,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000),
            next_arrival: f64::INFINITY,
            bursts: VecDeque::new(),
        };
        if gen.rate_per_ns > 0.0 {
            gen.next_arrival = gen.gap();
        }
        gen
    }

    fn gap(&mut self) -> f64 {
        Exp::new(self.rate_per_ns).unwrap().sample(&mut self.rng)
    }

    fn extend_to(&mut self, t: u64) {
        while self.next_arrival <= t as f64 {
            let start = self.next_arrival as u64;
            let len = self.burst_len.sample(&mut self.rng);
            self.bursts.push_back((start, start + len));
            self.next_arrival += self.gap();
        }
    }

    fn touches(&mut self, from: u64, to: u64, rule: OverlapRule) -> bool {
        self.extend_to(to);
        while self.bursts.front().is_some_and(|b| b.1 <= from) {
            self.bursts.pop_front();
        }
        self.bursts.iter().any(|&(s, e)| match rule {
            OverlapRule::Interval => s < to && e > from,
            OverlapRule::Arrival => s <= from && e > from,
        })
    }
}

/// When a probe counts as contended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverlapRule {
    /// Any overlap between the probe's in-flight interval and competing activity.
    Interval,
    /// Competing activity already in flight when the probe is issued; later
    /// arrivals queue behind the probe and do not delay it.
    Arrival,
}

impl FromStr for OverlapRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interval" => Ok(OverlapRule::Interval),
            "arrival" => Ok(OverlapRule::Arrival),
            _ => Err(format!("unknown overlap rule {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleInterval {
    pub start: u64,
    pub end: u64,
    pub active: bool,
}

/// Competing activity over virtual time; intervals are ordered and disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schedule {
    intervals: Vec<ScheduleInterval>,
}

/// The sender's on/off pattern for a bit stream.
pub type SenderSchedule = Schedule;

impl Schedule {
    /// Contiguous `t_s` slots from time 0, active for each '1'.
    pub fn from_bits(bits: &BitStream, symbol_ns: u64) -> Self {
        Self {
            intervals: bits
                .iter()
                .enumerate()
                .map(|(i, b)| ScheduleInterval {
                    start: i as u64 * symbol_ns,
                    end: (i as u64 + 1) * symbol_ns,
                    active: b,
                })
                .collect(),
        }
    }

    /// Activity at `[start, end)` for each pair; pairs must be ordered and disjoint.
    pub fn from_active(pairs: &[(u64, u64)]) -> Result<Self, SimError> {
        let mut intervals = Vec::with_capacity(pairs.len());
        let mut prev_end = 0;
        for &(start, end) in pairs {
            if end <= start || start < prev_end {
                return Err(SimError::BadInterval { start, end });
            }
            intervals.push(ScheduleInterval {
                start,
                end,
                active: true,
            });
            prev_end = end;
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[ScheduleInterval] {
        &self.intervals
    }

    pub fn end(&self) -> u64 {
        self.intervals.last().map_or(0, |i| i.end)
    }

    pub fn push(&mut self, interval: ScheduleInterval) {
        debug_assert!(self.end() <= interval.start && interval.start < interval.end);
        self.intervals.push(interval);
    }

    /// Whether activity touches the probe that runs over `[from, to)`.
    pub fn touches(&self, from: u64, to: u64, rule: OverlapRule) -> bool {
        let probe_end = match rule {
            OverlapRule::Interval => to,
            OverlapRule::Arrival => from + 1,
        };
        // First interval that ends after `from`.
        let i = self.intervals.partition_point(|iv| iv.end <= from);
        self.intervals[i..]
            .iter()
            .take_while(|iv| iv.start < probe_end)
            .any(|iv| iv.active)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub probe_overhead_ns: u64,
    pub overlap: OverlapRule,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            probe_overhead_ns: DEFAULT_PROBE_OVERHEAD_NS,
            overlap: OverlapRule::Arrival,
        }
    }
}

/// Receiver endpoint on the virtual clock.
#[derive(Debug, Clone)]
pub struct SimChannel {
    clock: u64,
    schedule: Schedule,
    model: ContentionModel,
    noise: NoiseGen,
    rng: ChaCha8Rng,
    opts: SimOptions,
    horizon: Option<u64>,
    contended: u64,
    probes: u64,
}

impl SimChannel {
    pub fn new(
        schedule: Schedule,
        model: ContentionModel,
        noise: &NoiseProcess,
        seed: u64,
        opts: SimOptions,
    ) -> Self {
        Self {
            clock: 0,
            schedule,
            model,
            noise: NoiseGen::new(noise, seed),
            rng: ChaCha8Rng::seed_from_u64(seed),
            opts,
            horizon: None,
            contended: 0,
            probes: 0,
        }
    }

    /// Stop yielding samples from [`crate::modem::SampleSource`] once the
    /// clock reaches `horizon_ns`.
    pub fn with_horizon(mut self, horizon_ns: u64) -> Self {
        self.horizon = Some(horizon_ns);
        self
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn horizon(&self) -> Option<u64> {
        self.horizon
    }

    /// Moves the clock forward without probing.
    pub fn advance_to(&mut self, t: u64) {
        self.clock = self.clock.max(t);
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn schedule_mut(&mut self) -> &mut Schedule {
        &mut self.schedule
    }

    /// Probes issued so far, and how many of them were contended.
    pub fn counts(&self) -> (u64, u64) {
        (self.probes, self.contended)
    }

    /// One probe at the current clock; the clock advances by the latency
    /// plus the per-probe overhead.
    pub fn sim_probe(&mut self) -> LatencySample {
        let start = self.clock;
        let quiet = self.model.quiet_sample(&mut self.rng);
        let end = start + quiet;
        let rule = self.opts.overlap;
        let busy = self.schedule.touches(start, end, rule);
        let noisy = self.noise.touches(start, end, rule);
        let latency = if busy || noisy {
            self.contended += 1;
            self.model.contended_sample(&mut self.rng)
        } else {
            quiet
        };
        self.probes += 1;
        self.clock = start + latency + self.opts.probe_overhead_ns;
        LatencySample {
            timestamp: start,
            latency,
        }
    }

    /// Probes until the clock reaches `until_ns`; at least one probe.
    pub fn probe_until(&mut self, until_ns: u64) -> Vec<LatencySample> {
        let mut out = vec![self.sim_probe()];
        while self.clock < until_ns {
            out.push(self.sim_probe());
        }
        out
    }

    pub fn meta(&self, mode: Option<ProbeMode>, seed: u64) -> TraceMeta {
        TraceMeta {
            probe_mode: mode,
            session_id: format!("sim-{seed}"),
            clock_resolution_ns: 1,
            warmup_samples: 0,
        }
    }
}

/// Runs the receiver over the whole sender schedule for `bits`.
pub fn sim_transmit(
    bits: &BitStream,
    cfg: &ChannelConfig,
    model: &ContentionModel,
    noise: &NoiseProcess,
    seed: u64,
    opts: SimOptions,
) -> LatencyTrace {
    let schedule = Schedule::from_bits(bits, cfg.symbol_duration_ns());
    // The receiver listens one symbol past the sender so the last window
    // gets a probe of its own.
    let end = schedule.end() + cfg.symbol_duration_ns();
    let mut ch = SimChannel::new(schedule, *model, noise, seed, opts);
    let samples = ch.probe_until(end);
    LatencyTrace::from_sorted(samples, ch.meta(Some(cfg.probe_mode), seed))
}

/// Receiver trace over `schedule` from time 0 to the schedule end.
pub fn sim_trace(
    schedule: Schedule,
    model: &ContentionModel,
    noise: &NoiseProcess,
    seed: u64,
    opts: SimOptions,
    mode: Option<ProbeMode>,
) -> LatencyTrace {
    let end = schedule.end();
    let mut ch = SimChannel::new(schedule, *model, noise, seed, opts);
    let samples = ch.probe_until(end);
    LatencyTrace::from_sorted(samples, ch.meta(mode, seed))
}

/// Quiet-only receiver trace of `duration_ns`, for threshold calibration.
pub fn sim_quiet_trace(
    duration_ns: u64,
    model: &ContentionModel,
    seed: u64,
    opts: SimOptions,
    mode: Option<ProbeMode>,
) -> LatencyTrace {
    let mut ch = SimChannel::new(Schedule::default(), *model, &NoiseProcess::none(), seed, opts);
    let samples = ch.probe_until(duration_ns);
    LatencyTrace::from_sorted(samples, ch.meta(mode, seed))
}

/// One journal commit in a serialized sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitRecord {
    pub arrival: u64,
    /// Time spent waiting for the previous commit, the Υ_prev term.
    pub upsilon: u64,
    pub completion: u64,
}

impl CommitRecord {
    pub fn latency(&self) -> u64 {
        self.completion - self.arrival
    }
}

/// FIFO journal commits for fsyncs arriving at `arrivals` (sorted).
///
/// A commit arriving while another is in flight waits at least for the
/// remainder of that commit: its wait is the larger of a Υ_prev draw and the
/// remaining time.
pub fn journal_serialization_check<R: Rng + ?Sized>(
    model: &DecomposedModel,
    arrivals: &[u64],
    rng: &mut R,
) -> Vec<CommitRecord> {
    let mut log: Vec<CommitRecord> = Vec::with_capacity(arrivals.len());
    for &arrival in arrivals {
        let in_flight = log
            .last()
            .map(|p| p.completion.saturating_sub(arrival))
            .unwrap_or(0);
        let upsilon = if in_flight > 0 {
            model.upsilon_prev.sample(rng).max(in_flight)
        } else {
            0
        };
        log.push(CommitRecord {
            arrival,
            upsilon,
            completion: arrival + upsilon + model.total_ns(),
        });
    }
    log
}

/// Parameters loaded from a `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub model: ContentionModel,
    pub noise: NoiseProcess,
    pub seed: Option<u64>,
    pub opts: SimOptions,
}

impl Default for SimParams {
    fn default() -> Self {
        let model = ContentionModel::sata_fsync_only();
        Self {
            noise: NoiseProcess::none(),
            model,
            seed: None,
            opts: SimOptions::default(),
        }
    }
}

impl SimParams {
    /// Recognised keys:
    ///
    /// `model` (`empirical` | `decomposed`), `standalone.{mean_ns,std_ns,floor_ns}`,
    /// `contended.{mean_ns,std_ns,floor_ns}`, `decomposed.{t_data_ns,t_flush_ns,
    /// t_meta_per_block_ns,n_meta_blocks}`, `upsilon.{mean_ns,std_ns,floor_ns}`,
    /// `noise.degree`, `noise.burst_rate_hz`, `noise.burst_mean_ns`,
    /// `noise.burst_std_ns`, `seed`, `probe_overhead_ns`, `overlap`
    /// (`arrival` | `interval`). `#` starts a comment. Unset keys keep the
    /// fsync-only SATA SSD defaults.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let (sm, ss) = measured::standalone(ProbeMode::FsyncOnly);
        let (cm, cs) = measured::contended(ProbeMode::FsyncOnly, ProbeMode::FsyncOnly);
        let mut num = std::collections::BTreeMap::<String, (f64, usize)>::new();
        let mut model_kind = "empirical".to_owned();
        let mut degree = NoiseDegree::None;
        let mut overlap = OverlapRule::Arrival;
        let mut seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| SimError::Params { line, msg };
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, found {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model" => match value {
                    "empirical" | "decomposed" => model_kind = value.to_owned(),
                    _ => return Err(err(format!("unknown model {value:?}"))),
                },
                "noise.degree" => degree = value.parse().map_err(err)?,
                "overlap" => overlap = value.parse().map_err(err)?,
                "seed" => {
                    seed = Some(
                        value
                            .parse()
                            .map_err(|e| err(format!("bad seed {value:?}: {e}")))?,
                    )
                }
                "standalone.mean_ns" | "standalone.std_ns" | "standalone.floor_ns"
                | "contended.mean_ns" | "contended.std_ns" | "contended.floor_ns"
                | "decomposed.t_data_ns" | "decomposed.t_flush_ns"
                | "decomposed.t_meta_per_block_ns" | "decomposed.n_meta_blocks"
                | "upsilon.mean_ns" | "upsilon.std_ns" | "upsilon.floor_ns"
                | "noise.burst_rate_hz" | "noise.burst_mean_ns" | "noise.burst_std_ns"
                | "probe_overhead_ns" => {
                    let v: f64 = value
                        .parse()
                        .map_err(|e| err(format!("bad number for {key}: {e}")))?;
                    if !v.is_finite() {
                        return Err(err(format!("{key} must be finite")));
                    }
                    num.insert(key.to_owned(), (v, line));
                }
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        let get = |k: &str, default: f64| num.get(k).map_or(default, |v| v.0);
        let at = |k: &str| num.get(k).map_or(0, |v| v.1);
        let wrap = |keys: &str, e: SimError| SimError::Params {
            line: at(keys),
            msg: e.to_string(),
        };
        let dist = |prefix: &str, mean: f64, std: f64| {
            LatencyDistribution::with_floor(
                get(&format!("{prefix}.mean_ns"), mean),
                get(&format!("{prefix}.std_ns"), std),
                get(&format!("{prefix}.floor_ns"), DEFAULT_FLOOR_NS),
            )
            .map_err(|e| wrap(&format!("{prefix}.mean_ns"), e))
        };
        let model = if model_kind == "decomposed" {
            let int = |k: &str| -> Result<u64, SimError> {
                let v = get(k, 0.0);
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(SimError::Params {
                        line: at(k),
                        msg: format!("{k} must be a non-negative integer"),
                    });
                }
                Ok(v as u64)
            };
            let d = DecomposedModel {
                t_data_ns: int("decomposed.t_data_ns")?,
                t_flush_ns: int("decomposed.t_flush_ns")?,
                t_meta_per_block_ns: int("decomposed.t_meta_per_block_ns")?,
                n_meta_blocks: int("decomposed.n_meta_blocks")?,
                upsilon_prev: dist("upsilon", cm - sm, cs)?,
            };
            if d.total_ns() == 0 {
                return Err(SimError::Params {
                    line: 0,
                    msg: "decomposed model needs a positive total latency".into(),
                });
            }
            ContentionModel::Decomposed(d)
        } else {
            ContentionModel::empirical(dist("standalone", sm, ss)?, dist("contended", cm, cs)?)
                .map_err(|e| wrap("contended.mean_ns", e))?
        };
        let burst_default = model.burst_distribution();
        let burst_len = LatencyDistribution::with_floor(
            get("noise.burst_mean_ns", burst_default.mean),
            get("noise.burst_std_ns", burst_default.stddev),
            burst_default.floor,
        )
        .map_err(|e| wrap("noise.burst_mean_ns", e))?;
        let noise = NoiseProcess::new(
            degree,
            get("noise.burst_rate_hz", degree.burst_rate_hz()),
            burst_len,
        )
        .map_err(|e| wrap("noise.burst_rate_hz", e))?;
        let overhead = get("probe_overhead_ns", DEFAULT_PROBE_OVERHEAD_NS as f64);
        if overhead < 0.0 {
            return Err(wrap(
                "probe_overhead_ns",
                SimError::NegativeStddev(overhead),
            ));
        }
        Ok(Self {
            model,
            noise,
            seed,
            opts: SimOptions {
                probe_overhead_ns: overhead as u64,
                overlap,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1() -> ContentionModel {
        ContentionModel::sata_fsync_only()
    }

    fn idle(n_ns: u64) -> Schedule {
        Schedule::from_bits(&BitStream::zeros(1), n_ns)
    }

    fn busy(n_ns: u64) -> Schedule {
        Schedule::from_bits(&"1".parse().unwrap(), n_ns)
    }

    #[test]
    fn idle_sample_within_five_sigma_and_reproducible() {
        let mut a = SimChannel::new(idle(1 << 40), table1(), &NoiseProcess::none(), 9, SimOptions::default());
        let mut b = SimChannel::new(idle(1 << 40), table1(), &NoiseProcess::none(), 9, SimOptions::default());
        for _ in 0..1000 {
            let s = a.sim_probe();
            assert_eq!(s, b.sim_probe());
            let d = (s.latency as f64 - 21_390.42).abs();
            assert!(d <= 5.0 * 2_478.57, "{}", s.latency);
        }
        assert_eq!(a.counts().1, 0);
    }

    #[test]
    fn busy_mean_matches_contended_row() {
        for rule in [OverlapRule::Arrival, OverlapRule::Interval] {
            let opts = SimOptions {
                overlap: rule,
                ..SimOptions::default()
            };
            let mut ch = SimChannel::new(busy(1 << 50), table1(), &NoiseProcess::none(), 3, opts);
            let mean = (0..10_000).map(|_| ch.sim_probe().latency as f64).sum::<f64>() / 10_000.0;
            assert!((mean - 43_133.73).abs() / 43_133.73 < 0.01, "{mean}");
        }
    }

    #[test]
    fn degenerate_distribution() {
        let model = ContentionModel::empirical(
            LatencyDistribution::new(21_390.0, 0.0).unwrap(),
            LatencyDistribution::new(43_134.0, 0.0).unwrap(),
        )
        .unwrap();
        let mut ch = SimChannel::new(idle(1 << 40), model, &NoiseProcess::none(), 1, SimOptions::default());
        for _ in 0..10 {
            assert_eq!(ch.sim_probe().latency, 21_390);
        }
        assert_eq!(ch.clock(), 10 * (21_390 + DEFAULT_PROBE_OVERHEAD_NS));
    }

    #[test]
    fn distribution_validation_and_floor() {
        assert!(LatencyDistribution::new(0.0, 1.0).is_err());
        assert!(LatencyDistribution::new(1.0, -1.0).is_err());
        assert!(LatencyDistribution::with_floor(1.0, 1.0, 0.0).is_err());
        let d = LatencyDistribution::with_floor(100.0, 10_000.0, 50.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..10_000).all(|_| d.sample(&mut rng) >= 50));
        // Essentially no mass above the floor.
        let d = LatencyDistribution::with_floor(10.0, 1.0, 1_000.0).unwrap();
        assert_eq!(d.sample(&mut rng), 1_000);
        assert!(ContentionModel::empirical(
            LatencyDistribution::new(10.0, 1.0).unwrap(),
            LatencyDistribution::new(10.0, 1.0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn all_zero_bits_never_contend() {
        let cfg = ChannelConfig::default();
        let trace = sim_transmit(&BitStream::zeros(200), &cfg, &table1(), &NoiseProcess::none(), 5, SimOptions::default());
        assert!(trace.latencies().all(|l| l < 35_000));
        assert!(trace.is_sequential());
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = ChannelConfig::default();
        let bits = BitStream::prbs(1, 500);
        let noise = NoiseProcess::from_degree(NoiseDegree::High, &table1());
        let a = sim_transmit(&bits, &cfg, &table1(), &noise, 77, SimOptions::default());
        let b = sim_transmit(&bits, &cfg, &table1(), &noise, 77, SimOptions::default());
        assert_eq!(a, b);
        let c = sim_transmit(&bits, &cfg, &table1(), &noise, 78, SimOptions::default());
        assert_ne!(a, c);
    }

    #[test]
    fn alternating_bits_alternate_symbol_means() {
        let cfg = ChannelConfig::default();
        let bits: BitStream = "10101010".parse().unwrap();
        let trace = sim_transmit(&bits, &cfg, &table1(), &NoiseProcess::none(), 2, SimOptions::default());
        let t_s = cfg.symbol_duration_ns();
        for (k, bit) in bits.iter().enumerate() {
            let window: Vec<u64> = trace
                .samples()
                .iter()
                .filter(|s| s.timestamp / t_s == k as u64)
                .map(|s| s.latency)
                .collect();
            let mean = window.iter().sum::<u64>() as f64 / window.len() as f64;
            if bit {
                assert!(mean > 38_000.0, "symbol {k}: {mean}");
            } else {
                assert!(mean < 26_000.0, "symbol {k}: {mean}");
            }
        }
    }

    #[test]
    fn schedule_touch_rules() {
        let s = Schedule::from_bits(&"010".parse().unwrap(), 100);
        // Starts in the idle slot, runs into the active one.
        assert!(s.touches(90, 120, OverlapRule::Interval));
        assert!(!s.touches(90, 120, OverlapRule::Arrival));
        assert!(s.touches(100, 101, OverlapRule::Arrival));
        assert!(s.touches(199, 250, OverlapRule::Arrival));
        assert!(!s.touches(200, 250, OverlapRule::Interval));
        assert!(!s.touches(0, 100, OverlapRule::Interval));
        assert!(Schedule::from_active(&[(10, 20), (15, 30)]).is_err());
        assert!(Schedule::from_active(&[(10, 10)]).is_err());
    }

    #[test]
    fn more_noise_more_contention() {
        let model = table1();
        let mut means = Vec::new();
        for degree in NoiseDegree::ALL {
            let noise = NoiseProcess::from_degree(degree, &model);
            let total: u64 = (0..20)
                .map(|seed| {
                    let mut ch = SimChannel::new(idle(1 << 40), model, &noise, seed, SimOptions::default());
                    ch.probe_until(200_000_000);
                    ch.counts().1
                })
                .sum();
            means.push(total);
        }
        assert_eq!(means[0], 0);
        assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
        assert!(means[4] > means[2]);
    }

    fn decomposed() -> DecomposedModel {
        DecomposedModel {
            t_data_ns: 5_000,
            t_flush_ns: 10_000,
            t_meta_per_block_ns: 2_000,
            n_meta_blocks: 3,
            upsilon_prev: LatencyDistribution::new(8_000.0, 2_000.0).unwrap(),
        }
    }

    #[test]
    fn decomposed_total() {
        let d = decomposed();
        assert_eq!(d.total_ns(), 21_000);
        let m = ContentionModel::Decomposed(d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.quiet_sample(&mut rng), 21_000);
        assert!(m.contended_sample(&mut rng) > 21_000);
    }

    #[test]
    fn overlapping_commit_waits_for_remaining() {
        let d = decomposed();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // First commit runs [0, 21000); second arrives at 3000 with 18000 left.
        let log = journal_serialization_check(&d, &[0, 3_000], &mut rng);
        assert_eq!(log[0].latency(), 21_000);
        assert!(log[1].upsilon >= 18_000);
        assert!(log[1].latency() >= 18_000 + 21_000);
    }

    #[test]
    fn disjoint_commits_do_not_wait() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let log = journal_serialization_check(&decomposed(), &[0, 21_000, 50_000], &mut rng);
        assert!(log.iter().all(|c| c.upsilon == 0));
    }

    #[test]
    fn staggered_commits_complete_in_arrival_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let log = journal_serialization_check(&decomposed(), &[0, 1_000, 2_000], &mut rng);
            // Second waits at least until 21000, third until the second ends.
            assert!(log[1].arrival + log[1].upsilon >= 21_000);
            assert!(log[2].arrival + log[2].upsilon >= log[1].completion);
            assert!(log.windows(2).all(|w| w[0].completion < w[1].completion));
        }
    }

    #[test]
    fn params_file() {
        let p = SimParams::parse(
            "# fsync-only\nstandalone.mean_ns = 20000\nstandalone.std_ns=0\ncontended.mean_ns = 40000\nnoise.degree = high\nseed = 12\noverlap = interval\n",
        )
        .unwrap();
        assert_eq!(p.seed, Some(12));
        assert_eq!(p.noise.degree(), NoiseDegree::High);
        assert_eq!(p.noise.burst_rate_hz(), 500.0);
        assert_eq!(p.opts.overlap, OverlapRule::Interval);
        match p.model {
            ContentionModel::Empirical { standalone, contended } => {
                assert_eq!(standalone.mean(), 20_000.0);
                assert_eq!(contended.mean(), 40_000.0);
                assert_eq!(contended.stddev(), 2_521.81);
            }
            _ => panic!(),
        }
        let err = SimParams::parse("bogus = 1").unwrap_err();
        assert!(matches!(err, SimError::Params { line: 1, .. }));
        let err = SimParams::parse("\ncontended.mean_ns = 100").unwrap_err();
        assert!(matches!(err, SimError::Params { line: 2, .. }));
        let d = SimParams::parse("model = decomposed\ndecomposed.t_data_ns = 5000\ndecomposed.t_flush_ns = 16000").unwrap();
        assert!(matches!(d.model, ContentionModel::Decomposed(m) if m.total_ns() == 21_000));
    }
}
