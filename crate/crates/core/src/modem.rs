//! On-off keyed sender and threshold receiver.
//!
//! The sender keeps fsyncs in flight for a '1' symbol and stays idle for a
//! '0'. The receiver probes continuously, reduces each symbol window to one
//! statistic (mean latency, or standard deviation for cross-device channels)
//! and compares it with a threshold calibrated from quiet probes.
//!
//! Both endpoints work over traits so the same code drives real files
//! ([`ProbeHandle`]) and the simulator ([`SimChannel`], [`SimSender`]).

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bits::BitStream;
use crate::config::{ChannelConfig, DecisionRule};
use crate::frame::find_frame_start;
use crate::probe::{monotonic_ns, sleep_until_ns, ProbeError, ProbeHandle};
use crate::sim::{ContentionModel, Schedule, ScheduleInterval, SimChannel};
use crate::trace::{LatencySample, LatencyTrace};

pub const MIN_CALIBRATION_SAMPLES: usize = 64;
pub const DEFAULT_UPDATE_PERIOD: usize = 64;
pub const DEFAULT_WINDOW_CAPACITY: usize = 256;
/// Lower-mode statistics needed before an update is trusted.
const MIN_LOWER_MODE: usize = 16;

#[derive(Debug, Error)]
pub enum ModemError {
    #[error("calibration needs at least {need} steady samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Anything that yields timed fsync probes in start-time order.
pub trait SampleSource {
    /// Current time on the source clock, ns since its session start.
    fn now_ns(&self) -> u64;

    /// Issues the next probe; `None` once the source is exhausted.
    fn next_sample(&mut self) -> Result<Option<LatencySample>, ProbeError>;
}

impl SampleSource for SimChannel {
    fn now_ns(&self) -> u64 {
        self.clock()
    }

    fn next_sample(&mut self) -> Result<Option<LatencySample>, ProbeError> {
        if self.horizon().is_some_and(|h| self.clock() >= h) {
            return Ok(None);
        }
        Ok(Some(self.sim_probe()))
    }
}

impl SampleSource for ProbeHandle {
    fn now_ns(&self) -> u64 {
        self.elapsed_ns()
    }

    fn next_sample(&mut self) -> Result<Option<LatencySample>, ProbeError> {
        if self.deadline().is_some_and(|d| self.elapsed_ns() >= d) {
            return Ok(None);
        }
        self.probe_once().map(Some)
    }
}

/// Replays a recorded trace.
#[derive(Debug, Clone)]
pub struct TraceSource<'a> {
    samples: &'a [LatencySample],
    pos: usize,
}

impl<'a> TraceSource<'a> {
    pub fn new(trace: &'a LatencyTrace) -> Self {
        Self {
            samples: trace.samples(),
            pos: 0,
        }
    }
}

impl SampleSource for TraceSource<'_> {
    fn now_ns(&self) -> u64 {
        match self.samples.get(self.pos) {
            Some(s) => s.timestamp,
            None => self.samples.last().map_or(0, |s| s.end()),
        }
    }

    fn next_sample(&mut self) -> Result<Option<LatencySample>, ProbeError> {
        let s = self.samples.get(self.pos).copied();
        self.pos += s.is_some() as usize;
        Ok(s)
    }
}

/// Sender endpoint: occupies one symbol slot at a time.
pub trait SymbolSender {
    /// Starts the session and returns the slot grid origin in the sender's clock.
    fn begin(&mut self) -> u64;

    /// Transmits one bit in `[slot_start, slot_end)`; returns fsyncs issued.
    fn send_symbol(&mut self, bit: bool, slot_start: u64, slot_end: u64) -> Result<u64, ProbeError>;
}

impl SymbolSender for ProbeHandle {
    fn begin(&mut self) -> u64 {
        monotonic_ns()
    }

    fn send_symbol(&mut self, bit: bool, _slot_start: u64, slot_end: u64) -> Result<u64, ProbeError> {
        if bit {
            self.busy_until(slot_end)
        } else {
            sleep_until_ns(slot_end);
            Ok(0)
        }
    }
}

/// Builds the sender schedule for the simulator and counts the fsyncs a
/// busy loop would have issued.
#[derive(Debug, Clone)]
pub struct SimSender {
    schedule: Schedule,
    model: ContentionModel,
    rng: ChaCha8Rng,
    overhead_ns: u64,
}

impl SimSender {
    pub fn new(model: ContentionModel, seed: u64, overhead_ns: u64) -> Self {
        Self {
            schedule: Schedule::default(),
            model,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7365_6e64),
            overhead_ns,
        }
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn into_schedule(self) -> Schedule {
        self.schedule
    }
}

impl SymbolSender for SimSender {
    fn begin(&mut self) -> u64 {
        self.schedule.end()
    }

    fn send_symbol(&mut self, bit: bool, slot_start: u64, slot_end: u64) -> Result<u64, ProbeError> {
        self.schedule.push(ScheduleInterval {
            start: slot_start,
            end: slot_end,
            active: bit,
        });
        if !bit {
            return Ok(0);
        }
        // The sender's own fsyncs run against the receiver's probes.
        let mut t = slot_start;
        let mut count = 0;
        while t < slot_end || count == 0 {
            t += self.model.contended_sample(&mut self.rng) + self.overhead_ns;
            count += 1;
        }
        Ok(count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendReport {
    pub fsyncs_per_bit: Vec<u64>,
    /// Grid origin in the sender's clock.
    pub origin_ns: u64,
}

impl SendReport {
    pub fn total_fsyncs(&self) -> u64 {
        self.fsyncs_per_bit.iter().sum()
    }
}

/// Sends each bit in its own `t_s` slot on a fixed grid, so an overrunning
/// fsync delays only the start of the next slot, never its end.
pub fn send_bits<S: SymbolSender>(
    bits: &BitStream,
    cfg: &ChannelConfig,
    sender: &mut S,
) -> Result<SendReport, ModemError> {
    let origin = sender.begin();
    let t_s = cfg.symbol_duration_ns();
    let mut fsyncs_per_bit = Vec::with_capacity(bits.len());
    for (i, bit) in bits.iter().enumerate() {
        let start = origin + i as u64 * t_s;
        fsyncs_per_bit.push(sender.send_symbol(bit, start, start + t_s)?);
    }
    Ok(SendReport {
        fsyncs_per_bit,
        origin_ns: origin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolDecision {
    pub bit: bool,
    /// Mean latency or latency stddev in ns, per the decision rule.
    pub statistic: f64,
    pub n_samples: usize,
    pub symbol_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdOrigin {
    /// Set directly by the operator.
    Configured,
    /// From a quiet trace of this many samples.
    Calibrated { samples: usize },
    /// Re-derived from windowed symbol statistics after this symbol.
    Updated { after_symbol: usize },
}

/// Receiver threshold and the statistics behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    pub theta_ns: f64,
    pub quiet_mean: f64,
    pub quiet_std: f64,
    pub origin: ThresholdOrigin,
    window: VecDeque<f64>,
    window_capacity: usize,
    pub update_period: usize,
    symbols_seen: usize,
}

/// `quiet_mean + max(3 * quiet_std, quiet_mean / 2)`, kept strictly above the mean.
pub fn threshold_rule(quiet_mean: f64, quiet_std: f64) -> f64 {
    let theta = quiet_mean + (3.0 * quiet_std).max(0.5 * quiet_mean);
    if theta > quiet_mean {
        theta
    } else {
        quiet_mean + 1.0
    }
}

impl ThresholdState {
    pub fn new(quiet_mean: f64, quiet_std: f64, origin: ThresholdOrigin) -> Self {
        Self {
            theta_ns: threshold_rule(quiet_mean, quiet_std),
            quiet_mean,
            quiet_std,
            origin,
            window: VecDeque::with_capacity(DEFAULT_WINDOW_CAPACITY),
            window_capacity: DEFAULT_WINDOW_CAPACITY,
            update_period: DEFAULT_UPDATE_PERIOD,
            symbols_seen: 0,
        }
    }

    /// A fixed threshold. The quiet level is inferred as θ/1.5, the level the
    /// calibration rule maps to θ when spread is small.
    pub fn fixed(theta_ns: f64) -> Self {
        let mut s = Self::new(theta_ns / 1.5, 0.0, ThresholdOrigin::Configured);
        s.theta_ns = theta_ns;
        s
    }

    /// Disables periodic updates.
    pub fn frozen(mut self) -> Self {
        self.update_period = 0;
        self
    }

    pub fn with_update_period(mut self, period: usize) -> Self {
        self.update_period = period;
        self
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    fn observe(&mut self, statistic: f64) {
        if self.window.len() == self.window_capacity {
            self.window.pop_front();
        }
        self.window.push_back(statistic);
        self.symbols_seen += 1;
        if self.update_period > 0 && self.symbols_seen % self.update_period == 0 {
            self.update();
        }
    }

    /// Re-derives θ from the lower mode of the windowed statistics: those at or
    /// below the current θ, summarised robustly by median and scaled MAD so a
    /// long run of '1's or a few straddling symbols cannot drag it upward.
    fn update(&mut self) {
        let mut lower: Vec<f64> = self
            .window
            .iter()
            .copied()
            .filter(|s| *s <= self.theta_ns)
            .collect();
        if lower.len() < MIN_LOWER_MODE {
            return;
        }
        lower.sort_by(f64::total_cmp);
        let median = median_sorted(&lower);
        let mut dev: Vec<f64> = lower.iter().map(|x| (x - median).abs()).collect();
        dev.sort_by(f64::total_cmp);
        let spread = 1.4826 * median_sorted(&dev);
        let mut theta = threshold_rule(median, spread);
        let mut upper: Vec<f64> = self
            .window
            .iter()
            .copied()
            .filter(|s| *s > self.theta_ns)
            .collect();
        if upper.len() >= MIN_LOWER_MODE {
            upper.sort_by(f64::total_cmp);
            theta = theta.min((median + median_sorted(&upper)) / 2.0);
        }
        self.quiet_mean = median;
        self.quiet_std = spread;
        self.theta_ns = theta.max(median + 1.0);
        self.origin = ThresholdOrigin::Updated {
            after_symbol: self.symbols_seen - 1,
        };
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, 1);
    }
    let var = values.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt(), n)
}

/// The per-symbol statistic for `latencies` under `rule`.
pub fn symbol_statistic(latencies: &[u64], rule: DecisionRule) -> f64 {
    let (mean, std, _) = mean_std(latencies.iter().map(|&l| l as f64));
    match rule {
        DecisionRule::MeanThreshold => mean,
        DecisionRule::StddevThreshold => std,
    }
}

/// Profiles the quiet channel.
///
/// Mean rule: mean and stddev of the steady (non-warm-up) latencies.
/// Stddev rule: mean and stddev of per-window latency stddevs, windows being
/// consecutive `t_s` slots of the quiet trace, so θ is on the same scale as
/// the statistic it is compared with.
pub fn calibrate(quiet: &LatencyTrace, cfg: &ChannelConfig) -> Result<ThresholdState, ModemError> {
    let steady = quiet.steady_samples();
    if steady.len() < MIN_CALIBRATION_SAMPLES {
        return Err(ModemError::TooFewSamples {
            need: MIN_CALIBRATION_SAMPLES,
            got: steady.len(),
        });
    }
    let (mean, std) = match cfg.decision_rule {
        DecisionRule::MeanThreshold => {
            let (m, s, _) = mean_std(steady.iter().map(|s| s.latency as f64));
            (m, s)
        }
        DecisionRule::StddevThreshold => {
            let t_s = cfg.symbol_duration_ns();
            let origin = steady[0].timestamp;
            let mut stats = Vec::new();
            let mut current = Vec::new();
            let mut slot = 0;
            for s in steady {
                let k = (s.timestamp - origin) / t_s;
                if k != slot && !current.is_empty() {
                    stats.push(symbol_statistic(&current, DecisionRule::StddevThreshold));
                    current.clear();
                }
                slot = k;
                current.push(s.latency);
            }
            if !current.is_empty() {
                stats.push(symbol_statistic(&current, DecisionRule::StddevThreshold));
            }
            let (m, s, _) = mean_std(stats.iter().copied());
            (m, s)
        }
    };
    Ok(ThresholdState::new(
        mean,
        std,
        ThresholdOrigin::Calibrated {
            samples: steady.len(),
        },
    ))
}

/// Groups samples into symbol windows on a fixed grid and decides each one.
///
/// A sample belongs to the window its fsync started in. A window in which no
/// probe started (the previous probe was still in flight) is judged by that
/// in-flight sample alone; the same sample is prepended to any window that has
/// fewer than `samples_per_symbol_min` samples of its own.
#[derive(Debug, Clone)]
pub struct SymbolReceiver {
    rule: DecisionRule,
    min_samples: usize,
    grid_start: u64,
    t_s: u64,
    state: ThresholdState,
    current: usize,
    acc: Vec<u64>,
    carry: Option<LatencySample>,
    last: Option<LatencySample>,
}

impl SymbolReceiver {
    pub fn new(cfg: &ChannelConfig, state: ThresholdState, grid_start: u64) -> Self {
        Self {
            rule: cfg.decision_rule,
            min_samples: cfg.samples_per_symbol_min,
            grid_start,
            t_s: cfg.symbol_duration_ns(),
            state,
            current: 0,
            acc: Vec::new(),
            carry: None,
            last: None,
        }
    }

    pub fn state(&self) -> &ThresholdState {
        &self.state
    }

    pub fn into_state(self) -> ThresholdState {
        self.state
    }

    /// Feeds one sample; returns decisions for every window it closes.
    pub fn push(&mut self, s: LatencySample, out: &mut Vec<SymbolDecision>) {
        if s.timestamp < self.grid_start {
            self.last = Some(s);
            return;
        }
        let k = ((s.timestamp - self.grid_start) / self.t_s) as usize;
        while self.current < k {
            self.close(out);
        }
        self.acc.push(s.latency);
        self.last = Some(s);
    }

    /// Closes the open window if it holds samples, then any further windows
    /// the last probe was still in flight for.
    pub fn finish(&mut self, out: &mut Vec<SymbolDecision>) {
        if !self.acc.is_empty() {
            self.close(out);
        }
        while self
            .last
            .is_some_and(|l| l.end() > self.grid_start + self.current as u64 * self.t_s)
        {
            self.close(out);
        }
    }

    fn close(&mut self, out: &mut Vec<SymbolDecision>) {
        let window_start = self.grid_start + self.current as u64 * self.t_s;
        // Last sample from before this window, if it ran into it.
        let in_flight = self
            .carry
            .filter(|c| c.timestamp < window_start && c.end() > window_start)
            .map(|c| c.latency);
        let mut latencies = std::mem::take(&mut self.acc);
        if latencies.len() < self.min_samples {
            if let Some(l) = in_flight {
                latencies.insert(0, l);
            }
        }
        if latencies.is_empty() {
            latencies.extend(in_flight.or(self.last.map(|s| s.latency)));
        }
        let statistic = if latencies.is_empty() {
            0.0
        } else {
            symbol_statistic(&latencies, self.rule)
        };
        out.push(SymbolDecision {
            bit: statistic > self.state.theta_ns,
            statistic,
            n_samples: latencies.len().max(1),
            symbol_index: self.current,
        });
        self.state.observe(statistic);
        self.carry = self.last;
        self.current += 1;
    }
}

/// Probes `n_symbols` windows of `t_s` starting at the source's current time.
pub fn receive_symbols<S: SampleSource + ?Sized>(
    source: &mut S,
    cfg: &ChannelConfig,
    state: &mut ThresholdState,
    n_symbols: usize,
) -> Result<Vec<SymbolDecision>, ModemError> {
    let mut rx = SymbolReceiver::new(cfg, state.clone(), source.now_ns());
    let mut out = Vec::with_capacity(n_symbols);
    while out.len() < n_symbols {
        match source.next_sample()? {
            Some(s) => rx.push(s, &mut out),
            None => {
                rx.finish(&mut out);
                break;
            }
        }
    }
    out.truncate(n_symbols);
    *state = rx.into_state();
    Ok(out)
}

/// Decides every symbol of a recorded trace on a grid starting at `grid_start`.
pub fn decode_trace(
    trace: &LatencyTrace,
    cfg: &ChannelConfig,
    state: &ThresholdState,
    grid_start: u64,
    n_symbols: Option<usize>,
) -> Vec<SymbolDecision> {
    let mut rx = SymbolReceiver::new(cfg, state.clone(), grid_start);
    let mut out = Vec::new();
    for s in trace.samples() {
        rx.push(*s, &mut out);
        if n_symbols.is_some_and(|n| out.len() >= n) {
            break;
        }
    }
    if n_symbols.is_none_or(|n| out.len() < n) {
        rx.finish(&mut out);
    }
    if let Some(n) = n_symbols {
        out.truncate(n);
    }
    out
}

pub fn decisions_to_bits(decisions: &[SymbolDecision]) -> BitStream {
    decisions.iter().map(|d| d.bit).collect()
}

/// Streams decisions until a header appears within `max_mismatches`, then
/// returns the next `payload_len` bits. `None` if the source runs dry first.
pub fn receive_frame<S: SampleSource + ?Sized>(
    source: &mut S,
    cfg: &ChannelConfig,
    state: &mut ThresholdState,
    max_mismatches: usize,
) -> Result<Option<BitStream>, ModemError> {
    let mut rx = SymbolReceiver::new(cfg, state.clone(), source.now_ns());
    let mut sync = FrameSync::new(cfg, max_mismatches);
    let mut decisions = Vec::new();
    let result = loop {
        let sample = source.next_sample()?;
        match sample {
            Some(s) => rx.push(s, &mut decisions),
            None => rx.finish(&mut decisions),
        }
        for d in decisions.drain(..) {
            if let Some(payload) = sync.push(d.bit) {
                *state = rx.state().clone();
                return Ok(Some(payload));
            }
        }
        if sample.is_none() {
            break None;
        }
    };
    *state = rx.into_state();
    Ok(result)
}

/// Incremental header search over a decided bit stream.
#[derive(Debug, Clone)]
pub struct FrameSync {
    header: Vec<bool>,
    payload_len: usize,
    max_mismatches: usize,
    tail: VecDeque<bool>,
    payload: Option<BitStream>,
}

impl FrameSync {
    pub fn new(cfg: &ChannelConfig, max_mismatches: usize) -> Self {
        Self {
            header: cfg.header_pattern().as_slice().to_vec(),
            payload_len: cfg.payload_len(),
            max_mismatches,
            tail: VecDeque::with_capacity(cfg.header_pattern().len()),
            payload: None,
        }
    }

    /// Feeds one bit; returns a payload when one completes.
    pub fn push(&mut self, bit: bool) -> Option<BitStream> {
        if let Some(p) = &mut self.payload {
            p.push(bit);
            if p.len() == self.payload_len {
                self.tail.clear();
                return self.payload.take();
            }
            return None;
        }
        if self.tail.len() == self.header.len() {
            self.tail.pop_front();
        }
        self.tail.push_back(bit);
        if self.tail.len() == self.header.len() {
            let mismatches = self
                .tail
                .iter()
                .zip(&self.header)
                .filter(|(a, b)| a != b)
                .count();
            if mismatches <= self.max_mismatches {
                self.payload = Some(BitStream::new());
            }
        }
        None
    }
}

/// Every frame payload in `bits`, scanning for the next header after each.
pub fn extract_payloads(bits: &BitStream, cfg: &ChannelConfig, max_mismatches: usize) -> Vec<BitStream> {
    let mut sync = FrameSync::new(cfg, max_mismatches);
    bits.iter().filter_map(|b| sync.push(b)).collect()
}

/// Tries `steps` grid phases across one symbol and keeps the one whose
/// decoded stream yields the most frames, ties broken by the lowest header
/// mismatch count. For receivers that share no clock with the sender.
pub fn decode_with_phase_search(
    trace: &LatencyTrace,
    cfg: &ChannelConfig,
    state: &ThresholdState,
    steps: u64,
    max_mismatches: usize,
) -> Option<(u64, Vec<BitStream>)> {
    let origin = trace.samples().first()?.timestamp;
    let t_s = cfg.symbol_duration_ns();
    let mut best: Option<(usize, usize, u64, Vec<BitStream>)> = None;
    for step in 0..steps.max(1) {
        let phase = origin + step * t_s / steps.max(1);
        let bits = decisions_to_bits(&decode_trace(trace, cfg, state, phase, None));
        let payloads = extract_payloads(&bits, cfg, max_mismatches);
        if payloads.is_empty() {
            continue;
        }
        let header_err = find_frame_start(&bits, cfg.header_pattern(), max_mismatches)
            .map(|o| bits.slice(o, cfg.header_pattern().len()).hamming(cfg.header_pattern()))
            .unwrap_or(usize::MAX);
        let better = match &best {
            None => true,
            Some((n, e, _, _)) => payloads.len() > *n || (payloads.len() == *n && header_err < *e),
        };
        if better {
            best = Some((payloads.len(), header_err, phase, payloads));
        }
    }
    best.map(|(_, _, phase, p)| (phase, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{encode_frames, frames_to_bits};
    use crate::sim::{sim_quiet_trace, sim_transmit, NoiseProcess, SimOptions};
    use crate::trace::TraceMeta;

    fn table1() -> ContentionModel {
        ContentionModel::sata_fsync_only()
    }

    fn quiet_state(cfg: &ChannelConfig) -> ThresholdState {
        let quiet = sim_quiet_trace(20_000_000, &table1(), 99, SimOptions::default(), None);
        calibrate(&quiet, cfg).unwrap()
    }

    fn flat_trace(n: usize, latency: u64) -> LatencyTrace {
        let samples = (0..n as u64)
            .map(|i| LatencySample::new(i * (latency + 2_000), latency))
            .collect();
        LatencyTrace::from_samples(samples).unwrap()
    }

    #[test]
    fn calibrate_zero_variance() {
        let st = calibrate(&flat_trace(100, 21_390), &ChannelConfig::default()).unwrap();
        assert_eq!(st.quiet_mean, 21_390.0);
        assert_eq!(st.quiet_std, 0.0);
        assert_eq!(st.theta_ns, 32_085.0);
        assert_eq!(st.origin, ThresholdOrigin::Calibrated { samples: 100 });
    }

    #[test]
    fn calibrate_rejects_short_trace() {
        let err = calibrate(&flat_trace(10, 21_390), &ChannelConfig::default()).unwrap_err();
        assert!(matches!(err, ModemError::TooFewSamples { need: 64, got: 10 }));
        // Warm-up samples do not count.
        let mut t = flat_trace(70, 21_390);
        t.meta = TraceMeta {
            warmup_samples: 16,
            ..TraceMeta::default()
        };
        assert!(calibrate(&t, &ChannelConfig::default()).is_err());
    }

    #[test]
    fn calibrated_threshold_separates_table1() {
        // 21390 + max(3 * 2479, 10695) = 32085; the quiet stddev branch loses.
        let st = quiet_state(&ChannelConfig::default());
        assert!((st.theta_ns - 32_085.0).abs() < 0.01 * 32_085.0, "{}", st.theta_ns);
        assert!(st.quiet_mean < st.theta_ns && st.theta_ns < 43_133.73);
    }

    #[test]
    fn loopback_alternating() {
        let cfg = ChannelConfig::new(200).unwrap();
        let bits: BitStream = "10101010".parse().unwrap();
        let trace = sim_transmit(&bits, &cfg, &table1(), &NoiseProcess::none(), 1, SimOptions::default());
        let st = quiet_state(&cfg);
        let got = decisions_to_bits(&decode_trace(&trace, &cfg, &st, 0, Some(8)));
        assert_eq!(got, bits);
        // Same through the streaming receiver.
        let mut ch = SimChannel::new(
            Schedule::from_bits(&bits, cfg.symbol_duration_ns()),
            table1(),
            &NoiseProcess::none(),
            1,
            SimOptions::default(),
        );
        let mut st2 = st.clone();
        let d = receive_symbols(&mut ch, &cfg, &mut st2, 8).unwrap();
        assert_eq!(decisions_to_bits(&d), bits);
        assert!(d.iter().all(|d| d.n_samples >= 1));
    }

    #[test]
    fn quiet_source_decodes_zeros() {
        let cfg = ChannelConfig::default();
        let mut st = quiet_state(&cfg);
        let mut ch = SimChannel::new(Schedule::default(), table1(), &NoiseProcess::none(), 5, SimOptions::default());
        let d = receive_symbols(&mut ch, &cfg, &mut st, 500).unwrap();
        assert_eq!(d.len(), 500);
        assert!(d.iter().all(|d| !d.bit));
    }

    #[test]
    fn decisions_are_pure() {
        let cfg = ChannelConfig::default();
        let bits = BitStream::prbs(3, 400);
        let trace = sim_transmit(&bits, &cfg, &table1(), &NoiseProcess::none(), 8, SimOptions::default());
        let st = quiet_state(&cfg);
        assert_eq!(
            decode_trace(&trace, &cfg, &st, 0, None),
            decode_trace(&trace, &cfg, &st, 0, None)
        );
    }

    #[test]
    fn stddev_rule_on_cross_disk_model() {
        use crate::config::ProbeMode;
        let model = ContentionModel::cross_disk(ProbeMode::FsyncOnly, ProbeMode::WriteFsync);
        let cfg = ChannelConfig::builder()
            .symbol_duration_us(400)
            .decision_rule(DecisionRule::StddevThreshold)
            .build()
            .unwrap();
        let bits = BitStream::prbs(4, 400);
        let trace = sim_transmit(&bits, &cfg, &model, &NoiseProcess::none(), 2, SimOptions::default());
        let quiet = sim_quiet_trace(40_000_000, &model, 3, SimOptions::default(), None);
        let st = calibrate(&quiet, &cfg).unwrap();
        let d = decode_trace(&trace, &cfg, &st, 0, Some(bits.len()));
        let avg = |want: bool| {
            let v: Vec<f64> = d
                .iter()
                .zip(bits.iter())
                .filter(|(_, b)| *b == want)
                .map(|(d, _)| d.statistic)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(avg(true) > 3.0 * avg(false), "{} vs {}", avg(true), avg(false));
        let errors = d.iter().zip(bits.iter()).filter(|(d, b)| d.bit != *b).count();
        assert!(errors < bits.len() / 20, "{errors}");
    }

    #[test]
    fn empty_window_uses_in_flight_sample() {
        let cfg = ChannelConfig::default();
        let st = ThresholdState::fixed(32_000.0).frozen();
        // One 120µs probe spans windows 0..2, then a quiet probe in window 2.
        let t = LatencyTrace::from_samples(vec![
            LatencySample::new(0, 120_000),
            LatencySample::new(122_000, 20_000),
        ])
        .unwrap();
        let d = decode_trace(&t, &cfg, &st, 0, None);
        assert_eq!(d.len(), 3);
        assert!(d[0].bit && d[1].bit && !d[2].bit);
        assert_eq!(d[1].n_samples, 1);
        assert_eq!(d[1].statistic, 120_000.0);
    }

    #[test]
    fn threshold_update_tracks_lower_mode() {
        let mut st = ThresholdState::fixed(32_000.0).with_update_period(64);
        // Quiet level drifts up to 25µs; '1' symbols at 45µs.
        for i in 0..256 {
            st.observe(if i % 3 == 0 { 45_000.0 } else { 25_000.0 });
        }
        assert!(matches!(st.origin, ThresholdOrigin::Updated { .. }));
        assert_eq!(st.quiet_mean, 25_000.0);
        assert_eq!(st.theta_ns, 35_000.0);
        // Capped at the midpoint of the two clusters; a run of '1's leaves it alone.
        for _ in 0..200 {
            st.observe(45_000.0);
        }
        assert_eq!(st.theta_ns, 35_000.0);
    }

    #[test]
    fn frame_roundtrip_with_prefix_and_flip() {
        // 200µs slots: no contended probe outlasts a whole symbol.
        let cfg = ChannelConfig::new(200).unwrap();
        let payload = BitStream::prbs(10, 8000);
        let frames = encode_frames(&payload, &cfg);
        let mut stream: BitStream = BitStream::prbs(11, 37);
        stream.extend_from(&frames_to_bits(&frames));
        let trace = sim_transmit(&stream, &cfg, &table1(), &NoiseProcess::none(), 12, SimOptions::default());
        let mut src = TraceSource::new(&trace);
        let mut st = quiet_state(&cfg);
        let got = receive_frame(&mut src, &cfg, &mut st, 0).unwrap();
        assert_eq!(got, Some(payload.clone()));

        let mut flipped = stream.clone();
        flipped.flip(37 + 20);
        let trace = sim_transmit(&flipped, &cfg, &table1(), &NoiseProcess::none(), 12, SimOptions::default());
        let mut st = quiet_state(&cfg);
        assert_eq!(receive_frame(&mut TraceSource::new(&trace), &cfg, &mut st, 0).unwrap(), None);
        let mut st = quiet_state(&cfg);
        assert_eq!(
            receive_frame(&mut TraceSource::new(&trace), &cfg, &mut st, 1).unwrap(),
            Some(payload)
        );
    }

    #[test]
    fn no_header_no_frame() {
        let cfg = ChannelConfig::default();
        let mut st = quiet_state(&cfg);
        let mut ch = SimChannel::new(Schedule::default(), table1(), &NoiseProcess::none(), 5, SimOptions::default())
            .with_horizon(20_000_000);
        assert_eq!(receive_frame(&mut ch, &cfg, &mut st, 1).unwrap(), None);
    }

    #[test]
    fn phase_search_recovers_shifted_trace() {
        let cfg = ChannelConfig::builder()
            .symbol_duration_us(200)
            .payload_len(256)
            .build()
            .unwrap();
        let payload = BitStream::prbs(21, 256);
        let mut stream = BitStream::zeros(40);
        stream.extend_from(&frames_to_bits(&encode_frames(&payload, &cfg)));
        stream.extend_from(&BitStream::zeros(8));
        let trace = sim_transmit(&stream, &cfg, &table1(), &NoiseProcess::none(), 3, SimOptions::default());
        // Receiver clock started 17.3µs before the sender's.
        let shifted: Vec<_> = trace
            .samples()
            .iter()
            .map(|s| LatencySample::new(s.timestamp + 17_300, s.latency))
            .collect();
        let shifted = LatencyTrace::from_samples(shifted).unwrap();
        let st = quiet_state(&cfg);
        let (_, payloads) = decode_with_phase_search(&shifted, &cfg, &st, 10, 1).unwrap();
        assert_eq!(payloads, vec![payload]);
    }

    #[test]
    fn send_report_counts() {
        let cfg = ChannelConfig::default();
        let mut tx = SimSender::new(table1(), 1, 2_000);
        let bits: BitStream = "10101010".parse().unwrap();
        let report = send_bits(&bits, &cfg, &mut tx).unwrap();
        for (bit, n) in bits.iter().zip(&report.fsyncs_per_bit) {
            assert_eq!(bit, *n > 0);
        }
        let sched = tx.into_schedule();
        assert_eq!(sched.intervals().iter().filter(|i| i.active).count(), 4);
        assert_eq!(sched.intervals().iter().filter(|i| !i.active).count(), 4);
        assert!(sched.intervals().iter().all(|i| i.end - i.start == 50_000));
        assert_eq!(sched, Schedule::from_bits(&bits, 50_000));
    }
}
