//! Synthetic victim workloads with known ground truth.
//!
//! A victim is modelled as a set of busy intervals during which the
//! receiver's probes see the victim's contended latency. Each generator
//! returns the receiver trace together with what actually happened, so the
//! analyzers can be scored against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    measured, ContentionModel, LatencyDistribution, NoiseProcess, Schedule, SimChannel,
    SimError, SimOptions,
};
use crate::config::ProbeMode;
use crate::trace::LatencyTrace;

/// One victim operation that kept the storage stack busy over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VictimOp {
    pub start: u64,
    pub end: u64,
}

impl VictimOp {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

/// Probe latency while a typical database commit is in flight.
pub fn victim_contended() -> LatencyDistribution {
    LatencyDistribution::new(150_000.0, 30_000.0).unwrap()
}

fn receiver_quiet() -> LatencyDistribution {
    let (m, s) = measured::standalone(ProbeMode::FsyncOnly);
    LatencyDistribution::new(m, s).unwrap()
}

/// Receiver trace over `ops`, probing from 0 until `until_ns`.
pub fn victim_trace(
    ops: &[VictimOp],
    contended: LatencyDistribution,
    until_ns: u64,
    seed: u64,
    opts: SimOptions,
) -> Result<LatencyTrace, SimError> {
    let pairs: Vec<(u64, u64)> = ops.iter().map(|o| (o.start, o.end)).collect();
    let schedule = Schedule::from_active(&pairs)?;
    let model = ContentionModel::empirical(receiver_quiet(), contended)?;
    let mut ch = SimChannel::new(schedule, model, &NoiseProcess::none(), seed, opts);
    let samples = ch.probe_until(until_ns);
    Ok(LatencyTrace::from_sorted(samples, ch.meta(Some(ProbeMode::FsyncOnly), seed)))
}

fn draw(rng: &mut ChaCha8Rng, mean: f64, std: f64, floor: f64) -> u64 {
    LatencyDistribution::with_floor(mean, std, floor)
        .unwrap()
        .sample(rng)
}

/// Database inserts, some of which trigger a B-tree split.
#[derive(Debug, Clone)]
pub struct InsertWorkload {
    pub trace: LatencyTrace,
    /// Span of each insert, first commit start to last commit end.
    pub ops: Vec<VictimOp>,
    /// Whether each op in `ops` was a split.
    pub is_split: Vec<bool>,
}

/// `n_inserts` inserts, `n_splits` of them (chosen at random) splits, 4 to
/// 8 ms apart. A normal insert is one commit of about 450µs. A split
/// rewrites two pages in two commits of about 650µs each, separated by up
/// to 110µs of CPU work, so the whole operation always exceeds 1 ms but the
/// receiver may see it as two shorter bursts.
pub fn insert_workload(n_inserts: usize, n_splits: usize, seed: u64) -> InsertWorkload {
    assert!(n_splits <= n_inserts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e_7365_7274);
    let mut is_split = vec![false; n_inserts];
    for i in rand::seq::index::sample(&mut rng, n_inserts, n_splits) {
        is_split[i] = true;
    }
    let mut ops = Vec::with_capacity(n_inserts);
    let mut busy = Vec::with_capacity(n_inserts + n_splits);
    let mut t = 1_000_000;
    for &split in &is_split {
        let start = t;
        if split {
            let a = draw(&mut rng, 650_000.0, 100_000.0, 501_000.0);
            let gap = rng.random_range(1..110_000);
            let b = draw(&mut rng, 650_000.0, 100_000.0, 501_000.0);
            busy.push(VictimOp { start, end: start + a });
            busy.push(VictimOp {
                start: start + a + gap,
                end: start + a + gap + b,
            });
        } else {
            let d = draw(&mut rng, 450_000.0, 150_000.0, 100_000.0);
            busy.push(VictimOp { start, end: start + d });
        }
        let end = busy.last().unwrap().end;
        ops.push(VictimOp { start, end });
        t = end + rng.random_range(4_000_000..8_000_000);
    }
    let trace = victim_trace(&busy, victim_contended(), t, seed, SimOptions::default()).unwrap();
    InsertWorkload {
        trace,
        ops,
        is_split,
    }
}

/// Requests arriving at `per_minute` for `minutes`, each one a commit long
/// enough to be hit by about `hits_per_request` back-to-back probes.
pub fn request_workload(
    per_minute: u32,
    minutes: u32,
    hits_per_request: u32,
    seed: u64,
) -> (LatencyTrace, Vec<VictimOp>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_7465);
    let contended = victim_contended();
    let opts = SimOptions::default();
    // k probes land in an op lasting k-1 probe periods plus part of one more.
    let period = contended.mean() + opts.probe_overhead_ns as f64;
    let len = ((hits_per_request.max(1) as f64 - 0.5) * period) as u64;
    let minute = 60_000_000_000u64;
    let mut ops = Vec::new();
    for m in 0..minutes as u64 {
        let slot = minute / per_minute.max(1) as u64;
        for r in 0..per_minute as u64 {
            let jitter = rng.random_range(0..slot.saturating_sub(len).max(1));
            let start = m * minute + r * slot + jitter;
            ops.push(VictimOp {
                start,
                end: start + len,
            });
        }
    }
    let until = minutes as u64 * minute;
    let trace = victim_trace(&ops, contended, until, seed, opts).unwrap();
    (trace, ops)
}

/// Keystrokes replayed through an editor that commits after each one.
#[derive(Debug, Clone)]
pub struct KeystrokeWorkload {
    pub trace: LatencyTrace,
    /// When each key was pressed.
    pub key_times: Vec<u64>,
    pub ops: Vec<VictimOp>,
}

/// Inter-keystroke delays, 100 ms or more, roughly log-normal around 200 ms.
pub fn keystroke_delays(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7973);
    let ln = rand_distr::LogNormal::new((0.2f64).ln(), 0.35).unwrap();
    (0..n)
        .map(|_| {
            let s: f64 = rng.sample(ln);
            (s.max(0.1) * 1e9) as u64
        })
        .collect()
}

/// Replays `delays` (ns between consecutive keys). Each key press is
/// followed, after an application processing delay of about 5 ms, by a
/// commit lasting about 1 ms.
pub fn keystroke_workload(delays: &[u64], seed: u64) -> KeystrokeWorkload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6564_6974);
    let mut key_times = Vec::with_capacity(delays.len() + 1);
    let mut t = 10_000_000;
    key_times.push(t);
    for d in delays {
        t += d;
        key_times.push(t);
    }
    let mut ops: Vec<VictimOp> = Vec::with_capacity(key_times.len());
    for &k in &key_times {
        let lag = draw(&mut rng, 5_000_000.0, 2_000_000.0, 1.0);
        let len = draw(&mut rng, 1_000_000.0, 300_000.0, 200_000.0);
        let start = (k + lag).max(ops.last().map_or(0, |o| o.end + 1));
        ops.push(VictimOp {
            start,
            end: start + len,
        });
    }
    let until = ops.last().map_or(0, |o| o.end) + 50_000_000;
    let trace = victim_trace(&ops, victim_contended(), until, seed, SimOptions::default()).unwrap();
    KeystrokeWorkload {
        trace,
        key_times,
        ops,
    }
}

/// Operation classes of a health-records web application: an insert, a
/// read-only query and two kinds of update.
pub const OP_CLASSES: [&str; 4] = ["I1", "Q1", "U1", "U2"];

/// Receiver trace of one detected operation of class `label` (one of
/// [`OP_CLASSES`]): recording starts shortly before the operation and stops
/// 150µs after it ends.
///
/// Inserts put most of their mass at high latency, queries barely touch the
/// disk, and the two updates sit in between: U1 rewrites one small row, U2
/// several indexed columns.
pub fn operation_trace(label: &str, seed: u64) -> Result<LatencyTrace, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f70_7321);
    let (dur, contended) = match label {
        "I1" => (
            draw(&mut rng, 4_500_000.0, 600_000.0, 2_000_000.0),
            LatencyDistribution::new(1_200_000.0, 250_000.0)?,
        ),
        "Q1" => (
            if rng.random_bool(0.3) {
                draw(&mut rng, 100_000.0, 30_000.0, 20_000.0)
            } else {
                0
            },
            LatencyDistribution::new(90_000.0, 20_000.0)?,
        ),
        "U1" => (
            draw(&mut rng, 1_500_000.0, 300_000.0, 500_000.0),
            LatencyDistribution::new(200_000.0, 50_000.0)?,
        ),
        "U2" => (
            draw(&mut rng, 1_800_000.0, 400_000.0, 500_000.0),
            LatencyDistribution::new(280_000.0, 70_000.0)?,
        ),
        other => return Err(SimError::UnknownClass(other.to_owned())),
    };
    let start = rng.random_range(20_000..150_000);
    let ops = if dur > 0 {
        vec![VictimOp {
            start,
            end: start + dur,
        }]
    } else {
        Vec::new()
    };
    victim_trace(&ops, contended, start + dur + 150_000, seed, SimOptions::default())
}

/// `per_class` labelled operation traces for every class in [`OP_CLASSES`].
pub fn operation_dataset(per_class: usize, seed: u64) -> Vec<(String, LatencyTrace)> {
    let mut out = Vec::with_capacity(per_class * OP_CLASSES.len());
    for (c, label) in OP_CLASSES.iter().enumerate() {
        for i in 0..per_class {
            let s = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((c * 1_000_003 + i) as u64);
            out.push((label.to_string(), operation_trace(label, s).unwrap()));
        }
    }
    out
}
