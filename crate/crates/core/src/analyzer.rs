//! Side-channel analyses over recorded latency traces.
//!
//! Everything here is a pure function of its inputs. Probes that overlap a
//! victim's fsync come back slow, so runs of above-threshold samples mark
//! victim activity: their count tracks the request rate, their span
//! estimates the victim's commit latency, and their start times recover
//! when the victim acted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::trace::{LatencyTrace, TraceError};

pub const DEFAULT_SPLIT_THRESHOLD_NS: u64 = 1_000_000;
pub const DEFAULT_SAMPLES_PER_REQUEST: f64 = 10.0;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_MIN_SPACING_NS: u64 = 50_000_000;
pub const SPLIT_THETA_NS: u64 = 70_000;
pub const KEYSTROKE_THETA_NS: u64 = 54_000;

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("feature vectors use different bin edges")]
    BinEdgeMismatch,
    #[error("histogram has {got} bins, edges define {expected}")]
    BinCount { expected: usize, got: usize },
    #[error("k = {k} must be between 1 and the training size {n}")]
    BadK { k: usize, n: usize },
    #[error("training vector {0} has no label")]
    Unlabeled(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("bin edges must be strictly increasing and positive")]
    BadEdges,
    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// A maximal run of slow probes attributed to one victim operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Episode {
    /// Start of the first slow probe.
    pub start: u64,
    /// End of the last slow probe.
    pub end: u64,
    pub est_latency: u64,
    pub n_samples: usize,
}

/// Three times the median start-to-start spacing of the trace; 0 for
/// traces with fewer than two samples.
pub fn default_max_gap(trace: &LatencyTrace) -> u64 {
    let s = trace.samples();
    if s.len() < 2 {
        return 0;
    }
    let mut d: Vec<u64> = s.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
    d.sort_unstable();
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / 2
    };
    3 * median
}

/// Groups above-θ samples into episodes. Two consecutive above-θ samples
/// share an episode when the idle time between the end of the first and the
/// start of the second is at most `max_gap`.
pub fn extract_episodes(trace: &LatencyTrace, theta_ns: u64, max_gap: u64) -> Vec<Episode> {
    let mut out: Vec<Episode> = Vec::new();
    let mut open: Option<Episode> = None;
    for s in trace.samples().iter().filter(|s| s.latency > theta_ns) {
        match &mut open {
            Some(ep) if s.timestamp.saturating_sub(ep.end) <= max_gap => {
                ep.end = ep.end.max(s.end());
                ep.est_latency = ep.end - ep.start;
                ep.n_samples += 1;
            }
            _ => {
                out.extend(open.take());
                open = Some(Episode {
                    start: s.timestamp,
                    end: s.end(),
                    est_latency: s.latency,
                    n_samples: 1,
                });
            }
        }
    }
    out.extend(open);
    out
}

/// Above-θ samples per `bucket_ns` bucket, from time 0 to the last sample.
///
/// A run of consecutive above-θ samples is one victim request, so the whole
/// run is credited to the bucket holding its first sample even if it
/// crosses a bucket boundary.
pub fn count_above(trace: &LatencyTrace, theta_ns: u64, bucket_ns: u64) -> Result<Vec<u64>, AnalyzerError> {
    if bucket_ns == 0 {
        return Err(AnalyzerError::NonPositive("bucket"));
    }
    let Some(last) = trace.samples().last() else {
        return Ok(Vec::new());
    };
    let mut counts = vec![0u64; (last.timestamp / bucket_ns) as usize + 1];
    let mut run_bucket = None;
    for s in trace.samples() {
        if s.latency > theta_ns {
            let b = *run_bucket.get_or_insert((s.timestamp / bucket_ns) as usize);
            counts[b] += 1;
        } else {
            run_bucket = None;
        }
    }
    Ok(counts)
}

/// Requests per bucket, given how many slow probes one request causes.
/// That factor is workload dependent and has to be profiled.
pub fn estimate_requests(counts: &[u64], samples_per_request: f64) -> Result<Vec<f64>, AnalyzerError> {
    if !(samples_per_request > 0.0) {
        return Err(AnalyzerError::NonPositive("samples per request"));
    }
    Ok(counts.iter().map(|&c| c as f64 / samples_per_request).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitClass {
    Split,
    NoSplit,
}

pub fn classify_split(ep: &Episode, split_threshold_ns: u64) -> SplitClass {
    if ep.est_latency > split_threshold_ns {
        SplitClass::Split
    } else {
        SplitClass::NoSplit
    }
}

/// Confusion counts for a binary detector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl BinaryScore {
    pub fn precision(&self) -> f64 {
        frac(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        frac(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores split detection against known operations. An operation counts as
/// detected when any episode overlapping it is classified `Split`; split
/// episodes that overlap no operation are false positives.
pub fn score_splits(
    episodes: &[Episode],
    ops: &[(u64, u64)],
    is_split: &[bool],
    split_threshold_ns: u64,
) -> BinaryScore {
    let mut flagged = vec![false; ops.len()];
    let mut score = BinaryScore::default();
    for ep in episodes {
        if classify_split(ep, split_threshold_ns) != SplitClass::Split {
            continue;
        }
        let first = ops.partition_point(|&(_, end)| end <= ep.start);
        let mut hit = false;
        for (i, &(start, _)) in ops.iter().enumerate().skip(first) {
            if start >= ep.end {
                break;
            }
            flagged[i] = true;
            hit = true;
        }
        if !hit {
            score.fp += 1;
        }
    }
    for (&f, &truth) in flagged.iter().zip(is_split) {
        match (f, truth) {
            (true, true) => score.tp += 1,
            (true, false) => score.fp += 1,
            (false, true) => score.fn_ += 1,
            (false, false) => score.tn += 1,
        }
    }
    score
}

/// Histogram bin edges in ns; `n` bins need `n + 1` edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges {
    edges: Vec<f64>,
}

impl BinEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self, AnalyzerError> {
        if edges.len() < 2 || edges[0] <= 0.0 || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AnalyzerError::BadEdges);
        }
        Ok(Self { edges })
    }

    /// `n` bins whose edges are evenly spaced in log(latency).
    pub fn log_spaced(lo_ns: f64, hi_ns: f64, n: usize) -> Result<Self, AnalyzerError> {
        if n == 0 || !(lo_ns > 0.0) || !(hi_ns > lo_ns) {
            return Err(AnalyzerError::BadEdges);
        }
        let (a, b) = (lo_ns.ln(), hi_ns.ln());
        let mut edges: Vec<f64> = (0..=n)
            .map(|i| (a + (b - a) * i as f64 / n as f64).exp())
            .collect();
        edges[0] = lo_ns;
        edges[n] = hi_ns;
        Self::new(edges)
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Bin holding `latency_ns`; out-of-range values land in the end bins.
    pub fn bin(&self, latency_ns: u64) -> usize {
        let x = latency_ns as f64;
        let i = self.edges.partition_point(|&e| e <= x);
        i.clamp(1, self.n_bins()) - 1
    }
}

impl Default for BinEdges {
    /// 32 bins over [10µs, 10ms].
    fn default() -> Self {
        Self::log_spaced(10_000.0, 10_000_000.0, 32).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub histogram: Vec<u64>,
    pub total: u64,
    pub label: Option<String>,
    pub edges: BinEdges,
}

impl FeatureVector {
    pub fn from_counts(histogram: Vec<u64>, edges: BinEdges, label: Option<String>) -> Result<Self, AnalyzerError> {
        if histogram.len() != edges.n_bins() {
            return Err(AnalyzerError::BinCount {
                expected: edges.n_bins(),
                got: histogram.len(),
            });
        }
        Ok(Self {
            total: histogram.iter().sum(),
            histogram,
            label,
            edges,
        })
    }

    pub fn from_trace(trace: &LatencyTrace, edges: &BinEdges, label: Option<String>) -> Self {
        let mut histogram = vec![0; edges.n_bins()];
        for l in trace.steady_samples().iter().map(|s| s.latency) {
            histogram[edges.bin(l)] += 1;
        }
        Self::from_counts(histogram, edges.clone(), label).unwrap()
    }

    /// Counts divided by the total; all zeros for an empty histogram.
    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.histogram.iter().map(|&c| c as f64 / t).collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct KnnModel {
    train: Vec<FeatureVector>,
    normalized: Vec<Vec<f64>>,
    k: usize,
}

pub fn knn_train(vectors: Vec<FeatureVector>, k: usize) -> Result<KnnModel, AnalyzerError> {
    if k == 0 || k > vectors.len() {
        return Err(AnalyzerError::BadK { k, n: vectors.len() });
    }
    if let Some(i) = vectors.iter().position(|v| v.label.is_none()) {
        return Err(AnalyzerError::Unlabeled(i));
    }
    if vectors.iter().any(|v| v.edges != vectors[0].edges) {
        return Err(AnalyzerError::BinEdgeMismatch);
    }
    let normalized = vectors.iter().map(FeatureVector::normalized).collect();
    Ok(KnnModel {
        train: vectors,
        normalized,
        k,
    })
}

pub fn knn_classify(model: &KnnModel, v: &FeatureVector) -> Result<String, AnalyzerError> {
    model.classify(v)
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn edges(&self) -> &BinEdges {
        &self.train[0].edges
    }

    /// Majority label among the k nearest training vectors. Between classes
    /// tied on votes, the one owning the nearest of those neighbours wins.
    /// Equal distances keep training order.
    pub fn classify(&self, v: &FeatureVector) -> Result<String, AnalyzerError> {
        if v.edges != *self.edges() {
            return Err(AnalyzerError::BinEdgeMismatch);
        }
        let q = v.normalized();
        let mut dist: Vec<(f64, usize)> = self
            .normalized
            .iter()
            .enumerate()
            .map(|(i, t)| (distance(&q, t), i))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &dist[..self.k];
        let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
        for &(_, i) in nearest {
            *votes.entry(self.label(i)).or_default() += 1;
        }
        let best = *votes.values().max().unwrap();
        let label = nearest
            .iter()
            .map(|&(_, i)| self.label(i))
            .find(|l| votes[l] == best)
            .unwrap();
        Ok(label.to_owned())
    }

    fn label(&self, i: usize) -> &str {
        self.train[i].label.as_deref().unwrap()
    }
}

/// Per-class shuffled split: `train_fraction` of each class (rounded) goes to
/// training. Returns (train, test) indices into `labels`, each sorted.
pub fn stratified_split(labels: &[String], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub classes: Vec<ClassScore>,
    pub correct: usize,
    pub total: usize,
}

impl ClassificationReport {
    pub fn new(truth: &[String], predicted: &[String]) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let labels: BTreeSet<&str> = truth.iter().chain(predicted).map(String::as_str).collect();
        let classes = labels
            .into_iter()
            .map(|c| {
                let mut s = BinaryScore::default();
                for (t, p) in truth.iter().zip(predicted) {
                    match (t == c, p == c) {
                        (true, true) => s.tp += 1,
                        (false, true) => s.fp += 1,
                        (true, false) => s.fn_ += 1,
                        (false, false) => s.tn += 1,
                    }
                }
                ClassScore {
                    label: c.to_owned(),
                    precision: s.precision(),
                    recall: s.recall(),
                    f1: s.f1(),
                    support: s.tp + s.fn_,
                }
            })
            .collect();
        Self {
            classes,
            correct: truth.iter().zip(predicted).filter(|(t, p)| t == p).count(),
            total: truth.len(),
        }
    }

    pub fn accuracy(&self) -> f64 {
        frac(self.correct, self.total)
    }

    /// `class,precision,recall,f1,support` rows, then an `accuracy` row whose
    /// metric columns all hold the overall accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in &self.classes {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{}",
                c.label, c.precision, c.recall, c.f1, c.support
            )
            .unwrap();
        }
        let a = self.accuracy();
        writeln!(out, "accuracy,{a:.6},{a:.6},{a:.6},{}", self.total).unwrap();
        out
    }
}

/// Trains on `train_fraction` of `vectors` per class and scores the rest.
pub fn evaluate_knn(
    vectors: &[FeatureVector],
    k: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<ClassificationReport, AnalyzerError> {
    if let Some(i) = vectors.iter().position(|v| v.label.is_none()) {
        return Err(AnalyzerError::Unlabeled(i));
    }
    let labels: Vec<String> = vectors.iter().map(|v| v.label.clone().unwrap()).collect();
    let (train, test) = stratified_split(&labels, train_fraction, seed);
    let model = knn_train(train.iter().map(|&i| vectors[i].clone()).collect(), k)?;
    let mut predicted = Vec::with_capacity(test.len());
    for &i in &test {
        predicted.push(model.classify(&vectors[i])?);
    }
    let truth: Vec<String> = test.iter().map(|&i| labels[i].clone()).collect();
    Ok(ClassificationReport::new(&truth, &predicted))
}

pub const LABELS_FILE: &str = "labels.csv";

/// Reads a dataset directory: `labels.csv` with a `file,label` header, one
/// row per trace CSV (paths relative to the directory).
pub fn load_dataset(dir: &Path, edges: &BinEdges) -> Result<Vec<FeatureVector>, AnalyzerError> {
    let path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|source| AnalyzerError::Io {
        path: path.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || (line_no == 1 && line.starts_with("file,")) {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| AnalyzerError::Dataset {
            path: path.clone(),
            line: line_no,
            msg: format!("expected file,label, found {line:?}"),
        })?;
        let (file, label) = (file.trim(), label.trim());
        if file.is_empty() || label.is_empty() {
            return Err(AnalyzerError::Dataset {
                path: path.clone(),
                line: line_no,
                msg: "empty file or label".to_owned(),
            });
        }
        let tpath = dir.join(file);
        let trace = LatencyTrace::load(&tpath).map_err(|source| AnalyzerError::Trace { path: tpath, source })?;
        out.push(FeatureVector::from_trace(&trace, edges, Some(label.to_owned())));
    }
    Ok(out)
}

/// Writes labelled traces in the layout [`load_dataset`] reads.
pub fn write_dataset(dir: &Path, samples: &[(String, LatencyTrace)]) -> Result<(), AnalyzerError> {
    let io = |path: PathBuf| move |source| AnalyzerError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_owned()))?;
    let mut labels = String::from("file,label\n");
    for (i, (label, trace)) in samples.iter().enumerate() {
        let name = format!("{i:05}_{label}.csv");
        let path = dir.join(&name);
        trace
            .save(&path)
            .map_err(|source| AnalyzerError::Trace { path, source })?;
        writeln!(labels, "{name},{label}").unwrap();
    }
    let path = dir.join(LABELS_FILE);
    fs::write(&path, labels).map_err(io(path.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeystrokeTimings {
    pub events: Vec<u64>,
    /// `events[i + 1] - events[i]`.
    pub deltas: Vec<u64>,
}

/// Keystroke events are episode starts at least `min_spacing_ns` after the
/// previous accepted event; closer ones are treated as the same keystroke.
/// Episodes use the default max gap, capped at `min_spacing_ns`.
pub fn keystroke_timings(
    trace: &LatencyTrace,
    theta_ns: u64,
    min_spacing_ns: u64,
) -> Result<KeystrokeTimings, AnalyzerError> {
    if min_spacing_ns == 0 {
        return Err(AnalyzerError::NonPositive("min_spacing"));
    }
    let mut events: Vec<u64> = Vec::new();
    let max_gap = default_max_gap(trace).min(min_spacing_ns);
    for ep in extract_episodes(trace, theta_ns, max_gap) {
        if events.last().is_none_or(|&e| ep.start - e >= min_spacing_ns) {
            events.push(ep.start);
        }
    }
    let deltas = events.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(KeystrokeTimings { events, deltas })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingAccuracy {
    /// True inter-key intervals scored.
    pub n: usize,
    /// Intervals recovered with error below the tolerance.
    pub within: usize,
    /// Mean absolute error over the recovered intervals, ns.
    pub mean_abs_error_ns: f64,
    /// True intervals with no recovered counterpart.
    pub missed: usize,
}

impl TimingAccuracy {
    pub fn within_fraction(&self) -> f64 {
        frac(self.within, self.n)
    }
}

/// Scores recovered events against true key times. Each event is attributed
/// to the last key pressed before it; an interval between consecutive keys
/// is recovered when both keys own an event, and missed otherwise.
pub fn score_keystrokes(events: &[u64], key_times: &[u64], tolerance_ns: u64) -> TimingAccuracy {
    let mut owned: Vec<Option<u64>> = vec![None; key_times.len()];
    for &e in events {
        let k = key_times.partition_point(|&t| t <= e);
        if k > 0 && owned[k - 1].is_none() {
            owned[k - 1] = Some(e);
        }
    }
    let n = key_times.len().saturating_sub(1);
    let (mut within, mut missed, mut err_sum, mut scored) = (0, 0, 0.0, 0);
    for i in 0..n {
        match (owned[i], owned[i + 1]) {
            (Some(a), Some(b)) => {
                let truth = (key_times[i + 1] - key_times[i]) as f64;
                let err = ((b - a) as f64 - truth).abs();
                err_sum += err;
                scored += 1;
                if err < tolerance_ns as f64 {
                    within += 1;
                }
            }
            _ => missed += 1,
        }
    }
    TimingAccuracy {
        n,
        within,
        mean_abs_error_ns: if scored == 0 { 0.0 } else { err_sum / scored as f64 },
        missed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::LatencySample;

    fn trace(pairs: &[(u64, u64)]) -> LatencyTrace {
        LatencyTrace::from_samples(pairs.iter().map(|&(t, l)| LatencySample::new(t, l)).collect()).unwrap()
    }

    #[test]
    fn no_slow_samples_no_episodes() {
        let t = trace(&[(0, 20_000), (22_000, 21_000)]);
        assert!(extract_episodes(&t, 70_000, 1_000_000).is_empty());
    }

    #[test]
    fn hand_computed_episode() {
        let t = trace(&[(0, 80_000), (60_000, 80_000), (120_000, 80_000)]);
        let eps = extract_episodes(&t, 70_000, 200_000);
        assert_eq!(
            eps,
            vec![Episode {
                start: 0,
                end: 200_000,
                est_latency: 200_000,
                n_samples: 3
            }]
        );
    }

    #[test]
    fn gap_splits_episodes() {
        let t = trace(&[(0, 80_000), (82_000, 20_000), (104_000, 80_000), (500_000, 90_000)]);
        let eps = extract_episodes(&t, 70_000, 30_000);
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[0].n_samples, 2);
        assert_eq!(eps[0].est_latency, 184_000);
        assert_eq!(eps[1].est_latency, 90_000);
    }

    #[test]
    fn median_gap() {
        let t = trace(&[(0, 1), (10, 1), (30, 1), (40, 1)]);
        assert_eq!(default_max_gap(&t), 30);
        assert_eq!(default_max_gap(&trace(&[(0, 1)])), 0);
    }

    #[test]
    fn quiet_counts_are_zero() {
        let t = trace(&[(0, 20_000), (1_500_000_000, 20_000)]);
        assert_eq!(count_above(&t, 70_000, 1_000_000_000).unwrap(), vec![0, 0]);
        assert!(count_above(&t, 70_000, 0).is_err());
    }

    #[test]
    fn run_across_boundary_goes_to_first_bucket() {
        let t = trace(&[(990, 5), (996, 100), (1_100, 100), (1_300, 5)]);
        assert_eq!(count_above(&t, 50, 1_000).unwrap(), vec![2, 0]);
    }

    #[test]
    fn split_rule_is_strict() {
        let ep = |l| Episode {
            start: 0,
            end: l,
            est_latency: l,
            n_samples: 1,
        };
        assert_eq!(classify_split(&ep(1_200_000), DEFAULT_SPLIT_THRESHOLD_NS), SplitClass::Split);
        assert_eq!(classify_split(&ep(999_999), DEFAULT_SPLIT_THRESHOLD_NS), SplitClass::NoSplit);
        assert_eq!(classify_split(&ep(1_000_000), DEFAULT_SPLIT_THRESHOLD_NS), SplitClass::NoSplit);
    }

    #[test]
    fn split_scoring() {
        let ep = |s, e| Episode {
            start: s,
            end: e,
            est_latency: e - s,
            n_samples: 1,
        };
        let ops = [(0, 1_500_000), (5_000_000, 5_400_000), (9_000_000, 10_200_000)];
        let truth = [true, false, true];
        let eps = [
            ep(10, 1_600_000),
            ep(5_000_010, 6_500_000),
            ep(9_000_100, 9_800_000),
            ep(20_000_000, 22_000_000),
        ];
        let s = score_splits(&eps, &ops, &truth, DEFAULT_SPLIT_THRESHOLD_NS);
        assert_eq!(s, BinaryScore { tp: 1, fp: 2, fn_: 1, tn: 0 });
        assert_eq!(s.recall(), 0.5);
    }

    #[test]
    fn log_bins() {
        let e = BinEdges::default();
        assert_eq!(e.n_bins(), 32);
        assert_eq!(e.edges()[0], 10_000.0);
        assert_eq!(e.edges()[32], 10_000_000.0);
        assert_eq!(e.bin(5), 0);
        assert_eq!(e.bin(10_000), 0);
        assert_eq!(e.bin(9_999_999), 31);
        assert_eq!(e.bin(50_000_000), 31);
        // ratio between edges is 1000^(1/32)
        let r = (e.edges()[1] / e.edges()[0]).ln();
        assert!((r - 1000f64.ln() / 32.0).abs() < 1e-12);
        assert!(BinEdges::new(vec![1.0, 1.0]).is_err());
    }

    fn fv(counts: &[u64], label: &str) -> FeatureVector {
        let edges = BinEdges::log_spaced(1.0, 1e4, counts.len()).unwrap();
        FeatureVector::from_counts(counts.to_vec(), edges, Some(label.into())).unwrap()
    }

    #[test]
    fn identity_query() {
        let train = vec![fv(&[5, 0, 0], "a"), fv(&[0, 5, 0], "b"), fv(&[0, 0, 5], "c")];
        let m = knn_train(train.clone(), 1).unwrap();
        for v in &train {
            assert_eq!(m.classify(v).unwrap(), *v.label.as_ref().unwrap());
        }
    }

    #[test]
    fn tie_goes_to_nearest_class() {
        let train = vec![fv(&[9, 1], "a"), fv(&[1, 9], "b"), fv(&[10, 0], "a"), fv(&[0, 10], "b")];
        let m = knn_train(train, 4).unwrap();
        assert_eq!(m.classify(&fv(&[6, 4], "?")).unwrap(), "a");
        assert_eq!(m.classify(&fv(&[4, 6], "?")).unwrap(), "b");
    }

    #[test]
    fn knn_errors() {
        assert!(matches!(knn_train(vec![fv(&[1, 1], "a")], 2), Err(AnalyzerError::BadK { .. })));
        let mut u = fv(&[1, 1], "a");
        u.label = None;
        assert!(matches!(knn_train(vec![u], 1), Err(AnalyzerError::Unlabeled(0))));
        assert!(matches!(
            knn_train(vec![fv(&[1, 1], "a"), fv(&[1, 1, 1], "b")], 1),
            Err(AnalyzerError::BinEdgeMismatch)
        ));
        let m = knn_train(vec![fv(&[1, 1], "a")], 1).unwrap();
        assert!(matches!(m.classify(&fv(&[1, 1, 1], "?")), Err(AnalyzerError::BinEdgeMismatch)));
        assert!(FeatureVector::from_counts(vec![1], BinEdges::default(), None).is_err());
    }

    #[test]
    fn scaling_counts_keeps_labels() {
        let train = vec![fv(&[3, 1, 0], "a"), fv(&[0, 1, 3], "b"), fv(&[1, 2, 1], "c")];
        let scaled: Vec<_> = train
            .iter()
            .map(|v| fv(&v.histogram.iter().map(|c| c * 7).collect::<Vec<_>>(), v.label.as_ref().unwrap()))
            .collect();
        let (a, b) = (knn_train(train, 1).unwrap(), knn_train(scaled, 1).unwrap());
        for q in [[2, 2, 0], [0, 1, 1], [1, 1, 1]] {
            let q7: Vec<u64> = q.iter().map(|c| c * 13).collect();
            assert_eq!(a.classify(&fv(&q, "?")).unwrap(), b.classify(&fv(&q7, "?")).unwrap());
        }
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels: Vec<String> = (0..40).map(|i| if i < 10 { "x" } else { "y" }.to_string()).collect();
        let (tr, te) = stratified_split(&labels, 0.7, 3);
        assert_eq!(tr.len(), 28);
        assert_eq!(te.len(), 12);
        assert_eq!(tr.iter().filter(|&&i| i < 10).count(), 7);
        assert_eq!(stratified_split(&labels, 0.7, 3), (tr, te));
    }

    #[test]
    fn report_csv() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let r = ClassificationReport::new(&s(&["a", "a", "b", "b"]), &s(&["a", "b", "b", "b"]));
        assert_eq!(r.accuracy(), 0.75);
        assert_eq!(
            r.to_csv(),
            "class,precision,recall,f1,support\n\
             a,1.000000,0.500000,0.666667,2\n\
             b,0.666667,1.000000,0.800000,2\n\
             accuracy,0.750000,0.750000,0.750000,4\n"
        );
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            ("a".to_string(), trace(&[(0, 20_000), (30_000, 500_000)])),
            ("b".to_string(), trace(&[(0, 2_000_000)])),
        ];
        write_dataset(dir.path(), &samples).unwrap();
        let v = load_dataset(dir.path(), &BinEdges::default()).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].total, 2);
        assert_eq!(v[1].label.as_deref(), Some("b"));
        fs::write(dir.path().join(LABELS_FILE), "file,label\nnolabel\n").unwrap();
        let err = load_dataset(dir.path(), &BinEdges::default()).unwrap_err();
        assert!(matches!(err, AnalyzerError::Dataset { line: 2, .. }), "{err}");
    }

    #[test]
    fn keystroke_basics() {
        let t = trace(&[(0, 80_000), (150_000_000, 80_000)]);
        let k = keystroke_timings(&t, 54_000, DEFAULT_MIN_SPACING_NS).unwrap();
        assert_eq!(k.deltas, vec![150_000_000]);
        let single = trace(&[(0, 80_000), (100_000, 20_000)]);
        assert!(keystroke_timings(&single, 54_000, DEFAULT_MIN_SPACING_NS).unwrap().deltas.is_empty());
        assert!(keystroke_timings(&single, 54_000, 0).is_err());
        // A second episode 10 ms later is the same keystroke.
        let dup = trace(&[(0, 80_000), (10_000_000, 80_000), (200_000_000, 80_000)]);
        let k = keystroke_timings(&dup, 54_000, DEFAULT_MIN_SPACING_NS).unwrap();
        assert_eq!(k.events, vec![0, 200_000_000]);
    }

    #[test]
    fn keystroke_scoring() {
        let keys = [0, 100, 300, 600];
        let s = score_keystrokes(&[5, 108, 650], &keys, 10);
        assert_eq!(s.n, 3);
        assert_eq!(s.within, 1);
        assert_eq!(s.missed, 2);
        assert_eq!(s.mean_abs_error_ns, 3.0);
    }
}
