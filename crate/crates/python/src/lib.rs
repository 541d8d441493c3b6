//! Python bindings: channel configuration, the simulator, the modem and the
//! trace analyzers. Bit streams cross the boundary as `"0101..."` strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fsyncchan::analyzer;
use fsyncchan::cli::{cmd_bench, SourceArgs};
use fsyncchan::frame::frames_to_bits;
use fsyncchan::metrics;
use fsyncchan::modem::{self, ThresholdState};
use fsyncchan::sim::{self, workload, ContentionModel, NoiseDegree, NoiseProcess, SimOptions};
use fsyncchan::{BitStream, ChannelConfig, DecisionRule, LatencySample, LatencyTrace, ProbeMode};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn bits_from(s: &str) -> PyResult<BitStream> {
    BitStream::from_binary_str(s).map_err(value_err)
}

/// Symbol duration, probe mode, decision rule and frame payload length.
#[pyclass(name = "ChannelConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyChannelConfig {
    inner: ChannelConfig,
}

#[pymethods]
impl PyChannelConfig {
    #[new]
    #[pyo3(signature = (ts_us=50, mode="fsync", decision="mean", payload_bits=8000))]
    fn new(ts_us: u64, mode: &str, decision: &str, payload_bits: usize) -> PyResult<Self> {
        let inner = ChannelConfig::builder()
            .symbol_duration_us(ts_us)
            .probe_mode(mode.parse::<ProbeMode>().map_err(value_err)?)
            .decision_rule(decision.parse::<DecisionRule>().map_err(value_err)?)
            .payload_len(payload_bits)
            .build()
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn ts_us(&self) -> u64 {
        self.inner.symbol_duration_us()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.probe_mode.as_str()
    }

    #[getter]
    fn payload_bits(&self) -> usize {
        self.inner.payload_len()
    }

    #[getter]
    fn frame_bits(&self) -> usize {
        self.inner.frame_len()
    }

    fn __repr__(&self) -> String {
        format!(
            "ChannelConfig(ts_us={}, mode={:?}, payload_bits={})",
            self.inner.symbol_duration_us(),
            self.inner.probe_mode.as_str(),
            self.inner.payload_len()
        )
    }
}

/// Ordered probe samples: (timestamp_ns, latency_ns) pairs.
#[pyclass(name = "Trace", frozen, from_py_object)]
#[derive(Clone)]
struct PyTrace {
    inner: LatencyTrace,
}

#[pymethods]
impl PyTrace {
    #[new]
    fn new(samples: Vec<(u64, u64)>) -> PyResult<Self> {
        let samples = samples.into_iter().map(|(t, l)| LatencySample::new(t, l)).collect();
        let inner = LatencyTrace::from_samples(samples).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        let inner = LatencyTrace::from_csv_str(text).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv_string()
    }

    fn samples(&self) -> Vec<(u64, u64)> {
        self.inner.samples().iter().map(|s| (s.timestamp, s.latency)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn model_for(cfg: &ChannelConfig) -> ContentionModel {
    ContentionModel::measured(cfg.probe_mode, cfg.probe_mode)
}

fn noise_for(noise: &str, model: &ContentionModel) -> PyResult<NoiseProcess> {
    let degree: NoiseDegree = noise.parse().map_err(PyValueError::new_err)?;
    Ok(NoiseProcess::from_degree(degree, model))
}

#[pyfunction]
fn binary_entropy(p: f64) -> f64 {
    metrics::binary_entropy(p)
}

/// `(bandwidth_bps, capacity_bps)` for symbol duration `ts_us` and bit error
/// probability `p`.
#[pyfunction]
fn capacity(ts_us: f64, p: f64) -> PyResult<(f64, f64)> {
    let c = metrics::capacity(ts_us, p).map_err(value_err)?;
    Ok((c.bandwidth_bps, c.capacity_bps))
}

#[pyfunction]
fn prbs(seed: u64, n: usize) -> String {
    BitStream::prbs(seed, n).to_binary_string()
}

/// `(err_1to0, err_0to1, p)` between two equal-length bit strings.
#[pyfunction]
fn compare_bits(sent: &str, received: &str) -> PyResult<(usize, usize, f64)> {
    let r = metrics::compare_bits(&bits_from(sent)?, &bits_from(received)?).map_err(value_err)?;
    Ok((r.err_1to0, r.err_0to1, r.p()))
}

/// Frames `payload` (a bit string) with the configured header and returns
/// the concatenated frame bits.
#[pyfunction]
fn encode_frames(payload: &str, config: &PyChannelConfig) -> PyResult<String> {
    let frames = fsyncchan::encode_frames(&bits_from(payload)?, &config.inner);
    Ok(frames_to_bits(&frames).to_binary_string())
}

#[pyfunction]
#[pyo3(signature = (bits, config, max_mismatches=1))]
fn extract_payloads(bits: &str, config: &PyChannelConfig, max_mismatches: usize) -> PyResult<Vec<String>> {
    let found = modem::extract_payloads(&bits_from(bits)?, &config.inner, max_mismatches);
    Ok(found.iter().map(BitStream::to_binary_string).collect())
}

/// Receiver trace while a simulated sender transmits `bits`.
#[pyfunction]
#[pyo3(signature = (bits, config, seed, noise="none"))]
fn sim_transmit(bits: &str, config: &PyChannelConfig, seed: u64, noise: &str) -> PyResult<PyTrace> {
    let model = model_for(&config.inner);
    let noise = noise_for(noise, &model)?;
    let inner = sim::sim_transmit(&bits_from(bits)?, &config.inner, &model, &noise, seed, SimOptions::default());
    Ok(PyTrace { inner })
}

/// Receiver trace with no sender, `duration_ms` long.
#[pyfunction]
#[pyo3(signature = (duration_ms, config, seed))]
fn sim_quiet_trace(duration_ms: u64, config: &PyChannelConfig, seed: u64) -> PyTrace {
    let inner = sim::sim_quiet_trace(
        duration_ms * 1_000_000,
        &model_for(&config.inner),
        seed,
        SimOptions::default(),
        Some(config.inner.probe_mode),
    );
    PyTrace { inner }
}

/// `(quiet_mean_ns, quiet_std_ns, theta_ns)` from a sender-free trace.
#[pyfunction]
fn calibrate(quiet: &PyTrace, config: &PyChannelConfig) -> PyResult<(f64, f64, f64)> {
    let st = modem::calibrate(&quiet.inner, &config.inner).map_err(value_err)?;
    Ok((st.quiet_mean, st.quiet_std, st.theta_ns))
}

/// Decodes symbols on the grid starting at `grid_start_ns`. Without `theta_ns`
/// the threshold is calibrated from `quiet` and adapts as symbols arrive.
#[pyfunction]
#[pyo3(signature = (trace, config, quiet=None, theta_ns=None, grid_start_ns=0, n_bits=None))]
fn decode(
    trace: &PyTrace,
    config: &PyChannelConfig,
    quiet: Option<&PyTrace>,
    theta_ns: Option<f64>,
    grid_start_ns: u64,
    n_bits: Option<usize>,
) -> PyResult<String> {
    let state = match (theta_ns, quiet) {
        (Some(t), _) => ThresholdState::fixed(t),
        (None, Some(q)) => modem::calibrate(&q.inner, &config.inner).map_err(value_err)?,
        (None, None) => return Err(PyValueError::new_err("decode needs quiet or theta_ns")),
    };
    let decisions = modem::decode_trace(&trace.inner, &config.inner, &state, grid_start_ns, n_bits);
    Ok(modem::decisions_to_bits(&decisions).to_binary_string())
}

/// Loopback BER sweep. Returns the CSV report.
#[pyfunction]
#[pyo3(name = "bench", signature = (ts_us, n_bits, seed, noise=vec!["none".to_owned()], mode="fsync", decision="mean"))]
fn loopback_bench(ts_us: Vec<u64>, n_bits: usize, seed: u64, noise: Vec<String>, mode: &str, decision: &str) -> PyResult<String> {
    let degrees = noise
        .iter()
        .map(|n| n.parse::<NoiseDegree>().map_err(PyValueError::new_err))
        .collect::<PyResult<Vec<_>>>()?;
    let source = SourceArgs {
        real: false,
        file: None,
        sim_params: None,
        noise: None,
        seed: Some(seed),
    };
    cmd_bench(
        &ts_us,
        n_bits,
        &degrees,
        mode.parse().map_err(value_err)?,
        decision.parse().map_err(value_err)?,
        &source,
    )
    .map_err(value_err)
}

/// Above-threshold episodes as `(start_ns, end_ns, est_latency_ns, n_samples)`.
#[pyfunction]
#[pyo3(signature = (trace, theta_ns=analyzer::SPLIT_THETA_NS, max_gap_ns=None))]
fn episodes(trace: &PyTrace, theta_ns: u64, max_gap_ns: Option<u64>) -> Vec<(u64, u64, u64, usize)> {
    let gap = max_gap_ns.unwrap_or_else(|| analyzer::default_max_gap(&trace.inner));
    analyzer::extract_episodes(&trace.inner, theta_ns, gap)
        .iter()
        .map(|e| (e.start, e.end, e.est_latency, e.n_samples))
        .collect()
}

/// Inter-keystroke intervals in ns recovered from a trace.
#[pyfunction]
#[pyo3(signature = (trace, theta_ns=analyzer::KEYSTROKE_THETA_NS, min_spacing_ns=analyzer::DEFAULT_MIN_SPACING_NS))]
fn keystroke_intervals(trace: &PyTrace, theta_ns: u64, min_spacing_ns: u64) -> PyResult<Vec<u64>> {
    let k = analyzer::keystroke_timings(&trace.inner, theta_ns, min_spacing_ns).map_err(value_err)?;
    Ok(k.deltas)
}

/// Trains and scores the k-NN operation classifier on `traces` (a list of
/// `(label, Trace)` pairs). Returns the per-class report CSV.
#[pyfunction]
#[pyo3(signature = (traces, k=analyzer::DEFAULT_K, train_fraction=analyzer::DEFAULT_TRAIN_FRACTION, seed=0))]
fn classify_operations(traces: Vec<(String, PyTrace)>, k: usize, train_fraction: f64, seed: u64) -> PyResult<String> {
    let edges = analyzer::BinEdges::default();
    let vectors: Vec<_> = traces
        .iter()
        .map(|(l, t)| analyzer::FeatureVector::from_trace(&t.inner, &edges, Some(l.clone())))
        .collect();
    let report = analyzer::evaluate_knn(&vectors, k, train_fraction, seed).map_err(value_err)?;
    Ok(report.to_csv())
}

/// Synthetic labelled operation traces, `per_class` of each class.
#[pyfunction]
fn synth_operations(per_class: usize, seed: u64) -> Vec<(String, PyTrace)> {
    workload::operation_dataset(per_class, seed)
        .into_iter()
        .map(|(l, inner)| (l, PyTrace { inner }))
        .collect()
}

#[pymodule]
fn fsyncchan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChannelConfig>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(binary_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(capacity, m)?)?;
    m.add_function(wrap_pyfunction!(prbs, m)?)?;
    m.add_function(wrap_pyfunction!(compare_bits, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frames, m)?)?;
    m.add_function(wrap_pyfunction!(extract_payloads, m)?)?;
    m.add_function(wrap_pyfunction!(sim_transmit, m)?)?;
    m.add_function(wrap_pyfunction!(sim_quiet_trace, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(loopback_bench, m)?)?;
    m.add_function(wrap_pyfunction!(episodes, m)?)?;
    m.add_function(wrap_pyfunction!(keystroke_intervals, m)?)?;
    m.add_function(wrap_pyfunction!(classify_operations, m)?)?;
    m.add_function(wrap_pyfunction!(synth_operations, m)?)?;
    Ok(())
}
