//! Command-line front end: calibration, transmission, benchmarks and the
//! side-channel analyses.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 no frame received before the timeout.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::analyzer::{
    self, count_above, default_max_gap, estimate_requests, extract_episodes, keystroke_timings,
    load_dataset, score_keystrokes, score_splits, write_dataset, AnalyzerError, BinEdges,
    SplitClass,
};
use crate::bits::BitStream;
use crate::config::{ChannelConfig, ConfigError, DecisionRule, ProbeMode, DEFAULT_PAYLOAD_LEN};
use crate::frame::{encode_frames, frames_to_bits};
use crate::metrics::{compare_bits, report_row, REPORT_HEADER};
use crate::modem::{
    calibrate, decisions_to_bits, decode_trace, decode_with_phase_search, send_bits, ModemError,
    SampleSource, ThresholdState,
};
use crate::probe::{ProbeError, ProbeHandle};
use crate::sim::workload::{
    insert_workload, keystroke_delays, keystroke_workload, operation_dataset, request_workload,
};
use crate::sim::{
    NoiseDegree, NoiseProcess, Schedule, ScheduleInterval, SimChannel, SimError, SimParams,
};
use crate::trace::{LatencySample, LatencyTrace, TraceError, TraceMeta};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NO_FRAME: i32 = 3;

/// Seed offset for the quiet calibration run that precedes a benchmark.
const CALIBRATION_SEED: u64 = 0x6361_6c69_6272;
const CALIBRATION_NS: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulator parameters: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Modem(#[from] ModemError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error("{path}: {source}")]
    Trace { path: String, source: TraceError },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("no frame: {0}")]
    NoFrame(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Sim(_) => EXIT_USAGE,
            CliError::Analyzer(AnalyzerError::NonPositive(_) | AnalyzerError::BadK { .. }) => EXIT_USAGE,
            CliError::Modem(ModemError::TooFewSamples { .. }) => EXIT_RUNTIME,
            CliError::NoFrame(_) => EXIT_NO_FRAME,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "fsyncchan", version, about = "fsync contention covert channel and side-channel toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ChannelArgs {
    /// Symbol duration in microseconds.
    #[arg(long, default_value_t = 50)]
    pub ts_us: u64,
    #[arg(long, default_value = "fsync")]
    pub mode: ProbeMode,
    #[arg(long, default_value = "mean")]
    pub decision: DecisionRule,
    /// Initial threshold; calibrated when absent.
    #[arg(long)]
    pub theta_ns: Option<u64>,
    /// Payload bits per frame.
    #[arg(long, default_value_t = DEFAULT_PAYLOAD_LEN)]
    pub payload_bits: usize,
}

impl ChannelArgs {
    fn config(&self) -> Result<ChannelConfig, CliError> {
        Ok(ChannelConfig::builder()
            .symbol_duration_us(self.ts_us)
            .probe_mode(self.mode)
            .decision_rule(self.decision)
            .theta_ns(self.theta_ns.unwrap_or(0))
            .payload_len(self.payload_bits)
            .build()?)
    }
}

#[derive(Debug, Args, Clone)]
pub struct SourceArgs {
    /// Probe a real file instead of the simulator.
    #[arg(long)]
    pub real: bool,
    /// Existing file on the shared device (with --real).
    #[arg(long, requires = "real")]
    pub file: Option<PathBuf>,
    /// Simulator parameter file (`key = value`).
    #[arg(long, conflicts_with = "real")]
    pub sim_params: Option<PathBuf>,
    #[arg(long)]
    pub noise: Option<NoiseDegree>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Resolved simulator setup.
struct SimSetup {
    params: SimParams,
    seed: u64,
}

impl SourceArgs {
    fn sim(&self) -> Result<SimSetup, CliError> {
        let mut params = match &self.sim_params {
            Some(p) => SimParams::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
            None => SimParams::default(),
        };
        if let Some(d) = self.noise {
            params.noise = NoiseProcess::from_degree(d, &params.model);
        }
        let seed = self
            .seed
            .or(params.seed)
            .ok_or_else(|| CliError::Usage("simulation needs --seed or a seed in --sim-params".into()))?;
        Ok(SimSetup { params, seed })
    }

    fn real_file(&self) -> Result<&Path, CliError> {
        self.file
            .as_deref()
            .ok_or_else(|| CliError::Usage("--real needs --file PATH".into()))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure quiet latency and derive the decision threshold.
    Calibrate {
        #[command(flatten)]
        channel: ChannelArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 200)]
        duration_ms: u64,
        /// Write the calibration as `key=value` lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulated loopback BER and capacity table.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [50u64, 200, 400])]
        ts_us: Vec<u64>,
        #[arg(long, default_value_t = 80_000)]
        bits: usize,
        /// Defaults to the --sim-params noise degree, or none.
        #[arg(long, value_delimiter = ',')]
        noise: Vec<NoiseDegree>,
        #[arg(long, default_value = "fsync")]
        mode: ProbeMode,
        #[arg(long, default_value = "mean")]
        decision: DecisionRule,
        #[arg(long)]
        sim_params: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transmit framed payload. In simulation, writes the receiver-side trace.
    Send {
        #[command(flatten)]
        channel: ChannelArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Simulated pipe mode (the default source).
        #[arg(long, conflicts_with = "real")]
        sim: bool,
        /// Payload file; a PRBS from the seed when absent.
        #[arg(long)]
        payload: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        /// Idle time before the first frame, for the receiver to calibrate.
        #[arg(long, default_value_t = 20)]
        lead_ms: u64,
        /// Simulated trace output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Receive frames and write the recovered payload.
    Recv {
        #[command(flatten)]
        channel: ChannelArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, conflicts_with = "real")]
        sim: bool,
        /// Simulated trace to decode; stdin when absent or `-`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 10.0)]
        timeout_s: f64,
        /// Quiet lead-in used for calibration.
        #[arg(long, default_value_t = 10)]
        calib_ms: u64,
        #[arg(long, default_value_t = 1)]
        max_mismatches: usize,
        #[arg(long, default_value_t = 10)]
        phase_steps: u64,
        /// Compare against the PRBS payload of --seed.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Side-channel analyses over recorded traces.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Synthetic victim workloads with ground truth.
    #[command(subcommand)]
    Synth(SynthCmd),
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCmd {
    Episodes {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = analyzer::SPLIT_THETA_NS)]
        theta_ns: u64,
        /// Defaults to three times the median probe spacing.
        #[arg(long)]
        max_gap_ns: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Rate {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = analyzer::SPLIT_THETA_NS)]
        theta_ns: u64,
        #[arg(long, default_value_t = 60.0)]
        bucket_s: f64,
        #[arg(long, default_value_t = analyzer::DEFAULT_SAMPLES_PER_REQUEST)]
        samples_per_request: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Splits {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = analyzer::SPLIT_THETA_NS)]
        theta_ns: u64,
        #[arg(long, default_value_t = analyzer::DEFAULT_SPLIT_THRESHOLD_NS)]
        split_ns: u64,
        #[arg(long)]
        max_gap_ns: Option<u64>,
        /// `start_ns,end_ns,split` ground truth to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Classify {
        /// Directory with `labels.csv` and one trace CSV per sample.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = analyzer::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = analyzer::DEFAULT_TRAIN_FRACTION)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Keystrokes {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = analyzer::KEYSTROKE_THETA_NS)]
        theta_ns: u64,
        #[arg(long, default_value_t = 50)]
        min_spacing_ms: u64,
        /// `key_ns` file of true key press times to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    /// Inserts with injected page splits: trace.csv, truth.csv.
    Inserts {
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 49)]
        splits: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labelled operation traces in dataset layout.
    Ops {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keystroke replay: trace.csv, keys.csv.
    Keystrokes {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Requests at a fixed rate: trace.csv.
    Requests {
        #[arg(long, default_value_t = 60)]
        per_minute: u32,
        #[arg(long, default_value_t = 5)]
        minutes: u32,
        #[arg(long, default_value_t = 10)]
        hits: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                return EXIT_USAGE;
            }
            let _ = stdout.write_all(text.as_bytes());
            return EXIT_OK;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Calibrate {
            channel,
            source,
            duration_ms,
            out,
        } => cmd_calibrate(&channel, &source, duration_ms, out.as_deref(), stdout),
        Command::Bench {
            ts_us,
            bits,
            noise,
            mode,
            decision,
            sim_params,
            seed,
            out,
        } => {
            let source = SourceArgs {
                real: false,
                file: None,
                sim_params,
                noise: None,
                seed,
            };
            let csv = cmd_bench(&ts_us, bits, &noise, mode, decision, &source)?;
            emit(out.as_deref(), &csv, stdout)
        }
        Command::Send {
            channel,
            source,
            payload,
            frames,
            lead_ms,
            out,
            ..
        } => cmd_send(&channel, &source, payload.as_deref(), frames, lead_ms, out.as_deref(), stdout, stderr),
        Command::Recv {
            channel,
            source,
            trace,
            frames,
            timeout_s,
            calib_ms,
            max_mismatches,
            phase_steps,
            check,
            out,
            ..
        } => {
            let opts = RecvOptions {
                frames,
                timeout_s,
                calib_ms,
                max_mismatches,
                phase_steps,
                check,
            };
            cmd_recv(&channel, &source, trace.as_deref(), &opts, out.as_deref(), stdout)
        }
        Command::Analyze(a) => cmd_analyze(a, stdout, stderr),
        Command::Synth(s) => cmd_synth(s),
    }
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, text).map_err(io_err(p)),
        None => stdout.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}

fn note(stderr: &mut dyn Write, msg: &str) {
    let _ = writeln!(stderr, "{msg}");
}

fn load_trace(path: &Path) -> Result<LatencyTrace, CliError> {
    LatencyTrace::load(path).map_err(|source| CliError::Trace {
        path: path.display().to_string(),
        source,
    })
}

fn cmd_calibrate(
    channel: &ChannelArgs,
    source: &SourceArgs,
    duration_ms: u64,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    if duration_ms == 0 {
        return Err(CliError::Usage("--duration-ms must be positive".into()));
    }
    let cfg = channel.config()?;
    let (origin, samples, state) = if source.real {
        let mut h = ProbeHandle::open(source.real_file()?, cfg.probe_mode, source.seed.unwrap_or(0))?;
        let trace = h.probe_for(duration_ms * 1_000)?;
        ("real", trace.len(), calibrate(&trace, &cfg)?)
    } else {
        let sim = source.sim()?;
        let model = sim.params.model;
        if cfg.decision_rule == DecisionRule::MeanThreshold && sim.params.noise.degree() == NoiseDegree::None {
            // The simulator knows its own quiet distribution.
            let st = ThresholdState::new(model.quiet_mean(), model.quiet_std(), crate::modem::ThresholdOrigin::Configured);
            ("model", 0, st)
        } else {
            let trace = quiet_trace(&sim, duration_ms * 1_000_000, sim.seed);
            ("sim", trace.len(), calibrate(&trace, &cfg)?)
        }
    };
    let mut text = String::new();
    writeln!(text, "source={origin}").unwrap();
    writeln!(text, "samples={samples}").unwrap();
    writeln!(text, "quiet_mean_ns={:.2}", state.quiet_mean).unwrap();
    writeln!(text, "quiet_std_ns={:.2}", state.quiet_std).unwrap();
    writeln!(text, "theta_ns={}", state.theta_ns.floor() as u64).unwrap();
    stdout.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
    if let Some(p) = out {
        fs::write(p, &text).map_err(io_err(p))?;
    }
    Ok(())
}

/// Receiver probes with no sender, under the configured noise.
fn quiet_trace(sim: &SimSetup, duration_ns: u64, seed: u64) -> LatencyTrace {
    let mut ch = SimChannel::new(
        Schedule::default(),
        sim.params.model,
        &sim.params.noise,
        seed,
        sim.params.opts,
    );
    let samples = ch.probe_until(duration_ns);
    LatencyTrace::new(samples, ch.meta(None, seed)).expect("simulated samples are ordered")
}

/// Loopback BER for every (t_s, noise) pair: one CSV row each, in the order
/// given. Empty `degrees` means the source's own noise degree. Deterministic
/// for a fixed seed.
pub fn cmd_bench(
    ts_list: &[u64],
    n_bits: usize,
    degrees: &[NoiseDegree],
    mode: ProbeMode,
    decision: DecisionRule,
    source: &SourceArgs,
) -> Result<String, CliError> {
    if n_bits == 0 {
        return Err(CliError::Usage("--bits must be positive".into()));
    }
    if ts_list.is_empty() {
        return Err(CliError::Usage("need at least one --ts-us value".into()));
    }
    let base = source.sim()?;
    let degrees = if degrees.is_empty() {
        vec![base.params.noise.degree()]
    } else {
        degrees.to_vec()
    };
    let bits = BitStream::prbs(base.seed, n_bits);
    let mut csv = format!("{REPORT_HEADER},noise\n");
    for &ts in ts_list {
        let cfg = ChannelConfig::builder()
            .symbol_duration_us(ts)
            .probe_mode(mode)
            .decision_rule(decision)
            .build()?;
        for &degree in &degrees {
            let mut sim = SimSetup {
                params: base.params.clone(),
                seed: base.seed,
            };
            // A matching degree keeps any burst parameters from the params file.
            if degree != base.params.noise.degree() {
                sim.params.noise = NoiseProcess::from_degree(degree, &sim.params.model);
            }
            let quiet = quiet_trace(&sim, CALIBRATION_NS, sim.seed ^ CALIBRATION_SEED);
            let state = calibrate(&quiet, &cfg)?;
            let schedule = Schedule::from_bits(&bits, cfg.symbol_duration_ns());
            let end = schedule.end() + cfg.symbol_duration_ns();
            let mut ch = SimChannel::new(schedule, sim.params.model, &sim.params.noise, sim.seed, sim.params.opts);
            let trace = LatencyTrace::new(ch.probe_until(end), TraceMeta::default()).expect("ordered");
            let got = decisions_to_bits(&decode_trace(&trace, &cfg, &state, 0, Some(n_bits)));
            let report = compare_bits(&bits, &got).map_err(|e| CliError::Usage(e.to_string()))?;
            writeln!(csv, "{},{}", report_row(ts, &report), degree.as_str()).unwrap();
        }
    }
    Ok(csv)
}

fn payload_bits(
    payload: Option<&Path>,
    frames: usize,
    per_frame: usize,
    seed: Option<u64>,
) -> Result<BitStream, CliError> {
    if frames == 0 {
        return Err(CliError::Usage("--frames must be positive".into()));
    }
    match payload {
        Some(p) => {
            let bytes = fs::read(p).map_err(io_err(p))?;
            if bytes.is_empty() {
                return Err(CliError::Usage(format!("{}: payload is empty", p.display())));
            }
            Ok(BitStream::from_bytes(&bytes))
        }
        None => {
            let seed = seed.ok_or_else(|| CliError::Usage("a PRBS payload needs --seed".into()))?;
            Ok(BitStream::prbs(seed, frames * per_frame))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_send(
    channel: &ChannelArgs,
    source: &SourceArgs,
    payload: Option<&Path>,
    frames: usize,
    lead_ms: u64,
    out: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = channel.config()?;
    let seed = if source.real { source.seed } else { Some(source.sim()?.seed) };
    let payload = payload_bits(payload, frames, cfg.payload_len(), seed)?;
    let frames = encode_frames(&payload, &cfg);
    let bits = frames_to_bits(&frames);
    let t_s = cfg.symbol_duration_ns();
    if source.real {
        let mut h = ProbeHandle::open(source.real_file()?, cfg.probe_mode, source.seed.unwrap_or(0))?;
        std::thread::sleep(Duration::from_millis(lead_ms));
        let report = send_bits(&bits, &cfg, &mut h)?;
        note(
            stderr,
            &format!("sent frames={} bits={} fsyncs={}", frames.len(), bits.len(), report.total_fsyncs()),
        );
        return Ok(());
    }
    let sim = source.sim()?;
    let lead = lead_ms * 1_000_000;
    let mut schedule = Schedule::default();
    if lead > 0 {
        schedule.push(ScheduleInterval {
            start: 0,
            end: lead,
            active: false,
        });
    }
    for (i, b) in bits.iter().enumerate() {
        let start = lead + i as u64 * t_s;
        schedule.push(ScheduleInterval {
            start,
            end: start + t_s,
            active: b,
        });
    }
    // The receiver keeps listening for a few symbols after the sender stops.
    let end = schedule.end() + 16 * t_s;
    let mut ch = SimChannel::new(schedule, sim.params.model, &sim.params.noise, sim.seed, sim.params.opts);
    let trace = LatencyTrace::new(ch.probe_until(end), ch.meta(Some(cfg.probe_mode), sim.seed))
        .expect("simulated samples are ordered");
    emit(out, &trace.to_csv_string(), stdout)?;
    note(stderr, &format!("sent frames={} bits={}", frames.len(), bits.len()));
    Ok(())
}

struct RecvOptions {
    frames: usize,
    timeout_s: f64,
    calib_ms: u64,
    max_mismatches: usize,
    phase_steps: u64,
    check: bool,
}

fn cmd_recv(
    channel: &ChannelArgs,
    source: &SourceArgs,
    trace_path: Option<&Path>,
    opts: &RecvOptions,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = channel.config()?;
    if opts.frames == 0 {
        return Err(CliError::Usage("--frames must be positive".into()));
    }
    if !(opts.timeout_s > 0.0) {
        return Err(CliError::Usage("--timeout-s must be positive".into()));
    }
    let fixed = channel.theta_ns.map(|t| ThresholdState::fixed(t as f64));
    let (state, trace) = if source.real {
        let mut h = ProbeHandle::open(source.real_file()?, cfg.probe_mode, source.seed.unwrap_or(0))?;
        let state = match fixed {
            Some(s) => s,
            None => calibrate(&h.probe_for(opts.calib_ms.max(1) * 1_000)?, &cfg)?,
        };
        let deadline = h.elapsed_ns() + (opts.timeout_s * 1e9) as u64;
        h.set_deadline(Some(deadline));
        let mut samples: Vec<LatencySample> = Vec::new();
        while let Some(s) = h.next_sample()? {
            samples.push(s);
        }
        let trace = LatencyTrace::new(samples, TraceMeta::default()).map_err(|source| CliError::Trace {
            path: "<probe>".into(),
            source,
        })?;
        (state, trace)
    } else {
        let trace = match trace_path {
            Some(p) if p != Path::new("-") => load_trace(p)?,
            _ => LatencyTrace::read_csv(io::stdin().lock()).map_err(|source| CliError::Trace {
                path: "<stdin>".into(),
                source,
            })?,
        };
        let state = match fixed {
            Some(s) => s,
            None => {
                let lead_end = trace.samples().first().map_or(0, |s| s.timestamp) + opts.calib_ms * 1_000_000;
                let quiet: Vec<_> = trace.samples().iter().copied().filter(|s| s.timestamp < lead_end).collect();
                let quiet = LatencyTrace::new(quiet, TraceMeta::default()).expect("subset of an ordered trace");
                calibrate(&quiet, &cfg)?
            }
        };
        (state, trace)
    };
    let Some((_, mut payloads)) =
        decode_with_phase_search(&trace, &cfg, &state, opts.phase_steps, opts.max_mismatches)
    else {
        return Err(CliError::NoFrame(format!(
            "no header within {} mismatches in {} samples",
            opts.max_mismatches,
            trace.len()
        )));
    };
    payloads.truncate(opts.frames);
    let mut bits = BitStream::new();
    for p in &payloads {
        bits.extend_from(p);
    }
    if let Some(p) = out {
        fs::write(p, bits.to_bytes()).map_err(io_err(p))?;
    }
    let mut summary = format!("frames={} bits={} theta_ns={}", payloads.len(), bits.len(), state.theta_ns.floor() as u64);
    if opts.check {
        let seed = if source.real { source.seed } else { Some(source.sim()?.seed) };
        let seed = seed.ok_or_else(|| CliError::Usage("--check needs --seed".into()))?;
        let expected = BitStream::prbs(seed, bits.len());
        let r = compare_bits(&expected, &bits).expect("same length");
        write!(summary, " errors={} p={:.6}", r.errors(), r.p()).unwrap();
    }
    writeln!(stdout, "{summary}").map_err(io_err(Path::new("<stdout>")))?;
    if payloads.len() < opts.frames {
        return Err(CliError::NoFrame(format!("received {} of {} frames", payloads.len(), opts.frames)));
    }
    Ok(())
}

fn cmd_analyze(cmd: AnalyzeCmd, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        AnalyzeCmd::Episodes {
            trace,
            theta_ns,
            max_gap_ns,
            out,
        } => {
            let t = load_trace(&trace)?;
            let gap = max_gap_ns.unwrap_or_else(|| default_max_gap(&t));
            let mut csv = String::from("start_ns,end_ns,est_latency_ns,n_samples\n");
            for e in extract_episodes(&t, theta_ns, gap) {
                writeln!(csv, "{},{},{},{}", e.start, e.end, e.est_latency, e.n_samples).unwrap();
            }
            emit(out.as_deref(), &csv, stdout)
        }
        AnalyzeCmd::Rate {
            trace,
            theta_ns,
            bucket_s,
            samples_per_request,
            out,
        } => {
            if !(bucket_s > 0.0) {
                return Err(CliError::Usage("--bucket-s must be positive".into()));
            }
            let t = load_trace(&trace)?;
            let bucket = (bucket_s * 1e9) as u64;
            let counts = count_above(&t, theta_ns, bucket)?;
            let est = estimate_requests(&counts, samples_per_request)?;
            let mut csv = String::from("bucket,start_s,samples_above,est_requests\n");
            for (i, (c, r)) in counts.iter().zip(&est).enumerate() {
                writeln!(csv, "{i},{},{c},{r:.3}", i as f64 * bucket_s).unwrap();
            }
            emit(out.as_deref(), &csv, stdout)
        }
        AnalyzeCmd::Splits {
            trace,
            theta_ns,
            split_ns,
            max_gap_ns,
            truth,
            out,
        } => {
            let t = load_trace(&trace)?;
            let gap = max_gap_ns.unwrap_or_else(|| default_max_gap(&t));
            let eps = extract_episodes(&t, theta_ns, gap);
            let mut csv = String::from("start_ns,end_ns,est_latency_ns,n_samples,class\n");
            for e in &eps {
                let class = match analyzer::classify_split(e, split_ns) {
                    SplitClass::Split => "split",
                    SplitClass::NoSplit => "nosplit",
                };
                writeln!(csv, "{},{},{},{},{class}", e.start, e.end, e.est_latency, e.n_samples).unwrap();
            }
            emit(out.as_deref(), &csv, stdout)?;
            if let Some(tp) = truth {
                let (ops, flags) = read_split_truth(&tp)?;
                let s = score_splits(&eps, &ops, &flags, split_ns);
                note(
                    stderr,
                    &format!(
                        "episodes={} tp={} fp={} fn={} precision={:.4} recall={:.4} f1={:.4}",
                        eps.len(),
                        s.tp,
                        s.fp,
                        s.fn_,
                        s.precision(),
                        s.recall(),
                        s.f1()
                    ),
                );
            }
            Ok(())
        }
        AnalyzeCmd::Classify {
            dataset,
            k,
            train_fraction,
            seed,
            out,
        } => {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(CliError::Usage("--train-fraction must be in (0, 1)".into()));
            }
            let vectors = load_dataset(&dataset, &BinEdges::default())?;
            let report = analyzer::evaluate_knn(&vectors, k, train_fraction, seed)?;
            let csv = report.to_csv();
            if out.is_some() {
                stdout.write_all(csv.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
            }
            emit(out.as_deref(), &csv, stdout)
        }
        AnalyzeCmd::Keystrokes {
            trace,
            theta_ns,
            min_spacing_ms,
            truth,
            out,
        } => {
            let t = load_trace(&trace)?;
            let k = keystroke_timings(&t, theta_ns, min_spacing_ms * 1_000_000)?;
            let mut csv = String::from("event_ns,delta_ns\n");
            for (i, e) in k.events.iter().enumerate() {
                match k.deltas.get(i) {
                    Some(d) => writeln!(csv, "{e},{d}").unwrap(),
                    None => writeln!(csv, "{e},").unwrap(),
                }
            }
            emit(out.as_deref(), &csv, stdout)?;
            if let Some(tp) = truth {
                let keys = read_column(&tp)?;
                let a = score_keystrokes(&k.events, &keys, 10_000_000);
                note(
                    stderr,
                    &format!(
                        "intervals={} within_10ms={:.4} mean_abs_error_ms={:.3} missed={}",
                        a.n,
                        a.within_fraction(),
                        a.mean_abs_error_ns / 1e6,
                        a.missed
                    ),
                );
            }
            Ok(())
        }
    }
}

fn parse_u64(path: &Path, line: usize, field: &str) -> Result<u64, CliError> {
    field.trim().parse().map_err(|e| {
        CliError::Analyzer(AnalyzerError::Dataset {
            path: path.to_owned(),
            line,
            msg: format!("bad integer {field:?}: {e}"),
        })
    })
}

fn data_lines(path: &Path) -> Result<Vec<(usize, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim().to_owned()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn read_split_truth(path: &Path) -> Result<(Vec<(u64, u64)>, Vec<bool>), CliError> {
    let mut ops = Vec::new();
    let mut flags = Vec::new();
    for (line, l) in data_lines(path)? {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 3 {
            return Err(CliError::Analyzer(AnalyzerError::Dataset {
                path: path.to_owned(),
                line,
                msg: "expected start_ns,end_ns,split".into(),
            }));
        }
        ops.push((parse_u64(path, line, f[0])?, parse_u64(path, line, f[1])?));
        flags.push(parse_u64(path, line, f[2])? != 0);
    }
    Ok((ops, flags))
}

fn read_column(path: &Path) -> Result<Vec<u64>, CliError> {
    data_lines(path)?
        .into_iter()
        .map(|(line, l)| parse_u64(path, line, &l))
        .collect()
}

fn cmd_synth(cmd: SynthCmd) -> Result<(), CliError> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(io_err(p));
    let save = |t: &LatencyTrace, p: PathBuf| {
        t.save(&p).map_err(|source| CliError::Trace {
            path: p.display().to_string(),
            source,
        })
    };
    match cmd {
        SynthCmd::Inserts { n, splits, seed, out } => {
            if splits > n {
                return Err(CliError::Usage("--splits exceeds --n".into()));
            }
            mkdir(&out)?;
            let w = insert_workload(n, splits, seed);
            save(&w.trace, out.join("trace.csv"))?;
            let mut csv = String::from("start_ns,end_ns,split\n");
            for (op, s) in w.ops.iter().zip(&w.is_split) {
                writeln!(csv, "{},{},{}", op.start, op.end, *s as u8).unwrap();
            }
            let p = out.join("truth.csv");
            fs::write(&p, csv).map_err(io_err(&p))
        }
        SynthCmd::Ops { per_class, seed, out } => {
            if per_class == 0 {
                return Err(CliError::Usage("--per-class must be positive".into()));
            }
            Ok(write_dataset(&out, &operation_dataset(per_class, seed))?)
        }
        SynthCmd::Keystrokes { n, seed, out } => {
            mkdir(&out)?;
            let w = keystroke_workload(&keystroke_delays(n, seed), seed);
            save(&w.trace, out.join("trace.csv"))?;
            let mut csv = String::from("key_ns\n");
            for k in &w.key_times {
                writeln!(csv, "{k}").unwrap();
            }
            let p = out.join("keys.csv");
            fs::write(&p, csv).map_err(io_err(&p))
        }
        SynthCmd::Requests {
            per_minute,
            minutes,
            hits,
            seed,
            out,
        } => {
            if per_minute == 0 || minutes == 0 {
                return Err(CliError::Usage("--per-minute and --minutes must be positive".into()));
            }
            mkdir(&out)?;
            let (trace, _) = request_workload(per_minute, minutes, hits, seed);
            save(&trace, out.join("trace.csv"))
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("fsyncchan").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn calibrate_reports_table1_threshold() {
        let (code, out, _) = run_args(&["calibrate", "--seed", "1"]);
        assert_eq!(code, 0);
        assert!(out.contains("theta_ns=32085\n"), "{out}");
    }

    #[test]
    fn zero_duration_is_usage_error() {
        assert_eq!(run_args(&["calibrate", "--seed", "1", "--duration-ms", "0"]).0, EXIT_USAGE);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run_args(&["bench", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["calibrate", "--mode", "mmap"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn sim_needs_seed() {
        let (code, _, err) = run_args(&["calibrate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--seed"));
    }

    #[test]
    fn small_bench() {
        let (code, out, _) = run_args(&["bench", "--seed", "3", "--ts-us", "200", "--bits", "2000"]);
        assert_eq!(code, 0);
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines[0], format!("{REPORT_HEADER},noise"));
        assert!(lines[1].starts_with("200,2000,0,0,0.000000,5000.000,5000.000,none"), "{out}");
    }
}
