//! Channel parameters shared by both endpoints.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::bits::BitStream;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("symbol duration must be positive")]
    ZeroSymbolDuration,
    #[error("payload length must be positive")]
    ZeroPayloadLen,
    #[error("header pattern must be at least 8 bits, got {0}")]
    ShortHeader(usize),
    #[error("unknown {kind} {value:?}")]
    UnknownVariant { kind: &'static str, value: String },
}

/// What the prober does to the file before each timed fsync.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeMode {
    FsyncOnly,
    /// Overwrite 1 KiB at offset 0.
    WriteFsync,
    /// Truncate to a random size.
    FtruncateFsync,
}

impl ProbeMode {
    pub const ALL: [ProbeMode; 3] = [
        ProbeMode::FsyncOnly,
        ProbeMode::WriteFsync,
        ProbeMode::FtruncateFsync,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMode::FsyncOnly => "fsync",
            ProbeMode::WriteFsync => "write",
            ProbeMode::FtruncateFsync => "ftruncate",
        }
    }
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fsync" | "fsync-only" => Ok(ProbeMode::FsyncOnly),
            "write" | "write+fsync" => Ok(ProbeMode::WriteFsync),
            "ftruncate" | "ftruncate+fsync" => Ok(ProbeMode::FtruncateFsync),
            _ => Err(ConfigError::UnknownVariant {
                kind: "probe mode",
                value: s.to_owned(),
            }),
        }
    }
}

/// Per-symbol statistic compared against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionRule {
    /// Mean fsync latency within the symbol.
    MeanThreshold,
    /// Sample standard deviation within the symbol; for cross-device
    /// channels where contention widens the spread more than it shifts the mean.
    StddevThreshold,
}

impl FromStr for DecisionRule {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(DecisionRule::MeanThreshold),
            "stddev" | "std" => Ok(DecisionRule::StddevThreshold),
            _ => Err(ConfigError::UnknownVariant {
                kind: "decision rule",
                value: s.to_owned(),
            }),
        }
    }
}

/// 16-bit alternating preamble followed by the sync word `11110000`.
pub fn default_header() -> BitStream {
    let mut header: BitStream = (0..16).map(|i| i % 2 == 0).collect();
    header.extend_from(&"11110000".parse().unwrap());
    header
}

pub const DEFAULT_PAYLOAD_LEN: usize = 8000;
pub const DEFAULT_SYMBOL_US: u64 = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    symbol_duration_us: u64,
    pub probe_mode: ProbeMode,
    pub decision_rule: DecisionRule,
    /// Initial threshold in ns; the receiver recalibrates it.
    pub theta_ns: u64,
    header_pattern: BitStream,
    payload_len: usize,
    pub samples_per_symbol_min: usize,
}

impl ChannelConfig {
    pub fn new(symbol_duration_us: u64) -> Result<Self, ConfigError> {
        Self::builder().symbol_duration_us(symbol_duration_us).build()
    }

    pub fn builder() -> ChannelConfigBuilder {
        ChannelConfigBuilder::default()
    }

    pub fn symbol_duration_us(&self) -> u64 {
        self.symbol_duration_us
    }

    pub fn symbol_duration_ns(&self) -> u64 {
        self.symbol_duration_us * 1_000
    }

    pub fn header_pattern(&self) -> &BitStream {
        &self.header_pattern
    }

    pub fn payload_len(&self) -> usize {
        self.payload_len
    }

    pub fn frame_len(&self) -> usize {
        self.header_pattern.len() + self.payload_len
    }

    pub fn with_symbol_duration_us(&self, us: u64) -> Result<Self, ConfigError> {
        if us == 0 {
            return Err(ConfigError::ZeroSymbolDuration);
        }
        Ok(Self {
            symbol_duration_us: us,
            ..self.clone()
        })
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::builder().build().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct ChannelConfigBuilder {
    symbol_duration_us: u64,
    probe_mode: ProbeMode,
    decision_rule: DecisionRule,
    theta_ns: u64,
    header_pattern: BitStream,
    payload_len: usize,
    samples_per_symbol_min: usize,
}

impl Default for ChannelConfigBuilder {
    fn default() -> Self {
        Self {
            symbol_duration_us: DEFAULT_SYMBOL_US,
            probe_mode: ProbeMode::FsyncOnly,
            decision_rule: DecisionRule::MeanThreshold,
            theta_ns: 0,
            header_pattern: default_header(),
            payload_len: DEFAULT_PAYLOAD_LEN,
            samples_per_symbol_min: 1,
        }
    }
}

impl ChannelConfigBuilder {
    pub fn symbol_duration_us(mut self, us: u64) -> Self {
        self.symbol_duration_us = us;
        self
    }

    pub fn probe_mode(mut self, mode: ProbeMode) -> Self {
        self.probe_mode = mode;
        self
    }

    pub fn decision_rule(mut self, rule: DecisionRule) -> Self {
        self.decision_rule = rule;
        self
    }

    pub fn theta_ns(mut self, theta: u64) -> Self {
        self.theta_ns = theta;
        self
    }

    pub fn header_pattern(mut self, header: BitStream) -> Self {
        self.header_pattern = header;
        self
    }

    pub fn payload_len(mut self, len: usize) -> Self {
        self.payload_len = len;
        self
    }

    pub fn samples_per_symbol_min(mut self, n: usize) -> Self {
        self.samples_per_symbol_min = n;
        self
    }

    pub fn build(self) -> Result<ChannelConfig, ConfigError> {
        if self.symbol_duration_us == 0 {
            return Err(ConfigError::ZeroSymbolDuration);
        }
        if self.payload_len == 0 {
            return Err(ConfigError::ZeroPayloadLen);
        }
        if self.header_pattern.len() < 8 {
            return Err(ConfigError::ShortHeader(self.header_pattern.len()));
        }
        Ok(ChannelConfig {
            symbol_duration_us: self.symbol_duration_us,
            probe_mode: self.probe_mode,
            decision_rule: self.decision_rule,
            theta_ns: self.theta_ns,
            header_pattern: self.header_pattern,
            payload_len: self.payload_len,
            samples_per_symbol_min: self.samples_per_symbol_min.max(1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_header_layout() {
        let h = default_header();
        assert_eq!(h.to_binary_string(), "101010101010101011110000");
    }

    #[test]
    fn rejects_invalid() {
        assert_eq!(
            ChannelConfig::new(0).unwrap_err(),
            ConfigError::ZeroSymbolDuration
        );
        assert_eq!(
            ChannelConfig::builder().payload_len(0).build().unwrap_err(),
            ConfigError::ZeroPayloadLen
        );
        assert_eq!(
            ChannelConfig::builder()
                .header_pattern("1011".parse().unwrap())
                .build()
                .unwrap_err(),
            ConfigError::ShortHeader(4)
        );
    }

    #[test]
    fn parses_enums() {
        assert_eq!("write".parse::<ProbeMode>(), Ok(ProbeMode::WriteFsync));
        assert_eq!(
            "stddev".parse::<DecisionRule>(),
            Ok(DecisionRule::StddevThreshold)
        );
        assert!("rdtsc".parse::<ProbeMode>().is_err());
    }
}
