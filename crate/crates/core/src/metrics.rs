//! Bit error accounting and binary symmetric channel capacity.

use std::fmt::Write as _;

use thiserror::Error;

use crate::bits::BitStream;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("bit streams differ in length: sent {sent}, received {received}")]
    LengthMismatch { sent: usize, received: usize },
    #[error("error rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("symbol duration must be positive")]
    ZeroSymbolDuration,
}

/// Per-direction flip counts for one transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub n_bits: usize,
    pub ones_sent: usize,
    /// Sent '1' decoded as '0'.
    pub err_1to0: usize,
    /// Sent '0' decoded as '1'.
    pub err_0to1: usize,
}

impl ErrorReport {
    pub fn zeros_sent(&self) -> usize {
        self.n_bits - self.ones_sent
    }

    pub fn errors(&self) -> usize {
        self.err_1to0 + self.err_0to1
    }

    /// Errors over all bits.
    pub fn p(&self) -> f64 {
        ratio(self.errors(), self.n_bits)
    }

    /// 1→0 flips relative to the ones sent.
    pub fn rate_1to0(&self) -> f64 {
        ratio(self.err_1to0, self.ones_sent)
    }

    /// 0→1 flips relative to the zeros sent.
    pub fn rate_0to1(&self) -> f64 {
        ratio(self.err_0to1, self.zeros_sent())
    }

    /// Sums two reports, as for consecutive frames of one run.
    pub fn merge(&self, other: &ErrorReport) -> ErrorReport {
        ErrorReport {
            n_bits: self.n_bits + other.n_bits,
            ones_sent: self.ones_sent + other.ones_sent,
            err_1to0: self.err_1to0 + other.err_1to0,
            err_0to1: self.err_0to1 + other.err_0to1,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compare_bits(sent: &BitStream, received: &BitStream) -> Result<ErrorReport, MetricsError> {
    if sent.len() != received.len() {
        return Err(MetricsError::LengthMismatch {
            sent: sent.len(),
            received: received.len(),
        });
    }
    let mut report = ErrorReport {
        n_bits: sent.len(),
        ones_sent: 0,
        err_1to0: 0,
        err_0to1: 0,
    };
    for (s, r) in sent.iter().zip(received.iter()) {
        report.ones_sent += s as usize;
        match (s, r) {
            (true, false) => report.err_1to0 += 1,
            (false, true) => report.err_0to1 += 1,
            _ => {}
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityResult {
    /// Raw symbol rate, 1/t_s.
    pub bandwidth_bps: f64,
    pub p: f64,
    /// Capacity as reported: zero once p reaches 0.5.
    pub capacity_bps: f64,
    /// B·(1 − H(p)) before the clamp; symmetric about p = 0.5.
    pub raw_capacity_bps: f64,
}

/// Binary entropy in bits, with 0·log(1/0) = 0.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    // (1-p)·log2(1/(1-p)) through ln_1p keeps precision for small p.
    let q_term = if p >= 1.0 {
        0.0
    } else {
        -(1.0 - p) * (-p).ln_1p() / std::f64::consts::LN_2
    };
    term(p) + q_term
}

/// `C = B·[1 − p·log2(1/p) − (1−p)·log2(1/(1−p))]` with `B = 1/t_s`;
/// a channel at or beyond p = 0.5 is reported as carrying nothing.
pub fn capacity(t_s_us: f64, p: f64) -> Result<CapacityResult, MetricsError> {
    if !(t_s_us > 0.0) {
        return Err(MetricsError::ZeroSymbolDuration);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(MetricsError::RateOutOfRange(p));
    }
    let bandwidth = 1e6 / t_s_us;
    let raw = bandwidth * (1.0 - binary_entropy(p));
    let clamped = if p >= 0.5 { 0.0 } else { raw.clamp(0.0, bandwidth) };
    Ok(CapacityResult {
        bandwidth_bps: bandwidth,
        p,
        capacity_bps: clamped,
        raw_capacity_bps: raw,
    })
}

pub const REPORT_HEADER: &str = "t_s_us,n_bits,err_1to0,err_0to1,p,B_bps,C_bps";

/// One report row in the `REPORT_HEADER` column order.
pub fn report_row(t_s_us: u64, report: &ErrorReport) -> String {
    let cap = capacity(t_s_us as f64, report.p()).expect("p is a valid rate");
    let mut row = String::new();
    write!(
        row,
        "{},{},{},{},{:.6},{:.3},{:.3}",
        t_s_us,
        report.n_bits,
        report.err_1to0,
        report.err_0to1,
        report.p(),
        cap.bandwidth_bps,
        cap.capacity_bps
    )
    .unwrap();
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_streams() {
        let b = BitStream::prbs(1, 8000);
        let r = compare_bits(&b, &b).unwrap();
        assert_eq!(r.p(), 0.0);
        assert_eq!(r.errors(), 0);
    }

    #[test]
    fn single_one_to_zero_flip() {
        let sent = BitStream::prbs(2, 8000);
        let first_one = sent.iter().position(|b| b).unwrap();
        let mut recv = sent.clone();
        recv.flip(first_one);
        let r = compare_bits(&sent, &recv).unwrap();
        assert_eq!((r.err_1to0, r.err_0to1), (1, 0));
        assert_eq!(r.p(), 1.0 / 8000.0);
        assert_eq!(r.rate_1to0(), 1.0 / sent.count_ones() as f64);
        assert_eq!(r.rate_0to1(), 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            compare_bits(&BitStream::zeros(3), &BitStream::zeros(4)),
            Err(MetricsError::LengthMismatch { sent: 3, received: 4 })
        );
    }

    #[test]
    fn random_pair_matches_positional_diff() {
        let a = BitStream::prbs(5, 10_000);
        let b = BitStream::prbs(6, 10_000);
        let r = compare_bits(&a, &b).unwrap();
        let diff = (0..10_000).filter(|&i| a.get(i) != b.get(i)).count();
        assert_eq!(r.errors(), diff);
        assert_eq!(r.p() * 10_000.0, diff as f64);
    }

    #[test]
    fn capacity_limits() {
        let c = capacity(50.0, 0.0).unwrap();
        assert_eq!(c.bandwidth_bps, 20_000.0);
        assert_eq!(c.capacity_bps, 20_000.0);
        assert_eq!(capacity(50.0, 0.5).unwrap().capacity_bps, 0.0);
        assert_eq!(capacity(50.0, 1.0).unwrap().capacity_bps, 0.0);
        assert_eq!(capacity(50.0, 1.0).unwrap().raw_capacity_bps, 20_000.0);
        assert_eq!(capacity(50.0, 0.8).unwrap().capacity_bps, 0.0);
        assert!(capacity(50.0, 1.5).is_err());
        assert!(capacity(50.0, -0.1).is_err());
        assert!(capacity(0.0, 0.1).is_err());
    }

    #[test]
    fn capacity_decreases_on_lower_half() {
        let mut prev = f64::INFINITY;
        for i in 0..=5000 {
            let c = capacity(50.0, i as f64 / 10_000.0).unwrap().capacity_bps;
            assert!(c < prev || (i == 5000 && c == 0.0), "p={}", i);
            prev = c;
        }
    }

    #[test]
    fn report_row_format() {
        let r = ErrorReport {
            n_bits: 80_000,
            ones_sent: 40_000,
            err_1to0: 160,
            err_0to1: 172,
        };
        assert_eq!(
            report_row(50, &r),
            "50,80000,160,172,0.004150,20000.000,19223.753"
        );
    }

    proptest! {
        #[test]
        fn entropy_symmetry(p in 0.0f64..=1.0) {
            let a = capacity(50.0, p).unwrap().raw_capacity_bps;
            let b = capacity(50.0, 1.0 - p).unwrap().raw_capacity_bps;
            prop_assert!((a - b).abs() <= 1e-9 * 20_000.0);
        }

        #[test]
        fn capacity_bounded(p in 0.0f64..=1.0, ts in 1.0f64..5000.0) {
            let c = capacity(ts, p).unwrap();
            prop_assert!(c.capacity_bps >= 0.0 && c.capacity_bps <= c.bandwidth_bps);
        }
    }
}
