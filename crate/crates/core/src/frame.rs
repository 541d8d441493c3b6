//! Header-delimited frames and header search.

use crate::bits::BitStream;
use crate::config::ChannelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: BitStream,
    pub payload: BitStream,
}

impl Frame {
    /// Header followed by payload, in transmission order.
    pub fn to_bits(&self) -> BitStream {
        let mut bits = self.header.clone();
        bits.extend_from(&self.payload);
        bits
    }
}

/// Splits `payload_bits` into `payload_len` chunks, zero-pads the last one
/// and prefixes each with the configured header.
///
/// The original bit count is not recorded; callers trim with [`decode_frames`].
pub fn encode_frames(payload_bits: &BitStream, cfg: &ChannelConfig) -> Vec<Frame> {
    let p = cfg.payload_len();
    payload_bits
        .as_slice()
        .chunks(p)
        .map(|chunk| {
            let mut payload = BitStream::from(chunk);
            for _ in chunk.len()..p {
                payload.push(false);
            }
            Frame {
                header: cfg.header_pattern().clone(),
                payload,
            }
        })
        .collect()
}

/// Concatenates frame payloads and trims the padding back to `original_len`.
pub fn decode_frames(frames: &[Frame], original_len: usize) -> BitStream {
    let mut out = BitStream::new();
    for f in frames {
        out.extend_from(&f.payload);
    }
    out.truncate(original_len);
    out
}

/// All frames back to back, as the sender transmits them.
pub fn frames_to_bits(frames: &[Frame]) -> BitStream {
    let mut out = BitStream::new();
    for f in frames {
        out.extend_from(&f.to_bits());
    }
    out
}

/// Smallest offset where `header` matches `bits` with at most
/// `max_mismatches` differing positions.
pub fn find_frame_start(bits: &BitStream, header: &BitStream, max_mismatches: usize) -> Option<usize> {
    find_frame_start_from(bits, header, max_mismatches, 0)
}

/// As [`find_frame_start`], scanning offsets `from..`.
pub fn find_frame_start_from(
    bits: &BitStream,
    header: &BitStream,
    max_mismatches: usize,
    from: usize,
) -> Option<usize> {
    let (b, h) = (bits.as_slice(), header.as_slice());
    if h.len() > b.len() {
        return None;
    }
    (from..=b.len() - h.len()).find(|&off| {
        let mut mismatches = 0;
        for (x, y) in b[off..off + h.len()].iter().zip(h) {
            if x != y {
                mismatches += 1;
                if mismatches > max_mismatches {
                    return false;
                }
            }
        }
        true
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(p: usize) -> ChannelConfig {
        ChannelConfig::builder().payload_len(p).build().unwrap()
    }

    // Independent reference: compare every window position by position.
    fn naive_scan(bits: &[bool], header: &[bool]) -> Option<usize> {
        if header.len() > bits.len() {
            return None;
        }
        (0..=bits.len() - header.len()).find(|&i| bits[i..i + header.len()] == *header)
    }

    #[test]
    fn exact_fit_is_one_frame() {
        let c = cfg(16);
        let frames = encode_frames(&BitStream::prbs(1, 16), &c);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].payload, BitStream::prbs(1, 16));
    }

    #[test]
    fn one_over_pads_second_frame() {
        let c = cfg(16);
        let payload = BitStream::prbs(2, 17);
        let frames = encode_frames(&payload, &c);
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].payload.get(0), payload.get(16));
        assert_eq!(frames[1].payload.slice(1, 15), BitStream::zeros(15));
        assert!(frames.iter().all(|f| f.header == *c.header_pattern()));
    }

    #[test]
    fn default_frame_carries_8000_bits() {
        let c = ChannelConfig::default();
        let frames = encode_frames(&BitStream::prbs(3, 8000), &c);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].payload.len(), 8000);
        assert_eq!(frames[0].to_bits().len(), 8024);
    }

    #[test]
    fn header_at_zero() {
        let c = ChannelConfig::default();
        let mut bits = c.header_pattern().clone();
        bits.extend_from(&BitStream::prbs(4, 100));
        assert_eq!(find_frame_start(&bits, c.header_pattern(), 0), Some(0));
    }

    #[test]
    fn header_after_prefix_matches_naive() {
        let header = ChannelConfig::default().header_pattern().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut bits: BitStream = (0..5).map(|_| rng.random::<bool>()).collect();
            bits.extend_from(&header);
            bits.extend_from(&BitStream::prbs(rng.random(), 64));
            let got = find_frame_start(&bits, &header, 0);
            assert_eq!(got, naive_scan(bits.as_slice(), header.as_slice()));
            assert!(got.unwrap() <= 5);
        }
        // This prefix cannot start an earlier header occurrence.
        let mut bits: BitStream = "00000".parse().unwrap();
        bits.extend_from(&header);
        assert_eq!(find_frame_start(&bits, &header, 0), Some(5));
    }

    #[test]
    fn single_flip_with_tolerance() {
        let header = ChannelConfig::default().header_pattern().clone();
        let mut bits: BitStream = "0000000000".parse().unwrap();
        let mut flipped = header.clone();
        flipped.flip(20);
        bits.extend_from(&flipped);
        bits.extend_from(&BitStream::zeros(40));
        assert_eq!(find_frame_start(&bits, &header, 0), None);
        // Brute force: mismatch count of each window.
        let first = (0..=bits.len() - header.len())
            .find(|&i| bits.slice(i, header.len()).hamming(&header) <= 1);
        assert_eq!(first, Some(10));
        assert_eq!(find_frame_start(&bits, &header, 1), Some(10));
    }

    #[test]
    fn header_longer_than_input() {
        let header = ChannelConfig::default().header_pattern().clone();
        assert_eq!(find_frame_start(&BitStream::zeros(3), &header, 0), None);
    }

    proptest! {
        #[test]
        fn codec_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..200), p in 1usize..64) {
            let payload = BitStream::from(bits);
            let c = cfg(p);
            let frames = encode_frames(&payload, &c);
            prop_assert_eq!(frames.len(), payload.len().div_ceil(p));
            prop_assert!(frames.iter().all(|f| f.payload.len() == p));
            prop_assert_eq!(decode_frames(&frames, payload.len()), payload);
        }

        #[test]
        fn exact_search_matches_naive(
            bits in proptest::collection::vec(any::<bool>(), 0..120),
            header in proptest::collection::vec(any::<bool>(), 1..10),
        ) {
            let got = find_frame_start(&BitStream::from(bits.clone()), &BitStream::from(header.clone()), 0);
            prop_assert_eq!(got, naive_scan(&bits, &header));
        }
    }
}
