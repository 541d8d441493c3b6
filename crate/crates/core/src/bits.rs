//! Bit sequences and their text encodings.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitParseError {
    #[error("invalid binary digit {0:?} at position {1}")]
    Binary(char, usize),
    #[error("invalid hex digit {0:?} at position {1}")]
    Hex(char, usize),
    #[error("bit length {len} exceeds the {avail} bits carried by the hex digits")]
    HexLength { len: usize, avail: usize },
}

/// An ordered sequence of bits.
///
/// Stored one bit per `bool`; payloads in this crate are at most a few
/// hundred thousand bits so packing is not worth the indexing cost.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitStream {
    bits: Vec<bool>,
}

impl BitStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        self.bits.get(i).copied()
    }

    pub fn push(&mut self, bit: bool) {
        self.bits.push(bit);
    }

    pub fn extend_from(&mut self, other: &BitStream) {
        self.bits.extend_from_slice(&other.bits);
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        self.bits.iter().copied()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Copy of `len` bits starting at `start`, clipped to the stream end.
    pub fn slice(&self, start: usize, len: usize) -> BitStream {
        let end = (start + len).min(self.bits.len());
        let start = start.min(end);
        Self::from(&self.bits[start..end])
    }

    pub fn truncate(&mut self, len: usize) {
        self.bits.truncate(len);
    }

    pub fn flip(&mut self, i: usize) {
        self.bits[i] = !self.bits[i];
    }

    /// Pseudo-random bit sequence derived from `seed`.
    ///
    /// Sender and checker regenerate the same payload from the seed alone.
    pub fn prbs(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4253_0000_0000);
        Self {
            bits: (0..len).map(|_| rng.random::<bool>()).collect(),
        }
    }

    /// Binary text form, one `0`/`1` character per bit.
    pub fn to_binary_string(&self) -> String {
        self.bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
    }

    /// Parses a `0`/`1` string. ASCII whitespace and `_` separators are skipped.
    pub fn from_binary_str(s: &str) -> Result<Self, BitParseError> {
        let mut bits = Vec::with_capacity(s.len());
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                '_' => {}
                c if c.is_ascii_whitespace() => {}
                c => return Err(BitParseError::Binary(c, i)),
            }
        }
        Ok(Self { bits })
    }

    /// MSB-first hex. The final nibble is zero-padded; the bit length must be
    /// carried separately to decode exactly.
    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|chunk| {
                let mut nibble = 0u32;
                for (i, b) in chunk.iter().enumerate() {
                    if *b {
                        nibble |= 1 << (3 - i);
                    }
                }
                char::from_digit(nibble, 16).unwrap()
            })
            .collect()
    }

    pub fn from_hex(s: &str, len: usize) -> Result<Self, BitParseError> {
        let mut bits = Vec::with_capacity(s.len() * 4);
        for (i, c) in s.chars().enumerate() {
            let nibble = c.to_digit(16).ok_or(BitParseError::Hex(c, i))?;
            for shift in (0..4).rev() {
                bits.push(nibble >> shift & 1 == 1);
            }
        }
        if len > bits.len() {
            return Err(BitParseError::HexLength {
                len,
                avail: bits.len(),
            });
        }
        bits.truncate(len);
        Ok(Self { bits })
    }

    /// MSB-first bytes to bits.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut bits = Vec::with_capacity(bytes.len() * 8);
        for byte in bytes {
            for shift in (0..8).rev() {
                bits.push(byte >> shift & 1 == 1);
            }
        }
        Self { bits }
    }

    /// MSB-first bits to bytes; a trailing partial byte is zero-padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, b)| acc | ((*b as u8) << (7 - i)))
            })
            .collect()
    }

    /// Number of positions where `self` and `other` differ, over the shorter length.
    pub fn hamming(&self, other: &BitStream) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

impl From<Vec<bool>> for BitStream {
    fn from(bits: Vec<bool>) -> Self {
        Self { bits }
    }
}

impl From<&[bool]> for BitStream {
    fn from(bits: &[bool]) -> Self {
        Self {
            bits: bits.to_vec(),
        }
    }
}

impl FromIterator<bool> for BitStream {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self {
            bits: iter.into_iter().collect(),
        }
    }
}

impl FromStr for BitStream {
    type Err = BitParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_binary_str(s)
    }
}

impl fmt::Display for BitStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_binary_string())
    }
}

impl fmt::Debug for BitStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.bits.len() <= 64 {
            write!(f, "BitStream({})", self.to_binary_string())
        } else {
            write!(
                f,
                "BitStream({}.. len={})",
                self.slice(0, 32).to_binary_string(),
                self.bits.len()
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binary_text() {
        let b: BitStream = "1010_1100 1".parse().unwrap();
        assert_eq!(b.len(), 9);
        assert_eq!(b.to_binary_string(), "101011001");
        assert_eq!(
            "10x".parse::<BitStream>(),
            Err(BitParseError::Binary('x', 2))
        );
    }

    #[test]
    fn hex_pads_final_nibble() {
        let b: BitStream = "101".parse().unwrap();
        assert_eq!(b.to_hex(), "a");
        assert_eq!(BitStream::from_hex("a", 3).unwrap(), b);
        assert!(BitStream::from_hex("a", 5).is_err());
    }

    #[test]
    fn prbs_is_seeded() {
        assert_eq!(BitStream::prbs(7, 1000), BitStream::prbs(7, 1000));
        assert_ne!(BitStream::prbs(7, 1000), BitStream::prbs(8, 1000));
        let ones = BitStream::prbs(1, 100_000).count_ones();
        assert!((49_000..51_000).contains(&ones));
    }

    proptest! {
        #[test]
        fn text_encodings_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let b = BitStream::from(bits);
            prop_assert_eq!(&BitStream::from_hex(&b.to_hex(), b.len()).unwrap(), &b);
            prop_assert_eq!(&b.to_binary_string().parse::<BitStream>().unwrap(), &b);
            let mut via_bytes = BitStream::from_bytes(&b.to_bytes());
            via_bytes.truncate(b.len());
            prop_assert_eq!(via_bytes, b);
        }
    }
}
