//! Secret message codec: bit strings, keyed placement onto the secret-feature
//! grid, texture binding and the sign decision rule.
//!
//! A bit `b` is written as `+1` (b = 1) or `-1` (b = 0) at cell `perm[i]` of an
//! `[h, w, c]` grid, where `perm` is a permutation of all cells derived from the
//! stego key. Unused cells hold 0. Decoding reads the same cells back and maps
//! strictly positive values to 1, everything else to 0.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylestego_nn::{Graph, Tensor, Var};

use crate::error::{Result, StegoError};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<bool>,
}

impl BitMessage {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(StegoError::Message("a message needs at least one bit".into()));
        }
        Ok(Self { bits })
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..len).map(|_| rng.random::<bool>()).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Fraction of positions where `self` and `other` agree.
    pub fn accuracy(&self, other: &BitMessage) -> f64 {
        let n = self.len().max(other.len());
        let hits = self.bits.iter().zip(&other.bits).filter(|(a, b)| a == b).count();
        hits as f64 / n as f64
    }

    pub fn to_bit_text(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Lowercase hex, most significant bit first, zero-padded to whole nibbles.
    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|nib| {
                let v = nib.iter().enumerate().fold(0u32, |acc, (i, &b)| acc | ((b as u32) << (3 - i)));
                char::from_digit(v, 16).expect("nibble")
            })
            .collect()
    }

    /// Parses hex digits; `len` truncates the padded nibble expansion.
    pub fn from_hex(text: &str, len: Option<usize>) -> Result<Self> {
        let mut bits = Vec::with_capacity(text.len() * 4);
        for ch in text.chars().filter(|c| !c.is_whitespace()) {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| StegoError::Message(format!("`{ch}` is not a hex digit")))?;
            bits.extend((0..4).rev().map(|i| (v >> i) & 1 == 1));
        }
        if let Some(len) = len {
            if len > bits.len() {
                return Err(StegoError::Message(format!(
                    "requested {len} bits but the hex string only holds {}",
                    bits.len()
                )));
            }
            bits.truncate(len);
        }
        Self::new(bits)
    }

    pub fn from_bit_text(text: &str) -> Result<Self> {
        let bits = text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(StegoError::Message(format!("`{other}` is not a bit"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    /// Reads the message file format: `hex:<digits>` / `0x<digits>` for hex,
    /// otherwise a string of `0`/`1` characters (whitespace ignored).
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if let Some(hex) = t.strip_prefix("hex:").or_else(|| t.strip_prefix("0x")) {
            Self::from_hex(hex, None)
        } else {
            Self::from_bit_text(t)
        }
    }
}

impl fmt::Debug for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitMessage({} bits: {})", self.len(), self.to_hex())
    }
}

/// Shape of the secret-feature grid `[h, w, c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SecretGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl SecretGrid {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn capacity(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }

    fn check(&self, bits: usize) -> Result<()> {
        if bits == 0 {
            return Err(StegoError::Message("a message needs at least one bit".into()));
        }
        if bits > self.capacity() {
            return Err(StegoError::Capacity { bits, capacity: self.capacity(), grid: self.to_string() });
        }
        Ok(())
    }
}

impl fmt::Display for SecretGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{} grid", self.h, self.w, self.c)
    }
}

/// Cells assigned to the first `len` bits under `key`.
pub fn placement(grid: SecretGrid, key: u64, len: usize) -> Result<Vec<usize>> {
    grid.check(len)?;
    let mut cells: Vec<usize> = (0..grid.capacity()).collect();
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    cells.truncate(len);
    Ok(cells)
}

/// Message laid out on the secret grid, with the cell list kept for decoding
/// and loss computation.
#[derive(Clone, Debug)]
pub struct SecretFeature {
    pub grid: SecretGrid,
    /// `[h, w, c]` tensor with `+1`/`-1` at placed cells, 0 elsewhere.
    pub matrix: Tensor,
    /// Flat index of the cell carrying bit `i`.
    pub cells: Vec<usize>,
}

impl SecretFeature {
    /// The `+1`/`-1` targets in bit order.
    pub fn targets(&self) -> Vec<f64> {
        self.cells.iter().map(|&i| self.matrix.data()[i]).collect()
    }

    /// Recovers the message from the mapped matrix itself.
    pub fn unmap(&self) -> BitMessage {
        let bits = self.cells.iter().map(|&i| self.matrix.data()[i] > 0.0).collect();
        BitMessage { bits }
    }
}

pub fn map_bits(msg: &BitMessage, grid: SecretGrid, key: u64) -> Result<SecretFeature> {
    let cells = placement(grid, key, msg.len())?;
    let mut matrix = Tensor::zeros(&grid.shape());
    for (&cell, &bit) in cells.iter().zip(msg.bits()) {
        matrix.data_mut()[cell] = if bit { 1.0 } else { -1.0 };
    }
    Ok(SecretFeature { grid, matrix, cells })
}

/// Binds the secret matrix to the content feature by elementwise product.
pub fn bind(g: &mut Graph, secret: Var, content: Var) -> Result<Var> {
    if g.shape(secret) != g.shape(content) {
        return Err(StegoError::Shape(format!(
            "bind: secret matrix {:?} and content feature {:?} differ",
            g.shape(secret),
            g.shape(content)
        )));
    }
    Ok(g.mul(secret, content)?)
}

/// Bit `i` is 1 iff `raw[perm[i]] > 0`; zeros decode as 0.
pub fn decide_bits(raw: &Tensor, grid: SecretGrid, key: u64, len: usize) -> Result<BitMessage> {
    if raw.shape() != grid.shape() {
        return Err(StegoError::Shape(format!(
            "decoder output {:?} does not match the {grid}",
            raw.shape()
        )));
    }
    let cells = placement(grid, key, len)?;
    BitMessage::new(cells.iter().map(|&i| raw.data()[i] > 0.0).collect())
}
