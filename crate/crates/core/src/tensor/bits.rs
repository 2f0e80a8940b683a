//! Bit-packed Boolean matrices.
//!
//! Layout: row-major, one row per run of `u64` words, LSB-first inside each
//! word, bit `1 ↔ TRUE (+1)` and bit `0 ↔ FALSE (−1)`. Every row starts on a
//! word boundary and the padding bits past `cols` are always zero. Serialized
//! words are little-endian, so the first byte of a row holds columns 0..8.

use super::DenseMatrix;
use crate::logic::BoolWeight;
use crate::{Error, Result};

const WORD_BITS: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BitMatrix {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows.min(16) {
            let line: String = (0..self.cols.min(64))
                .map(|c| if self.get(r, c).0 { '+' } else { '-' })
                .collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

#[inline]
fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

/// Flips the sign bit of `x` when `bit` is 0, so `x` becomes `e(w)·x`
/// without a multiplication.
#[inline(always)]
fn signed(x: f64, bit: u64) -> f64 {
    f64::from_bits(x.to_bits() ^ ((!bit & 1) << 63))
}

impl BitMatrix {
    /// All-FALSE matrix.
    pub fn new_false(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    /// All-TRUE matrix.
    pub fn new_true(rows: usize, cols: usize) -> Self {
        let mut m = Self::new_false(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, BoolWeight::TRUE);
            }
        }
        m
    }

    /// Packs a matrix whose entries are exactly `+1` or `−1`.
    pub fn pack(signs: &DenseMatrix) -> Result<Self> {
        let mut m = Self::new_false(signs.rows(), signs.cols());
        for r in 0..signs.rows() {
            for (c, &x) in signs.row(r).iter().enumerate() {
                if x == 1.0 {
                    m.set(r, c, BoolWeight::TRUE);
                } else if x != -1.0 {
                    return Err(Error::invalid(format!(
                        "pack expects ±1 entries, found {x} at ({r}, {c})"
                    )));
                }
            }
        }
        Ok(m)
    }

    /// `sign(W)` with `sign(0) = TRUE`.
    pub fn from_signs(w: &DenseMatrix) -> Self {
        let mut m = Self::new_false(w.rows(), w.cols());
        for r in 0..w.rows() {
            for (c, &x) in w.row(r).iter().enumerate() {
                if x >= 0.0 {
                    m.set(r, c, BoolWeight::TRUE);
                }
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new_false(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    m.set(r, c, BoolWeight::TRUE);
                }
            }
        }
        m
    }

    /// The ±1 embedding as a dense matrix.
    pub fn unpack(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c).embed())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> BoolWeight {
        debug_assert!(r < self.rows && c < self.cols);
        let w = self.words[r * self.words_per_row + c / WORD_BITS];
        BoolWeight((w >> (c % WORD_BITS)) & 1 == 1)
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: BoolWeight) {
        debug_assert!(r < self.rows && c < self.cols);
        let word = &mut self.words[r * self.words_per_row + c / WORD_BITS];
        let mask = 1u64 << (c % WORD_BITS);
        if v.0 {
            *word |= mask;
        } else {
            *word &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, r: usize, c: usize) {
        debug_assert!(r < self.rows && c < self.cols);
        self.words[r * self.words_per_row + c / WORD_BITS] ^= 1u64 << (c % WORD_BITS);
    }

    pub fn count_true_in_row(&self, r: usize) -> usize {
        self.row_words(r)
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn count_true(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Packed payload size in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.words.len() * 8
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    /// Inverse of [`BitMatrix::to_le_bytes`]; rejects wrong lengths and
    /// nonzero padding bits.
    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let words_per_row = words_for(cols);
        let expected = rows * words_per_row * 8;
        if bytes.len() != expected {
            return Err(Error::shape(
                "BitMatrix::from_le_bytes",
                expected,
                bytes.len(),
            ));
        }
        let words: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Self {
            rows,
            cols,
            words_per_row,
            words,
        };
        if !m.padding_is_zero() {
            return Err(Error::invalid("BitMatrix padding bits are not zero"));
        }
        Ok(m)
    }

    pub fn padding_is_zero(&self) -> bool {
        let tail = self.cols % WORD_BITS;
        if tail == 0 || self.words_per_row == 0 {
            return true;
        }
        let mask = !((1u64 << tail) - 1);
        (0..self.rows).all(|r| self.words[(r + 1) * self.words_per_row - 1] & mask == 0)
    }
}

/// `Y[k, j] = Σ_i e(W[j, i]) · X[k, i]` for `X: b×n`, `W: m×n`.
///
/// Only sign-conditioned additions are performed; the accumulation runs over
/// `i = 0..n` in ascending order, so the result is bit-identical to
/// `matmul_dense(X, W.unpack())`.
pub fn matmul_bool(x: &DenseMatrix, w: &BitMatrix) -> Result<DenseMatrix> {
    if x.cols() != w.cols() {
        return Err(Error::shape("matmul_bool", w.cols(), x.cols()));
    }
    let n = w.cols();
    let mut out = DenseMatrix::zeros(x.rows(), w.rows());
    for k in 0..x.rows() {
        let xr = x.row(k);
        let dst = out.row_mut(k);
        for (j, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (wi, &word) in w.row_words(j).iter().enumerate() {
                let base = wi * WORD_BITS;
                let end = (base + WORD_BITS).min(n);
                let mut bits = word;
                for &xv in &xr[base..end] {
                    acc += signed(xv, bits);
                    bits >>= 1;
                }
            }
            *d = acc;
        }
    }
    Ok(out)
}

/// `Y[k, i] = Σ_j e(W[j, i]) · Z[k, j]` for `Z: b×m`, `W: m×n`, i.e. `Z · e(W)`.
///
/// Accumulates over `j = 0..m` in ascending order, matching
/// `matmul_nn(Z, W.unpack())` bit for bit.
pub fn matmul_bool_t(z: &DenseMatrix, w: &BitMatrix) -> Result<DenseMatrix> {
    if z.cols() != w.rows() {
        return Err(Error::shape("matmul_bool_t", w.rows(), z.cols()));
    }
    let n = w.cols();
    let mut out = DenseMatrix::zeros(z.rows(), n);
    for k in 0..z.rows() {
        let zr = z.row(k);
        let dst = out.row_mut(k);
        for (j, &zv) in zr.iter().enumerate() {
            for (wi, &word) in w.row_words(j).iter().enumerate() {
                let base = wi * WORD_BITS;
                let end = (base + WORD_BITS).min(n);
                let mut bits = word;
                for d in &mut dst[base..end] {
                    *d += signed(zv, bits);
                    bits >>= 1;
                }
            }
        }
    }
    Ok(out)
}
