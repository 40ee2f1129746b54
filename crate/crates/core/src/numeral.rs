//! Binary number codec and bitwise embeddings.
//!
//! Bits are stored least-significant first: bit `i` carries weight `2^i`.
//! The start token is the number 0 (its embedding is the zero vector) and
//! the end token `e` doubles as infinity. It has its own learned vector.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumeralError {
    #[error("value {value} does not fit in {width} bits")]
    OutOfRange { value: u64, width: u32 },
    #[error("width mismatch: word has {word} bits, table has {table}")]
    WidthMismatch { word: u32, table: u32 },
    #[error("index {index} outside an alphabet of {size}")]
    OutsideAlphabet { index: usize, size: usize },
    #[error("embedding table must have width + 1 rows, got shape {0:?}")]
    BadTable(Vec<usize>),
}

/// A symbol of every task: an unsigned number or the end token (= ∞).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Num(u64),
    End,
}

impl Token {
    pub fn is_end(self) -> bool {
        matches!(self, Token::End)
    }

    pub fn num(self) -> Option<u64> {
        match self {
            Token::Num(v) => Some(v),
            Token::End => None,
        }
    }

    /// Index in the `2^width + 1` alphabet; the end token is last.
    pub fn alphabet_index(self, width: u32) -> usize {
        match self {
            Token::Num(v) => v as usize,
            Token::End => 1usize << width,
        }
    }

    pub fn from_alphabet_index(index: usize, width: u32) -> Token {
        if index >= 1usize << width {
            Token::End
        } else {
            Token::Num(index as u64)
        }
    }

    /// Ordering in which `e` is larger than every number.
    pub fn key(self) -> u64 {
        match self {
            Token::Num(v) => v,
            Token::End => u64::MAX,
        }
    }
}

impl PartialOrd for Token {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Token {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(v) => write!(f, "{v}"),
            Token::End => f.write_str("e"),
        }
    }
}

// Numbers serialize as JSON integers and the end token as the string "e".
impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Token::Num(v) => s.serialize_u64(*v),
            Token::End => s.serialize_str("e"),
        }
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(v) => Ok(Token::Num(v)),
            Raw::S(s) if s == "e" => Ok(Token::End),
            Raw::S(s) => Err(serde::de::Error::custom(format!("unknown token {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordKind {
    Number,
    End,
}

/// An n-bit binary word, or the end token at that width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitWord {
    width: u32,
    bits: u64,
    kind: WordKind,
}

impl BitWord {
    pub fn end(width: u32) -> Self {
        Self { width, bits: 0, kind: WordKind::End }
    }

    pub fn from_token(token: Token, width: u32) -> Result<Self, NumeralError> {
        match token {
            Token::Num(v) => encode_uint(v, width),
            Token::End => Ok(Self::end(width)),
        }
    }

    /// Builds a number word from LSB-first bits.
    pub fn from_bits(bits: &[bool]) -> Self {
        let value = bits.iter().enumerate().fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i));
        Self { width: bits.len() as u32, bits: value, kind: WordKind::Number }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn kind(&self) -> WordKind {
        self.kind
    }

    pub fn bit(&self, i: u32) -> bool {
        (self.bits >> i) & 1 == 1
    }

    /// LSB-first bits; all zero for the end token.
    pub fn bits(&self) -> Vec<bool> {
        (0..self.width).map(|i| self.bit(i)).collect()
    }

    /// `width` bit features followed by the end flag.
    pub fn features(&self) -> Vec<f64> {
        let mut f: Vec<f64> = (0..self.width).map(|i| self.bit(i) as u8 as f64).collect();
        f.push(if self.kind == WordKind::End { 1.0 } else { 0.0 });
        f
    }
}

pub fn encode_uint(value: u64, width: u32) -> Result<BitWord, NumeralError> {
    if width >= 64 || value >= 1u64 << width {
        return Err(NumeralError::OutOfRange { value, width });
    }
    Ok(BitWord { width, bits: value, kind: WordKind::Number })
}

pub fn decode_bits(word: &BitWord) -> Token {
    match word.kind {
        WordKind::Number => Token::Num(word.bits),
        WordKind::End => Token::End,
    }
}

/// Per-bit vectors `v_0..v_{n-1}` plus the end-token vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    width: u32,
    dim: usize,
    /// `width + 1` rows of length `dim`; the last row embeds `e`.
    rows: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(width: u32, dim: usize, rows: Vec<f64>) -> Result<Self, NumeralError> {
        if rows.len() != (width as usize + 1) * dim {
            return Err(NumeralError::BadTable(vec![rows.len() / dim.max(1), dim]));
        }
        Ok(Self { width, dim, rows })
    }

    /// Reads a `[width + 1, dim]` parameter tensor.
    pub fn from_tensor(width: u32, t: &Tensor) -> Result<Self, NumeralError> {
        let sh = t.shape();
        if sh.len() != 2 || sh[0] != width as usize + 1 {
            return Err(NumeralError::BadTable(sh.to_vec()));
        }
        Self::new(width, sh[1], t.data().to_vec())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bit_vector(&self, i: u32) -> &[f64] {
        let i = i as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn end_vector(&self) -> &[f64] {
        self.bit_vector(self.width)
    }
}

/// `emb(x) = sum_i x_i v_i`; the end token maps to its own vector.
pub fn embed(word: &BitWord, table: &EmbeddingTable) -> Result<Vec<f64>, NumeralError> {
    if word.width != table.width {
        return Err(NumeralError::WidthMismatch { word: word.width, table: table.width });
    }
    if word.kind == WordKind::End {
        return Ok(table.end_vector().to_vec());
    }
    let mut out = vec![0.0; table.dim];
    for i in (0..word.width).filter(|&i| word.bit(i)) {
        for (o, v) in out.iter_mut().zip(table.bit_vector(i)) {
            *o += v;
        }
    }
    Ok(out)
}

pub fn one_hot_encode(index: usize, alphabet_size: usize) -> Result<Vec<f64>, NumeralError> {
    if index >= alphabet_size {
        return Err(NumeralError::OutsideAlphabet { index, size: alphabet_size });
    }
    let mut v = vec![0.0; alphabet_size];
    v[index] = 1.0;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(width: u32, dim: usize) -> EmbeddingTable {
        let rows = (0..(width as usize + 1) * dim).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        EmbeddingTable::new(width, dim, rows).unwrap()
    }

    #[test]
    fn encodes_lsb_first() {
        assert_eq!(
            encode_uint(9, 8).unwrap().bits(),
            vec![true, false, false, true, false, false, false, false]
        );
        assert!(encode_uint(0, 8).unwrap().bits().iter().all(|b| !b));
        assert!(encode_uint(255, 8).unwrap().bits().iter().all(|&b| b));
        assert!(encode_uint(256, 8).is_err());
    }

    #[test]
    fn decodes() {
        let w = BitWord::from_bits(&[true, false, false, true, false, false, false, false]);
        assert_eq!(decode_bits(&w), Token::Num(9));
        assert_eq!(decode_bits(&BitWord::end(8)), Token::End);
    }

    #[test]
    fn exhaustive_round_trip() {
        for width in [8, 12] {
            for v in 0..(1u64 << width) {
                assert_eq!(decode_bits(&encode_uint(v, width).unwrap()), Token::Num(v));
            }
        }
    }

    #[test]
    fn embedding_of_nine_sums_bits_zero_and_three() {
        let t = table(8, 5);
        let got = embed(&encode_uint(9, 8).unwrap(), &t).unwrap();
        for j in 0..5 {
            assert_eq!(got[j], t.bit_vector(0)[j] + t.bit_vector(3)[j]);
        }
    }

    #[test]
    fn start_token_embeds_to_zero() {
        let t = table(8, 4);
        assert_eq!(embed(&encode_uint(0, 8).unwrap(), &t).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn end_token_uses_its_own_vector() {
        let t = table(8, 4);
        assert_eq!(embed(&BitWord::end(8), &t).unwrap(), t.end_vector());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let t = table(8, 4);
        assert!(embed(&encode_uint(3, 12).unwrap(), &t).is_err());
    }

    #[test]
    fn one_hot() {
        assert_eq!(one_hot_encode(0, 257).unwrap()[0], 1.0);
        let e = one_hot_encode(Token::End.alphabet_index(8), 257).unwrap();
        assert_eq!(e[256], 1.0);
        assert!(one_hot_encode(257, 257).is_err());
    }

    #[test]
    fn token_json() {
        let toks = vec![Token::Num(5), Token::End];
        let s = serde_json::to_string(&toks).unwrap();
        assert_eq!(s, r#"[5,"e"]"#);
        assert_eq!(serde_json::from_str::<Vec<Token>>(&s).unwrap(), toks);
        assert!(Token::End > Token::Num(255));
    }

    proptest! {
        #[test]
        fn embed_is_linear_over_disjoint_bits(a in 0u64..256, b in 0u64..256) {
            let b = b & !a;
            let t = table(8, 6);
            let ea = embed(&encode_uint(a, 8).unwrap(), &t).unwrap();
            let eb = embed(&encode_uint(b, 8).unwrap(), &t).unwrap();
            let eab = embed(&encode_uint(a | b, 8).unwrap(), &t).unwrap();
            for j in 0..6 {
                prop_assert!((ea[j] + eb[j] - eab[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn embed_matches_matrix_product(v in 0u64..4096) {
            let t = table(12, 3);
            let w = encode_uint(v, 12).unwrap();
            let got = embed(&w, &t).unwrap();
            let f = w.features();
            for j in 0..3 {
                let mv: f64 = (0..13).map(|i| f[i] * t.rows[i * 3 + j]).sum();
                prop_assert!((got[j] - mv).abs() < 1e-12);
            }
        }

        #[test]
        fn one_hot_sums_to_one(i in 0usize..257) {
            prop_assert_eq!(one_hot_encode(i, 257).unwrap().iter().sum::<f64>(), 1.0);
        }
    }
}
