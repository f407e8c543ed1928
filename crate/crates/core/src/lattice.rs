//! Alignment-lattice data model.
//!
//! A lattice for one utterance holds two dense row-major grids of
//! log-probabilities: `y(t, u)` for emitting token `u` from node `(t, u)`
//! (shape `T x U`) and `blank(t, u)` for advancing one frame from node
//! `(t, u)` (shape `T x (U + 1)`).

use std::fmt::Write as _;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Dense row-major 2-D grid of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "grid {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute entrywise difference; grids must share a shape.
    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-utterance alignment lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    y: Grid,
    blank: Grid,
    normalized: bool,
}

impl Lattice {
    /// Builds a lattice from row-major grids. `y` must have `T * U` entries
    /// and `blank` must have `T * (U + 1)`; every entry must be finite.
    pub fn new(
        num_frames: usize,
        num_tokens: usize,
        y: Vec<f64>,
        blank: Vec<f64>,
        normalized: bool,
    ) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::DimensionMismatch("lattice needs T >= 1".into()));
        }
        let y = Grid::from_vec(num_frames, num_tokens, y)?;
        let blank = Grid::from_vec(num_frames, num_tokens + 1, blank)?;
        check_finite("y", &y)?;
        check_finite("blank", &blank)?;
        Ok(Self {
            y,
            blank,
            normalized,
        })
    }

    /// Lattice with every entry equal to `value`.
    pub fn uniform(num_frames: usize, num_tokens: usize, value: f64) -> Self {
        assert!(num_frames >= 1, "lattice needs T >= 1");
        Self {
            y: Grid::filled(num_frames, num_tokens, value),
            blank: Grid::filled(num_frames, num_tokens + 1, value),
            normalized: false,
        }
    }

    pub(crate) fn from_grids(y: Grid, blank: Grid, normalized: bool) -> Self {
        debug_assert_eq!(y.rows(), blank.rows());
        debug_assert_eq!(y.cols() + 1, blank.cols());
        Self {
            y,
            blank,
            normalized,
        }
    }

    #[inline]
    pub fn num_frames(&self) -> usize {
        self.y.rows()
    }

    #[inline]
    pub fn num_tokens(&self) -> usize {
        self.y.cols()
    }

    #[inline]
    pub fn y(&self, t: usize, u: usize) -> f64 {
        self.y.get(t, u)
    }

    #[inline]
    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.blank.get(t, u)
    }

    pub fn y_grid(&self) -> &Grid {
        &self.y
    }

    pub fn blank_grid(&self) -> &Grid {
        &self.blank
    }

    pub fn y_grid_mut(&mut self) -> &mut Grid {
        &mut self.y
    }

    pub fn blank_grid_mut(&mut self) -> &mut Grid {
        &mut self.blank
    }

    /// True when the entries are log-probabilities straight out of a
    /// softmax. Informational only.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn set_normalized(&mut self, normalized: bool) {
        self.normalized = normalized;
    }

    /// Serializes to the JSON lattice document. Numbers carry 17
    /// significant digits so every `f64` survives the trip through text.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{{\"T\":{},\"U\":{},\"y\":",
            self.num_frames(),
            self.num_tokens()
        );
        write_json_array(&mut out, self.y.as_slice());
        out.push_str(",\"blank\":");
        write_json_array(&mut out, self.blank.as_slice());
        let _ = write!(out, ",\"normalized\":{}}}", self.normalized);
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsonDoc =
            serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        Self::new(doc.frames, doc.tokens, doc.y, doc.blank, doc.normalized)
    }

    /// Binary form: magic `LTC1`, `T` and `U` as little-endian `u32`, then
    /// the `y` and `blank` grids as little-endian `f64`, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.y.as_slice().len() + self.blank.as_slice().len();
        let mut out = Vec::with_capacity(12 + 8 * n);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.num_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_tokens() as u32).to_le_bytes());
        for v in self.y.as_slice().iter().chain(self.blank.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary form. The format carries no `normalized` flag, so
    /// the result is always marked non-normalized.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
            return Err(Error::Malformed("missing LTC1 header".into()));
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let tokens = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let ny = frames * tokens;
        let nb = frames * (tokens + 1);
        let body = &bytes[12..];
        if body.len() != 8 * (ny + nb) {
            return Err(Error::Malformed(format!(
                "expected {} payload bytes for T={frames}, U={tokens}, got {}",
                8 * (ny + nb),
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let y: Vec<f64> = values.by_ref().take(ny).collect();
        let blank: Vec<f64> = values.collect();
        Self::new(frames, tokens, y, blank, false)
    }
}

const BINARY_MAGIC: &[u8; 4] = b"LTC1";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonDoc {
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "U")]
    tokens: usize,
    y: Vec<f64>,
    blank: Vec<f64>,
    #[serde(default)]
    normalized: bool,
}

fn write_json_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:.16e}");
    }
    out.push(']');
}

fn check_finite(name: &'static str, grid: &Grid) -> Result<()> {
    for t in 0..grid.rows() {
        for u in 0..grid.cols() {
            if !grid.get(t, u).is_finite() {
                return Err(Error::NonFinite { grid: name, t, u });
            }
        }
    }
    Ok(())
}

/// Raw joiner output for one utterance: logits over a vocabulary of size
/// `V` at every lattice node, plus the transcript.
#[derive(Debug, Clone)]
pub struct TokenizedUtterance {
    pub tokens: Vec<usize>,
    pub blank_id: usize,
    pub num_frames: usize,
    pub vocab_size: usize,
    /// Row-major `(t, u, v)` with shape `T x (U + 1) x V`.
    pub logits: Vec<f64>,
}

impl TokenizedUtterance {
    #[inline]
    pub fn logit_index(&self, t: usize, u: usize, v: usize) -> usize {
        (t * (self.tokens.len() + 1) + u) * self.vocab_size + v
    }

    pub fn node_logits(&self, t: usize, u: usize) -> &[f64] {
        let start = self.logit_index(t, u, 0);
        &self.logits[start..start + self.vocab_size]
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab_size;
        if vocab < 2 {
            return Err(Error::DimensionMismatch(format!(
                "vocabulary must hold at least 2 symbols, got {vocab}"
            )));
        }
        if self.num_frames == 0 {
            return Err(Error::DimensionMismatch("utterance needs T >= 1".into()));
        }
        if self.blank_id >= vocab {
            return Err(Error::BlankOutOfRange {
                id: self.blank_id,
                vocab,
            });
        }
        for (pos, &tok) in self.tokens.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::TokenOutOfRange { id: tok, vocab });
            }
            if tok == self.blank_id {
                return Err(Error::BlankInTokens(tok, pos));
            }
        }
        let expected = self.num_frames * (self.tokens.len() + 1) * vocab;
        if self.logits.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "logits need T*(U+1)*V = {expected} entries, got {}",
                self.logits.len()
            )));
        }
        Ok(())
    }
}

/// Log-softmax of a logit row, written into `out`.
pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_norm = max + sum.ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - log_norm;
    }
}

/// Normalizes each node's logits with a joint log-softmax over the
/// vocabulary and gathers the token and blank entries.
pub fn lattice_from_logits(utt: &TokenizedUtterance) -> Result<Lattice> {
    utt.validate()?;
    let frames = utt.num_frames;
    let tokens = utt.tokens.len();
    let mut y = Grid::filled(frames, tokens, 0.0);
    let mut blank = Grid::filled(frames, tokens + 1, 0.0);
    let mut row = vec![0.0; utt.vocab_size];
    for t in 0..frames {
        for u in 0..=tokens {
            log_softmax_into(utt.node_logits(t, u), &mut row);
            blank.set(t, u, row[utt.blank_id]);
            if u < tokens {
                y.set(t, u, row[utt.tokens[u]]);
            }
        }
    }
    check_finite("y", &y)?;
    check_finite("blank", &blank)?;
    Ok(Lattice::from_grids(y, blank, true))
}
