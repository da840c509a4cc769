//! Verlet-wrapped discrete motion tokens.
//!
//! A token encodes the quantized 2-D residual between the next position and
//! the constant-velocity extrapolation `2 p_t - p_{t-1}`. Encoding runs the
//! extrapolation on the already-quantized past, so every target sequence is
//! exactly reproducible by the decoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];
pub type Token = u16;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(&'static str),
    #[error("track has {0} points, need at least 2")]
    TrackTooShort(usize),
    #[error("non-finite position at index {0}")]
    NonFinite(usize),
    #[error("invalid position at index {0}")]
    InvalidStep(usize),
    #[error("token {token} out of range for vocabulary of {size}")]
    TokenOutOfRange { token: u32, size: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenVocab {
    /// Quantization bins per axis (odd).
    pub bins_per_axis: u32,
    /// Residual clamp in meters.
    pub delta_max: f64,
    /// Seconds between tokens.
    pub token_dt: f64,
}

impl Default for TokenVocab {
    fn default() -> Self {
        Self {
            bins_per_axis: 13,
            delta_max: 1.0,
            token_dt: 0.5,
        }
    }
}

impl TokenVocab {
    pub fn new(bins_per_axis: u32, delta_max: f64, token_dt: f64) -> Result<Self, CodecError> {
        let v = Self {
            bins_per_axis,
            delta_max,
            token_dt,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.bins_per_axis < 3 || self.bins_per_axis % 2 == 0 {
            return Err(CodecError::InvalidVocab(
                "bins_per_axis must be odd and >= 3",
            ));
        }
        if self.bins_per_axis > 255 {
            return Err(CodecError::InvalidVocab("bins_per_axis must be <= 255"));
        }
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return Err(CodecError::InvalidVocab("delta_max must be positive"));
        }
        if !(self.token_dt > 0.0 && self.token_dt.is_finite()) {
            return Err(CodecError::InvalidVocab("token_dt must be positive"));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        (self.bins_per_axis * self.bins_per_axis) as usize
    }

    /// Token for a zero residual.
    pub fn center_token(&self) -> Token {
        ((self.size() - 1) / 2) as Token
    }

    /// Distance between adjacent bin centers.
    pub fn bin_width(&self) -> f64 {
        2.0 * self.delta_max / f64::from(self.bins_per_axis - 1)
    }

    /// Worst-case per-axis quantization error of a single step.
    pub fn half_bin(&self) -> f64 {
        self.delta_max / f64::from(self.bins_per_axis - 1)
    }

    pub fn axis_center(&self, index: u32) -> f64 {
        let span = f64::from(self.bins_per_axis - 1);
        self.delta_max * (2.0 * f64::from(index) - span) / span
    }

    /// Nearest axis index after clamping to `[-delta_max, delta_max]`.
    /// Returns the index and whether clamping occurred.
    pub fn quantize_axis(&self, residual: f64) -> (u32, bool) {
        let clamped = residual.clamp(-self.delta_max, self.delta_max);
        let span = f64::from(self.bins_per_axis - 1);
        let raw = ((clamped + self.delta_max) * span / (2.0 * self.delta_max)).round();
        let idx = raw.clamp(0.0, f64::from(self.bins_per_axis - 1)) as u32;
        (idx, clamped != residual)
    }

    pub fn token(&self, ix: u32, iy: u32) -> Token {
        (ix * self.bins_per_axis + iy) as Token
    }

    /// Residual represented by a token.
    pub fn residual(&self, token: Token) -> Result<Point, CodecError> {
        let t = u32::from(token);
        if t as usize >= self.size() {
            return Err(CodecError::TokenOutOfRange {
                token: t,
                size: self.size() as u32,
            });
        }
        let ix = t / self.bins_per_axis;
        let iy = t % self.bins_per_axis;
        Ok([self.axis_center(ix), self.axis_center(iy)])
    }
}

/// Positions sampled every `token_dt` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub positions: Vec<Point>,
    pub valid: Vec<bool>,
}

impl AgentTrack {
    pub fn new(positions: Vec<Point>) -> Self {
        let valid = vec![true; positions.len()];
        Self { positions, valid }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn translated(&self, by: Point) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + by[0], p[1] + by[1]])
                .collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Output of [`encode`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTrack {
    pub tokens: Vec<Token>,
    /// Steps where at least one residual axis was clamped.
    pub clamped_steps: usize,
}

/// Encodes a track of `T + 2` points (two seeds, then `T` future points)
/// into `T` tokens.
pub fn encode(track: &AgentTrack, vocab: &TokenVocab) -> Result<EncodedTrack, CodecError> {
    vocab.validate()?;
    let n = track.positions.len();
    if n < 2 {
        return Err(CodecError::TrackTooShort(n));
    }
    for (i, p) in track.positions.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(CodecError::NonFinite(i));
        }
        if !track.valid.get(i).copied().unwrap_or(true) {
            return Err(CodecError::InvalidStep(i));
        }
    }
    let mut prev = track.positions[0];
    let mut cur = track.positions[1];
    let mut tokens = Vec::with_capacity(n - 2);
    let mut clamped_steps = 0;
    for target in &track.positions[2..] {
        let pred = [2.0 * cur[0] - prev[0], 2.0 * cur[1] - prev[1]];
        let (ix, cx) = vocab.quantize_axis(target[0] - pred[0]);
        let (iy, cy) = vocab.quantize_axis(target[1] - pred[1]);
        if cx || cy {
            clamped_steps += 1;
        }
        let next = [
            pred[0] + vocab.axis_center(ix),
            pred[1] + vocab.axis_center(iy),
        ];
        tokens.push(vocab.token(ix, iy));
        prev = cur;
        cur = next;
    }
    Ok(EncodedTrack {
        tokens,
        clamped_steps,
    })
}

/// Integrates tokens from two seed positions. Returns the `T + 2` point track
/// including the seeds.
pub fn decode(
    tokens: &[Token],
    seed: [Point; 2],
    vocab: &TokenVocab,
) -> Result<AgentTrack, CodecError> {
    vocab.validate()?;
    let mut positions = Vec::with_capacity(tokens.len() + 2);
    positions.extend_from_slice(&seed);
    let (mut prev, mut cur) = (seed[0], seed[1]);
    for &tok in tokens {
        let r = vocab.residual(tok)?;
        let next = [2.0 * cur[0] - prev[0] + r[0], 2.0 * cur[1] - prev[1] + r[1]];
        positions.push(next);
        prev = cur;
        cur = next;
    }
    Ok(AgentTrack::new(positions))
}

/// Decoded future only (drops the two seeds).
pub fn decode_future(
    tokens: &[Token],
    seed: [Point; 2],
    vocab: &TokenVocab,
) -> Result<Vec<Point>, CodecError> {
    let mut track = decode(tokens, seed, vocab)?;
    track.positions.drain(..2);
    Ok(track.positions)
}
