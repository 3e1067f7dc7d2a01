//! Uniform quantizer with a progressively shrinking interval.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantizerError {
    #[error("dimension mismatch: mid has {mid}, input has {input}")]
    Dimension { mid: usize, input: usize },
    #[error("quantization interval must be positive, got {0}")]
    Interval(f64),
    #[error("bit number must be at least 1")]
    Bits,
}

/// Mid-value x̄, interval l and bit number n.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformQuantizer {
    pub mid: Vec<f64>,
    pub interval: f64,
    pub bits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codeword {
    pub index: i64,
    pub saturated: bool,
}

impl UniformQuantizer {
    pub fn new(mid: Vec<f64>, interval: f64, bits: u32) -> Result<Self, QuantizerError> {
        if !(interval > 0.0) || !interval.is_finite() {
            return Err(QuantizerError::Interval(interval));
        }
        if bits == 0 || bits > 62 {
            return Err(QuantizerError::Bits);
        }
        Ok(Self { mid, interval, bits })
    }

    pub fn step(&self) -> f64 {
        self.interval / (1u64 << self.bits) as f64
    }

    /// Largest codeword magnitude, 2^(n−1).
    pub fn max_index(&self) -> i64 {
        1i64 << (self.bits - 1)
    }

    fn check(&self, x: &[f64]) -> Result<(), QuantizerError> {
        if x.len() != self.mid.len() {
            return Err(QuantizerError::Dimension { mid: self.mid.len(), input: x.len() });
        }
        if !(self.interval > 0.0) {
            return Err(QuantizerError::Interval(self.interval));
        }
        Ok(())
    }

    fn raw_index(&self, xj: f64, mj: f64) -> i64 {
        let d = xj - mj;
        let mag = (d.abs() / self.step() + 0.5).floor();
        let mag = if mag > i64::MAX as f64 / 2.0 { i64::MAX / 2 } else { mag as i64 };
        if d > 0.0 {
            mag
        } else if d < 0.0 {
            -mag
        } else {
            0
        }
    }

    /// Q(x) = x̄ + sgn(x−x̄)·(l/2ⁿ)·⌊|x−x̄|/(l/2ⁿ) + 1/2⌋, coordinate-wise, without clamping.
    pub fn quantize(&self, x: &[f64]) -> Result<Vec<f64>, QuantizerError> {
        self.check(x)?;
        let s = self.step();
        Ok(x.iter()
            .zip(&self.mid)
            .map(|(&xj, &mj)| mj + self.raw_index(xj, mj) as f64 * s)
            .collect())
    }

    /// Codeword indices clamped to [−2^(n−1), 2^(n−1)].
    pub fn encode(&self, x: &[f64]) -> Result<Vec<Codeword>, QuantizerError> {
        self.check(x)?;
        let cap = self.max_index();
        Ok(x.iter()
            .zip(&self.mid)
            .map(|(&xj, &mj)| {
                let raw = self.raw_index(xj, mj);
                let index = raw.clamp(-cap, cap);
                Codeword { index, saturated: index != raw }
            })
            .collect())
    }

    pub fn decode(&self, words: &[Codeword]) -> Result<Vec<f64>, QuantizerError> {
        if words.len() != self.mid.len() {
            return Err(QuantizerError::Dimension { mid: self.mid.len(), input: words.len() });
        }
        let s = self.step();
        Ok(words.iter().zip(&self.mid).map(|(w, &m)| m + w.index as f64 * s).collect())
    }

    /// Encode then decode; the value a receiver reconstructs. Returns the saturation count.
    pub fn transmit(&self, x: &[f64]) -> Result<(Vec<f64>, usize), QuantizerError> {
        let words = self.encode(x)?;
        let sat = words.iter().filter(|w| w.saturated).count();
        Ok((self.decode(&words)?, sat))
    }
}

/// l = C·κ^k.
pub fn schedule_interval(c: f64, kappa: f64, k: u64) -> Result<f64, QuantizerError> {
    if !(c > 0.0) {
        return Err(QuantizerError::Interval(c));
    }
    Ok(c * kappa.powf(k as f64))
}
