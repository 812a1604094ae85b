use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Two layers, four heads, width 128.
    pub fn compact(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden: 128,
            layers: 2,
            heads: 4,
            ff: 256,
            max_len: 128,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff", self.ff),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be at least 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.hidden ({}) must be divisible by encoder.heads ({})",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(EncoderConfig::compact(50).validate().is_ok());
        let mut c = EncoderConfig::compact(50);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 0;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::compact(50);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }
}
