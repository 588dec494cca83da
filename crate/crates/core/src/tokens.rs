//! Character-ratio token estimation.
//!
//! No tokenizer is bundled; every length cap and length statistic in the
//! crate goes through the same estimator so the dataset and eval numbers
//! agree with each other.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEstimator {
    pub chars_per_token: f64,
}

impl Default for TokenEstimator {
    fn default() -> Self {
        TokenEstimator { chars_per_token: 4.0 }
    }
}

impl TokenEstimator {
    pub fn new(chars_per_token: f64) -> Self {
        assert!(chars_per_token > 0.0, "chars_per_token must be positive");
        TokenEstimator { chars_per_token }
    }

    pub fn estimate(&self, text: &str) -> usize {
        let chars = text.chars().count();
        (chars as f64 / self.chars_per_token).ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_of_char_ratio() {
        let est = TokenEstimator::default();
        assert_eq!(est.estimate(""), 0);
        assert_eq!(est.estimate("abc"), 1);
        assert_eq!(est.estimate(&"x".repeat(400)), 100);
        assert_eq!(est.estimate(&"x".repeat(401)), 101);
    }

    #[test]
    fn counts_chars_not_bytes() {
        let est = TokenEstimator::new(1.0);
        assert_eq!(est.estimate("é€"), 2);
    }
}
