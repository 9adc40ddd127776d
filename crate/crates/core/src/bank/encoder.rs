use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Text → `dim`-vector embedder.
pub trait TextEncoder {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Character n-gram embedder: every lowercase 3- and 4-gram of the padded
/// text, plus each word, seeds a pseudo-random `dim`-vector via its FNV-1a
/// hash; the sum is L2-normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashNgramEncoder {
    dim: usize,
}

impl HashNgramEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    fn features(text: &str) -> Vec<u64> {
        let lower = text.to_lowercase();
        let padded: Vec<char> = format!(" {lower} ").chars().collect();
        let mut out = vec![fnv1a(b"\x00text")];
        for n in [3usize, 4] {
            for w in padded.windows(n) {
                let s: String = w.iter().collect();
                out.push(fnv1a(format!("{n}:{s}").as_bytes()));
            }
        }
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            out.push(fnv1a(format!("w:{word}").as_bytes()));
        }
        out
    }
}

impl TextEncoder for HashNgramEncoder {
    fn id(&self) -> String {
        format!("hash-ngram-v1-d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for h in Self::features(text) {
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            for x in v.iter_mut() {
                *x += rng.gen_range(-1.0..1.0);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// One unit row per text, `dim` wide.
pub fn encode_texts(texts: &[String], encoder: &dyn TextEncoder, dim: usize) -> Result<Vec<Vec<f64>>> {
    texts
        .iter()
        .map(|t| {
            let row = encoder.encode(t);
            if row.len() != dim {
                return Err(Error::EncoderDimMismatch { expected: dim, got: row.len() });
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn unit_rows_and_determinism() {
        let e = HashNgramEncoder::new(64);
        for t in ["", "a", "holding a bottle", "Rubbing Eyes inside the cabin"] {
            let v = e.encode(t);
            assert!((cos(&v, &v) - 1.0).abs() < 1e-12);
            assert_eq!(v, e.encode(t));
        }
    }

    #[test]
    fn distinct_texts_separate() {
        let e = HashNgramEncoder::new(64);
        let c = cos(&e.encode("holding a bottle"), &e.encode("holding a phone"));
        assert!(c < 0.99, "{c}");
        assert!(c > 0.0);
    }

    #[test]
    fn dim_mismatch() {
        let e = HashNgramEncoder::new(8);
        let err = encode_texts(&["x".into()], &e, 16).unwrap_err();
        assert_eq!(err.code(), "ENCODER_DIM_MISMATCH");
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
