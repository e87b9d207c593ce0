//! Text embedders mapping descriptions and queries into one vector space.

use super::MemoryError;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 64;

/// Anything that maps text to a unit vector of a fixed dimension.
///
/// An external vision-language encoder can sit behind this trait; the
/// default is [`HashEmbedder`].
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError>;
}

/// Deterministic bag-of-tokens embedder: lowercase, split on
/// non-alphanumerics, hash every token into one of `dim` buckets, count,
/// L2-normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            v[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = l2_norm(&v);
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain index loop, kept apart from the iterator-based implementation.
    fn scalar_cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed("red bottle").unwrap();
        let b = e.embed("red bottle").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        assert!((cosine(&e.embed("bottle").unwrap(), &e.embed("bottle").unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenization_ignores_case_and_punctuation() {
        assert_eq!(tokenize("Sour-Lemon, ripe!"), vec!["sour", "lemon", "ripe"]);
        let e = HashEmbedder::default();
        assert_eq!(e.embed("SOUR lemon").unwrap(), e.embed("sour, lemon").unwrap());
        assert_eq!(e.embed("  ...  "), Err(MemoryError::EmptyText));
        assert_eq!(e.embed(""), Err(MemoryError::EmptyText));
    }

    #[test]
    fn sour_lemon_ranks_first() {
        let e = HashEmbedder::default();
        let q = e.embed("sour lemon").unwrap();
        let candidates = ["sour lemon", "sweet cake", "salty chips"];
        let sims: Vec<f64> = candidates.iter().map(|c| scalar_cosine(&q, &e.embed(c).unwrap())).collect();
        let best = sims.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(candidates[best], "sour lemon");
        for (c, s) in candidates.iter().zip(&sims) {
            assert!((cosine(&q, &e.embed(c).unwrap()) - s).abs() < 1e-12);
        }
    }
}
