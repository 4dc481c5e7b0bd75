use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Dimension of prompt embeddings.
pub const TEXT_DIM: usize = 64;

/// Deterministic unit-norm embedding of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub prompt: String,
    pub vector: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed bag of lowercase alphanumeric tokens: each token adds ±1 to one
/// bucket chosen by its hash, and the result is L2-normalized.
pub fn embed_text(prompt: &str) -> Result<TextEmbedding, DiffusionError> {
    let lower = prompt.to_lowercase();
    let mut v = vec![0.0; TEXT_DIM];
    let mut n = 0;
    for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a(tok.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % TEXT_DIM as u64) as usize] += sign;
        n += 1;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0 || norm == 0.0 {
        return Err(DiffusionError::EmptyPrompt);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(TextEmbedding {
        prompt: prompt.to_string(),
        vector: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let a = embed_text("missing canine").unwrap();
        assert_eq!(a, embed_text("missing canine").unwrap());
        let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn different_words_differ() {
        let a = embed_text("canine").unwrap();
        let b = embed_text("molar").unwrap();
        let cos: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(matches!(embed_text(""), Err(DiffusionError::EmptyPrompt)));
        assert!(matches!(embed_text("  ,;  "), Err(DiffusionError::EmptyPrompt)));
    }
}
