//! Deterministic text embedding.
//!
//! Every token maps to a unit vector drawn from a generator seeded by the
//! token's FNV-1a hash, so embeddings depend only on the token text and the
//! embedding width. Sequences are wrapped in start/end markers.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, normal, Rng};
use crate::scalar::Scalar;
use rand::SeedableRng;

pub const START: &str = "<sot>";
pub const END: &str = "<eot>";

const SHIPPED_LEXICON: &str = include_str!("../../assets/lexicon.txt");

/// Known vocabulary. Tokens outside it are still embedded through hashing.
#[derive(Clone, Debug)]
pub struct Lexicon {
    tokens: Vec<String>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Self {
        let tokens = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { tokens }
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_LEXICON)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.iter().any(|t| t == token)
    }
}

pub fn token_vector<T: Scalar>(token: &str, dim: usize) -> Vec<T> {
    let mut rng = Rng::seed_from_u64(fnv1a64(token.as_bytes()));
    let raw: Vec<f64> = (0..dim).map(|_| normal::<f64>(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| T::of(v / norm)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding<T> {
    pub tokens: Vec<String>,
    /// Sequence length x embedding width.
    pub matrix: Array2<T>,
    /// Text positions owned by each region prompt.
    pub spans: BTreeMap<u32, Vec<Range<usize>>>,
}

impl<T: Scalar> PromptEmbedding<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn embed_tokens<T: Scalar>(tokens: &[String], dim: usize) -> Array2<T> {
    let mut m = Array2::zeros((tokens.len(), dim));
    for (i, tok) in tokens.iter().enumerate() {
        for (j, v) in token_vector::<T>(tok, dim).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// Embeds a plain token list between start and end markers.
pub fn embed_prompt<T: Scalar>(tokens: &[String], dim: usize) -> Result<PromptEmbedding<T>> {
    embed_composite(tokens, &[], dim)
}

/// Embeds `global` followed by every region prompt, recording the text
/// positions of each region.
pub fn embed_composite<T: Scalar>(
    global: &[String],
    regions: &[(u32, Vec<String>)],
    dim: usize,
) -> Result<PromptEmbedding<T>> {
    if global.is_empty() && regions.iter().all(|(_, t)| t.is_empty()) {
        return Err(Error::EmptyPrompt);
    }
    let mut tokens = vec![START.to_string()];
    tokens.extend(global.iter().cloned());
    let mut spans: BTreeMap<u32, Vec<Range<usize>>> = BTreeMap::new();
    for (id, prompt) in regions {
        if prompt.is_empty() {
            continue;
        }
        let start = tokens.len();
        tokens.extend(prompt.iter().cloned());
        spans.entry(*id).or_default().push(start..tokens.len());
    }
    tokens.push(END.to_string());
    let matrix = embed_tokens(&tokens, dim);
    Ok(PromptEmbedding {
        tokens,
        matrix,
        spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        crate::layout::tokenize(s)
    }

    #[test]
    fn deterministic_and_marked() {
        let a = embed_prompt::<f32>(&toks("red square"), 32).unwrap();
        let b = embed_prompt::<f32>(&toks("red square"), 32).unwrap();
        assert_eq!(a, b);
        let one = embed_prompt::<f64>(&toks("red"), 16).unwrap();
        assert_eq!(one.len(), 3);
        assert_eq!(one.tokens, vec![START, "red", END]);
        assert!(matches!(embed_prompt::<f64>(&[], 16), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn unit_norm_rows() {
        let e = embed_prompt::<f64>(&toks("a green circle"), 32).unwrap();
        for row in e.matrix.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shipped_lexicon_tokens_are_distinct() {
        let lex = Lexicon::shipped();
        assert!(lex.tokens().len() >= 10);
        let vecs: Vec<Vec<f64>> = lex.tokens().iter().map(|t| token_vector(t, 32)).collect();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let cos: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                assert!(cos < 1.0 - 1e-6, "{} vs {}", lex.tokens()[i], lex.tokens()[j]);
            }
        }
    }

    #[test]
    fn composite_spans() {
        let e = embed_composite::<f32>(
            &toks("two shapes"),
            &[(1, toks("green square")), (2, toks("blue square"))],
            8,
        )
        .unwrap();
        assert_eq!(e.len(), 8);
        assert_eq!(e.spans[&1], vec![3..5]);
        assert_eq!(e.spans[&2], vec![5..7]);
        assert_eq!(&e.tokens[5..7], &["blue", "square"]);
    }
}
