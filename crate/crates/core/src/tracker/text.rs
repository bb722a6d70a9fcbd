//! Prompt tokenization and the two text embedders: a trainable table used for
//! fusion, and a frozen table of orthonormal word vectors used as the fixed
//! reference space of the similarity head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{ParamStore, Tape, Tensor, Var};

/// Words the prompt grammar can produce, besides colors.
const FIXED_VOCAB: &[&str] = &[
    "the", "which", "are", "and", "or", "in", "counter", "direction", "lateral", "moving", "parked",
    "turning", "left", "right", "going", "straight", "vehicles", "cars", "buses", "trucks",
    "pedestrians",
];

pub const TEXT_EMBED: &str = "text.embed";
pub const FROZEN_EMBED: &str = "frozen_text.embed";
pub const FROZEN_GROUP: &str = "frozen_text";

pub fn fixed_vocab_len() -> usize {
    FIXED_VOCAB.len()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Word ids: grammar words are fixed, anything else hashes into one of
/// `oov_buckets` slots after them.
pub fn tokenize(text: &str, oov_buckets: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| {
            let w = w.to_ascii_lowercase();
            match FIXED_VOCAB.iter().position(|v| *v == w) {
                Some(i) => i,
                None => FIXED_VOCAB.len() + (fnv1a(&w) % oov_buckets.max(1) as u64) as usize,
            }
        })
        .collect()
}

/// Rows of a `vocab × dim` matrix made orthonormal by Gram–Schmidt over
/// seeded Gaussian draws. Needs `dim ≥ vocab`.
pub fn orthonormal_rows(vocab: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_f00d);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vocab);
    while rows.len() < vocab {
        let mut v = Tensor::randn(&[dim], 1.0, &mut rng).into_data();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor::from_rows(&rows).expect("rectangular")
}

/// Standard 1-D sinusoidal position code for word positions.
pub fn word_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for k in 0..dim / 2 {
            let w = 1.0 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            data[p * dim + 2 * k] = (p as f64 * w).sin();
            data[p * dim + 2 * k + 1] = (p as f64 * w).cos();
        }
    }
    Tensor::new(&[len, dim], data).expect("shape")
}

/// Per-prompt text nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    /// Trainable word embedding plus position (`L × D`).
    pub s_emb: Var,
    /// Frozen word vectors (`L × D_f`).
    pub s_frozen: Var,
}

pub fn encode_text(tape: &mut Tape, ps: &ParamStore, ids: &[usize]) -> Result<TextVars> {
    let table = tape.param(ps, TEXT_EMBED)?;
    let d = tape.value(table).cols();
    let e = tape.gather_rows(table, ids)?;
    let pos = tape.constant(word_positions(ids.len(), d));
    let s_emb = tape.add(e, pos)?;
    let frozen = tape.param(ps, FROZEN_EMBED)?;
    let s_frozen = tape.gather_rows(frozen, ids)?;
    Ok(TextVars { s_emb, s_frozen })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_words_have_fixed_ids() {
        let ids = tokenize("the black cars which are moving", 16);
        assert_eq!(ids[0], 0);
        assert_eq!(ids[2], 17);
        assert!(ids[1] >= FIXED_VOCAB.len());
        assert_eq!(tokenize("the black cars", 16)[1], ids[1]);
    }

    #[test]
    fn rows_are_orthonormal() {
        let t = orthonormal_rows(10, 12, 3);
        for i in 0..10 {
            for j in 0..10 {
                let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }
}
