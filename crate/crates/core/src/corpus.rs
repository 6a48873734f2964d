//! Corpus ingestion and the synthetic byte corpus used for toy training.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::tokenize;

const SUBJECTS: &[&str] = &[
    "the cat", "the dog", "a small bird", "my friend", "the old man", "a young girl", "the teacher", "our neighbor",
];
const VERBS: &[&str] = &["sees", "likes", "finds", "draws", "follows", "helps", "calls", "watches"];
const OBJECTS: &[&str] = &[
    "the red ball", "a green tree", "the river", "a quiet house", "the big moon", "a blue box", "the garden",
    "a long road",
];
const TAILS: &[&str] = &[".", " today.", " again.", " at night."];

/// `lines` sentences from a small fixed grammar, newline separated.
pub fn synthetic_corpus(seed: u64, lines: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..lines {
        out.push_str(SUBJECTS.choose(&mut rng).unwrap());
        out.push(' ');
        out.push_str(VERBS.choose(&mut rng).unwrap());
        out.push(' ');
        out.push_str(OBJECTS.choose(&mut rng).unwrap());
        out.push_str(TAILS.choose(&mut rng).unwrap());
        out.push('\n');
    }
    out
}

/// Every non-empty line tokenized and concatenated.
pub fn token_stream(text: &str) -> Vec<usize> {
    text.lines()
        .filter(|l| !l.is_empty())
        .flat_map(|l| tokenize(l.as_bytes()))
        .collect()
}

pub fn load_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    String::from_utf8(bytes).map_err(|_| Error::input(format!("{} is not UTF-8", path.display())))
}

/// Input / next-token target windows of `seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn n_seq(&self) -> usize {
        self.inputs.len() / self.seq_len
    }
}

fn check_len(stream: &[usize], seq_len: usize) -> Result<()> {
    if seq_len == 0 || stream.len() < seq_len + 1 {
        return Err(Error::input(format!(
            "corpus of {} tokens is too short for windows of {seq_len}",
            stream.len()
        )));
    }
    Ok(())
}

pub fn random_batch(stream: &[usize], seq_len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    check_len(stream, seq_len)?;
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for _ in 0..batch {
        let s = rng.random_range(0..stream.len() - seq_len);
        inputs.extend_from_slice(&stream[s..s + seq_len]);
        targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
    }
    Ok(Batch { inputs, targets, seq_len })
}

/// Consecutive non-overlapping windows covering the stream, at most `max_windows`.
pub fn eval_batches(stream: &[usize], seq_len: usize, per_batch: usize, max_windows: usize) -> Result<Vec<Batch>> {
    check_len(stream, seq_len)?;
    let n = ((stream.len() - 1) / seq_len).min(max_windows);
    let mut out = Vec::new();
    let mut w = 0;
    while w < n {
        let k = per_batch.min(n - w);
        let mut inputs = Vec::with_capacity(k * seq_len);
        let mut targets = Vec::with_capacity(k * seq_len);
        for j in w..w + k {
            let s = j * seq_len;
            inputs.extend_from_slice(&stream[s..s + seq_len]);
            targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
        }
        out.push(Batch { inputs, targets, seq_len });
        w += k;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, EOS};

    #[test]
    fn synthetic_corpus_is_seeded() {
        assert_eq!(synthetic_corpus(3, 20), synthetic_corpus(3, 20));
        assert_ne!(synthetic_corpus(3, 20), synthetic_corpus(4, 20));
        assert_eq!(synthetic_corpus(3, 20).lines().count(), 20);
    }

    #[test]
    fn stream_brackets_lines() {
        let s = token_stream("ab\n\nc\n");
        assert_eq!(s, vec![BOS, 97, 98, EOS, BOS, 99, EOS]);
    }

    #[test]
    fn windows_are_shifted_by_one() {
        let stream: Vec<usize> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_batch(&stream, 8, 3, &mut rng).unwrap();
        for (i, t) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(i + 1, *t);
        }
        let ev = eval_batches(&stream, 8, 4, 100).unwrap();
        assert_eq!(ev.iter().map(|b| b.n_seq()).sum::<usize>(), 6);
        assert!(random_batch(&stream[..5], 8, 1, &mut rng).is_err());
    }
}
