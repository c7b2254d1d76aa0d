//! Seeded Markov-chain token streams used as a stand-in training corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// First-order chain where each token has a few weighted successors.
#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    successors: Vec<Vec<(u32, f64)>>,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl MarkovCorpus {
    /// `branching` successors per token, each sequence `seq_len` tokens long.
    pub fn new(vocab: usize, branching: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || branching == 0 || seq_len == 0 {
            return Err(Error::Config("vocab, branching and seq_len must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..vocab)
            .map(|_| {
                let weights: Vec<f64> = (0..branching).map(|_| rng.gen_range(0.1..1.0)).collect();
                let sum: f64 = weights.iter().sum();
                let mut acc = 0.0;
                weights
                    .into_iter()
                    .map(|w| {
                        acc += w / sum;
                        (rng.gen_range(0..vocab as u32), acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { successors, seq_len, rng })
    }

    fn step(&mut self, t: u32) -> u32 {
        let u: f64 = self.rng.gen();
        let row = &self.successors[t as usize];
        row.iter().find(|&&(_, c)| u < c).unwrap_or(&row[row.len() - 1]).0
    }
}

impl Iterator for MarkovCorpus {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let mut t = self.rng.gen_range(0..self.successors.len() as u32);
        let mut seq = Vec::with_capacity(self.seq_len);
        seq.push(t);
        while seq.len() < self.seq_len {
            t = self.step(t);
            seq.push(t);
        }
        Some(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_vocab() {
        let a: Vec<_> = MarkovCorpus::new(32, 3, 10, 7).unwrap().take(4).collect();
        let b: Vec<_> = MarkovCorpus::new(32, 3, 10, 7).unwrap().take(4).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.len() == 10 && s.iter().all(|&t| t < 32)));
    }
}
