//! Seeded order-2 Markov-chain corpus over the model vocabulary.
//!
//! Each context `(a, b)` has a few preferred successors drawn from a Zipf
//! distribution over a shuffled vocabulary, so token frequencies are skewed
//! and routing statistics come out imbalanced.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BRANCH: usize = 4;
const BRANCH_P: [f64; BRANCH] = [0.55, 0.25, 0.12, 0.08];
const NOISE: f64 = 0.05;
const ZIPF_EXPONENT: f64 = 1.1;

#[derive(Clone, Debug)]
pub struct MarkovCorpus {
    vocab: usize,
    successors: Vec<[u16; BRANCH]>,
    zipf_cdf: Vec<f64>,
    zipf_order: Vec<u16>,
}

impl MarkovCorpus {
    pub fn new(vocab: usize, seed: u64) -> Self {
        assert!(vocab >= 1 && vocab <= u16::MAX as usize + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let mut zipf_order: Vec<u16> = (0..vocab as u32).map(|v| v as u16).collect();
        zipf_order.shuffle(&mut rng);
        let mut acc = 0.0;
        let mut zipf_cdf: Vec<f64> = (0..vocab)
            .map(|r| {
                acc += 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT);
                acc
            })
            .collect();
        zipf_cdf.iter_mut().for_each(|c| *c /= acc);
        let mut corpus = MarkovCorpus {
            vocab,
            successors: Vec::new(),
            zipf_cdf,
            zipf_order,
        };
        corpus.successors = (0..vocab * vocab)
            .map(|_| {
                let mut s = [0u16; BRANCH];
                for slot in s.iter_mut() {
                    *slot = corpus.zipf(&mut rng) as u16;
                }
                s
            })
            .collect();
        corpus
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn zipf<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let r = self
            .zipf_cdf
            .partition_point(|c| *c < u)
            .min(self.vocab - 1);
        self.zipf_order[r] as usize
    }

    fn next<R: Rng>(&self, a: usize, b: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < NOISE {
            return rng.random_range(0..self.vocab);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let cands = &self.successors[a * self.vocab + b];
        for (c, p) in cands.iter().zip(BRANCH_P) {
            acc += p;
            if u < acc {
                return *c as usize;
            }
        }
        cands[BRANCH - 1] as usize
    }

    pub fn sequence<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut seq = Vec::with_capacity(len);
        for i in 0..len {
            let t = match i {
                0 | 1 => self.zipf(rng),
                _ => self.next(seq[i - 2], seq[i - 1], rng),
            };
            seq.push(t);
        }
        seq
    }

    pub fn sample(&self, sequences: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sequences)
            .map(|_| self.sequence(len, &mut rng))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_in_range() {
        let c = MarkovCorpus::new(32, 7);
        let a = c.sample(3, 50, 1);
        assert_eq!(a, MarkovCorpus::new(32, 7).sample(3, 50, 1));
        assert!(a.iter().flatten().all(|&t| t < 32));
        assert_ne!(a, c.sample(3, 50, 2));
    }

    #[test]
    fn token_frequencies_are_skewed() {
        let c = MarkovCorpus::new(64, 3);
        let mut counts = vec![0usize; 64];
        for t in c.sample(40, 100, 9).into_iter().flatten() {
            counts[t] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let mean = 4000 / 64;
        assert!(max > 3 * mean, "max {max} vs mean {mean}");
    }
}
