//! Deterministic synthetic English-like text.
//!
//! Words are built from syllables and drawn from a Zipf law, and each word
//! has a small preferred-successor set, so the byte stream carries both a
//! heavy-tailed unigram law and learnable local structure.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedAliasIndex};

const ONSETS: &[&str] = &["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "th", "w", "st", "pr", "qu", "v", "k", "j", "z", "x"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "y"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "ng", "ck"];
const VOCAB: usize = 2000;
const SUCCESSORS: usize = 6;

/// Returns exactly `len` bytes of synthetic text generated from `seed`.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..VOCAB)
        .map(|rank| {
            let syllables = 1 + (rank as f64).log10().max(0.0) as usize + rng.gen_range(0..2);
            (0..syllables)
                .map(|_| {
                    let o = ONSETS[rng.gen_range(0..ONSETS.len())];
                    let v = VOWELS[rng.gen_range(0..VOWELS.len())];
                    let c = CODAS[rng.gen_range(0..CODAS.len())];
                    format!("{o}{v}{c}")
                })
                .collect()
        })
        .collect();
    let zipf: Vec<f64> = (1..=VOCAB).map(|r| 1.0 / r as f64).collect();
    let unigram = WeightedAliasIndex::new(zipf).expect("positive weights");
    let successors: Vec<Vec<usize>> =
        (0..VOCAB).map(|_| (0..SUCCESSORS).map(|_| unigram.sample(&mut rng)).collect()).collect();

    let mut out = Vec::with_capacity(len + 32);
    let mut prev = unigram.sample(&mut rng);
    let mut sentence_len = 0usize;
    let mut capitalize = true;
    while out.len() < len {
        let w = if rng.gen_bool(0.6) { successors[prev][rng.gen_range(0..SUCCESSORS)] } else { unigram.sample(&mut rng) };
        let word = words[w].as_bytes();
        if capitalize {
            out.push(word[0].to_ascii_uppercase());
            out.extend_from_slice(&word[1..]);
            capitalize = false;
        } else {
            out.extend_from_slice(word);
        }
        sentence_len += 1;
        prev = w;
        if sentence_len >= 4 && rng.gen_bool(0.12) {
            out.push(if rng.gen_bool(0.85) { b'.' } else { b'?' });
            out.push(if rng.gen_bool(0.1) { b'\n' } else { b' ' });
            sentence_len = 0;
            capitalize = true;
        } else if sentence_len >= 3 && rng.gen_bool(0.05) {
            out.extend_from_slice(b", ");
        } else {
            out.push(b' ');
        }
    }
    out.truncate(len);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthetic_corpus(5000, 9);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, synthetic_corpus(5000, 9));
        assert_ne!(a, synthetic_corpus(5000, 10));
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn byte_law_is_heavy_tailed() {
        let c = synthetic_corpus(200_000, 1);
        let mut counts = [0u64; 256];
        for &b in &c {
            counts[b as usize] += 1;
        }
        let mut nz: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
        nz.sort_unstable_by(|a, b| b.cmp(a));
        assert!(nz.len() >= 30);
        assert!(nz[0] > 20 * nz[nz.len() / 2]);
    }
}
