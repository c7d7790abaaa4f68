use std::collections::HashMap;

use specscale::data::{
    eval_batches, stratify, synthetic_corpus, BatchSampler, Corpus, FrequencyTable, Regime,
};
use specscale::linalg::Rng;

/// Zipf(1) counts over 256 types with ids shuffled so rank and id differ.
fn zipf_counts(seed: u64) -> Vec<u64> {
    let mut ids: Vec<usize> = (0..256).collect();
    let mut rng = Rng::new(seed);
    for i in (1..256).rev() {
        ids.swap(i, rng.below(i + 1));
    }
    let mut counts = vec![0u64; 256];
    for (rank, &id) in ids.iter().enumerate() {
        counts[id] = (100_000.0 / (rank + 1) as f64).round() as u64;
    }
    counts
}

/// Cumulative-sum oracle: walk types by decreasing count and split where the
/// running mass before each type crosses M/3 and 2M/3.
fn tertile_oracle(counts: &[u64]) -> Vec<Regime> {
    let m: u64 = counts.iter().sum();
    let mut order: Vec<(u64, usize)> = counts.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = vec![Regime::Tail; counts.len()];
    let mut cum = 0.0;
    for (c, id) in order {
        let frac = cum / m as f64;
        out[id] = if frac < 1.0 / 3.0 {
            Regime::Head
        } else if frac < 2.0 / 3.0 {
            Regime::Mid
        } else {
            Regime::Tail
        };
        cum += c as f64;
    }
    out
}

#[test]
fn zipf_tertiles_match_cumulative_sum_oracle() {
    for seed in 0..10 {
        let counts = zipf_counts(seed);
        let table = FrequencyTable::from_counts(counts.clone());
        let strata = stratify(&table).unwrap();
        assert_eq!(strata.regimes(), tertile_oracle(&counts).as_slice());

        let m = table.total() as f64;
        let masses = strata.masses();
        for mass in masses {
            let f = mass as f64 / m;
            assert!((0.2..=0.5).contains(&f), "seed {seed}: {masses:?}");
        }
        assert_eq!(masses.iter().sum::<u64>(), table.total());
        let max_type = *counts.iter().max().unwrap() as f64;
        assert!(masses[Regime::Head.index()] as f64 <= m / 3.0 + max_type);
    }
}

#[test]
fn regimes_partition_the_vocabulary() {
    let counts = zipf_counts(3);
    let strata = stratify(&FrequencyTable::from_counts(counts.clone())).unwrap();
    let total: usize = [Regime::Head, Regime::Mid, Regime::Tail].iter().map(|&r| strata.type_count(r)).sum();
    assert_eq!(total, 256);
    // Every HEAD type is at least as frequent as every MID type, and so on.
    let min_of = |r: Regime| (0..256).filter(|&v| strata.regime(v as u32) == r).map(|v| counts[v]).min().unwrap();
    let max_of = |r: Regime| (0..256).filter(|&v| strata.regime(v as u32) == r).map(|v| counts[v]).max().unwrap();
    assert!(min_of(Regime::Head) >= max_of(Regime::Mid));
    assert!(min_of(Regime::Mid) >= max_of(Regime::Tail));
}

#[test]
fn megabyte_corpus_counts_match_recount() {
    let corpus = synthetic_corpus(1 << 20, 7);
    assert_eq!(corpus.len(), 1 << 20);
    let table = FrequencyTable::from_corpus(&corpus).unwrap();
    let mut oracle: HashMap<u8, u64> = HashMap::new();
    for &b in &corpus {
        *oracle.entry(b).or_default() += 1;
    }
    for v in 0..=255u8 {
        assert_eq!(table.count(v as u32), oracle.get(&v).copied().unwrap_or(0));
    }
    assert_eq!(table.total(), 1 << 20);
}

#[test]
fn stratification_ignores_corpus_order() {
    let corpus = synthetic_corpus(200_000, 1);
    let mut shuffled = corpus.clone();
    let mut rng = Rng::new(5);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.below(i + 1));
    }
    let a = stratify(&FrequencyTable::from_corpus(&corpus).unwrap()).unwrap();
    let b = stratify(&FrequencyTable::from_corpus(&shuffled).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampled_tag_marginals_follow_corpus_masses() {
    let corpus = Corpus::new(synthetic_corpus(400_000, 2)).unwrap();
    let table = FrequencyTable::from_corpus(corpus.train()).unwrap();
    let strata = stratify(&table).unwrap();
    let mut sampler = BatchSampler::new(corpus.train(), &strata, 100, 10, Rng::new(4)).unwrap();
    let mut seen = [0usize; 3];
    let mut n = 0;
    while n < 100_000 {
        let batch = sampler.next_batch();
        for (&tok, &tag) in batch.tokens.iter().zip(&batch.tags) {
            assert_eq!(tag, strata.regime(tok));
            seen[tag.index()] += 1;
        }
        n += batch.tokens.len();
    }
    let masses = strata.masses();
    for r in 0..3 {
        let expected = masses[r] as f64 / table.total() as f64;
        let got = seen[r] as f64 / n as f64;
        assert!((got - expected).abs() < 0.02, "regime {r}: {got} vs {expected}");
    }
}

#[test]
fn batches_are_shifted_windows() {
    let corpus = synthetic_corpus(10_000, 3);
    let strata = stratify(&FrequencyTable::from_corpus(&corpus).unwrap()).unwrap();
    let a: Vec<_> = BatchSampler::new(&corpus, &strata, 32, 4, Rng::new(1)).unwrap().take(5).collect();
    let b: Vec<_> = BatchSampler::new(&corpus, &strata, 32, 4, Rng::new(1)).unwrap().take(5).collect();
    assert_eq!(a, b);
    for batch in &a {
        for row in 0..batch.batch {
            let toks = &batch.tokens[row * 32..(row + 1) * 32];
            let tgts = &batch.targets[row * 32..(row + 1) * 32];
            assert_eq!(&toks[1..], &tgts[..31]);
        }
    }
    let evals = eval_batches(&corpus, &strata, 32, 4, 1000).unwrap();
    assert_eq!(evals.iter().map(|b| b.tokens.len()).sum::<usize>(), 32 * 1000usize.div_ceil(32));
    assert!(BatchSampler::new(&corpus[..32], &strata, 32, 1, Rng::new(0)).is_err());
}
