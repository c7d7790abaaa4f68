//! Byte corpora, token-frequency tables, HEAD/MID/TAIL stratification and
//! deterministic batch sampling.

mod synth;

pub use synth::synthetic_corpus;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus of {len} tokens is too short for windows of {needed}")]
    CorpusTooShort { len: usize, needed: usize },
    #[error("frequency table has zero total mass")]
    ZeroMass,
    #[error("frequency table line {line}: {msg}")]
    BadTable { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Regime {
    Head,
    Mid,
    Tail,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Head, Regime::Mid, Regime::Tail];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Head => "HEAD",
            Self::Mid => "MID",
            Self::Tail => "TAIL",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "HEAD" => Ok(Self::Head),
            "MID" => Ok(Self::Mid),
            "TAIL" => Ok(Self::Tail),
            _ => Err(format!("unknown regime {s:?}")),
        }
    }
}

/// Occurrence counts `f(v)` per token type and their total `M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    /// Byte histogram over a 256-type vocabulary.
    pub fn from_corpus(corpus: &[u8]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut counts = vec![0u64; 256];
        for &b in corpus {
            counts[b as usize] += 1;
        }
        Ok(Self::from_counts(counts))
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, token: u32) -> u64 {
        self.counts.get(token as usize).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Reads `token_id<TAB>count` lines. Ids absent from the file count as
    /// zero; the vocabulary spans at least `min_vocab` types.
    pub fn load(path: &Path, min_vocab: usize) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut counts = vec![0u64; min_vocab];
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| DataError::BadTable { line: i + 1, msg: msg.to_string() };
            let (id, count) = line.split_once('\t').ok_or_else(|| bad("expected token_id<TAB>count"))?;
            let id: usize = id.trim().parse().map_err(|_| bad("bad token id"))?;
            let count: u64 = count.trim().parse().map_err(|_| bad("bad count"))?;
            if id >= counts.len() {
                counts.resize(id + 1, 0);
            }
            counts[id] = count;
        }
        Ok(Self::from_counts(counts))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for (id, c) in self.counts.iter().enumerate() {
            writeln!(out, "{id}\t{c}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Cumulative-mass tertile assignment of token types.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyStrata {
    pub tau_head: u64,
    pub tau_mid: u64,
    regimes: Vec<Regime>,
    masses: [u64; 3],
}

impl FrequencyStrata {
    pub fn regime(&self, token: u32) -> Regime {
        self.regimes.get(token as usize).copied().unwrap_or(Regime::Tail)
    }

    pub fn regimes(&self) -> &[Regime] {
        &self.regimes
    }

    /// Occurrence mass per regime, indexed by [`Regime::index`].
    pub fn masses(&self) -> [u64; 3] {
        self.masses
    }

    pub fn type_count(&self, regime: Regime) -> usize {
        self.regimes.iter().filter(|&&r| r == regime).count()
    }
}

/// Splits token types into HEAD/MID/TAIL by cumulative occurrence mass.
///
/// Types are sorted by decreasing frequency (ties by ascending id). A type
/// joins HEAD while the mass of the types ranked above it is below `M/3`,
/// and HEAD∪MID while that mass is below `2M/3`; the rest is TAIL. So each
/// boundary type is the one whose mass crosses the tertile. `tau_head` and
/// `tau_mid` are the frequencies of the last HEAD and last MID type.
pub fn stratify(table: &FrequencyTable) -> Result<FrequencyStrata> {
    let m = table.total();
    if m == 0 {
        return Err(DataError::ZeroMass);
    }
    let mut order: Vec<usize> = (0..table.vocab_size()).collect();
    order.sort_by(|&a, &b| table.counts[b].cmp(&table.counts[a]).then(a.cmp(&b)));

    let mut regimes = vec![Regime::Tail; table.vocab_size()];
    let mut masses = [0u64; 3];
    let (mut tau_head, mut tau_mid) = (0u64, 0u64);
    let mut before = 0u64;
    for &v in &order {
        let f = table.counts[v];
        // before < M/3  ⇔  3·before < M (exact integer comparison)
        let regime = if 3 * (before as u128) < m as u128 {
            tau_head = f;
            Regime::Head
        } else if 3 * (before as u128) < 2 * m as u128 {
            tau_mid = f;
            Regime::Mid
        } else {
            Regime::Tail
        };
        regimes[v] = regime;
        masses[regime.index()] += f;
        before += f;
    }
    if masses[Regime::Mid.index()] == 0 {
        tau_mid = tau_head;
    }
    Ok(FrequencyStrata { tau_head, tau_mid, regimes, masses })
}

/// A byte corpus with its held-out tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    train_end: usize,
}

/// Fraction of the corpus (at the end) reserved for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

impl Corpus {
    pub fn new(bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let valid = ((bytes.len() as f64) * VALIDATION_FRACTION).round() as usize;
        let train_end = bytes.len() - valid;
        Ok(Self { bytes, train_end })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(fs::read(path)?)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.train_end]
    }

    pub fn validation(&self) -> &[u8] {
        &self.bytes[self.train_end..]
    }
}

/// Flat `batch × seq` token block with next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    /// Regime of each input token.
    pub tags: Vec<Regime>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    fn from_windows(data: &[u8], starts: &[usize], seq: usize, strata: &FrequencyStrata) -> Self {
        let mut tokens = Vec::with_capacity(starts.len() * seq);
        let mut targets = Vec::with_capacity(starts.len() * seq);
        for &s in starts {
            tokens.extend(data[s..s + seq].iter().map(|&b| b as u32));
            targets.extend(data[s + 1..s + seq + 1].iter().map(|&b| b as u32));
        }
        let tags = tokens.iter().map(|&t| strata.regime(t)).collect();
        Self { tokens, targets, tags, batch: starts.len(), seq }
    }
}

/// Uniformly random training windows.
pub struct BatchSampler<'a> {
    data: &'a [u8],
    strata: &'a FrequencyStrata,
    seq: usize,
    batch: usize,
    rng: Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a [u8], strata: &'a FrequencyStrata, seq: usize, batch: usize, rng: Rng) -> Result<Self> {
        if data.len() <= seq {
            return Err(DataError::CorpusTooShort { len: data.len(), needed: seq + 1 });
        }
        Ok(Self { data, strata, seq, batch, rng })
    }

    pub fn next_batch(&mut self) -> Batch {
        let span = self.data.len() - self.seq;
        let starts: Vec<usize> = (0..self.batch).map(|_| self.rng.below(span)).collect();
        Batch::from_windows(self.data, &starts, self.seq, self.strata)
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = Batch;
    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Consecutive non-overlapping windows covering up to `max_tokens` input
/// tokens, grouped into batches of at most `batch` sequences.
pub fn eval_batches(data: &[u8], strata: &FrequencyStrata, seq: usize, batch: usize, max_tokens: usize) -> Result<Vec<Batch>> {
    if data.len() <= seq {
        return Err(DataError::CorpusTooShort { len: data.len(), needed: seq + 1 });
    }
    let available = (data.len() - 1) / seq;
    let wanted = max_tokens.div_ceil(seq).max(1);
    let starts: Vec<usize> = (0..available.min(wanted)).map(|w| w * seq).collect();
    Ok(starts.chunks(batch.max(1)).map(|c| Batch::from_windows(data, c, seq, strata)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_small_corpus() {
        let t = FrequencyTable::from_corpus(b"aab").unwrap();
        assert_eq!((t.count(b'a' as u32), t.count(b'b' as u32), t.total()), (2, 1, 3));
        let t = FrequencyTable::from_corpus(&[7u8; 50]).unwrap();
        assert_eq!(t.counts().iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(t.count(7), 50);
        assert!(matches!(FrequencyTable::from_corpus(b""), Err(DataError::EmptyCorpus)));
    }

    #[test]
    fn equal_counts_one_type_per_regime() {
        let s = stratify(&FrequencyTable::from_counts(vec![5, 5, 5])).unwrap();
        assert_eq!(s.regimes(), &[Regime::Head, Regime::Mid, Regime::Tail]);
        assert_eq!(s.masses(), [5, 5, 5]);
        assert!(s.tau_head >= s.tau_mid);
    }

    #[test]
    fn single_type_is_head() {
        let s = stratify(&FrequencyTable::from_counts(vec![0, 12, 0])).unwrap();
        assert_eq!(s.regime(1), Regime::Head);
        assert_eq!(s.type_count(Regime::Mid), 0);
        assert_eq!(s.masses(), [12, 0, 0]);
    }

    #[test]
    fn zero_mass_rejected() {
        assert!(matches!(stratify(&FrequencyTable::from_counts(vec![0, 0])), Err(DataError::ZeroMass)));
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("freq.tsv");
        let t = FrequencyTable::from_corpus(b"hello world").unwrap();
        t.save(&p).unwrap();
        assert_eq!(FrequencyTable::load(&p, 256).unwrap(), t);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("0\t0\n"));
    }

    #[test]
    fn sampler_is_deterministic_and_tagged() {
        let corpus = synthetic_corpus(20_000, 3);
        let strata = stratify(&FrequencyTable::from_corpus(&corpus).unwrap()).unwrap();
        let mut a = BatchSampler::new(&corpus, &strata, 16, 4, Rng::new(5)).unwrap();
        let mut b = BatchSampler::new(&corpus, &strata, 16, 4, Rng::new(5)).unwrap();
        for _ in 0..10 {
            let (x, y) = (a.next_batch(), b.next_batch());
            assert_eq!(x, y);
            for w in 0..4 {
                assert_eq!(x.tokens[w * 16 + 1..(w + 1) * 16], x.targets[w * 16..(w + 1) * 16 - 1]);
            }
            assert!(x.tokens.iter().zip(&x.tags).all(|(&t, &r)| strata.regime(t) == r));
        }
        assert!(BatchSampler::new(&corpus[..16], &strata, 16, 1, Rng::new(0)).is_err());
    }

    #[test]
    fn eval_windows_cover_requested_tokens() {
        let corpus = synthetic_corpus(10_000, 1);
        let strata = stratify(&FrequencyTable::from_corpus(&corpus).unwrap()).unwrap();
        let batches = eval_batches(&corpus, &strata, 32, 8, 1000).unwrap();
        let total: usize = batches.iter().map(|b| b.tokens.len()).sum();
        assert_eq!(total, 32 * 32);
        assert_eq!(batches.len(), 4);
        let all = eval_batches(&corpus[..100], &strata, 32, 8, usize::MAX).unwrap();
        assert_eq!(all.iter().map(|b| b.batch).sum::<usize>(), 3);
    }
}
