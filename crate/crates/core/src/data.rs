//! Corpora, byte tokenization, frequency tables and batch sampling.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BYTE_VOCAB: usize = 256;

/// Row-sum tolerance for transition tables.
const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty token sequence")]
    Empty,
    #[error("corpus of {len} tokens is too short for windows of {need}")]
    TooShort { len: usize, need: usize },
    #[error("invalid transition table: {0}")]
    NotStochastic(String),
    #[error("token {0} is not a byte")]
    NotAByte(u32),
    #[error("batch and seq_len must be positive")]
    BadBatchShape,
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub source_name: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Splits off the final `frac` of the tokens as a holdout. Returns
    /// `(train, holdout)`.
    pub fn split_holdout(&self, frac: f64) -> (TokenSeq, TokenSeq) {
        let cut = self.len() - (self.len() as f64 * frac).floor() as usize;
        let part = |toks: &[u32], tag: &str| TokenSeq {
            tokens: toks.to_vec(),
            source_name: format!("{}[{tag}]", self.source_name),
        };
        (part(&self.tokens[..cut], "train"), part(&self.tokens[cut..], "holdout"))
    }
}

/// Byte-level tokenization: token id = byte value.
pub fn ingest(raw: &[u8], source_name: &str) -> TokenSeq {
    TokenSeq {
        tokens: raw.iter().map(|&b| b as u32).collect(),
        source_name: source_name.to_string(),
    }
}

pub fn ingest_file(path: &Path) -> Result<TokenSeq, DataError> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ingest(&raw, &path.display().to_string()))
}

pub fn detokenize(seq: &TokenSeq) -> Result<Vec<u8>, DataError> {
    seq.tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| DataError::NotAByte(t)))
        .collect()
}

/// Token counts sorted by descending count, ties by ascending id. Only
/// tokens that occur are listed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable(pub Vec<(u32, u64)>);

impl FreqTable {
    pub fn total(&self) -> u64 {
        self.0.iter().map(|&(_, c)| c).sum()
    }

    /// The `k` most frequent token ids (fewer if fewer distinct tokens occur).
    pub fn top_ids(&self, k: usize) -> Vec<u32> {
        self.0.iter().take(k).map(|&(t, _)| t).collect()
    }
}

pub fn frequencies(seq: &TokenSeq) -> Result<FreqTable, DataError> {
    if seq.is_empty() {
        return Err(DataError::Empty);
    }
    let max = *seq.tokens.iter().max().unwrap() as usize;
    let mut counts = vec![0u64; max + 1];
    for &t in &seq.tokens {
        counts[t as usize] += 1;
    }
    let mut table: Vec<(u32, u64)> = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .map(|(t, c)| (t as u32, c))
        .collect();
    table.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(FreqTable(table))
}

/// Default number of tokens in embedding-similarity analyses.
pub fn default_top_k(vocab: usize) -> usize {
    vocab.min(350)
}

/// One batch of flat row-major `batch × seq_len` inputs and targets, where
/// `targets[i][t] == inputs[i][t+1]` within each window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Start offset of each window in the corpus.
    pub starts: Vec<usize>,
}

/// Serializable position of a [`BatchSampler`]'s generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

/// Windows drawn uniformly with replacement from a corpus.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    batch: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seq: &TokenSeq, batch: usize, seq_len: usize, seed: u64) -> Result<Self, DataError> {
        Self::check(seq, batch, seq_len)?;
        Ok(Self {
            batch,
            seq_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn check(seq: &TokenSeq, batch: usize, seq_len: usize) -> Result<(), DataError> {
        if batch == 0 || seq_len == 0 {
            return Err(DataError::BadBatchShape);
        }
        if seq.len() < seq_len + 1 {
            return Err(DataError::TooShort {
                len: seq.len(),
                need: seq_len + 1,
            });
        }
        Ok(())
    }

    pub fn next_batch(&mut self, seq: &TokenSeq) -> Result<Batch, DataError> {
        Self::check(seq, self.batch, self.seq_len)?;
        let n_starts = seq.len() - self.seq_len;
        let mut out = Batch {
            batch: self.batch,
            seq_len: self.seq_len,
            inputs: Vec::with_capacity(self.batch * self.seq_len),
            targets: Vec::with_capacity(self.batch * self.seq_len),
            starts: Vec::with_capacity(self.batch),
        };
        for _ in 0..self.batch {
            let s = self.rng.random_range(0..n_starts);
            out.starts.push(s);
            out.inputs.extend_from_slice(&seq.tokens[s..s + self.seq_len]);
            out.targets.extend_from_slice(&seq.tokens[s + 1..s + self.seq_len + 1]);
        }
        Ok(out)
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: hex::encode(self.rng.get_seed()),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(seq: &TokenSeq, batch: usize, seq_len: usize, state: &SamplerState) -> Option<Self> {
        Self::check(seq, batch, seq_len).ok()?;
        let seed: [u8; 32] = hex::decode(&state.seed).ok()?.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos.parse().ok()?);
        Some(Self { batch, seq_len, rng })
    }
}

/// Fixed, non-overlapping evaluation windows covering the start of `seq`,
/// at most `max_windows` of them, grouped into batches of `batch`.
pub fn eval_batches(seq: &TokenSeq, batch: usize, seq_len: usize, max_windows: usize) -> Vec<Batch> {
    let n = ((seq.len().saturating_sub(1)) / seq_len).min(max_windows);
    let starts: Vec<usize> = (0..n).map(|i| i * seq_len).collect();
    starts
        .chunks(batch)
        .filter(|c| c.len() == batch)
        .map(|c| Batch {
            batch,
            seq_len,
            inputs: c.iter().flat_map(|&s| seq.tokens[s..s + seq_len].iter().copied()).collect(),
            targets: c.iter().flat_map(|&s| seq.tokens[s + 1..s + seq_len + 1].iter().copied()).collect(),
            starts: c.to_vec(),
        })
        .collect()
}

/// First-order Markov chain over states `0..n`, emitted as token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovChain {
    /// Row-stochastic `n × n` table; `transitions[i][j] = P(j | i)`.
    pub transitions: Vec<Vec<f64>>,
    /// Token id emitted for each state; defaults to the state index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbols: Option<Vec<u32>>,
}

impl MarkovChain {
    pub fn new(transitions: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let c = Self {
            transitions,
            symbols: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_symbols(mut self, symbols: Vec<u32>) -> Result<Self, DataError> {
        self.symbols = Some(symbols);
        self.validate()?;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.transitions.len();
        if n == 0 {
            return Err(DataError::NotStochastic("no states".into()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != n {
                return Err(DataError::NotStochastic(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(DataError::NotStochastic(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(DataError::NotStochastic(format!("row {i} sums to {s}")));
            }
        }
        if let Some(sym) = &self.symbols {
            if sym.len() != n {
                return Err(DataError::NotStochastic(format!("{} symbols for {n} states", sym.len())));
            }
        }
        Ok(())
    }

    pub fn symbol(&self, state: usize) -> u32 {
        self.symbols.as_ref().map_or(state as u32, |s| s[state])
    }

    /// Stationary distribution by power iteration on the lazy chain
    /// `(P + I)/2`, which converges for every irreducible chain.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.n_states();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..100_000 {
            let mut next = vec![0.0; n];
            for (i, row) in self.transitions.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += pi[i] * 0.5 * p;
                }
                next[i] += 0.5 * pi[i];
            }
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate `Σ_i π_i H(P(·|i))` in nats: the best achievable
    /// next-token loss on a long sample.
    pub fn conditional_entropy(&self) -> f64 {
        let pi = self.stationary();
        self.transitions
            .iter()
            .zip(&pi)
            .map(|(row, &w)| {
                let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                w * h
            })
            .sum()
    }
}

/// Samples `length` tokens from `chain`, starting in state 0.
pub fn synth_markov(chain: &MarkovChain, length: usize, rng: &mut impl Rng) -> Result<TokenSeq, DataError> {
    chain.validate()?;
    let cumulative: Vec<Vec<f64>> = chain
        .transitions
        .iter()
        .map(|row| {
            row.iter()
                .scan(0.0, |acc, &p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let mut state = 0usize;
    let mut tokens = Vec::with_capacity(length);
    for _ in 0..length {
        tokens.push(chain.symbol(state));
        let u: f64 = rng.random();
        let row = &cumulative[state];
        // rounding can leave the last cumulative value just below 1
        state = row.iter().position(|&c| u < c).unwrap_or_else(|| {
            chain.transitions[state].iter().rposition(|&p| p > 0.0).unwrap()
        });
    }
    Ok(TokenSeq {
        tokens,
        source_name: format!("markov{}", chain.n_states()),
    })
}

/// Where a run's corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub chain: MarkovChain,
    pub length: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<TokenSeq, DataError> {
        match self {
            DataSource::Path(p) => ingest_file(p),
            DataSource::Synth(s) => synth_markov(&s.chain, s.length, &mut ChaCha8Rng::seed_from_u64(s.seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_bytes() {
        assert_eq!(ingest(b"ab", "t").tokens, vec![97, 98]);
        assert!(ingest(b"", "t").is_empty());
        let raw: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
        let s = ingest(&raw, "big");
        assert_eq!(s.len(), raw.len());
        assert_eq!(detokenize(&s).unwrap(), raw);
    }

    #[test]
    fn detokenize_rejects_non_bytes() {
        let s = TokenSeq {
            tokens: vec![1, 300],
            source_name: "x".into(),
        };
        assert!(matches!(detokenize(&s), Err(DataError::NotAByte(300))));
    }

    #[test]
    fn frequency_order_and_ties() {
        assert_eq!(frequencies(&ingest(b"aab", "t")).unwrap().0, vec![(97, 2), (98, 1)]);
        assert_eq!(frequencies(&ingest(b"cbab", "t")).unwrap().0, vec![(98, 2), (97, 1), (99, 1)]);
        assert!(matches!(frequencies(&ingest(b"", "t")), Err(DataError::Empty)));
    }

    #[test]
    fn forced_window_and_too_short() {
        let s = ingest(b"hello", "t");
        let mut sm = BatchSampler::new(&s, 3, 4, 1).unwrap();
        let b = sm.next_batch(&s).unwrap();
        assert_eq!(b.starts, vec![0, 0, 0]);
        assert_eq!(&b.inputs[..4], b"hell".map(u32::from).as_slice());
        assert_eq!(&b.targets[..4], b"ello".map(u32::from).as_slice());
        assert!(matches!(BatchSampler::new(&s, 1, 5, 1), Err(DataError::TooShort { len: 5, need: 6 })));
    }

    #[test]
    fn sampler_state_round_trip() {
        let s = ingest(&[7u8; 100], "t");
        let mut a = BatchSampler::new(&s, 2, 8, 42).unwrap();
        a.next_batch(&s).unwrap();
        let st = a.state();
        let mut b = BatchSampler::restore(&s, 2, 8, &st).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_batch(&s).unwrap(), b.next_batch(&s).unwrap());
        }
    }

    #[test]
    fn two_cycle_alternates() {
        let c = MarkovChain::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]])
            .unwrap()
            .with_symbols(vec![b'a' as u32, b'b' as u32])
            .unwrap();
        let s = synth_markov(&c, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(detokenize(&s).unwrap(), b"abababab");
        assert!(c.conditional_entropy().abs() < 1e-15);
    }

    #[test]
    fn uniform_chain_entropy_is_log_v() {
        let v = 5;
        let c = MarkovChain::new(vec![vec![1.0 / v as f64; v]; v]).unwrap();
        assert!((c.conditional_entropy() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(MarkovChain::new(vec![vec![0.5, 0.4], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
        assert!(MarkovChain::new(vec![vec![1.0]; 2]).is_err());
        assert!(MarkovChain::new(vec![]).is_err());
    }

    #[test]
    fn holdout_split_takes_the_tail() {
        let s = ingest(b"0123456789", "t");
        let (tr, ho) = s.split_holdout(0.3);
        assert_eq!(tr.tokens.len(), 7);
        assert_eq!(ho.tokens, b"789".map(u32::from).to_vec());
    }

    #[test]
    fn eval_batches_are_full_and_disjoint() {
        let s = ingest(&(0..=100u8).collect::<Vec<_>>(), "t");
        let bs = eval_batches(&s, 2, 10, 64);
        assert_eq!(bs.len(), 5);
        assert_eq!(bs[1].starts, vec![20, 30]);
        assert_eq!(bs[1].targets[0], 21);
    }
}
