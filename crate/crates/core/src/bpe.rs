//! Byte-level BPE over serialized coefficient streams.
//!
//! Symbols `0..256` are raw bytes; merge `i` creates symbol `256 + i`.
//! Training repeatedly merges the most frequent adjacent pair. Equal counts
//! are resolved by the lexicographically smallest `(left bytes, right
//! bytes)` expansion and then by the smaller symbol ids, which makes the
//! merge table a pure function of the corpus.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::CodecError;

pub const BASE_SYMBOLS: u32 = 256;
pub const DEFAULT_VOCAB: usize = 2048;

type Pair = (u32, u32);

/// Ordered merge table with cached byte expansions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<Pair>,
    ranks: HashMap<Pair, u32>,
    expansions: Vec<Vec<u8>>,
}

impl Serialize for BpeVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.merges.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BpeVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let merges = Vec::<Pair>::deserialize(d)?;
        BpeVocab::from_merges(merges).map_err(serde::de::Error::custom)
    }
}

impl BpeVocab {
    /// Base alphabet only.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge table is valid")
    }

    pub fn from_merges(merges: Vec<Pair>) -> Result<Self, CodecError> {
        let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let next = BASE_SYMBOLS + i as u32;
            if l >= next || r >= next {
                return Err(CodecError::Invalid(format!(
                    "merge {i} references undefined symbol ({l}, {r})"
                )));
            }
            if ranks.insert((l, r), i as u32).is_some() {
                return Err(CodecError::Invalid(format!("duplicate merge ({l}, {r})")));
            }
            let mut e = expansions[l as usize].clone();
            e.extend_from_slice(&expansions[r as usize]);
            expansions.push(e);
        }
        Ok(Self {
            merges,
            ranks,
            expansions,
        })
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.expansions.len()
    }

    pub fn expansion(&self, id: u32) -> Option<&[u8]> {
        self.expansions.get(id as usize).map(Vec::as_slice)
    }

    /// The first `vocab_size - 256` merges.
    pub fn truncated(&self, vocab_size: usize) -> Self {
        let keep = vocab_size.saturating_sub(BASE_SYMBOLS as usize).min(self.merges.len());
        Self::from_merges(self.merges[..keep].to_vec()).expect("prefix of a valid table")
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut symbols: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank as usize];
            symbols = merge_pair(&symbols, pair, BASE_SYMBOLS + rank);
        }
        symbols
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let e = self.expansion(id).ok_or(CodecError::UnknownToken(id))?;
            out.extend_from_slice(e);
        }
        Ok(out)
    }
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn merge_pair(symbols: &[u32], pair: Pair, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(new);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: Pair,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap: higher count wins, then the smaller expansion, then ids
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpeTrainConfig {
    pub vocab_size: usize,
    /// Worker threads for pair counting; the result does not depend on it.
    pub threads: usize,
}

impl Default for BpeTrainConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB,
            threads: 1,
        }
    }
}

fn count_pairs(words: &[Vec<u32>], weights: &[u64]) -> HashMap<Pair, i64> {
    words
        .par_iter()
        .zip(weights.par_iter())
        .fold(HashMap::new, |mut acc: HashMap<Pair, i64>, (w, &n)| {
            for p in w.windows(2) {
                *acc.entry((p[0], p[1])).or_default() += n as i64;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        })
}

/// Learns a merge table from a corpus of byte strings.
///
/// Stops once the vocabulary reaches `vocab_size` or no pair occurs at
/// least twice.
pub fn bpe_train(corpus: &[Vec<u8>], config: BpeTrainConfig) -> Result<BpeVocab, CodecError> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(CodecError::Training("corpus is empty".into()));
    }
    if config.vocab_size < BASE_SYMBOLS as usize {
        return Err(CodecError::Training(format!(
            "vocab size {} is below the 256-symbol base alphabet",
            config.vocab_size
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| CodecError::Training(e.to_string()))?;

    // identical strings are merged identically, so train on distinct ones
    let mut distinct: BTreeMap<&[u8], u64> = BTreeMap::new();
    for s in corpus.iter().filter(|s| s.len() >= 2) {
        *distinct.entry(s.as_slice()).or_default() += 1;
    }
    let mut words: Vec<Vec<u32>> = distinct
        .keys()
        .map(|s| s.iter().map(|&b| u32::from(b)).collect())
        .collect();
    let weights: Vec<u64> = distinct.values().copied().collect();

    let mut counts = pool.install(|| count_pairs(&words, &weights));
    let mut occurs: HashMap<Pair, Vec<usize>> = HashMap::new();
    for (i, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            occurs.entry((p[0], p[1])).or_default().push(i);
        }
    }

    let mut vocab = BpeVocab::bytes_only();
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&pair, &count)| candidate(&vocab, pair, count))
        .collect();

    let target_merges = config.vocab_size - BASE_SYMBOLS as usize;
    while vocab.merges.len() < target_merges {
        let Some(top) = heap.pop() else { break };
        if counts.get(&top.pair).copied().unwrap_or(0) != top.count {
            continue; // stale entry
        }
        if top.count < 2 {
            break;
        }
        let pair = top.pair;
        let new_id = BASE_SYMBOLS + vocab.merges.len() as u32;
        let mut touched: Vec<Pair> = Vec::new();

        let mut idxs = occurs.remove(&pair).unwrap_or_default();
        idxs.sort_unstable();
        idxs.dedup();
        for wi in idxs {
            let word = &words[wi];
            if !word.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            let n = weights[wi] as i64;
            let merged = merge_pair(word, pair, new_id);
            for p in word.windows(2) {
                let key = (p[0], p[1]);
                *counts.get_mut(&key).expect("counted pair") -= n;
                touched.push(key);
            }
            for p in merged.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_default() += n;
                touched.push(key);
                if key.0 == new_id || key.1 == new_id {
                    occurs.entry(key).or_default().push(wi);
                }
            }
            words[wi] = merged;
        }

        vocab.merges.push(pair);
        vocab.ranks.insert(pair, new_id - BASE_SYMBOLS);
        let mut e = vocab.expansions[pair.0 as usize].clone();
        e.extend_from_slice(&vocab.expansions[pair.1 as usize]);
        vocab.expansions.push(e);

        touched.sort_unstable();
        touched.dedup();
        for key in touched {
            let c = counts[&key];
            if c <= 0 {
                counts.remove(&key);
            } else if key != pair {
                heap.push(candidate(&vocab, key, c));
            }
        }
        counts.remove(&pair);
    }
    Ok(vocab)
}

fn candidate(vocab: &BpeVocab, pair: Pair, count: i64) -> Candidate {
    Candidate {
        count,
        left: vocab.expansions[pair.0 as usize].clone(),
        right: vocab.expansions[pair.1 as usize].clone(),
        pair,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn train(corpus: &[Vec<u8>], vocab_size: usize) -> BpeVocab {
        bpe_train(
            corpus,
            BpeTrainConfig {
                vocab_size,
                threads: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn alternating_corpus_merges_ab_first() {
        let corpus = vec![b"ABABABAB".repeat(1000)];
        let v = train(&corpus, 300);
        assert_eq!(v.merges()[0], (b'A' as u32, b'B' as u32));
        let first_only = v.truncated(257);
        assert_eq!(first_only.encode(b"ABAB").len(), 2);
    }

    /// Hand simulation of greedy pairing on a single repeated byte: each
    /// round halves the run, and a pair seen only once is never merged.
    fn chain_oracle(run: usize) -> usize {
        let mut len = run;
        let mut rounds = 0;
        while len / 2 >= 2 {
            len = len.div_ceil(2);
            rounds += 1;
        }
        rounds
    }

    #[test]
    fn single_byte_corpus_forms_a_chain() {
        let k = 6;
        let corpus = vec![vec![b'z'; 1 << k]];
        let v = train(&corpus, 2048);
        assert_eq!(v.merges().len(), chain_oracle(1 << k));
        for (i, &(l, r)) in v.merges().iter().enumerate() {
            let prev = if i == 0 { b'z' as u32 } else { 255 + i as u32 };
            assert_eq!((l, r), (prev, prev));
        }
        for j in 0..k {
            assert_eq!(v.encode(&vec![b'z'; 1 << j]).len(), 1, "run 2^{j}");
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            bpe_train(&[], BpeTrainConfig::default()),
            Err(CodecError::Training(_))
        ));
        assert!(bpe_train(&[vec![]], BpeTrainConfig::default()).is_err());
    }

    #[test]
    fn empty_and_uncovered_inputs() {
        let v = train(&[b"aaaa".to_vec()], 300);
        assert!(v.encode(b"").is_empty());
        assert!(v.decode(&[]).unwrap().is_empty());
        let ids = v.encode(b"xyz");
        assert_eq!(ids, vec![b'x' as u32, b'y' as u32, b'z' as u32]);
    }

    #[test]
    fn unknown_id_is_codec_error() {
        let v = BpeVocab::bytes_only();
        assert_eq!(v.decode(&[256]), Err(CodecError::UnknownToken(256)));
    }

    #[test]
    fn invalid_merge_tables_rejected() {
        assert!(BpeVocab::from_merges(vec![(256, 1)]).is_err());
        assert!(BpeVocab::from_merges(vec![(1, 2), (1, 2)]).is_err());
    }

    #[test]
    fn tie_break_prefers_smaller_expansion() {
        // "ab" and "cd" occur equally often
        let corpus = vec![b"ab.cd".to_vec(), b"cd.ab".to_vec()];
        let v = train(&corpus, 257);
        assert_eq!(v.merges()[0], (b'a' as u32, b'b' as u32));
    }

    #[test]
    fn thread_count_does_not_change_merges() {
        let mut rng = DetRng::new(99);
        let corpus: Vec<Vec<u8>> = (0..200)
            .map(|_| (0..64).map(|_| rng.below(6) as u8).collect())
            .collect();
        let one = bpe_train(&corpus, BpeTrainConfig { vocab_size: 600, threads: 1 }).unwrap();
        let many = bpe_train(&corpus, BpeTrainConfig { vocab_size: 600, threads: 8 }).unwrap();
        assert_eq!(one, many);
    }

    /// Reference trainer: recount every pair from scratch after each merge.
    fn naive_train(corpus: &[Vec<u8>], vocab_size: usize) -> Vec<Pair> {
        let mut words: Vec<Vec<u32>> = corpus
            .iter()
            .map(|s| s.iter().map(|&b| b as u32).collect())
            .collect();
        let mut exp: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut merges = Vec::new();
        while 256 + merges.len() < vocab_size {
            let mut counts: BTreeMap<Pair, i64> = BTreeMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += 1;
                }
            }
            let best = counts.iter().max_by(|a, b| {
                a.1.cmp(b.1)
                    .then_with(|| exp[b.0 .0 as usize].cmp(&exp[a.0 .0 as usize]))
                    .then_with(|| exp[b.0 .1 as usize].cmp(&exp[a.0 .1 as usize]))
                    .then_with(|| b.0.cmp(a.0))
            });
            let Some((&pair, &c)) = best else { break };
            if c < 2 {
                break;
            }
            let id = 256 + merges.len() as u32;
            for w in words.iter_mut() {
                *w = merge_pair(w, pair, id);
            }
            let mut e = exp[pair.0 as usize].clone();
            e.extend_from_slice(&exp[pair.1 as usize]);
            exp.push(e);
            merges.push(pair);
        }
        merges
    }

    #[test]
    fn incremental_trainer_matches_naive_recount() {
        let mut rng = DetRng::new(5);
        for round in 0..4 {
            let corpus: Vec<Vec<u8>> = (0..40)
                .map(|_| {
                    let len = 2 + rng.below(40) as usize;
                    (0..len).map(|_| rng.below(3 + round) as u8).collect()
                })
                .collect();
            let fast = train(&corpus, 400);
            assert_eq!(fast.merges(), naive_train(&corpus, 400).as_slice(), "round {round}");
        }
    }

    #[test]
    fn serde_roundtrip_of_merge_table() {
        let v = train(&[b"abcabcabcabd".to_vec()], 270);
        let json = serde_json::to_string(&v).unwrap();
        let back: BpeVocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
