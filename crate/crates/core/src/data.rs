//! Synthetic parallel corpora, vocabulary and batching.
//!
//! Every domain is a deterministic transduction of a random source sequence
//! drawn from the domain's symbol subset. Domains that share an overlap group
//! draw from the same subset.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// How a domain maps a source sequence to its target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    Copy,
    Reverse,
    /// Cyclic shift by `k` positions within the domain's symbol subset.
    ShiftK { k: i64 },
    /// Swap positions (0,1), (2,3), ...; an odd trailing symbol stays.
    PairSwap,
    /// Sort by position in the domain's symbol subset.
    Sort,
    /// Substitute subset symbol `i` with subset symbol `permutation[i]`.
    VocabMap { permutation: Vec<usize> },
}

impl Rule {
    pub fn name(&self) -> String {
        match self {
            Rule::Copy => "copy".into(),
            Rule::Reverse => "reverse".into(),
            Rule::ShiftK { k } => format!("shift_{k}"),
            Rule::PairSwap => "pair_swap".into(),
            Rule::Sort => "sort".into(),
            Rule::VocabMap { .. } => "vocab_map".into(),
        }
    }

    /// Applies the rule to `src` given the domain's ordered symbol subset.
    pub fn apply(&self, src: &[String], subset: &[String]) -> Result<Vec<String>> {
        let index = |s: &String| {
            subset
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| Error::Generation(format!("symbol {s:?} outside the domain subset")))
        };
        Ok(match self {
            Rule::Copy => src.to_vec(),
            Rule::Reverse => src.iter().rev().cloned().collect(),
            Rule::ShiftK { k } => {
                let n = subset.len() as i64;
                src.iter()
                    .map(|s| {
                        let i = index(s)? as i64;
                        Ok(subset[(i + k).rem_euclid(n) as usize].clone())
                    })
                    .collect::<Result<_>>()?
            }
            Rule::PairSwap => {
                let mut out = src.to_vec();
                for pair in out.chunks_mut(2) {
                    if pair.len() == 2 {
                        pair.swap(0, 1);
                    }
                }
                out
            }
            Rule::Sort => {
                let mut idx = src.iter().map(index).collect::<Result<Vec<_>>>()?;
                idx.sort_unstable();
                idx.into_iter().map(|i| subset[i].clone()).collect()
            }
            Rule::VocabMap { permutation } => {
                if permutation.len() != subset.len() {
                    return Err(Error::Generation(format!(
                        "vocab_map permutation has {} entries for a subset of {}",
                        permutation.len(),
                        subset.len()
                    )));
                }
                src.iter()
                    .map(|s| Ok(subset[permutation[index(s)?]].clone()))
                    .collect::<Result<_>>()?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub rule: Rule,
    pub vocab_subset: Vec<String>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Inclusive source length range.
    pub len_range: [usize; 2],
    pub overlap_group: String,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_subset.is_empty() {
            return Err(Error::Config(format!("domain {}: empty vocab_subset", self.name)));
        }
        let [lo, hi] = self.len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "domain {}: invalid len_range [{lo}, {hi}]",
                self.name
            )));
        }
        if self.n_dev < 100 || self.n_test < 100 {
            return Err(Error::Config(format!(
                "domain {}: n_dev and n_test must be at least 100",
                self.name
            )));
        }
        if self.n_train == 0 {
            return Err(Error::Config(format!("domain {}: n_train is 0", self.name)));
        }
        let unique: HashSet<_> = self.vocab_subset.iter().collect();
        if unique.len() != self.vocab_subset.len() {
            return Err(Error::Config(format!(
                "domain {}: duplicate symbols in vocab_subset",
                self.name
            )));
        }
        if let Rule::VocabMap { permutation } = &self.rule {
            let mut seen = vec![false; self.vocab_subset.len()];
            for &p in permutation {
                if p >= seen.len() || seen[p] {
                    return Err(Error::Config(format!(
                        "domain {}: vocab_map is not a permutation of the subset",
                        self.name
                    )));
                }
                seen[p] = true;
            }
            if permutation.len() != seen.len() {
                return Err(Error::Config(format!(
                    "domain {}: vocab_map length mismatch",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SentencePair {
    pub fn new(src: &str, tgt: &str) -> Self {
        Self {
            src: tokenize(src),
            tgt: tokenize(tgt),
        }
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParallelCorpus {
    pub name: String,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn all_pairs(&self) -> impl Iterator<Item = &SentencePair> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Set of symbols appearing on either side.
    pub fn symbols(&self) -> BTreeSet<&str> {
        self.all_pairs()
            .flat_map(|p| p.src.iter().chain(&p.tgt))
            .map(String::as_str)
            .collect()
    }
}

/// Draws disjoint train/dev/test splits for `spec`; `tgt = rule(src)` exactly.
pub fn gen_domain_corpus(spec: &DomainSpec, seed: u64) -> Result<ParallelCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.n_train + spec.n_dev + spec.n_test;
    let [lo, hi] = spec.len_range;
    let mut seen = HashSet::with_capacity(total);
    let mut pairs = Vec::with_capacity(total);
    let max_attempts = total * 50 + 1000;
    let mut attempts = 0;
    while pairs.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation(format!(
                "domain {}: could only draw {} distinct sources of {total}",
                spec.name,
                pairs.len()
            )));
        }
        let len = rng.random_range(lo..=hi);
        let src: Vec<String> = (0..len)
            .map(|_| spec.vocab_subset[rng.random_range(0..spec.vocab_subset.len())].clone())
            .collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let tgt = spec.rule.apply(&src, &spec.vocab_subset)?;
        pairs.push(SentencePair { src, tgt });
    }
    let test = pairs.split_off(spec.n_train + spec.n_dev);
    let dev = pairs.split_off(spec.n_train);
    Ok(ParallelCorpus {
        name: spec.name.clone(),
        train: pairs,
        dev,
        test,
    })
}

/// Symbol ↔ id bijection. Ids 0..4 are reserved; the rest are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = symbols
            .into_iter()
            .map(|s| s.as_ref().to_owned())
            .filter(|s| !RESERVED.contains(&s.as_str()))
            .collect();
        let symbols = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, symbol: &str) -> usize {
        // reserved block is unsorted; search it first
        if let Some(i) = RESERVED.iter().position(|r| *r == symbol) {
            return i;
        }
        self.symbols[RESERVED.len()..]
            .binary_search_by(|s| s.as_str().cmp(symbol))
            .map(|i| i + RESERVED.len())
            .unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.symbols.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.symbol(i).to_owned()).collect()
    }

    pub fn encode_pair(&self, pair: &SentencePair) -> EncodedPair {
        EncodedPair {
            src: self.encode(&pair.src),
            tgt: self.encode(&pair.tgt),
        }
    }

    pub fn encode_all(&self, pairs: &[SentencePair]) -> Vec<EncodedPair> {
        pairs.iter().map(|p| self.encode_pair(p)).collect()
    }
}

/// Union of the symbols of all corpora plus the reserved tokens.
pub fn build_vocab(corpora: &[&ParallelCorpus]) -> Result<Vocabulary> {
    if corpora.is_empty() {
        return Err(Error::Input("build_vocab needs at least one corpus".into()));
    }
    Ok(Vocabulary::from_symbols(corpora.iter().flat_map(|c| c.symbols())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// A padded, teacher-forcing batch. Sources get a trailing EOS, decoder
/// inputs a leading BOS, and decoder outputs a trailing EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_pad: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_weight: Vec<f64>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Self {
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.src.len() + 1).max().unwrap_or(1);
        let tgt_len = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(1);
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src: vec![PAD; size * src_len],
            src_pad: vec![true; size * src_len],
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_weight: vec![0.0; size * tgt_len],
        };
        for (i, p) in pairs.iter().enumerate() {
            for (j, &t) in p.src.iter().chain(std::iter::once(&EOS)).enumerate() {
                b.src[i * src_len + j] = t;
                b.src_pad[i * src_len + j] = false;
            }
            for (j, &t) in std::iter::once(&BOS).chain(&p.tgt).enumerate() {
                b.tgt_in[i * tgt_len + j] = t;
            }
            for (j, &t) in p.tgt.iter().chain(std::iter::once(&EOS)).enumerate() {
                b.tgt_out[i * tgt_len + j] = t;
                b.tgt_weight[i * tgt_len + j] = 1.0;
            }
        }
        b
    }

    /// Same batch with `extra_src` and `extra_tgt` additional pad columns.
    pub fn with_extra_padding(&self, extra_src: usize, extra_tgt: usize) -> Self {
        let widen = |v: &[usize], old: usize, extra: usize, fill: usize| -> Vec<usize> {
            v.chunks(old)
                .flat_map(|row| row.iter().copied().chain(std::iter::repeat_n(fill, extra)))
                .collect()
        };
        let src_len = self.src_len + extra_src;
        let tgt_len = self.tgt_len + extra_tgt;
        Batch {
            size: self.size,
            src_len,
            tgt_len,
            src: widen(&self.src, self.src_len, extra_src, PAD),
            src_pad: self
                .src_pad
                .chunks(self.src_len)
                .flat_map(|r| r.iter().copied().chain(std::iter::repeat_n(true, extra_src)))
                .collect(),
            tgt_in: widen(&self.tgt_in, self.tgt_len, extra_tgt, PAD),
            tgt_out: widen(&self.tgt_out, self.tgt_len, extra_tgt, PAD),
            tgt_weight: self
                .tgt_weight
                .chunks(self.tgt_len)
                .flat_map(|r| r.iter().copied().chain(std::iter::repeat_n(0.0, extra_tgt)))
                .collect(),
        }
    }

    pub fn n_tokens(&self) -> f64 {
        self.tgt_weight.iter().sum()
    }
}

/// Shuffles `corpus` with `seed` and cuts it into padded batches; the last
/// batch may be smaller.
pub fn batch_iter(corpus: &[EncodedPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Input("cannot batch an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let pairs: Vec<&EncodedPair> = idx.iter().map(|&i| &corpus[i]).collect();
            Batch::from_pairs(&pairs)
        })
        .collect())
}

/// Unshuffled batches, for evaluation.
pub fn sequential_batches(corpus: &[EncodedPair], batch_size: usize) -> Vec<Batch> {
    corpus
        .chunks(batch_size.max(1))
        .map(|c| Batch::from_pairs(&c.iter().collect::<Vec<_>>()))
        .collect()
}

/// Reads a tab-separated parallel file (`src\ttgt` per line).
pub fn read_tsv(path: &Path) -> Result<Vec<SentencePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (src, tgt) = line.split_once('\t').ok_or_else(|| {
                Error::Input(format!("{}:{}: expected a tab-separated pair", path.display(), n + 1))
            })?;
            Ok(SentencePair::new(src, tgt))
        })
        .collect()
}

/// Reads two line-aligned files.
pub fn read_aligned(src_path: &Path, tgt_path: &Path) -> Result<Vec<SentencePair>> {
    let src = fs::read_to_string(src_path).map_err(|e| Error::io(src_path, e))?;
    let tgt = fs::read_to_string(tgt_path).map_err(|e| Error::io(tgt_path, e))?;
    let src: Vec<&str> = src.lines().collect();
    let tgt: Vec<&str> = tgt.lines().collect();
    if src.len() != tgt.len() {
        return Err(Error::Input(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| SentencePair::new(s, t))
        .collect())
}

pub fn write_tsv(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.src.join(" "));
        out.push('\t');
        out.push_str(&p.tgt.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Jaccard overlap of the token sets of two corpora.
pub fn token_jaccard(a: &ParallelCorpus, b: &ParallelCorpus) -> f64 {
    let sa = a.symbols();
    let sb = b.symbols();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Derives an independent seed for a named sub-stream (splitmix64 mixing).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded derangement of `0..n` for `vocab_map` domains.
pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(&mut rng);
        if n < 2 || p.iter().enumerate().all(|(i, &x)| i != x) {
            return p;
        }
    }
}
