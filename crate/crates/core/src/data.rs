//! Vocabularies, parallel corpora, batching and synthetic translation tasks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::{TokenId, BOS, EOS, PAD, UNK};

/// Surface forms of the reserved ids 0..4.
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Vocabulary of the reserved tokens followed by `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary entry {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, UNK when absent.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens; PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Non-reserved tokens, in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; line `k` (0-based) holds id `k + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.entries().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }
}

/// Whitespace-token vocabulary keeping tokens seen at least `min_count`
/// times, most frequent first, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for t in line.as_ref().split_whitespace() {
            *counts.entry(t).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// One training example: `y` ends with EOS and `z` is BOS followed by
/// `y` without its EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub z: Vec<TokenId>,
}

impl SentencePair {
    pub fn new(x: Vec<TokenId>, target: &[TokenId]) -> Self {
        let mut y = target.to_vec();
        y.push(EOS);
        let mut z = Vec::with_capacity(y.len());
        z.push(BOS);
        z.extend_from_slice(target);
        SentencePair { x, y, z }
    }

    /// Target tokens without EOS.
    pub fn target(&self) -> &[TokenId] {
        &self.y[..self.y.len() - 1]
    }

    pub fn tokens(&self) -> usize {
        self.x.len() + self.y.len()
    }
}

/// Aligned source and target lines.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn encode(&self, src: &Vocab, trg: &Vocab) -> Vec<SentencePair> {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, t)| SentencePair::new(src.encode(s), &trg.encode(t)))
            .collect()
    }

    /// Lines `range` of both sides.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TextCorpus {
        TextCorpus {
            source: self.source[range.clone()].to_vec(),
            target: self.target[range].to_vec(),
        }
    }

    pub fn write(&self, src_path: &Path, trg_path: &Path) -> Result<()> {
        write_lines(src_path, &self.source)?;
        write_lines(trg_path, &self.target)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads two line-aligned files.
pub fn load_parallel(src_path: &Path, trg_path: &Path) -> Result<TextCorpus> {
    let source = read_lines(src_path)?;
    let target = read_lines(trg_path)?;
    if source.len() != target.len() {
        return Err(Error::Data(format!(
            "parallel files differ in length: {} has {} lines, {} has {} lines",
            src_path.display(),
            source.len(),
            trg_path.display(),
            target.len()
        )));
    }
    Ok(TextCorpus { source, target })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// `t_j = π(s_j)`.
    Cipher,
    /// The ciphered source, reversed.
    Reverse,
    /// The ciphered source with local reordering: a marked source word
    /// (index a multiple of 3) followed by an unmarked one trade places.
    CipherLocalSwap,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cipher" => Ok(ToyKind::Cipher),
            "reverse" => Ok(ToyKind::Reverse),
            "cipher-local-swap" | "cipher+local-swap" => Ok(ToyKind::CipherLocalSwap),
            other => Err(Error::Config(format!("unknown toy task kind {other:?}"))),
        }
    }
}

/// A synthetic task with its ground-truth mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub kind: ToyKind,
    pub corpus: TextCorpus,
    /// `cipher[k]` is the target index of source word `k`.
    pub cipher: Vec<usize>,
}

impl ToyTask {
    /// The reference translation of a source line under the task's rule.
    pub fn translate(&self, source: &str) -> String {
        let ids: Vec<usize> = source
            .split_whitespace()
            .map(|t| t[1..].parse().expect("toy source token"))
            .collect();
        let out = apply_rule(self.kind, &self.cipher, &ids);
        out.iter().map(|k| format!("t{k}")).collect::<Vec<_>>().join(" ")
    }
}

/// Successors per source word in the Markov chain generating sentences.
const BRANCHING: usize = 4;

fn swaps(word: usize) -> bool {
    word % 3 == 0
}

fn apply_rule(kind: ToyKind, cipher: &[usize], src: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = src.iter().map(|&k| cipher[k]).collect();
    match kind {
        ToyKind::Cipher => {}
        ToyKind::Reverse => out.reverse(),
        ToyKind::CipherLocalSwap => {
            for j in 0..out.len().saturating_sub(1) {
                // a marked word never ends a swapped pair, so pairs cannot overlap
                if swaps(src[j]) && !swaps(src[j + 1]) {
                    out.swap(j, j + 1);
                }
            }
        }
    }
    out
}

/// Deterministic synthetic parallel corpus over `vocab_size` source words
/// `s0..` and target words `t0..`. Sources follow a sparse random Markov
/// chain, so a language model has context to learn. Lengths are uniform in
/// `len_range` (inclusive).
pub fn make_toy_task(
    kind: ToyKind,
    vocab_size: usize,
    corpus_size: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<ToyTask> {
    if vocab_size < 10 {
        return Err(Error::Config(format!("toy vocabulary size {vocab_size} below 10")));
    }
    let (lo, hi) = len_range;
    if lo == 0 || hi < lo {
        return Err(Error::Config(format!("invalid toy length range {lo}..={hi}")));
    }
    let mut rng = rng::rng_for(seed, stream::TOY_TASK, 0);
    let mut cipher: Vec<usize> = (0..vocab_size).collect();
    cipher.shuffle(&mut rng);
    let successors: Vec<Vec<usize>> = (0..vocab_size)
        .map(|_| (0..BRANCHING).map(|_| rng.gen_range(0..vocab_size)).collect())
        .collect();
    let mut corpus = TextCorpus::default();
    for _ in 0..corpus_size {
        let len = rng.gen_range(lo..=hi);
        let mut src = Vec::with_capacity(len);
        src.push(rng.gen_range(0..vocab_size));
        while src.len() < len {
            let prev = *src.last().expect("nonempty");
            src.push(successors[prev][rng.gen_range(0..BRANCHING)]);
        }
        let trg = apply_rule(kind, &cipher, &src);
        corpus
            .source
            .push(src.iter().map(|k| format!("s{k}")).collect::<Vec<_>>().join(" "));
        corpus
            .target
            .push(trg.iter().map(|k| format!("t{k}")).collect::<Vec<_>>().join(" "));
    }
    Ok(ToyTask {
        kind,
        corpus,
        cipher,
    })
}

/// A group of pairs padded to common lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the pairs in the corpus.
    pub indices: Vec<usize>,
    pub x: Vec<Vec<TokenId>>,
    pub z: Vec<Vec<TokenId>>,
    pub y: Vec<Vec<TokenId>>,
    /// `true` marks a padded cell.
    pub x_pad: Vec<Vec<bool>>,
    pub y_pad: Vec<Vec<bool>>,
    pub x_len: Vec<usize>,
    pub y_len: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair], indices: Vec<usize>) -> Self {
        let xw = indices.iter().map(|&i| pairs[i].x.len()).max().unwrap_or(0);
        let yw = indices.iter().map(|&i| pairs[i].y.len()).max().unwrap_or(0);
        let pad = |s: &[TokenId], w: usize| {
            let mut v = s.to_vec();
            v.resize(w, PAD);
            v
        };
        let mask = |len: usize, w: usize| (0..w).map(|k| k >= len).collect::<Vec<_>>();
        let mut b = Batch {
            indices: Vec::new(),
            x: Vec::new(),
            z: Vec::new(),
            y: Vec::new(),
            x_pad: Vec::new(),
            y_pad: Vec::new(),
            x_len: Vec::new(),
            y_len: Vec::new(),
        };
        for &i in &indices {
            let p = &pairs[i];
            b.x.push(pad(&p.x, xw));
            b.z.push(pad(&p.z, yw));
            b.y.push(pad(&p.y, yw));
            b.x_pad.push(mask(p.x.len(), xw));
            b.y_pad.push(mask(p.y.len(), yw));
            b.x_len.push(p.x.len());
            b.y_len.push(p.y.len());
        }
        b.indices = indices;
        b
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded `(x, z, y)` of the `k`-th pair.
    pub fn pair(&self, k: usize) -> (&[TokenId], &[TokenId], &[TokenId]) {
        let (xl, yl) = (self.x_len[k], self.y_len[k]);
        (&self.x[k][..xl], &self.z[k][..yl], &self.y[k][..yl])
    }

    pub fn tokens(&self) -> usize {
        self.x_len.iter().sum::<usize>() + self.y_len.iter().sum::<usize>()
    }
}

/// One epoch of batches. Pairs are shuffled, bucketed by length, and packed
/// while the batch's source+target token count stays within
/// `token_budget` (a batch always holds at least one pair). Batch order is
/// shuffled again, so each seed gives one fixed order.
pub fn batch_iter(pairs: &[SentencePair], token_budget: usize, shuffle_seed: u64) -> Vec<Batch> {
    let mut rng = rng::rng_for(shuffle_seed, stream::SHUFFLE, 0);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].y.len(), pairs[i].x.len()));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let t = pairs[i].tokens();
        if !current.is_empty() && used + t > token_budget {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += t;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|g| Batch::from_pairs(pairs, g))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_threshold_and_roundtrip() {
        let v = build_vocab(&["a a b"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
        let w = build_vocab(&["x y z", "y z", "z"], 1).unwrap();
        assert_eq!(w.entries(), &["z", "y", "x"]);
        assert_eq!(w.decode(&w.encode("x z y")), "x z y");
        assert!(build_vocab::<&str>(&[], 1).is_err());
        assert!(build_vocab(&["  "], 1).is_err());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&["c b a a"], 1).unwrap();
        let p = dir.path().join("v.txt");
        v.save(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a\nb\nc\n");
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn pair_shift() {
        let p = SentencePair::new(vec![7, 8], &[5, 6, 9]);
        assert_eq!(p.y, vec![5, 6, 9, EOS]);
        assert_eq!(p.z, vec![BOS, 5, 6, 9]);
        assert_eq!(p.target(), &[5, 6, 9]);
    }

    #[test]
    fn toy_rules() {
        let t = make_toy_task(ToyKind::Cipher, 20, 50, (2, 6), 3).unwrap();
        for (s, y) in t.corpus.source.iter().zip(&t.corpus.target) {
            let src: Vec<&str> = s.split_whitespace().collect();
            let trg: Vec<&str> = y.split_whitespace().collect();
            assert_eq!(src.len(), trg.len());
            for (a, b) in src.iter().zip(&trg) {
                let k: usize = a[1..].parse().unwrap();
                assert_eq!(*b, format!("t{}", t.cipher[k]));
            }
        }
        let r = make_toy_task(ToyKind::Reverse, 20, 50, (2, 6), 3).unwrap();
        assert_eq!(r.cipher, t.cipher);
        assert_eq!(r.corpus.source, t.corpus.source);
        for (a, b) in r.corpus.target.iter().zip(&t.corpus.target) {
            let mut rev: Vec<&str> = b.split_whitespace().collect();
            rev.reverse();
            assert_eq!(a, &rev.join(" "));
        }
        assert_eq!(make_toy_task(ToyKind::Cipher, 20, 50, (2, 6), 3).unwrap(), t);
        assert!(make_toy_task(ToyKind::Cipher, 9, 5, (2, 6), 3).is_err());
    }

    #[test]
    fn local_swap_rule() {
        let cipher: Vec<usize> = (0..10).collect();
        assert_eq!(apply_rule(ToyKind::CipherLocalSwap, &cipher, &[3, 1, 2, 6, 4]), vec![1, 3, 2, 4, 6]);
        assert_eq!(apply_rule(ToyKind::CipherLocalSwap, &cipher, &[1, 3, 6, 2]), vec![1, 3, 2, 6]);
        assert_eq!(apply_rule(ToyKind::CipherLocalSwap, &cipher, &[5, 3]), vec![5, 3]);
        assert_eq!(apply_rule(ToyKind::CipherLocalSwap, &cipher, &[1, 3]), vec![1, 3]);
    }

    #[test]
    fn load_parallel_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&a, "x y\nz\nw\n").unwrap();
        fs::write(&b, "1\n2\n3\n").unwrap();
        assert_eq!(load_parallel(&a, &b).unwrap().len(), 3);
        fs::write(&b, "1\n2\n3\n4\n").unwrap();
        let msg = load_parallel(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("3 lines") && msg.contains("4 lines"), "{msg}");
    }

    #[test]
    fn batches_cover_epoch_and_pad() {
        let t = make_toy_task(ToyKind::Cipher, 20, 40, (1, 7), 1).unwrap();
        let v = build_vocab(&t.corpus.source, 1).unwrap();
        let w = build_vocab(&t.corpus.target, 1).unwrap();
        let pairs = t.corpus.encode(&v, &w);
        let total: usize = pairs.iter().map(SentencePair::tokens).sum();
        assert_eq!(batch_iter(&pairs, total, 0).len(), 1);
        let batches = batch_iter(&pairs, 30, 9);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        for b in &batches {
            for k in 0..b.len() {
                let (x, z, y) = b.pair(k);
                let p = &pairs[b.indices[k]];
                assert_eq!((x, z, y), (&p.x[..], &p.z[..], &p.y[..]));
                assert_eq!(b.x_pad[k].iter().filter(|m| !**m).count(), p.x.len());
                assert!(b.x[k].iter().zip(&b.x_pad[k]).all(|(&t, &m)| !m || t == PAD));
            }
        }
        assert_eq!(batches, batch_iter(&pairs, 30, 9));
    }
}
