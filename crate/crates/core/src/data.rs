//! Vocabulary, corpora, the seeded two-mode synthetic task, and batching.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::ModelKind;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const BLANK: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<mask>", "<blank>"];

/// Token ↔ index bijection. Indices 0..5 are reserved for pad, bos, eos,
/// mask and the CTC blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    /// Rebuilds a vocabulary from its token list (as stored in checkpoints).
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut v = Vocabulary::new();
        for t in &tokens[RESERVED.len()..] {
            if v.id(t).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    /// Collects every token of every corpus, in first-seen order.
    pub fn from_corpora<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Self {
        let mut v = Vocabulary::new();
        for c in corpora {
            for p in &c.pairs {
                for t in p.source.iter().chain(p.references.iter().flatten()) {
                    v.insert(t);
                }
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Result<Vec<usize>> {
        sentence
            .iter()
            .map(|t| {
                self.id(t.as_ref()).ok_or_else(|| Error::UnknownToken {
                    token: t.as_ref().to_string(),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(ToString::to_string)
                    .ok_or(Error::TokenOutOfRange {
                        id: i,
                        size: self.len(),
                    })
            })
            .collect()
    }
}

/// One source sentence with its references (one for training, one or more
/// for evaluation).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every source and reference must be non-empty and every pair needs at
    /// least one reference.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.source.is_empty()
                || p.references.is_empty()
                || p.references.iter().any(Vec::is_empty)
            {
                return Err(Error::EmptySentence { index: i });
            }
        }
        Ok(())
    }

    /// Maps tokens to ids, rejecting sentences longer than `max_len`.
    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedPair>> {
        self.validate()?;
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let source = vocab.encode(&p.source)?;
                let references = p
                    .references
                    .iter()
                    .map(|r| vocab.encode(r))
                    .collect::<Result<Vec<_>>>()?;
                for len in core::iter::once(source.len()).chain(references.iter().map(Vec::len)) {
                    if len > max_len {
                        return Err(Error::TooLong {
                            index: i,
                            len,
                            max: max_len,
                        });
                    }
                }
                Ok(EncodedPair { source, references })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub references: Vec<Vec<usize>>,
}

/// How a synthetic target is derived from its source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Identity,
    /// Cyclic left rotation by ⌈L/2⌉.
    Rotate,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Identity, Mode::Rotate];

    pub fn apply<T: Clone>(self, source: &[T]) -> Vec<T> {
        match self {
            Mode::Identity => source.to_vec(),
            Mode::Rotate => {
                let n = source.len();
                let shift = n.div_ceil(2);
                (0..n).map(|i| source[(i + shift) % n].clone()).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskConfig {
    pub content_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a training target uses [`Mode::Rotate`].
    pub rotate_prob: f64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            content_vocab: 16,
            min_len: 4,
            max_len: 10,
            rotate_prob: 0.5,
            train_size: 10_000,
            valid_size: 500,
            test_size: 500,
            seed: 1,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.rotate_prob) {
            return Err(Error::Config(format!(
                "rotate_prob {} outside [0, 1]",
                self.rotate_prob
            )));
        }
        // Sources use distinct tokens so that a token's position identifies
        // the mode unambiguously.
        if self.content_vocab < self.max_len {
            return Err(Error::VocabTooSmall {
                vocab: self.content_vocab,
                max_len: self.max_len,
            });
        }
        Ok(())
    }
}

pub struct SyntheticCorpora {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    /// Mode used for each training target.
    pub train_modes: Vec<Mode>,
}

pub fn content_token(i: usize) -> String {
    format!("t{}", i + 1)
}

/// Draws the train/valid/test splits. Training targets use one mode chosen
/// by a seeded coin flip; valid/test list the outputs of both modes.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> Result<SyntheticCorpora> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        index::sample(rng, cfg.content_vocab, len)
            .into_iter()
            .map(content_token)
            .collect()
    };
    let mut train = Corpus::default();
    let mut train_modes = Vec::with_capacity(cfg.train_size);
    for _ in 0..cfg.train_size {
        let src = source(&mut rng);
        let mode = if rng.gen_bool(cfg.rotate_prob) {
            Mode::Rotate
        } else {
            Mode::Identity
        };
        train.pairs.push(Pair {
            references: vec![mode.apply(&src)],
            source: src,
        });
        train_modes.push(mode);
    }
    let multi = |n: usize, rng: &mut ChaCha8Rng| Corpus {
        pairs: (0..n)
            .map(|_| {
                let src = source(rng);
                Pair {
                    references: Mode::ALL.iter().map(|m| m.apply(&src)).collect(),
                    source: src,
                }
            })
            .collect(),
    };
    let valid = multi(cfg.valid_size, &mut rng);
    let test = multi(cfg.test_size, &mut rng);
    Ok(SyntheticCorpora {
        train,
        valid,
        test,
        train_modes,
    })
}

/// Observed/masked split of a CMLM target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CmlmMask {
    /// Decoder input: reference token where observed, [`MASK`] where masked,
    /// [`PAD`] past the sentence end.
    pub observed: Vec<usize>,
    pub masked: Vec<bool>,
}

/// Padded source/target matrices for a group of sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the sentences in the corpus they came from.
    pub indices: Vec<usize>,
    pub src: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub src_max: usize,
    pub tgt: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub tgt_max: usize,
    pub cmlm: Option<CmlmMask>,
}

/// Right-pads sequences with [`PAD`]; returns `(flat, lens, max_len)`.
pub fn pad(seqs: &[&[usize]]) -> (Vec<usize>, Vec<usize>, usize) {
    let max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut flat = vec![PAD; seqs.len() * max];
    for (b, s) in seqs.iter().enumerate() {
        flat[b * max..b * max + s.len()].copy_from_slice(s);
    }
    (flat, seqs.iter().map(|s| s.len()).collect(), max)
}

/// Row-major validity mask for padded rows of the given lengths.
pub fn length_mask(lens: &[usize], max: usize) -> Vec<bool> {
    lens.iter()
        .flat_map(|&l| (0..max).map(move |t| t < l))
        .collect()
}

impl Batch {
    pub fn new(indices: Vec<usize>, sources: &[&[usize]], targets: &[&[usize]]) -> Self {
        let (src, src_lens, src_max) = pad(sources);
        let (tgt, tgt_lens, tgt_max) = pad(targets);
        Batch {
            indices,
            src,
            src_lens,
            src_max,
            tgt,
            tgt_lens,
            tgt_max,
            cmlm: None,
        }
    }

    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    /// Number of real target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    /// Padded footprint `n · max(src_max, tgt_max)`.
    pub fn footprint(&self) -> usize {
        self.size() * self.src_max.max(self.tgt_max)
    }

    pub fn target_mask(&self) -> Vec<bool> {
        length_mask(&self.tgt_lens, self.tgt_max)
    }

    pub fn source(&self, b: usize) -> &[usize] {
        &self.src[b * self.src_max..b * self.src_max + self.src_lens[b]]
    }

    pub fn target(&self, b: usize) -> &[usize] {
        &self.tgt[b * self.tgt_max..b * self.tgt_max + self.tgt_lens[b]]
    }

    /// Masks `k ~ U{1..T}` uniformly chosen positions of every target.
    pub fn apply_cmlm_mask<R: Rng>(&mut self, rng: &mut R) {
        let mut observed = self.tgt.clone();
        let mut masked = vec![false; self.tgt.len()];
        for (b, &len) in self.tgt_lens.iter().enumerate() {
            let k = rng.gen_range(1..=len);
            for t in index::sample(rng, len, k) {
                observed[b * self.tgt_max + t] = MASK;
                masked[b * self.tgt_max + t] = true;
            }
        }
        self.cmlm = Some(CmlmMask { observed, masked });
    }
}

/// Splits `pairs` into batches whose padded footprint stays within
/// `max_tokens`, grouping sentences of similar length. The sentence order
/// within a length bucket and the batch order both depend on `(seed, epoch)`.
/// Targets are the first reference of each pair.
pub fn make_batches(
    pairs: &[EncodedPair],
    max_tokens: usize,
    seed: u64,
    epoch: u64,
    kind: ModelKind,
) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let width = |i: usize| pairs[i].source.len().max(pairs[i].references[0].len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| width(i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_width = 0;
    for i in order {
        let w = width(i);
        if w > max_tokens {
            return Err(Error::Config(format!(
                "sentence {i} of width {w} exceeds max_tokens {max_tokens}"
            )));
        }
        if (cur.len() + 1) * cur_width.max(w) > max_tokens {
            groups.push(core::mem::take(&mut cur));
            cur_width = 0;
        }
        cur.push(i);
        cur_width = cur_width.max(w);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.shuffle(&mut rng);

    Ok(groups
        .into_iter()
        .map(|g| {
            let sources: Vec<&[usize]> = g.iter().map(|&i| pairs[i].source.as_slice()).collect();
            let targets: Vec<&[usize]> = g
                .iter()
                .map(|&i| pairs[i].references[0].as_slice())
                .collect();
            let mut batch = Batch::new(g.clone(), &sources, &targets);
            if kind == ModelKind::Cmlm {
                batch.apply_cmlm_mask(&mut rng);
            }
            batch
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_examples() {
        let s = ["t1", "t2", "t3", "t4"];
        assert_eq!(Mode::Rotate.apply(&s), ["t3", "t4", "t1", "t2"]);
        assert_eq!(Mode::Identity.apply(&s), s);
        assert_eq!(Mode::Rotate.apply(&[1, 2, 3, 4, 5]), [4, 5, 1, 2, 3]);
    }

    #[test]
    fn padding_layout() {
        let (flat, lens, max) = pad(&[&[5, 6], &[7]]);
        assert_eq!(flat, [5, 6, 7, PAD]);
        assert_eq!(lens, [2, 1]);
        assert_eq!(max, 2);
        assert_eq!(length_mask(&lens, max), [true, true, true, false]);
    }
}
