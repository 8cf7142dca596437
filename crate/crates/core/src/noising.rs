//! Document corruption for denoising pretraining: text infilling (Poisson
//! span masking, each span collapsed to one `<mask>`) and sentence
//! permutation.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

use crate::bpe::{TokenSeq, Vocab, MASK};
use crate::corpus::{split_sentences, Document};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    TextInfilling,
    SentencePermutation,
    Both,
}

impl NoiseKind {
    pub fn flags(self) -> (bool, bool) {
        match self {
            NoiseKind::TextInfilling => (true, false),
            NoiseKind::SentencePermutation => (false, true),
            NoiseKind::Both => (true, true),
        }
    }

    pub fn from_flags(infill: bool, permute: bool) -> Option<Self> {
        match (infill, permute) {
            (true, false) => Some(NoiseKind::TextInfilling),
            (false, true) => Some(NoiseKind::SentencePermutation),
            (true, true) => Some(NoiseKind::Both),
            (false, false) => None,
        }
    }

    /// Directory suffix used by the ablation runner.
    pub fn suffix(self) -> &'static str {
        match self {
            NoiseKind::TextInfilling => "ti",
            NoiseKind::SentencePermutation => "sp",
            NoiseKind::Both => "ti_sp",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::TextInfilling => "ti",
            NoiseKind::SentencePermutation => "sp",
            NoiseKind::Both => "ti+sp",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ti" => Ok(NoiseKind::TextInfilling),
            "sp" => Ok(NoiseKind::SentencePermutation),
            "ti+sp" | "sp+ti" => Ok(NoiseKind::Both),
            other => Err(Error::Config(format!(
                "unknown noise {other:?} (expected ti, sp or ti+sp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub mask_ratio: f64,
    pub poisson_lambda: f64,
    pub use_text_infilling: bool,
    pub use_sentence_permutation: bool,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.30,
            poisson_lambda: 3.0,
            use_text_infilling: true,
            use_sentence_permutation: false,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn with_kind(mut self, kind: NoiseKind) -> Self {
        (self.use_text_infilling, self.use_sentence_permutation) = kind.flags();
        self
    }

    pub fn kind(&self) -> Option<NoiseKind> {
        NoiseKind::from_flags(self.use_text_infilling, self.use_sentence_permutation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Noise(format!(
                "mask_ratio must lie in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        if !(self.poisson_lambda > 0.0 && self.poisson_lambda.is_finite()) {
            return Err(Error::Noise(format!(
                "poisson_lambda must be positive, got {}",
                self.poisson_lambda
            )));
        }
        Ok(())
    }

    /// Number of tokens covered by spans: floor(mask_ratio * n).
    pub fn mask_budget(&self, n: usize) -> usize {
        // the epsilon absorbs representation error such as 0.3 * 10 < 3
        ((self.mask_ratio * n as f64) + 1e-9).floor() as usize
    }
}

/// One pretraining example: the corrupted input and the clean target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisedPair {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

/// Span lengths after truncation together with the raw Poisson draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanDraws {
    pub lengths: Vec<usize>,
    pub raw: Vec<usize>,
}

fn poisson(lambda: f64) -> Poisson<f64> {
    Poisson::new(lambda).expect("lambda validated positive")
}

/// Draws Poisson(lambda) lengths until they cover `budget`; the last length is
/// truncated so the sum equals `budget` exactly. Zero lengths are kept.
pub fn sample_span_lengths(rng: &mut Rng, budget: usize, lambda: f64) -> Vec<usize> {
    sample_span_draws(rng, budget, lambda).lengths
}

pub fn sample_span_draws(rng: &mut Rng, budget: usize, lambda: f64) -> SpanDraws {
    let dist = poisson(lambda);
    let mut lengths = Vec::new();
    let mut raw = Vec::new();
    let mut total = 0usize;
    while total < budget {
        let draw = dist.sample(rng) as usize;
        raw.push(draw);
        let len = draw.min(budget - total);
        total += len;
        lengths.push(len);
    }
    SpanDraws { lengths, raw }
}

/// Replaces each `(start, len)` span with one MASK. Spans must be sorted and
/// non-overlapping; `len == 0` inserts a MASK before `tokens[start]`.
pub fn infill_spans(tokens: &[u32], spans: &[(usize, usize)]) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() + spans.len());
    let mut cursor = 0;
    for &(start, len) in spans {
        assert!(start >= cursor && start + len <= tokens.len(), "spans sorted and in range");
        out.extend_from_slice(&tokens[cursor..start]);
        out.push(MASK);
        cursor = start + len;
    }
    out.extend_from_slice(&tokens[cursor..]);
    out
}

/// Full record of one infilling call, exposed for statistics and debugging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfillTrace {
    pub pair: NoisedPair,
    pub spans: Vec<(usize, usize)>,
    pub raw_lengths: Vec<usize>,
}

pub fn apply_text_infilling(tokens: &[u32], cfg: &NoiseConfig, rng: &mut Rng) -> NoisedPair {
    apply_text_infilling_traced(tokens, cfg, rng).pair
}

/// Samples span lengths for the exact budget, then places the spans in order
/// at uniformly random non-overlapping offsets: the unmasked tokens are split
/// into `k + 1` gaps drawn uniformly from all compositions.
pub fn apply_text_infilling_traced(tokens: &[u32], cfg: &NoiseConfig, rng: &mut Rng) -> InfillTrace {
    let n = tokens.len();
    let budget = cfg.mask_budget(n).min(n);
    if budget == 0 {
        return InfillTrace {
            pair: NoisedPair {
                input_ids: tokens.to_vec(),
                target_ids: tokens.to_vec(),
            },
            spans: Vec::new(),
            raw_lengths: Vec::new(),
        };
    }
    let draws = sample_span_draws(rng, budget, cfg.poisson_lambda);
    let k = draws.lengths.len();
    let unmasked = n - budget;
    let mut bars = index::sample(rng, unmasked + k, k).into_vec();
    bars.sort_unstable();

    let mut spans = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev_bar: Option<usize> = None;
    for (j, &bar) in bars.iter().enumerate() {
        let gap = match prev_bar {
            None => bar,
            Some(p) => bar - p - 1,
        };
        pos += gap;
        spans.push((pos, draws.lengths[j]));
        pos += draws.lengths[j];
        prev_bar = Some(bar);
    }

    InfillTrace {
        pair: NoisedPair {
            input_ids: infill_spans(tokens, &spans),
            target_ids: tokens.to_vec(),
        },
        spans,
        raw_lengths: draws.raw,
    }
}

/// Fisher-Yates order over `n` items.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

pub fn apply_sentence_permutation(sentences: &[Vec<u32>], rng: &mut Rng) -> Vec<u32> {
    permutation(sentences.len(), rng)
        .into_iter()
        .flat_map(|i| sentences[i].iter().copied())
        .collect()
}

/// Tokenizes `doc` sentence by sentence, truncating the concatenation to
/// `limit` tokens.
pub fn tokenize_sentences(doc: &Document, vocab: &Vocab, limit: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut used = 0;
    for sentence in split_sentences(doc) {
        if used >= limit {
            break;
        }
        let ids = vocab.encode(&sentence).ids;
        let take = ids.len().min(limit - used);
        if take > 0 {
            out.push(ids[..take].to_vec());
            used += take;
        }
    }
    out
}

/// Builds one `<s> ... </s>` wrapped pretraining pair. Sentences are permuted
/// before infilling when both noises are on. The target keeps the original
/// sentence order. The generator is seeded from `mix(cfg.seed, doc.id)`.
pub fn make_pretraining_example(
    doc: &Document,
    vocab: &Vocab,
    cfg: &NoiseConfig,
    max_len: usize,
) -> Result<NoisedPair> {
    if !cfg.use_text_infilling && !cfg.use_sentence_permutation {
        return Err(Error::Noise("no noise function enabled".into()));
    }
    cfg.validate()?;
    if max_len < 3 {
        return Err(Error::Noise(format!("max_len {max_len} leaves no room for tokens")));
    }
    let sentences = tokenize_sentences(doc, vocab, max_len - 2);
    let target: Vec<u32> = sentences.iter().flatten().copied().collect();
    if target.is_empty() {
        return Err(Error::Noise(format!("document {} has no tokens", doc.id)));
    }

    let mut rng = rng::seeded(rng::mix(cfg.seed, doc.id as u64));
    let mut corrupted = if cfg.use_sentence_permutation {
        apply_sentence_permutation(&sentences, &mut rng)
    } else {
        target.clone()
    };
    if cfg.use_text_infilling {
        corrupted = apply_text_infilling(&corrupted, cfg, &mut rng).input_ids;
    }
    corrupted.truncate(max_len - 2);

    let wrap = |ids: Vec<u32>| {
        TokenSeq::new(ids.clone(), vec![false; ids.len()])
            .wrapped()
            .ids
    };
    Ok(NoisedPair {
        input_ids: wrap(corrupted),
        target_ids: wrap(target),
    })
}

/// A generator for ad-hoc use (tests, demos) without deriving from a document.
pub fn rng_for(seed: u64) -> Rng {
    rng::seeded(seed)
}

pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{train_bpe, BOS, EOS};
    use proptest::prelude::*;

    const A: u32 = 10;

    fn letters(n: u32) -> Vec<u32> {
        (A..A + n).collect()
    }

    #[test]
    fn span_lengths_sum_to_budget() {
        let mut rng = rng_for(1);
        for budget in [1, 2, 7, 30, 61] {
            let lens = sample_span_lengths(&mut rng, budget, 3.0);
            assert_eq!(lens.iter().sum::<usize>(), budget);
        }
    }

    #[test]
    fn fixed_span_rules() {
        let t = letters(10);
        let out = infill_spans(&t, &[(1, 2), (5, 1)]);
        assert_eq!(out, vec![A, MASK, A + 3, A + 4, MASK, A + 6, A + 7, A + 8, A + 9]);
        let ab = letters(2);
        assert_eq!(infill_spans(&ab, &[(1, 0)]), vec![A, MASK, A + 1]);
        assert_eq!(infill_spans(&ab, &[(0, 0), (0, 0)]), vec![MASK, MASK, A, A + 1]);
    }

    #[test]
    fn zero_budget_is_identity() {
        let cfg = NoiseConfig::default();
        let mut rng = rng_for(3);
        let p = apply_text_infilling(&letters(2), &cfg, &mut rng);
        assert_eq!(p.input_ids, p.target_ids);
        assert!(!p.input_ids.contains(&MASK));
    }

    #[test]
    fn single_sentence_permutation_is_identity() {
        let mut rng = rng_for(5);
        let s = vec![vec![7, 8, 9]];
        assert_eq!(apply_sentence_permutation(&s, &mut rng), vec![7, 8, 9]);
    }

    fn toy_vocab() -> Vocab {
        train_bpe(
            &[Document::new(0, "the cat sat. the dog ran! a bird flew? yes it did.")],
            60,
        )
        .unwrap()
    }

    #[test]
    fn pretraining_example_contracts() {
        let vocab = toy_vocab();
        let doc = Document::new(4, "The cat sat. The dog ran! A bird flew? Yes it did.");
        let off = NoiseConfig {
            use_text_infilling: false,
            use_sentence_permutation: false,
            ..Default::default()
        };
        assert!(make_pretraining_example(&doc, &vocab, &off, 64).is_err());

        let ti = NoiseConfig { mask_ratio: 0.01, ..Default::default() };
        let p = make_pretraining_example(&doc, &vocab, &ti, 64).unwrap();
        assert_eq!(p.input_ids, p.target_ids);

        let both = NoiseConfig::default().with_kind(NoiseKind::Both);
        let a = make_pretraining_example(&doc, &vocab, &both, 64).unwrap();
        let b = make_pretraining_example(&doc, &vocab, &both, 64).unwrap();
        assert_eq!(a, b);
        let mut clean = vec![BOS];
        clean.extend(vocab.encode(&doc.text).ids);
        clean.push(EOS);
        assert_eq!(a.target_ids, clean);
        assert!(a.input_ids.contains(&MASK));

        let short = make_pretraining_example(&doc, &vocab, &both, 6).unwrap();
        assert_eq!(short.target_ids.len(), 6);
        assert_eq!(&short.target_ids[1..5], &clean[1..5]);

        let empty = Document::new(9, "   ");
        assert!(make_pretraining_example(&empty, &vocab, &ti, 64).is_err());
    }

    #[test]
    fn permutation_only_preserves_tokens() {
        let vocab = toy_vocab();
        let doc = Document::new(1, "the cat sat. the dog ran! a bird flew? yes it did.");
        let sp = NoiseConfig::default().with_kind(NoiseKind::SentencePermutation);
        let p = make_pretraining_example(&doc, &vocab, &sp, 64).unwrap();
        let mut a = p.input_ids.clone();
        let mut b = p.target_ids.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_kind_parsing() {
        assert_eq!("ti".parse::<NoiseKind>().unwrap(), NoiseKind::TextInfilling);
        assert_eq!("ti+sp".parse::<NoiseKind>().unwrap(), NoiseKind::Both);
        assert!("bogus".parse::<NoiseKind>().is_err());
        assert_eq!(NoiseKind::Both.to_string(), "ti+sp");
    }

    proptest! {
        #[test]
        fn infilling_counts(n in 1usize..120, ratio in 0.01f64..1.0, seed in any::<u64>()) {
            let cfg = NoiseConfig { mask_ratio: ratio, seed, ..Default::default() };
            let tokens = letters(n as u32);
            let mut rng = rng_for(seed);
            let trace = apply_text_infilling_traced(&tokens, &cfg, &mut rng);
            let budget = cfg.mask_budget(n);
            let masked: usize = trace.spans.iter().map(|s| s.1).sum();
            prop_assert_eq!(masked, budget);
            let masks = trace.pair.input_ids.iter().filter(|&&t| t == MASK).count();
            prop_assert_eq!(masks, trace.spans.len());
            prop_assert_eq!(trace.pair.input_ids.len(), n - masked + trace.spans.len());
            prop_assert_eq!(&trace.pair.target_ids, &tokens);
            for w in trace.spans.windows(2) {
                prop_assert!(w[0].0 + w[0].1 <= w[1].0);
            }
            // reconstruct the target from input plus the masked spans
            let mut rebuilt = Vec::new();
            let mut spans = trace.spans.iter();
            for &t in &trace.pair.input_ids {
                if t == MASK {
                    let &(s, l) = spans.next().unwrap();
                    rebuilt.extend_from_slice(&tokens[s..s + l]);
                } else {
                    rebuilt.push(t);
                }
            }
            prop_assert_eq!(rebuilt, tokens);
        }
    }
}
