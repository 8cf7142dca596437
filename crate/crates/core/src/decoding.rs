//! Greedy and beam-search generation, optionally constrained to the names of
//! a knowledge base through a prefix trie.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::bpe::{TokenSeq, Vocab, BOS, EOS};
use crate::corpus::KnowledgeBase;
use crate::error::{Error, Result};
use crate::model::{decode_forward, encode, log_softmax_row, pointer_logits, ModelParams, PointerSpace, PointerSymbol};
use crate::tape::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// BOS-prefixed token ids, ending in EOS when finished.
    pub ids: Vec<u32>,
    /// Sum of per-step log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens between BOS and EOS.
    pub fn body(&self) -> &[u32] {
        let end = if self.finished { self.ids.len() - 1 } else { self.ids.len() };
        &self.ids[1..end]
    }

    /// `log_prob / generated_len^penalty`; penalty 0 is the raw sum.
    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            return self.log_prob;
        }
        self.log_prob / ((self.ids.len() - 1).max(1) as f64).powf(length_penalty)
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    names: Vec<String>,
}

/// Tokenized names of a knowledge base; walking it yields the valid
/// continuations of any name prefix.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    name_count: usize,
}

impl Default for PrefixTrie {
    fn default() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
            name_count: 0,
        }
    }
}

impl PrefixTrie {
    pub fn insert(&mut self, ids: &[u32], name: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Decode(format!("name {name:?} tokenizes to nothing")));
        }
        let mut node = 0;
        for &id in ids {
            node = match self.nodes[node].children.get(&id) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(id, n);
                    n
                }
            };
        }
        let names = &mut self.nodes[node].names;
        if !names.iter().any(|n| n == name) {
            names.push(name.to_string());
            names.sort();
            self.name_count += 1;
        }
        Ok(())
    }

    /// Node count including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn name_count(&self) -> usize {
        self.name_count
    }

    pub fn is_empty(&self) -> bool {
        self.name_count == 0
    }

    fn walk(&self, prefix: &[u32]) -> Option<usize> {
        let mut node = 0;
        for id in prefix {
            node = *self.nodes[node].children.get(id)?;
        }
        Some(node)
    }

    /// Names whose tokenization is exactly `ids`.
    pub fn names_at(&self, ids: &[u32]) -> &[String] {
        self.walk(ids).map_or(&[], |n| &self.nodes[n].names)
    }

    pub fn contains(&self, ids: &[u32]) -> bool {
        !self.names_at(ids).is_empty()
    }

    /// Sorted child tokens of `node`, plus EOS when a name ends there.
    fn next_of(&self, node: usize) -> Vec<u32> {
        let n = &self.nodes[node];
        let mut out: Vec<u32> = n.children.keys().copied().collect();
        if !n.names.is_empty() {
            out.push(EOS);
            out.sort_unstable();
        }
        out
    }

    fn child(&self, node: usize, id: u32) -> Option<usize> {
        self.nodes[node].children.get(&id).copied()
    }
}

/// Inserts the tokenization of every KB name. A name must fit, with BOS and
/// EOS, into `max_len` decoder positions.
pub fn build_trie(kb: &KnowledgeBase, vocab: &Vocab, max_len: usize) -> Result<PrefixTrie> {
    if kb.names().next().is_none() {
        return Err(Error::Decode("knowledge base has no names".into()));
    }
    let mut trie = PrefixTrie::default();
    for name in kb.names() {
        let ids = vocab.encode(name).ids;
        if ids.len() + 2 > max_len {
            return Err(Error::Decode(format!(
                "name {name:?} needs {} tokens but max_len is {max_len}",
                ids.len() + 2
            )));
        }
        trie.insert(&ids, name)?;
    }
    Ok(trie)
}

/// Valid next tokens after `prefix` (BOS excluded), EOS included at name ends.
pub fn allowed_next(trie: &PrefixTrie, prefix: &[u32]) -> Result<Vec<u32>> {
    let node = trie
        .walk(prefix)
        .ok_or_else(|| Error::Decode(format!("prefix {prefix:?} leaves the trie")))?;
    Ok(trie.next_of(node))
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding from BOS until EOS or `max_len` total tokens; ties go to
/// the smallest id.
pub fn greedy_decode<F: Scalar>(params: &ModelParams<F>, source: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if max_len < 2 {
        return Err(Error::Decode("max_len must be at least 2".into()));
    }
    let enc = encode(params, source)?;
    let mut ids = vec![BOS];
    while ids.len() < max_len {
        let logits = decode_forward(params, &enc, &ids)?;
        let next = argmax(logits.row(logits.rows - 1)) as u32;
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Total length limit including BOS and EOS.
    pub max_len: usize,
    /// Exponent of the length normalisation; 0 disables it.
    pub length_penalty: f64,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        Self {
            beam_size,
            max_len,
            length_penalty: 0.0,
        }
    }
}

struct Live {
    ids: Vec<u32>,
    log_prob: f64,
    node: usize,
}

fn rank(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

/// Beam search returning up to `beam_size` hypotheses best-first.
///
/// Each step ranks every extension of the live beam; EOS extensions within
/// the top `beam_size` ranks are set aside as finished, the best non-EOS
/// extensions form the next beam. Search stops when the beam empties, when
/// `max_len` is reached (live hypotheses are then returned unfinished if
/// fewer than `beam_size` finished ones exist), or when `beam_size`
/// hypotheses are finished and no live one can overtake the worst of them.
/// Ties rank shorter first, then by token ids.
///
/// With a trie, extensions are restricted to [`allowed_next`] and scored by
/// the full-vocabulary log-softmax.
pub fn beam_search<F: Scalar>(
    params: &ModelParams<F>,
    source: &[u32],
    cfg: BeamConfig,
    constraint: Option<&PrefixTrie>,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam_size == 0 {
        return Err(Error::Decode("beam_size must be positive".into()));
    }
    if cfg.max_len < 2 {
        return Err(Error::Decode("max_len must be at least 2".into()));
    }
    if cfg.length_penalty.is_nan() || cfg.length_penalty < 0.0 {
        return Err(Error::Decode("length_penalty must be non-negative".into()));
    }
    if constraint.is_some_and(PrefixTrie::is_empty) {
        return Err(Error::Decode("constraint trie has no names".into()));
    }
    let enc = encode(params, source)?;
    let k = cfg.beam_size;
    let mut live = vec![Live {
        ids: vec![BOS],
        log_prob: 0.0,
        node: 0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() && live[0].ids.len() < cfg.max_len {
        let mut cands: Vec<(f64, Vec<u32>, usize)> = Vec::new();
        for h in &live {
            let logits = decode_forward(params, &enc, &h.ids)?;
            let row: Vec<f64> = logits
                .row(logits.rows - 1)
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect();
            let lp = log_softmax_row(&row);
            let mut push = |tok: u32, node: usize| {
                let mut ids = h.ids.clone();
                ids.push(tok);
                cands.push((h.log_prob + lp[tok as usize], ids, node));
            };
            match constraint {
                Some(trie) => {
                    for tok in trie.next_of(h.node) {
                        let node = if tok == EOS { h.node } else { trie.child(h.node, tok).unwrap() };
                        push(tok, node);
                    }
                }
                None => {
                    for tok in 0..lp.len() as u32 {
                        push(tok, 0);
                    }
                }
            }
        }
        let norm = |lp: f64, len: usize| {
            if cfg.length_penalty == 0.0 {
                lp
            } else {
                lp / ((len - 1).max(1) as f64).powf(cfg.length_penalty)
            }
        };
        cands.sort_by(|a, b| rank((norm(a.0, a.1.len()), &a.1), (norm(b.0, b.1.len()), &b.1)));
        let mut next = Vec::with_capacity(k);
        for (r, (lp, ids, node)) in cands.into_iter().enumerate() {
            if r >= k && next.len() >= k {
                break;
            }
            if *ids.last().unwrap() == EOS {
                if r < k {
                    finished.push(Hypothesis {
                        ids,
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else if next.len() < k && lp > f64::NEG_INFINITY {
                next.push(Live { ids, log_prob: lp, node });
            }
        }
        live = next;

        if finished.len() >= k && !live.is_empty() {
            sort_hyps(&mut finished, cfg.length_penalty);
            let worst = finished[k - 1].score(cfg.length_penalty);
            let best_live = live[0].log_prob;
            let bound = if cfg.length_penalty == 0.0 {
                best_live
            } else {
                best_live / ((cfg.max_len - 1) as f64).powf(cfg.length_penalty)
            };
            if bound <= worst {
                live.clear();
            }
        }
    }

    if finished.len() < k {
        finished.extend(live.into_iter().map(|h| Hypothesis {
            ids: h.ids,
            log_prob: h.log_prob,
            finished: false,
        }));
    }
    sort_hyps(&mut finished, cfg.length_penalty);
    finished.truncate(k);
    Ok(finished)
}

fn sort_hyps(h: &mut [Hypothesis], penalty: f64) {
    h.sort_by(|a, b| rank((a.score(penalty), &a.ids), (b.score(penalty), &b.ids)));
}

/// Greedy pointer decoding for the NER head: at most `max_steps` symbols,
/// stopping after EOS. Ties go to the lowest pointer index.
pub fn pointer_greedy_decode<F: Scalar>(
    params: &ModelParams<F>,
    source: &TokenSeq,
    n_types: usize,
    max_steps: usize,
) -> Result<Vec<PointerSymbol>> {
    let enc = encode(params, &source.ids)?;
    let space = PointerSpace {
        n_src: source.len(),
        n_types,
    };
    let mut out = Vec::new();
    while out.len() < max_steps {
        let logits = pointer_logits(params, &enc, source, n_types, &out)?;
        let sym = space.symbol(argmax(logits.row(logits.rows - 1)));
        out.push(sym);
        if sym == PointerSymbol::Eos {
            break;
        }
    }
    Ok(out)
}
