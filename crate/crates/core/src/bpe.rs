//! Byte-pair encoding over whitespace-delimited words.
//!
//! Symbols that end a word carry an `</w>` suffix, so word boundaries survive
//! in the id sequence itself and generated ids can be decoded back to text.
//! Two ids are therefore assigned per character: `c` (word-internal) and
//! `c</w>` (word-final).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Document;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

const END_OF_WORD: &str = "</w>";
const HEADER_MAGIC: &str = "BPEV1";

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// A token id sequence with per-token "first subtoken of a word" flags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub word_start: Vec<bool>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, word_start: Vec<bool>) -> Self {
        assert_eq!(ids.len(), word_start.len(), "parallel arrays");
        Self { ids, word_start }
    }

    /// Wraps raw ids with flags derived from the word-final markers in `vocab`.
    pub fn from_ids(vocab: &Vocab, ids: Vec<u32>) -> Self {
        let mut word_start = Vec::with_capacity(ids.len());
        let mut at_boundary = true;
        for &id in &ids {
            if id != UNK && is_special(id) {
                word_start.push(false);
                continue;
            }
            word_start.push(at_boundary);
            at_boundary = id == UNK || vocab.ends_word(id);
        }
        Self { ids, word_start }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Returns `<s> ids </s>`.
    pub fn wrapped(&self) -> TokenSeq {
        let mut ids = Vec::with_capacity(self.ids.len() + 2);
        let mut ws = Vec::with_capacity(self.ids.len() + 2);
        ids.push(BOS);
        ws.push(false);
        ids.extend_from_slice(&self.ids);
        ws.extend_from_slice(&self.word_start);
        ids.push(EOS);
        ws.push(false);
        TokenSeq::new(ids, ws)
    }

    pub fn truncated(&self, max_len: usize) -> TokenSeq {
        let n = self.ids.len().min(max_len);
        TokenSeq::new(self.ids[..n].to_vec(), self.word_start[..n].to_vec())
    }

    /// Token positions of each word's first subtoken, in word order.
    pub fn word_start_positions(&self) -> Vec<usize> {
        self.word_start
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn word_count(&self) -> usize {
        self.word_start.iter().filter(|&&s| s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    lowercase: bool,
}

impl Vocab {
    fn from_parts(
        merges: Vec<(String, String)>,
        id_to_token: Vec<String>,
        lowercase: bool,
    ) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Tokenizer(format!(
                    "token {i} must be the special {special}"
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {tok:?}")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            if !token_to_id.contains_key(l)
                || !token_to_id.contains_key(r)
                || !token_to_id.contains_key(&merged)
            {
                return Err(Error::Tokenizer(format!(
                    "merge {rank} ({l} {r}) refers to unknown tokens"
                )));
            }
            merge_rank.entry((l.clone(), r.clone())).or_insert(rank);
        }
        Ok(Self {
            merges,
            merge_rank,
            token_to_id,
            id_to_token,
            lowercase,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Token text with the word-final marker removed.
    pub fn surface(&self, id: u32) -> Option<&str> {
        self.token(id)
            .map(|t| if is_special(id) { t } else { t.strip_suffix(END_OF_WORD).unwrap_or(t) })
    }

    pub fn ends_word(&self, id: u32) -> bool {
        !is_special(id) && self.token(id).is_some_and(|t| t.ends_with(END_OF_WORD))
    }

    fn normalize(&self, text: &str) -> String {
        if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        }
    }

    /// Tokenizes a single word (no whitespace) into subtoken ids.
    fn encode_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        let mut symbols: Vec<Option<String>> = chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = if i + 1 == chars.len() {
                    format!("{c}{END_OF_WORD}")
                } else {
                    c.to_string()
                };
                self.token_to_id.contains_key(&s).then_some(s)
            })
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let (Some(l), Some(r)) = (&symbols[i], &symbols[i + 1]) {
                    if let Some(&rank) = self.merge_rank.get(&(l.clone(), r.clone())) {
                        if best.is_none_or(|(_, b)| rank < b) {
                            best = Some((i, rank));
                        }
                    }
                }
            }
            let Some((_, rank)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && symbols[i].as_deref() == Some(l.as_str())
                    && symbols[i + 1].as_deref() == Some(r.as_str())
                {
                    merged.push(Some(format!("{l}{r}")));
                    i += 2;
                } else {
                    merged.push(symbols[i].take());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
            .into_iter()
            .map(|s| s.map_or(UNK, |s| self.token_to_id[&s]))
            .collect()
    }

    /// Deterministic tokenization. Characters outside the vocabulary map to UNK.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let text = self.normalize(text);
        let mut ids = Vec::new();
        let mut word_start = Vec::new();
        for word in text.split_whitespace() {
            let sub = self.encode_word(word);
            word_start.push(true);
            word_start.extend(std::iter::repeat_n(false, sub.len() - 1));
            ids.extend(sub);
        }
        TokenSeq { ids, word_start }
    }

    /// Tokenizes each word separately; the result's word_start flags line up
    /// one-to-one with `words`.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> TokenSeq {
        let mut ids = Vec::new();
        let mut word_start = Vec::new();
        for word in words {
            let word = self.normalize(word.as_ref());
            let word: String = word.split_whitespace().collect::<Vec<_>>().join("");
            let sub = if word.is_empty() {
                vec![UNK]
            } else {
                self.encode_word(&word)
            };
            word_start.push(true);
            word_start.extend(std::iter::repeat_n(false, sub.len() - 1));
            ids.extend(sub);
        }
        TokenSeq { ids, word_start }
    }

    /// Joins subtokens, inserting a space before each word-start token after the
    /// first. Specials (including UNK) are dropped.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        let mut out = String::new();
        for (&id, &start) in seq.ids.iter().zip(&seq.word_start) {
            if id as usize >= self.size() {
                return Err(Error::Tokenizer(format!(
                    "id {id} out of range for vocabulary of size {}",
                    self.size()
                )));
            }
            if is_special(id) {
                continue;
            }
            if start && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.surface(id).expect("checked range"));
        }
        Ok(out)
    }

    /// Decodes raw ids, recovering word boundaries from word-final markers.
    pub fn decode_ids(&self, ids: &[u32]) -> Result<String> {
        self.decode(&TokenSeq::from_ids(self, ids.to_vec()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER_MAGIC} {} {}\n",
            self.size(),
            u8::from(self.lowercase)
        );
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        for tok in &self.id_to_token {
            let _ = writeln!(s, "{tok}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let header = lines
            .first()
            .ok_or_else(|| Error::Tokenizer("empty vocab file".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let (size, lowercase) = match fields.as_slice() {
            [magic, size, lc] if *magic == HEADER_MAGIC => {
                let size: usize = size
                    .parse()
                    .map_err(|_| Error::Tokenizer(format!("bad vocab size {size:?}")))?;
                let lc = match *lc {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(Error::Tokenizer(format!("bad lowercase flag {other:?}")))
                    }
                };
                (size, lc)
            }
            _ => return Err(Error::Tokenizer(format!("bad vocab header {header:?}"))),
        };
        let body = &lines[1..];
        if body.len() < size {
            return Err(Error::Tokenizer(format!(
                "vocab file lists {} lines but header declares {size} tokens",
                body.len()
            )));
        }
        let (merge_lines, token_lines) = body.split_at(body.len() - size);
        let mut merges = Vec::with_capacity(merge_lines.len());
        for (i, line) in merge_lines.iter().enumerate() {
            let (l, r) = line
                .split_once(' ')
                .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
                .ok_or_else(|| Error::Tokenizer(format!("bad merge line {}: {line:?}", i + 2)))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let tokens = token_lines.iter().map(|t| t.to_string()).collect();
        Self::from_parts(merges, tokens, lowercase)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Greedy BPE training on lowercased, whitespace-delimited words.
///
/// Each round merges the most frequent adjacent pair inside words; ties go to
/// the lexicographically smallest pair. Training stops once `vocab_size`
/// tokens exist or no pair occurs at least twice.
pub fn train_bpe(corpus: &[Document], vocab_size: usize) -> Result<Vocab> {
    train_bpe_texts(corpus.iter().map(|d| d.text.as_str()), vocab_size)
}

pub fn train_bpe_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
) -> Result<Vocab> {
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for w in text.to_lowercase().split_whitespace() {
            *word_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Tokenizer("cannot train on an empty corpus".into()));
    }

    let mut alphabet: Vec<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let base = NUM_SPECIALS + 2 * alphabet.len();
    if vocab_size <= base {
        return Err(Error::Tokenizer(format!(
            "vocab_size {vocab_size} leaves no room for merges: {} specials + {} base symbols \
             ({} characters, word-internal and word-final)",
            NUM_SPECIALS,
            2 * alphabet.len(),
            alphabet.len()
        )));
    }

    let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for c in &alphabet {
        id_to_token.push(c.to_string());
    }
    for c in &alphabet {
        id_to_token.push(format!("{c}{END_OF_WORD}"));
    }
    let mut known: HashMap<String, ()> = id_to_token.iter().map(|t| (t.clone(), ())).collect();

    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (initial_symbols(w), f))
        .collect();
    let mut merges = Vec::new();

    while id_to_token.len() < vocab_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                let merged_is_special = SPECIAL_TOKENS
                    .iter()
                    .any(|s| s.len() == pair[0].len() + pair[1].len() && *s == format!("{}{}", pair[0], pair[1]));
                if !merged_is_special {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += f;
                }
            }
        }
        let Some((&(l, r), &count)) = counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        if count < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged.clone(), ()).is_none() {
            id_to_token.push(merged);
        }
        merges.push((l, r));
    }

    Vocab::from_parts(merges, id_to_token, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(i, *t))
            .collect()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // low x2, lower x1: (l,o)=3, (o,w</w>)=2, (o,w)=1, (w,e)=1, (e,r</w>)=1
        let v = train_bpe(&docs(&["low low lower"]), 100).unwrap();
        assert_eq!(v.merges()[0], ("l".to_string(), "o".to_string()));
        assert_eq!(v.merges()[1], ("lo".to_string(), "w</w>".to_string()));
    }

    #[test]
    fn single_char_words_have_no_merges() {
        let v = train_bpe(&docs(&["a b"]), 10).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.size(), 5 + 4);
    }

    #[test]
    fn training_contract_errors() {
        assert!(train_bpe(&docs(&["abc"]), 6).is_err());
        assert!(train_bpe(&docs(&["abc"]), 11).is_err());
        assert!(train_bpe(&docs(&["abc"]), 12).is_ok());
        assert!(train_bpe(&[], 100).is_err());
        assert!(train_bpe(&docs(&["   "]), 100).is_err());
    }

    #[test]
    fn applies_merges_in_training_order() {
        let v = train_bpe(&docs(&["lo lo xy"]), NUM_SPECIALS + 2 * 4 + 1).unwrap();
        assert_eq!(v.merges(), &[("l".to_string(), "o</w>".to_string())]);

        let v = train_bpe(&docs(&["lolo lolo lower"]), NUM_SPECIALS + 10 + 1).unwrap();
        assert_eq!(v.merges(), &[("l".to_string(), "o".to_string())]);
        let seq = v.encode("lower");
        let surfaces: Vec<&str> = seq.ids.iter().map(|&i| v.surface(i).unwrap()).collect();
        assert_eq!(surfaces, vec!["lo", "w", "e", "r"]);
        assert_eq!(seq.word_start, vec![true, false, false, false]);
    }

    #[test]
    fn round_trip_and_unk() {
        let v = train_bpe(&docs(&["chest pain in the chest", "pain relief"]), 60).unwrap();
        let seq = v.encode("Chest  PAIN");
        assert_eq!(v.decode(&seq).unwrap(), "chest pain");
        assert_eq!(v.decode_ids(&seq.ids).unwrap(), "chest pain");

        let seq = v.encode("chest z");
        assert!(seq.ids.contains(&UNK));
        assert_eq!(seq.word_count(), 2);
    }

    #[test]
    fn decode_drops_specials_and_rejects_bad_ids() {
        let v = train_bpe(&docs(&["abc abd"]), 30).unwrap();
        let only_specials = TokenSeq::new(vec![BOS, MASK, PAD, EOS], vec![false; 4]);
        assert_eq!(v.decode(&only_specials).unwrap(), "");
        let bad = TokenSeq::new(vec![99_999], vec![true]);
        assert!(v.decode(&bad).is_err());
        let wrapped = v.encode("abc abd").wrapped();
        assert_eq!(wrapped.ids[0], BOS);
        assert_eq!(v.decode(&wrapped).unwrap(), "abc abd");
    }

    #[test]
    fn file_round_trip() {
        let v = train_bpe(&docs(&["the cat sat on the mat", "the dog"]), 40).unwrap();
        let text = v.to_text();
        assert!(text.starts_with(&format!("BPEV1 {} 1\n", v.size())));
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_text("BPEV2 5 1\n").is_err());
        assert!(Vocab::from_text("BPEV1 9 1\n<pad>\n").is_err());
    }

    #[test]
    fn specials_are_never_merged() {
        let v = train_bpe(&docs(&["<s> <s> <s> <pad> <pad>"]), 200).unwrap();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
        let seq = v.encode("<s>");
        assert!(!seq.ids.contains(&BOS));
    }

    proptest! {
        #[test]
        fn round_trip_on_training_alphabet(words in prop::collection::vec("[a-f]{1,7}", 1..12)) {
            let v = train_bpe(&docs(&["abc def fed cab bad face ace dab", "beef cafe dead fade"]), 60).unwrap();
            let text = words.join(" ");
            let seq = v.encode(&text);
            prop_assert_eq!(v.decode(&seq).unwrap(), text.clone());
            prop_assert_eq!(v.decode_ids(&seq.ids).unwrap(), text);
            prop_assert_eq!(seq.word_count(), words.len());
            // per-word tokenization is context free
            let mut concat = Vec::new();
            for w in &words {
                let s = v.encode(w);
                prop_assert!(!s.is_empty());
                concat.extend(s.ids);
            }
            prop_assert_eq!(concat, seq.ids);
        }
    }
}
