//! Rouge-1/2/L, corpus BLEU and Recall@k over a model-independent word
//! tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, splits on whitespace, and splits punctuation characters off
/// as tokens of their own.
pub fn metric_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                cur.extend(c.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        let p = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let r = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self {
            precision: p,
            recall: r,
            f,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap(cand: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    cand.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Clipped n-gram overlap between candidate and reference.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Prf {
    let c = metric_tokenize(candidate);
    let r = metric_tokenize(reference);
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    Prf::from_counts(
        clipped_overlap(&cc, &rc),
        c.len().saturating_sub(n - 1),
        r.len().saturating_sub(n - 1),
    )
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence Rouge.
pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let c = metric_tokenize(candidate);
    let r = metric_tokenize(reference);
    Prf::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Corpus BLEU components.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuDetail {
    /// Clipped matches and candidate n-gram totals for n = 1..=4.
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
    pub score: f64,
}

/// Corpus-level BLEU-4 with one reference per candidate. With `smoothing`,
/// zero match counts become (0+1)/(total+1).
pub fn bleu_detail(candidates: &[String], references: &[String], smoothing: bool) -> Result<BleuDetail> {
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let c = metric_tokenize(c);
        let r = metric_tokenize(r);
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let cc = ngram_counts(&c, n);
            matches[n - 1] += clipped_overlap(&cc, &ngram_counts(&r, n));
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if matches[n] == 0 && smoothing {
            1.0 / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuDetail {
        matches,
        totals,
        precisions,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
        score,
    })
}

pub fn bleu(candidates: &[String], references: &[String], smoothing: bool) -> Result<f64> {
    Ok(bleu_detail(candidates, references, smoothing)?.score)
}

/// 1 when `gold` is among the first `k` distinct entries of `ranked`.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], gold: &str, k: usize) -> f64 {
    let mut seen: Vec<&str> = Vec::with_capacity(k);
    for r in ranked {
        let r = r.as_ref();
        if seen.contains(&r) {
            continue;
        }
        if seen.len() == k {
            break;
        }
        if r == gold {
            return 1.0;
        }
        seen.push(r);
    }
    0.0
}

/// Ordered metric name/value pairs plus the number of scored examples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub values: Vec<(String, f64)>,
    pub n: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonLine {
    metric: String,
    value: f64,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.values.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// `metric<TAB>value` lines, ending with the example count.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}\t{v}");
        }
        let _ = writeln!(s, "n\t{}", self.n);
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let rows = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .chain(std::iter::once(("n".to_string(), self.n as f64)));
        for (metric, value) in rows {
            s.push_str(&serde_json::to_string(&JsonLine { metric, value }).expect("plain struct"));
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Metric(format!("bad report line {line:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Metric(format!("bad value in {line:?}")))?;
            if k == "n" {
                r.n = v as usize;
            } else {
                r.push(k, v);
            }
        }
        Ok(r)
    }

    /// Writes `<stem>.tsv` and `<stem>.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = dir.join(format!("{stem}.tsv"));
        std::fs::write(&tsv, self.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
        let json = dir.join(format!("{stem}.jsonl"));
        std::fs::write(&json, self.to_jsonl()).map_err(|e| Error::io(&json, e))?;
        Ok(tsv)
    }
}

/// Corpus Rouge (mean of per-pair P/R/F) and BLEU for generated text.
pub fn seq2seq_report(
    candidates: &[String],
    references: &[String],
    bleu_smoothing: bool,
) -> Result<MetricReport> {
    let detail = bleu_detail(candidates, references, bleu_smoothing)?;
    let n = candidates.len();
    let mut report = MetricReport {
        values: Vec::new(),
        n,
    };
    let mean = |f: &dyn Fn(&str, &str) -> Prf| -> Prf {
        if n == 0 {
            return Prf::default();
        }
        let mut acc = Prf::default();
        for (c, r) in candidates.iter().zip(references) {
            let s = f(c, r);
            acc.precision += s.precision;
            acc.recall += s.recall;
            acc.f += s.f;
        }
        Prf {
            precision: acc.precision / n as f64,
            recall: acc.recall / n as f64,
            f: acc.f / n as f64,
        }
    };
    let r1 = mean(&|c, r| rouge_n(c, r, 1));
    let r2 = mean(&|c, r| rouge_n(c, r, 2));
    let rl = mean(&rouge_l);
    for (name, s) in [("rouge1", r1), ("rouge2", r2), ("rougeL", rl)] {
        report.push(name, s.f);
        report.push(format!("{name}_p"), s.precision);
        report.push(format!("{name}_r"), s.recall);
    }
    report.push("bleu", detail.score);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(metric_tokenize("Hello, World!"), s(&["hello", ",", "world", "!"]));
        assert_eq!(metric_tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn rouge_fixtures() {
        let r = rouge_n("the cat sat", "the cat", 1);
        assert_eq!((r.precision, r.recall, r.f), (2.0 / 3.0, 1.0, 0.8));
        let r = rouge_n("a b c", "a b c", 2);
        assert_eq!((r.precision, r.recall, r.f), (1.0, 1.0, 1.0));
        assert_eq!(rouge_n("a b", "c d", 1), Prf::default());
        let l = rouge_l("a c b d", "a b c d");
        assert_eq!(l.recall, 0.75);
        assert_eq!(rouge_l("", "a b"), Prf::default());
        assert_eq!(rouge_n("", "", 1), Prf::default());
    }

    #[test]
    fn bleu_fixtures() {
        let d = bleu_detail(
            &s(&["the the the the the the the"]),
            &s(&["the cat is on the mat"]),
            false,
        )
        .unwrap();
        assert_eq!((d.matches[0], d.totals[0]), (2, 7));
        assert_eq!(d.precisions[0], 2.0 / 7.0);
        let same = s(&["a b c d e f", "x y z w v"]);
        assert_eq!(bleu(&same, &same, false).unwrap(), 1.0);

        let d = bleu_detail(&s(&["a b c d e"]), &s(&["a b c d e f g"]), false).unwrap();
        assert_eq!(d.precisions, [1.0; 4]);
        assert_eq!(d.score, (1.0f64 - 7.0 / 5.0).exp());
        assert!(d.score < 1.0);

        assert_eq!(bleu(&s(&["a b"]), &s(&["a b"]), false).unwrap(), 0.0);
        assert!(bleu(&s(&["a b"]), &s(&["a b"]), true).unwrap() > 0.0);
        assert!(bleu(&s(&["a"]), &[], false).is_err());
    }

    #[test]
    fn recall_fixtures() {
        assert_eq!(recall_at_k(&["G", "X"], "G", 1), 1.0);
        assert_eq!(recall_at_k(&["X", "Y", "G"], "G", 1), 0.0);
        assert_eq!(recall_at_k(&["X", "Y", "G"], "G", 5), 1.0);
        assert_eq!(recall_at_k(&["X"], "G", 5), 0.0);
        assert_eq!(recall_at_k(&["X", "X", "G"], "G", 2), 1.0);
    }

    #[test]
    fn report_formats() {
        let mut r = MetricReport {
            values: vec![],
            n: 3,
        };
        r.push("bleu", 0.25);
        assert_eq!(r.to_tsv(), "bleu\t0.25\nn\t3\n");
        assert_eq!(MetricReport::from_tsv(&r.to_tsv()).unwrap(), r);
        assert!(r.to_jsonl().starts_with("{\"metric\":\"bleu\",\"value\":0.25}"));
        let rep = seq2seq_report(&s(&["a b"]), &s(&["a b"]), false).unwrap();
        for k in ["rouge1", "rouge2", "rougeL", "bleu"] {
            assert!(rep.get(k).is_some());
        }
    }

    // Independent reference versions for fuzzing.
    fn naive_rouge_n(c: &[String], r: &[String], n: usize) -> (f64, f64) {
        let grams = |t: &[String]| -> Vec<Vec<String>> {
            if t.len() < n {
                return vec![];
            }
            (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
        };
        let cg = grams(c);
        let mut rg = grams(r);
        let mut hit = 0;
        for g in &cg {
            if let Some(pos) = rg.iter().position(|x| x == g) {
                rg.remove(pos);
                hit += 1;
            }
        }
        let p = if cg.is_empty() { 0.0 } else { hit as f64 / cg.len() as f64 };
        let rr = if grams(r).is_empty() { 0.0 } else { hit as f64 / grams(r).len() as f64 };
        (p, rr)
    }

    fn naive_lcs(a: &[String], b: &[String]) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        let mut t = vec![vec![0; b.len() + 1]; a.len() + 1];
        for i in (0..a.len()).rev() {
            for j in (0..b.len()).rev() {
                t[i][j] = if a[i] == b[j] {
                    1 + t[i + 1][j + 1]
                } else {
                    t[i + 1][j].max(t[i][j + 1])
                };
            }
        }
        t[0][0]
    }

    fn words() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "E", ".", "x,"]), 0..12)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn rouge_matches_naive(c in words(), r in words()) {
            let ct = metric_tokenize(&c);
            let rt = metric_tokenize(&r);
            for n in [1, 2] {
                let got = rouge_n(&c, &r, n);
                let (p, rr) = naive_rouge_n(&ct, &rt, n);
                prop_assert!((got.precision - p).abs() < 1e-12);
                prop_assert!((got.recall - rr).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&got.f));
            }
            let l = rouge_l(&c, &r);
            let lcs = naive_lcs(&ct, &rt);
            let expect = Prf::from_counts(lcs, ct.len(), rt.len());
            prop_assert_eq!(l, expect);
        }

        #[test]
        fn self_scores_are_one(c in words()) {
            prop_assume!(!metric_tokenize(&c).is_empty());
            prop_assert_eq!(rouge_n(&c, &c, 1).f, 1.0);
            prop_assert_eq!(rouge_l(&c, &c).f, 1.0);
        }

        #[test]
        fn tokenizer_idempotent(c in words(), r in words()) {
            let ct = metric_tokenize(&c).join(" ");
            let rt = metric_tokenize(&r).join(" ");
            prop_assert_eq!(rouge_n(&ct, &rt, 2), rouge_n(&c, &r, 2));
            prop_assert_eq!(rouge_l(&ct, &rt), rouge_l(&c, &r));
            let a = bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), true).unwrap();
            let b = bleu(&[ct], &[rt], true).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn brevity_penalty_grows(len in 4usize..10, extra in 1usize..5) {
            let reference: Vec<String> = (0..len + extra).map(|i| format!("w{i}")).collect();
            let short = reference[..len].join(" ");
            let longer = reference[..len + 1].join(" ");
            let r = vec![reference.join(" ")];
            let a = bleu_detail(&[short], &r, false).unwrap();
            let b = bleu_detail(&[longer], &r, false).unwrap();
            prop_assert!(b.brevity_penalty > a.brevity_penalty);
        }

        #[test]
        fn recall_monotone_in_k(ranked in prop::collection::vec(0u8..6, 0..8), gold in 0u8..6) {
            let ranked: Vec<String> = ranked.iter().map(|v| v.to_string()).collect();
            let g = gold.to_string();
            for k in 1..8 {
                prop_assert!(recall_at_k(&ranked, &g, k) <= recall_at_k(&ranked, &g, k + 1));
            }
        }
    }
}
