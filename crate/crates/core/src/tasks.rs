//! Downstream task flows: input and target construction, fine-tuning with
//! per-epoch validation, inference, scoring, and the pretraining ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bpe::{train_bpe_texts, TokenSeq, Vocab};
use crate::config::{RunConfig, TaskEntry, TaskKind};
use crate::corpus::{
    load_documents, load_kb, load_linking_dataset, load_ner_dataset, load_seq2seq_dataset, Document,
    EntityAnnotation, KnowledgeBase, LinkingExample, NerExample, SourceTargetPair,
};
use crate::decoding::{beam_search, build_trie, greedy_decode, pointer_greedy_decode, BeamConfig, PrefixTrie};
use crate::error::{Error, Result};
use crate::metrics::{recall_at_k, seq2seq_report, MetricReport};
use crate::model::{ModelParams, PointerSymbol};
use crate::noising::NoiseKind;
use crate::train::{finetune, load_checkpoint, pretrain, Example, PretrainSpec, TrainConfig};

pub const START_MARKER: &str = "[START]";
pub const END_MARKER: &str = "[END]";

/// Runs `f` over `items` on a pool capped by `BIOGEN_THREADS`, keeping order.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("BIOGEN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Task(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Wraps `body` ids in BOS/EOS after truncating to `max_len - 2` tokens.
fn wrap_ids(seq: &TokenSeq, max_len: usize) -> Vec<u32> {
    seq.truncated(max_len.saturating_sub(2)).wrapped().ids
}

// ---------------------------------------------------------------- seq2seq

pub fn seq2seq_examples(pairs: &[SourceTargetPair], vocab: &Vocab, max_len: usize) -> Vec<Example> {
    pairs
        .iter()
        .map(|p| Example::Seq2Seq {
            source: wrap_ids(&vocab.encode(&p.source), max_len),
            target: wrap_ids(&vocab.encode(&p.target), max_len),
        })
        .collect()
}

/// Decodes the best beam hypothesis into text.
pub fn generate(params: &ModelParams<f32>, vocab: &Vocab, source: &str, beam: BeamConfig, max_len: usize) -> Result<String> {
    let src = wrap_ids(&vocab.encode(source), max_len);
    let ids = if beam.beam_size == 1 {
        greedy_decode(params, &src, beam.max_len)?
    } else {
        beam_search(params, &src, beam, None)?
            .into_iter()
            .next()
            .map(|h| h.ids)
            .unwrap_or_default()
    };
    vocab.decode_ids(&ids)
}

pub fn score_seq2seq(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    pairs: &[SourceTargetPair],
    beam: BeamConfig,
    max_len: usize,
    bleu_smoothing: bool,
) -> Result<(MetricReport, Vec<String>)> {
    let preds = parallel_map(pairs, |p| generate(params, vocab, &p.source, beam, max_len))?;
    let refs: Vec<String> = pairs.iter().map(|p| p.target.clone()).collect();
    Ok((seq2seq_report(&preds, &refs, bleu_smoothing)?, preds))
}

// ---------------------------------------------------------------- linking

/// `left [START] mention [END] right`, whitespace-normalized.
pub fn mark_mention(ex: &LinkingExample) -> String {
    let text = format!(
        "{} {START_MARKER} {} {END_MARKER} {}",
        ex.context_left, ex.mention, ex.context_right
    );
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Text between the markers of a [`mark_mention`] string.
pub fn extract_mention(marked: &str) -> Option<String> {
    let words: Vec<&str> = marked.split_whitespace().collect();
    let s = words.iter().position(|w| *w == START_MARKER)?;
    let e = words.iter().rposition(|w| *w == END_MARKER)?;
    (s < e).then(|| words[s + 1..e].join(" "))
}

/// The gold concept's name equal to the mention if there is one, else its
/// lexicographically smallest name.
pub fn linking_target_name<'a>(ex: &LinkingExample, kb: &'a KnowledgeBase) -> Result<&'a str> {
    let names = kb.names_of(&ex.gold_concept);
    if names.is_empty() {
        return Err(Error::Task(format!(
            "gold concept {} is not in the knowledge base",
            ex.gold_concept
        )));
    }
    Ok(names
        .iter()
        .find(|n| **n == ex.mention)
        .copied()
        .unwrap_or(names[0]))
}

pub fn linking_examples(examples: &[LinkingExample], kb: &KnowledgeBase, vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|ex| {
            let name = linking_target_name(ex, kb)?;
            Ok(Example::Seq2Seq {
                source: wrap_ids(&vocab.encode(&mark_mention(ex)), max_len),
                target: wrap_ids(&vocab.encode(name), max_len),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkingPrediction {
    pub ranked_names: Vec<String>,
    /// Concepts in first-occurrence order of their names; a name shared by
    /// several concepts contributes them in id order.
    pub ranked_concepts: Vec<String>,
}

pub fn concepts_from_names(names: &[String], kb: &KnowledgeBase) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for n in names {
        for c in kb.concepts_for(n).into_iter().flatten() {
            if seen.insert(c.clone()) {
                out.push(c.clone());
            }
        }
    }
    out
}

pub fn link_mention(
    params: &ModelParams<f32>,
    trie: &PrefixTrie,
    kb: &KnowledgeBase,
    vocab: &Vocab,
    ex: &LinkingExample,
    beam: BeamConfig,
    max_len: usize,
) -> Result<LinkingPrediction> {
    let src = wrap_ids(&vocab.encode(&mark_mention(ex)), max_len);
    let hyps = beam_search(params, &src, beam, Some(trie))?;
    let mut ranked_names = Vec::new();
    for h in hyps.iter().filter(|h| h.finished) {
        for n in trie.names_at(h.body()) {
            if !ranked_names.contains(n) {
                ranked_names.push(n.clone());
            }
        }
    }
    let ranked_concepts = concepts_from_names(&ranked_names, kb);
    Ok(LinkingPrediction {
        ranked_names,
        ranked_concepts,
    })
}

/// Mean Recall@k for each k; missing ranks count as misses.
pub fn linking_report(preds: &[LinkingPrediction], examples: &[LinkingExample], ks: &[usize]) -> Result<MetricReport> {
    if preds.len() != examples.len() {
        return Err(Error::Task("prediction and example counts differ".into()));
    }
    let mut r = MetricReport {
        values: Vec::new(),
        n: preds.len(),
    };
    for &k in ks {
        let hits: f64 = preds
            .iter()
            .zip(examples)
            .map(|(p, ex)| recall_at_k(&p.ranked_concepts, &ex.gold_concept, k))
            .sum();
        r.push(format!("recall@{k}"), if preds.is_empty() { 0.0 } else { hits / preds.len() as f64 });
    }
    Ok(r)
}

// ---------------------------------------------------------------- NER

/// Sorted, distinct entity type labels; symbol `Type(j)` is label `j`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TypeVocab {
    pub labels: Vec<String>,
}

impl TypeVocab {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a NerExample>) -> Self {
        let set: BTreeSet<&str> = examples
            .into_iter()
            .flat_map(|e| e.entities.iter().map(|a| a.entity_type.as_str()))
            .collect();
        Self {
            labels: set.into_iter().map(str::to_string).collect(),
        }
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sorted by (first index, last index, type) without duplicates.
pub fn canonical_entities(entities: &[EntityAnnotation]) -> Vec<EntityAnnotation> {
    let mut v: Vec<EntityAnnotation> = entities
        .iter()
        .map(|e| EntityAnnotation::new(e.word_indices.clone(), e.entity_type.clone()))
        .collect();
    v.sort_by(|a, b| {
        (a.first(), a.last(), &a.entity_type, &a.word_indices).cmp(&(b.first(), b.last(), &b.entity_type, &b.word_indices))
    });
    v.dedup();
    v
}

/// BOS-wrapped word-aligned tokenization of an NER sentence.
pub fn ner_source(ex: &NerExample, vocab: &Vocab) -> TokenSeq {
    vocab.encode_words(&ex.words).wrapped()
}

/// Each entity as the first-subtoken positions of its words followed by its
/// type, in canonical order, then EOS.
pub fn ner_encode_target(ex: &NerExample, seq: &TokenSeq, types: &TypeVocab) -> Result<Vec<PointerSymbol>> {
    let starts = seq.word_start_positions();
    let mut out = Vec::new();
    for ent in canonical_entities(&ex.entities) {
        for &w in &ent.word_indices {
            let pos = starts.get(w).ok_or_else(|| {
                Error::Task(format!("entity word {w} has no tokens ({} words tokenized)", starts.len()))
            })?;
            out.push(PointerSymbol::Position(*pos));
        }
        let t = types
            .index(&ent.entity_type)
            .ok_or_else(|| Error::Task(format!("unknown entity type {:?}", ent.entity_type)))?;
        out.push(PointerSymbol::Type(t));
    }
    out.push(PointerSymbol::Eos);
    Ok(out)
}

/// Parses pointer output back into entities. Positions accumulate until a
/// type closes them; fragments with duplicate or non-word-start positions,
/// types with no positions, and unclosed trailing positions are dropped.
pub fn ner_decode_output(symbols: &[PointerSymbol], seq: &TokenSeq, types: &TypeVocab) -> Vec<EntityAnnotation> {
    let word_of: BTreeMap<usize, usize> = seq
        .word_start_positions()
        .into_iter()
        .enumerate()
        .map(|(w, p)| (p, w))
        .collect();
    let mut out = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    let mut broken = false;
    for &sym in symbols {
        match sym {
            PointerSymbol::Position(p) => match word_of.get(&p) {
                Some(&w) if !pending.contains(&w) => pending.push(w),
                _ => broken = true,
            },
            PointerSymbol::Type(t) => {
                if !broken && !pending.is_empty() {
                    if let Some(label) = types.labels.get(t) {
                        out.push(EntityAnnotation::new(pending.clone(), label.clone()));
                    }
                }
                pending.clear();
                broken = false;
            }
            PointerSymbol::Eos => break,
        }
    }
    canonical_entities(&out)
}

pub fn ner_examples(examples: &[NerExample], vocab: &Vocab, types: &TypeVocab, max_len: usize) -> Result<Vec<Example>> {
    examples
        .iter()
        .map(|ex| {
            let source = ner_source(ex, vocab);
            if source.len() > max_len {
                return Err(Error::Task(format!(
                    "NER sentence needs {} tokens but max_len is {max_len}",
                    source.len()
                )));
            }
            let target = ner_encode_target(ex, &source, types)?;
            Ok(Example::Pointer {
                source,
                target,
                n_types: types.len(),
            })
        })
        .collect()
}

pub fn predict_ner(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    types: &TypeVocab,
    ex: &NerExample,
    max_steps: usize,
) -> Result<Vec<EntityAnnotation>> {
    let seq = ner_source(ex, vocab);
    let symbols = pointer_greedy_decode(params, &seq, types.len(), max_steps)?;
    Ok(ner_decode_output(&symbols, &seq, types))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NerScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Micro-averaged exact-match entity scores; duplicate predictions count once.
pub fn evaluate_ner(preds: &[Vec<EntityAnnotation>], golds: &[Vec<EntityAnnotation>]) -> Result<NerScores> {
    if preds.len() != golds.len() {
        return Err(Error::Task(format!(
            "{} predicted examples but {} gold examples",
            preds.len(),
            golds.len()
        )));
    }
    let (mut correct, mut predicted, mut gold) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let p: BTreeSet<EntityAnnotation> = canonical_entities(p).into_iter().collect();
        let g: BTreeSet<EntityAnnotation> = canonical_entities(g).into_iter().collect();
        correct += p.intersection(&g).count();
        predicted += p.len();
        gold += g.len();
    }
    let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(NerScores {
        precision,
        recall,
        f1,
        correct,
        predicted,
        gold,
    })
}

pub fn ner_report(scores: &NerScores, n: usize) -> MetricReport {
    MetricReport {
        values: vec![
            ("precision".into(), scores.precision),
            ("recall".into(), scores.recall),
            ("f1".into(), scores.f1),
        ],
        n,
    }
}

// ---------------------------------------------------------------- task runs

/// Settings shared by every downstream task run.
#[derive(Debug, Clone)]
pub struct TaskSettings {
    pub finetune: TrainConfig,
    pub beam: BeamConfig,
    pub max_len: usize,
    pub bleu_smoothing: bool,
}

impl TaskSettings {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let mut beam = BeamConfig::new(cfg.get_usize("beam_size")?, cfg.get_usize("max_decode_len")?);
        beam.length_penalty = cfg.get_f64("length_penalty")?;
        Ok(Self {
            finetune: cfg.finetune_config()?,
            beam,
            max_len: cfg.get_usize("max_len")?,
            bleu_smoothing: cfg.get_bool("bleu_smoothing")?,
        })
    }
    /// Caps input and decode lengths at the model's position table.
    pub fn fit_to(mut self, model: &crate::model::ModelConfig) -> Self {
        self.max_len = self.max_len.min(model.max_positions);
        self.beam.max_len = self.beam.max_len.min(model.max_positions);
        self
    }
}

/// A task's train/dev/test splits loaded from `<dir>/{train,dev,test}.jsonl`
/// (plus `<dir>/kb.tsv` for linking).
#[derive(Debug, Clone)]
pub enum TaskData {
    Seq2Seq {
        train: Vec<SourceTargetPair>,
        dev: Vec<SourceTargetPair>,
        test: Vec<SourceTargetPair>,
    },
    Linking {
        train: Vec<LinkingExample>,
        dev: Vec<LinkingExample>,
        test: Vec<LinkingExample>,
        kb: KnowledgeBase,
    },
    Ner {
        train: Vec<NerExample>,
        dev: Vec<NerExample>,
        test: Vec<NerExample>,
    },
}

fn non_empty<T>(v: Vec<T>, what: &Path) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Task(format!("{} has no records", what.display())));
    }
    Ok(v)
}

impl TaskData {
    pub fn load(kind: TaskKind, dir: &Path) -> Result<Self> {
        let split = |s: &str| dir.join(format!("{s}.jsonl"));
        Ok(match kind {
            TaskKind::Dialogue | TaskKind::Summarization => {
                let l = |s: &str| non_empty(load_seq2seq_dataset(split(s))?, &split(s));
                TaskData::Seq2Seq {
                    train: l("train")?,
                    dev: l("dev")?,
                    test: l("test")?,
                }
            }
            TaskKind::Linking => {
                let l = |s: &str| non_empty(load_linking_dataset(split(s))?, &split(s));
                let kb = load_kb(dir.join("kb.tsv"))?;
                let data = TaskData::Linking {
                    train: l("train")?,
                    dev: l("dev")?,
                    test: l("test")?,
                    kb,
                };
                if let TaskData::Linking { train, dev, test, kb } = &data {
                    for ex in train.iter().chain(dev).chain(test) {
                        if !kb.has_concept(&ex.gold_concept) {
                            return Err(Error::Task(format!(
                                "gold concept {} is missing from {}",
                                ex.gold_concept,
                                dir.join("kb.tsv").display()
                            )));
                        }
                    }
                }
                data
            }
            TaskKind::Ner => {
                let l = |s: &str| non_empty(load_ner_dataset(split(s))?, &split(s));
                TaskData::Ner {
                    train: l("train")?,
                    dev: l("dev")?,
                    test: l("test")?,
                }
            }
        })
    }

    /// Loads only `<dir>/test.jsonl`, with the knowledge base for linking read
    /// from `kb` or `<dir>/kb.tsv`; the train and dev splits are left empty.
    pub fn load_test(kind: TaskKind, dir: &Path, kb: Option<&Path>) -> Result<Self> {
        let path = dir.join("test.jsonl");
        Ok(match kind {
            TaskKind::Dialogue | TaskKind::Summarization => TaskData::Seq2Seq {
                train: Vec::new(),
                dev: Vec::new(),
                test: non_empty(load_seq2seq_dataset(&path)?, &path)?,
            },
            TaskKind::Linking => {
                let kb_path = kb.map(Path::to_path_buf).unwrap_or_else(|| dir.join("kb.tsv"));
                let kb = load_kb(&kb_path)?;
                let test = non_empty(load_linking_dataset(&path)?, &path)?;
                if let Some(ex) = test.iter().find(|ex| !kb.has_concept(&ex.gold_concept)) {
                    return Err(Error::Task(format!(
                        "gold concept {} is missing from {}",
                        ex.gold_concept,
                        kb_path.display()
                    )));
                }
                TaskData::Linking {
                    train: Vec::new(),
                    dev: Vec::new(),
                    test,
                    kb,
                }
            }
            TaskKind::Ner => TaskData::Ner {
                train: Vec::new(),
                dev: Vec::new(),
                test: non_empty(load_ner_dataset(&path)?, &path)?,
            },
        })
    }

    /// Every string the tokenizer must cover.
    pub fn texts(&self) -> Vec<String> {
        match self {
            TaskData::Seq2Seq { train, dev, test } => train
                .iter()
                .chain(dev)
                .chain(test)
                .flat_map(|p| [p.source.clone(), p.target.clone()])
                .collect(),
            TaskData::Linking { train, dev, test, kb } => train
                .iter()
                .chain(dev)
                .chain(test)
                .map(mark_mention)
                .chain(kb.names().map(str::to_string))
                .collect(),
            TaskData::Ner { train, dev, test } => train
                .iter()
                .chain(dev)
                .chain(test)
                .map(|e| e.words.join(" "))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub report: MetricReport,
    pub best_epoch: usize,
    pub dev_metrics: Vec<f64>,
    pub params: ModelParams<f32>,
    /// Entity labels in pointer-symbol order, for NER runs.
    pub ner_labels: Option<Vec<String>>,
}

/// Fine-tunes `init` on the task, keeps the best epoch by a dev metric
/// (Rouge-L F for generation, Recall@1 for linking, F1 for NER), scores the
/// test split with it, and writes `metrics.tsv`/`metrics.jsonl` plus
/// predictions into `out_dir`.
pub fn run_task(
    data: &TaskData,
    init: &ModelParams<f32>,
    vocab: &Vocab,
    settings: &TaskSettings,
    out_dir: &Path,
) -> Result<TaskOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let max_len = settings.max_len;
    let greedy = BeamConfig {
        beam_size: 1,
        ..settings.beam
    };
    let mut ner_labels = None;
    let (outcome, report, predictions) = match data {
        TaskData::Seq2Seq { train, dev, .. } => {
            let examples = seq2seq_examples(train, vocab, max_len);
            let out = finetune(init, &examples, &settings.finetune, |p, _| {
                let (r, _) = score_seq2seq(p, vocab, dev, greedy, max_len, settings.bleu_smoothing)?;
                Ok(r.get("rougeL").unwrap_or(0.0))
            })?;
            let (report, preds) = evaluate_test(data, &out.best, vocab, settings, None)?;
            (out, report, preds)
        }
        TaskData::Linking { train, dev, kb, .. } => {
            let trie = build_trie(kb, vocab, settings.beam.max_len)?;
            let examples = linking_examples(train, kb, vocab, max_len)?;
            let predict = |p: &ModelParams<f32>, set: &[LinkingExample], beam: BeamConfig| {
                parallel_map(set, |ex| link_mention(p, &trie, kb, vocab, ex, beam, max_len))
            };
            let out = finetune(init, &examples, &settings.finetune, |p, _| {
                let preds = predict(p, dev, greedy)?;
                Ok(linking_report(&preds, dev, &[1])?.get("recall@1").unwrap_or(0.0))
            })?;
            let (report, preds) = evaluate_test(data, &out.best, vocab, settings, None)?;
            (out, report, preds)
        }
        TaskData::Ner { train, dev, test } => {
            let types = TypeVocab::from_examples(train.iter().chain(dev).chain(test));
            if types.len() > init.config.ner_types {
                return Err(Error::Task(format!(
                    "{} entity types but the model has {} type slots",
                    types.len(),
                    init.config.ner_types
                )));
            }
            ner_labels = Some(types.labels.clone());
            let examples = ner_examples(train, vocab, &types, max_len)?;
            let steps = settings.beam.max_len;
            let predict = |p: &ModelParams<f32>, set: &[NerExample]| {
                parallel_map(set, |ex| predict_ner(p, vocab, &types, ex, steps))
            };
            let golds = |set: &[NerExample]| set.iter().map(|e| e.entities.clone()).collect::<Vec<_>>();
            let out = finetune(init, &examples, &settings.finetune, |p, _| {
                Ok(evaluate_ner(&predict(p, dev)?, &golds(dev))?.f1)
            })?;
            let (report, preds) = evaluate_test(data, &out.best, vocab, settings, Some(&types))?;
            (out, report, preds)
        }
    };
    report.write(out_dir, "metrics")?;
    let pred_path = out_dir.join("predictions.txt");
    fs::write(&pred_path, predictions).map_err(|e| Error::io(&pred_path, e))?;
    let mut epochs = String::from("epoch,train_loss,dev_metric\n");
    for (i, (l, m)) in outcome.epoch_losses.iter().zip(&outcome.metrics).enumerate() {
        let _ = writeln!(epochs, "{},{l},{m}", i + 1);
    }
    let epoch_path = out_dir.join("epochs.csv");
    fs::write(&epoch_path, epochs).map_err(|e| Error::io(&epoch_path, e))?;
    Ok(TaskOutcome {
        report,
        best_epoch: outcome.best_epoch,
        dev_metrics: outcome.metrics,
        params: outcome.best,
        ner_labels,
    })
}

fn join_lines(lines: impl IntoIterator<Item = String>) -> String {
    lines.into_iter().map(|l| l + "\n").collect()
}

/// Scores `params` on the test split. Returns the report and the prediction
/// file contents: one generated text, one tab-separated concept ranking, or
/// one JSON entity list per line. NER uses `types` when given, else the labels
/// found in the data.
pub fn evaluate_test(
    data: &TaskData,
    params: &ModelParams<f32>,
    vocab: &Vocab,
    settings: &TaskSettings,
    types: Option<&TypeVocab>,
) -> Result<(MetricReport, String)> {
    let max_len = settings.max_len;
    match data {
        TaskData::Seq2Seq { test, .. } => {
            let (report, preds) = score_seq2seq(params, vocab, test, settings.beam, max_len, settings.bleu_smoothing)?;
            Ok((report, join_lines(preds)))
        }
        TaskData::Linking { test, kb, .. } => {
            let trie = build_trie(kb, vocab, settings.beam.max_len)?;
            let preds = parallel_map(test, |ex| link_mention(params, &trie, kb, vocab, ex, settings.beam, max_len))?;
            let report = linking_report(&preds, test, &[1, 5])?;
            Ok((report, join_lines(preds.iter().map(|p| p.ranked_concepts.join("\t")))))
        }
        TaskData::Ner { train, dev, test } => {
            let found;
            let types = match types {
                Some(t) => t,
                None => {
                    found = TypeVocab::from_examples(train.iter().chain(dev).chain(test));
                    &found
                }
            };
            let preds = parallel_map(test, |ex| predict_ner(params, vocab, types, ex, settings.beam.max_len))?;
            let golds: Vec<_> = test.iter().map(|e| e.entities.clone()).collect();
            let report = ner_report(&evaluate_ner(&preds, &golds)?, test.len());
            let lines = preds.iter().map(|p| serde_json::to_string(p).expect("plain data"));
            Ok((report, join_lines(lines)))
        }
    }
}

/// Scores a prediction file written by [`evaluate_test`] against the test
/// split; the line count must equal the number of test examples.
pub fn score_predictions(data: &TaskData, text: &str, bleu_smoothing: bool) -> Result<MetricReport> {
    let lines: Vec<&str> = text.lines().collect();
    let check = |n: usize| {
        if lines.len() == n {
            Ok(())
        } else {
            Err(Error::Task(format!("{} prediction lines but {n} test examples", lines.len())))
        }
    };
    match data {
        TaskData::Seq2Seq { test, .. } => {
            check(test.len())?;
            let cands: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
            let refs: Vec<String> = test.iter().map(|p| p.target.clone()).collect();
            seq2seq_report(&cands, &refs, bleu_smoothing)
        }
        TaskData::Linking { test, kb, .. } => {
            check(test.len())?;
            let preds: Vec<LinkingPrediction> = lines
                .iter()
                .map(|l| {
                    let ranked_concepts: Vec<String> =
                        l.split('\t').filter(|c| !c.is_empty()).map(str::to_string).collect();
                    let ranked_names = ranked_concepts
                        .iter()
                        .filter_map(|c| kb.names_of(c).first().map(|n| n.to_string()))
                        .collect();
                    LinkingPrediction {
                        ranked_names,
                        ranked_concepts,
                    }
                })
                .collect();
            linking_report(&preds, test, &[1, 5])
        }
        TaskData::Ner { test, .. } => {
            check(test.len())?;
            let preds = lines
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str::<Vec<EntityAnnotation>>(l)
                        .map_err(|e| Error::Task(format!("prediction line {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            let golds: Vec<_> = test.iter().map(|e| e.entities.clone()).collect();
            Ok(ner_report(&evaluate_ner(&preds, &golds)?, test.len()))
        }
    }
}

/// The headline metrics reported per task family.
pub fn headline_metrics(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::Dialogue | TaskKind::Summarization => &["rouge1", "rouge2", "rougeL", "bleu"],
        TaskKind::Linking => &["recall@1", "recall@5"],
        TaskKind::Ner => &["precision", "recall", "f1"],
    }
}

// ---------------------------------------------------------------- ablation

pub const ABLATION_KINDS: [NoiseKind; 2] = [NoiseKind::TextInfilling, NoiseKind::Both];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub task: String,
    pub metric: String,
    pub ti: f64,
    pub ti_sp: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Keys whose values differ between the two pretraining configs.
    pub config_diff: Vec<(String, String, String)>,
    pub run_dirs: [PathBuf; 2],
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,ti_value,ti_sp_value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.task, r.metric, r.ti, r.ti_sp);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let tw = self.rows.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
        let mw = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
        let mut s = String::from("Pretraining ablation (TI = text infilling, SP = sentence permutation)\n\n");
        let _ = writeln!(s, "{:<tw$}  {:<mw$}  {:>10}  {:>10}", "task", "metric", "TI", "TI+SP");
        let _ = writeln!(s, "{}", "-".repeat(tw + mw + 28));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<tw$}  {:<mw$}  {:>10.4}  {:>10.4}",
                r.task, r.metric, r.ti, r.ti_sp
            );
        }
        s.push_str("\nPretraining configs differ only in:\n");
        for (k, a, b) in &self.config_diff {
            let _ = writeln!(s, "  {k}: {a} vs {b}");
        }
        s
    }
}

/// Documents and task data gathered for one ablation run.
pub struct AblationInputs {
    pub corpus: Vec<Document>,
    pub tasks: Vec<(String, TaskKind, TaskData)>,
}

impl AblationInputs {
    /// Loads the corpus and every `task.*` entry of `cfg`, resolving relative
    /// paths against `base`.
    pub fn load(cfg: &RunConfig, base: &Path, only: Option<&[String]>) -> Result<Self> {
        let corpus_path = cfg
            .get_path("corpus")?
            .ok_or_else(|| Error::Config("corpus is not set".into()))?;
        let corpus = load_documents(base.join(corpus_path))?;
        let mut tasks = Vec::new();
        let selected: Vec<(&String, &TaskEntry)> = match only {
            Some(names) => names
                .iter()
                .map(|n| {
                    cfg.tasks()
                        .get_key_value(n)
                        .ok_or_else(|| Error::Config(format!("task {n:?} is not declared in the config")))
                })
                .collect::<Result<_>>()?,
            None => cfg.tasks().iter().collect(),
        };
        for (name, entry) in selected {
            tasks.push((name.clone(), entry.kind, TaskData::load(entry.kind, &base.join(&entry.dir))?));
        }
        Ok(Self { corpus, tasks })
    }
}

/// Loads `cfg.vocab` or trains one over the corpus, all task text and the
/// mention markers; the result is saved as `out_dir/vocab.txt`.
pub fn resolve_vocab(cfg: &RunConfig, base: &Path, inputs: &AblationInputs, out_dir: &Path) -> Result<Vocab> {
    let path = out_dir.join("vocab.txt");
    let vocab = match cfg.get_path("vocab")? {
        Some(p) => Vocab::load(base.join(p))?,
        None if path.exists() => Vocab::load(&path)?,
        None => {
            let mut texts: Vec<String> = inputs.corpus.iter().map(|d| d.text.clone()).collect();
            for (_, _, data) in &inputs.tasks {
                texts.extend(data.texts());
            }
            texts.push(format!("{START_MARKER} {END_MARKER}"));
            train_bpe_texts(texts.iter().map(String::as_str), cfg.get_usize("vocab_size")?)?
        }
    };
    vocab.save(&path)?;
    Ok(vocab)
}

fn run_dir_name(kind: NoiseKind) -> String {
    format!("pretrain-{}", kind.suffix())
}

/// Pretrains one model per noise setting from the same seed and step budget,
/// fine-tunes each on every task, and writes `ablation.csv`, `ablation.txt`
/// and the resolved configs under `out_dir`. Completed pretraining runs and
/// task results found on disk are reused, so an interrupted run resumes.
pub fn run_ablation(cfg: &RunConfig, base: &Path, inputs: &AblationInputs, out_dir: &Path) -> Result<AblationReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.write(out_dir.join("config.txt"))?;
    let vocab = resolve_vocab(cfg, base, inputs, out_dir)?;
    let settings = TaskSettings::from_config(cfg)?;

    let mut results: Vec<BTreeMap<(String, String), f64>> = Vec::new();
    let mut configs = Vec::new();
    let mut dirs = Vec::new();
    for kind in ABLATION_KINDS {
        let mut run_cfg = cfg.clone();
        run_cfg.set("noise", &kind.to_string())?;
        let dir = out_dir.join(run_dir_name(kind));
        let params = pretrain_from_config(&run_cfg, &inputs.corpus, &vocab, &dir, None)?;
        let mut metrics = BTreeMap::new();
        for (name, task_kind, data) in &inputs.tasks {
            let task_dir = dir.join("tasks").join(name);
            let report_path = task_dir.join("metrics.tsv");
            let report = if report_path.exists() {
                let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
                MetricReport::from_tsv(&text)?
            } else {
                run_task(data, &params, &vocab, &settings, &task_dir)?.report
            };
            for m in headline_metrics(*task_kind) {
                let v = report
                    .get(m)
                    .ok_or_else(|| Error::Task(format!("report for {name} lacks {m}")))?;
                metrics.insert((name.clone(), m.to_string()), v);
            }
        }
        results.push(metrics);
        configs.push(run_cfg.pairs());
        dirs.push(dir);
    }

    let mut rows = Vec::new();
    for (name, kind, _) in &inputs.tasks {
        for m in headline_metrics(*kind) {
            let key = (name.clone(), m.to_string());
            rows.push(AblationRow {
                task: name.clone(),
                metric: m.to_string(),
                ti: results[0][&key],
                ti_sp: results[1][&key],
            });
        }
    }
    let config_diff = configs[0]
        .iter()
        .zip(&configs[1])
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, b)| (a.0.clone(), a.1.clone(), b.1.clone()))
        .collect();
    let report = AblationReport {
        rows,
        config_diff,
        run_dirs: [dirs[0].clone(), dirs[1].clone()],
    };
    let csv = out_dir.join("ablation.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = out_dir.join("ablation.txt");
    fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// Runs (or resumes) pretraining as configured, writing `config.txt`,
/// `checkpoint.bin` and `loss.csv` into `dir`; returns the final parameters.
pub fn pretrain_from_config(
    cfg: &RunConfig,
    corpus: &[Document],
    vocab: &Vocab,
    dir: &Path,
    stop_after: Option<usize>,
) -> Result<ModelParams<f32>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.write(dir.join("config.txt"))?;
    let train = cfg.train_config()?;
    let done = dir.join(crate::train::CHECKPOINT_FILE);
    if done.exists() {
        let (params, opt) = load_checkpoint(&done)?;
        if opt.is_some_and(|o| o.step as usize >= train.total_steps) {
            return Ok(params);
        }
    }
    let spec = PretrainSpec {
        corpus,
        vocab,
        noise: cfg.noise_config()?,
        model: cfg.model_config(vocab.size())?,
        train,
        max_len: cfg.get_usize("max_len")?,
        checkpoint_interval: cfg.get_usize("checkpoint_interval")?,
        stop_after,
        extra_config: vec![("noise".into(), cfg.get("noise")?.to_string())],
    };
    Ok(pretrain(&spec, dir)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{BOS, EOS};
    use proptest::prelude::*;

    fn ent(ix: &[usize], t: &str) -> EntityAnnotation {
        EntityAnnotation::new(ix.to_vec(), t)
    }

    #[test]
    fn marking_rule() {
        let ex = LinkingExample {
            context_left: "took".into(),
            mention: "asa".into(),
            context_right: "daily".into(),
            gold_concept: "C1".into(),
        };
        assert_eq!(mark_mention(&ex), "took [START] asa [END] daily");
        assert_eq!(extract_mention(&mark_mention(&ex)).unwrap(), "asa");
        let bare = LinkingExample {
            context_left: String::new(),
            context_right: "  ".into(),
            ..ex
        };
        assert_eq!(mark_mention(&bare), "[START] asa [END]");
    }

    #[test]
    fn target_name_rule() {
        let kb = KnowledgeBase::from_entries([("C1", "aspirin"), ("C1", "asa"), ("C1", "acetylsalicylic acid")]);
        let mut ex = LinkingExample {
            context_left: String::new(),
            mention: "asa".into(),
            context_right: String::new(),
            gold_concept: "C1".into(),
        };
        assert_eq!(linking_target_name(&ex, &kb).unwrap(), "asa");
        ex.mention = "ASA pills".into();
        assert_eq!(linking_target_name(&ex, &kb).unwrap(), "acetylsalicylic acid");
        ex.gold_concept = "C9".into();
        assert!(linking_target_name(&ex, &kb).is_err());
    }

    #[test]
    fn concept_ranking_and_recall() {
        let kb = KnowledgeBase::from_entries([("C2", "cold"), ("C1", "cold"), ("C3", "flu"), ("G", "gold")]);
        let names: Vec<String> = ["cold", "flu", "gold"].iter().map(|s| s.to_string()).collect();
        let concepts = concepts_from_names(&names, &kb);
        assert_eq!(concepts, ["C1", "C2", "C3", "G"]);
        let pred = LinkingPrediction {
            ranked_names: names,
            ranked_concepts: concepts,
        };
        let ex = LinkingExample {
            context_left: String::new(),
            mention: "x".into(),
            context_right: String::new(),
            gold_concept: "C3".into(),
        };
        let r = linking_report(&[pred], &[ex], &[1, 5]).unwrap();
        assert_eq!(r.get("recall@1"), Some(0.0));
        assert_eq!(r.get("recall@5"), Some(1.0));
    }

    fn one_token_seq(n_words: usize) -> TokenSeq {
        let mut ids = vec![BOS];
        ids.extend((0..n_words).map(|i| 10 + i as u32));
        ids.push(EOS);
        let mut ws = vec![false];
        ws.extend(std::iter::repeat_n(true, n_words));
        ws.push(false);
        TokenSeq::new(ids, ws)
    }

    #[test]
    fn encode_target_fixtures() {
        let types = TypeVocab {
            labels: vec!["DIS".into()],
        };
        let ex = NerExample {
            words: vec!["severe".into(), "chest".into(), "pain".into()],
            entities: vec![ent(&[1, 2], "DIS")],
        };
        let seq = one_token_seq(3);
        use PointerSymbol::*;
        assert_eq!(ner_encode_target(&ex, &seq, &types).unwrap(), vec![Position(2), Position(3), Type(0), Eos]);

        // a word split into four subtokens starting at position 5
        let seq = TokenSeq::new(
            vec![BOS, 10, 11, 12, 13, 20, 21, 22, 23, EOS],
            vec![false, true, true, true, true, true, false, false, false, false],
        );
        let types = TypeVocab {
            labels: vec!["X".into()],
        };
        let ex = NerExample {
            words: vec!["a".into(), "b".into(), "c".into(), "d".into(), "lower".into()],
            entities: vec![ent(&[4], "X")],
        };
        assert_eq!(ner_encode_target(&ex, &seq, &types).unwrap(), vec![Position(5), Type(0), Eos]);
    }

    #[test]
    fn decode_drops_malformed_fragments() {
        use PointerSymbol::*;
        let seq = one_token_seq(4);
        let types = TypeVocab {
            labels: vec!["A".into(), "B".into()],
        };
        assert!(ner_decode_output(&[], &seq, &types).is_empty());
        let out = ner_decode_output(&[Position(1), Type(0), Position(2), Position(3)], &seq, &types);
        assert_eq!(out, vec![ent(&[0], "A")]);
        let out = ner_decode_output(&[Position(1), Position(1), Type(1), Position(0), Type(0), Type(1), Position(4), Type(1), Eos], &seq, &types);
        assert_eq!(out, vec![ent(&[3], "B")]);
    }

    #[test]
    fn ner_scores() {
        let g = vec![vec![ent(&[0], "A"), ent(&[2, 3], "B")]];
        let s = evaluate_ner(&g, &g).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let p = vec![vec![ent(&[0], "A"), ent(&[0], "A")]];
        let s = evaluate_ner(&p, &g).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        let s = evaluate_ner(&[vec![]], &g).unwrap();
        assert_eq!((s.precision, s.f1), (0.0, 0.0));
        assert!(evaluate_ner(&[], &g).is_err());
    }

    fn ner_example() -> impl Strategy<Value = (NerExample, Vec<usize>)> {
        (1usize..8, prop::collection::vec(1usize..4, 8)).prop_flat_map(|(n, pieces)| {
            let pieces = pieces[..n].to_vec();
            let entity = (prop::collection::btree_set(0..n, 1..=n.min(4)), 0usize..3)
                .prop_map(|(ix, t)| EntityAnnotation::new(ix.into_iter().collect(), ["A", "B", "C"][t]));
            (prop::collection::vec(entity, 0..5), Just(pieces), Just(n)).prop_map(|(ents, pieces, n)| {
                let words = (0..n).map(|i| format!("w{i}")).collect();
                (
                    NerExample {
                        words,
                        entities: canonical_entities(&ents),
                    },
                    pieces,
                )
            })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip((ex, pieces) in ner_example()) {
            let mut ids = vec![BOS];
            let mut ws = vec![false];
            for (w, &k) in pieces.iter().enumerate() {
                for j in 0..k {
                    ids.push(10 + (w * 4 + j) as u32);
                    ws.push(j == 0);
                }
            }
            ids.push(EOS);
            ws.push(false);
            let seq = TokenSeq::new(ids, ws);
            let types = TypeVocab { labels: vec!["A".into(), "B".into(), "C".into()] };
            let sym = ner_encode_target(&ex, &seq, &types).unwrap();
            prop_assert_eq!(ner_decode_output(&sym, &seq, &types), ex.entities.clone());
        }

        #[test]
        fn evaluation_ignores_prediction_order((ex, _) in ner_example(), seed in any::<u64>()) {
            let mut shuffled = ex.entities.clone();
            let mut r = crate::rng::seeded(seed);
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut r);
            let a = evaluate_ner(std::slice::from_ref(&ex.entities), std::slice::from_ref(&ex.entities)).unwrap();
            let b = evaluate_ner(&[shuffled], std::slice::from_ref(&ex.entities)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
