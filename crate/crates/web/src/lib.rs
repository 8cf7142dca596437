//! Browser bindings for three interactive views: corrupting a passage with
//! the pretraining noise, plotting the learning-rate schedule, and scoring
//! candidate text against references.
//!
//! Each operation has a plain Rust form returning JSON (tested natively) and
//! a `wasm_bindgen` export that reports failures as JS exceptions.

use biogen_core::bpe::{train_bpe_texts, Vocab, MASK, NUM_SPECIALS};
use biogen_core::corpus::Document;
use biogen_core::error::Result;
use biogen_core::metrics::{bleu_detail, seq2seq_report};
use biogen_core::noising::{make_pretraining_example, NoiseConfig};
use biogen_core::train::{lr_at, TrainConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Maximum sequence length used by the noising view.
pub const DEMO_MAX_LEN: usize = 512;

#[derive(Debug, Serialize)]
pub struct NoiseView {
    pub input: Vec<String>,
    pub target: Vec<String>,
    pub mask_tokens: usize,
    pub budget: usize,
    pub vocab_size: usize,
}

fn surfaces(vocab: &Vocab, ids: &[u32]) -> Vec<String> {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
        .collect()
}

/// Trains a vocabulary with `merges` merges on `text`, then corrupts it.
pub fn noise_view(
    text: &str,
    merges: usize,
    mask_ratio: f64,
    poisson_lambda: f64,
    text_infilling: bool,
    sentence_permutation: bool,
    seed: u64,
) -> Result<NoiseView> {
    let mut chars: Vec<char> = text.to_lowercase().chars().filter(|c| !c.is_whitespace()).collect();
    chars.sort_unstable();
    chars.dedup();
    let vocab = train_bpe_texts([text], NUM_SPECIALS + 2 * chars.len() + merges.max(1))?;
    let cfg = NoiseConfig {
        mask_ratio,
        poisson_lambda,
        use_text_infilling: text_infilling,
        use_sentence_permutation: sentence_permutation,
        seed,
    };
    let pair = make_pretraining_example(&Document::new(0, text), &vocab, &cfg, DEMO_MAX_LEN)?;
    let body = |ids: &[u32]| ids[1..ids.len() - 1].to_vec();
    let (input, target) = (body(&pair.input_ids), body(&pair.target_ids));
    Ok(NoiseView {
        mask_tokens: input.iter().filter(|&&t| t == MASK).count(),
        budget: if text_infilling { cfg.mask_budget(target.len()) } else { 0 },
        input: surfaces(&vocab, &input),
        target: surfaces(&vocab, &target),
        vocab_size: vocab.size(),
    })
}

#[derive(Debug, Serialize)]
pub struct LrCurve {
    pub steps: Vec<usize>,
    pub lrs: Vec<f64>,
    pub warmup_steps: usize,
}

/// Samples the schedule at `points` evenly spaced steps from 0 to `total_steps`.
pub fn lr_curve_view(total_steps: usize, warmup_ratio: f64, lr_max: f64, points: usize) -> Result<LrCurve> {
    let cfg = TrainConfig {
        total_steps,
        warmup_ratio,
        lr_max,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let points = points.max(2);
    let mut steps: Vec<usize> = (0..points).map(|i| i * total_steps / (points - 1)).collect();
    steps.push(cfg.warmup_steps());
    steps.sort_unstable();
    steps.dedup();
    let lrs = steps.iter().map(|&s| lr_at(s, &cfg)).collect::<Result<_>>()?;
    Ok(LrCurve {
        steps,
        lrs,
        warmup_steps: cfg.warmup_steps(),
    })
}

#[derive(Debug, Serialize)]
pub struct ScoreView {
    pub metrics: Vec<(String, f64)>,
    pub bleu_precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

/// Scores line-aligned candidates against references.
pub fn score_view(candidates: &str, references: &str, smoothing: bool) -> Result<ScoreView> {
    let lines = |s: &str| s.lines().map(str::to_string).collect::<Vec<_>>();
    let (c, r) = (lines(candidates), lines(references));
    let report = seq2seq_report(&c, &r, smoothing)?;
    let detail = bleu_detail(&c, &r, smoothing)?;
    Ok(ScoreView {
        metrics: report.values,
        bleu_precisions: detail.precisions.to_vec(),
        brevity_penalty: detail.brevity_penalty,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn noise_text(
    text: &str,
    merges: usize,
    mask_ratio: f64,
    poisson_lambda: f64,
    text_infilling: bool,
    sentence_permutation: bool,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(noise_view(
        text,
        merges,
        mask_ratio,
        poisson_lambda,
        text_infilling,
        sentence_permutation,
        seed.into(),
    ))
}

#[wasm_bindgen]
pub fn lr_curve(total_steps: usize, warmup_ratio: f64, lr_max: f64, points: usize) -> std::result::Result<String, JsError> {
    to_js(lr_curve_view(total_steps, warmup_ratio, lr_max, points))
}

#[wasm_bindgen]
pub fn score(candidates: &str, references: &str, smoothing: bool) -> std::result::Result<String, JsError> {
    to_js(score_view(candidates, references, smoothing))
}
