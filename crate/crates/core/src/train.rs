//! Gradients, AdamW with global-norm clipping, the warmup/linear-decay
//! schedule, checkpoint conversion, and the pretraining and fine-tuning loops.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bpe::{TokenSeq, Vocab, PAD};
use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::config;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::{Dropout, ModelConfig, ModelParams, Net, PointerSymbol};
use crate::noising::{make_pretraining_example, permutation, NoiseConfig, NoisedPair};
use crate::rng;
use crate::tape::{Mat, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Passes over the data for fine-tuning; pretraining is step-driven.
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            batch_size: 8,
            lr_max: 1e-4,
            warmup_ratio: 0.02,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Train(m));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if self.lr_max.is_nan() || self.lr_max <= 0.0 {
            return bad(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

/// Linear warmup from 0 to `lr_max` over `round(warmup_ratio * total_steps)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(Error::Train(format!("step {step} beyond total_steps {total}")));
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.lr_max * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(cfg.lr_max);
    }
    Ok(cfg.lr_max * (total - step) as f64 / (total - warmup) as f64)
}

/// One training sequence for either head.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    /// Source ids and BOS...EOS target ids.
    Seq2Seq { source: Vec<u32>, target: Vec<u32> },
    /// Wrapped NER source and its pointer target ending in EOS.
    Pointer {
        source: TokenSeq,
        target: Vec<PointerSymbol>,
        n_types: usize,
    },
}

impl From<NoisedPair> for Example {
    fn from(p: NoisedPair) -> Self {
        Example::Seq2Seq {
            source: p.input_ids,
            target: p.target_ids,
        }
    }
}

/// Pads every sequence to the batch maximum with PAD.
pub fn pad_batch(pairs: &[(Vec<u32>, Vec<u32>)]) -> Vec<(Vec<u32>, Vec<u32>)> {
    let src_max = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
    let tgt_max = pairs.iter().map(|p| p.1.len()).max().unwrap_or(0);
    pairs
        .iter()
        .map(|(s, t)| {
            let mut s = s.clone();
            let mut t = t.clone();
            s.resize(src_max, PAD);
            t.resize(tgt_max, PAD);
            (s, t)
        })
        .collect()
}

fn trim_pad(ids: &[u32]) -> &[u32] {
    let end = ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
    &ids[..end]
}

/// Gradient of the mean per-example loss with respect to every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Scalar> {
    pub tensors: Vec<Mat<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(params: &ModelParams<F>) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Mat::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the factor.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            for t in &mut self.tensors {
                t.scale(F::c(s));
            }
            s
        } else {
            1.0
        }
    }
}

/// Exact reverse-mode gradients of the mean loss over `batch`.
///
/// Trailing PAD is trimmed before the forward pass; PAD is masked as an
/// attention key and excluded from the loss, so the result is unchanged.
/// `dropout` supplies the seed for dropout masks; `None` runs in eval mode.
pub fn compute_gradients<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[Example],
    dropout: Option<u64>,
) -> Result<(Gradients<F>, F)> {
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let net = Net::new(params);
    let mut grads = Gradients::zeros_like(params);
    let weight = F::one() / F::from_usize(batch.len()).unwrap();
    let mut total = F::zero();
    let mut drop_rng = dropout.map(rng::seeded);
    for (index, ex) in batch.iter().enumerate() {
        let mut drop = match drop_rng.as_mut() {
            Some(r) => Dropout::train(r, params.config.dropout_rate),
            None => Dropout::eval(),
        };
        let mut t = net.tape();
        let loss = match ex {
            Example::Seq2Seq { source, target } => {
                net.seq2seq_loss(&mut t, trim_pad(source), trim_pad(target), &mut drop)?
            }
            Example::Pointer {
                source,
                target,
                n_types,
            } => net.pointer_loss(&mut t, source, *n_types, target, &mut drop)?,
        };
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        total = total + value;
        for (acc, g) in grads.tensors.iter_mut().zip(t.backward(loss, weight)) {
            if let Some(g) = g {
                acc.add_assign(&g);
            }
        }
    }
    Ok((grads, total * weight))
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F: Scalar> {
    pub m: Vec<Mat<F>>,
    pub v: Vec<Mat<F>>,
    pub step: u64,
}

impl<F: Scalar> OptState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Mat::zeros(t.rows, t.cols))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Clips `grads` to `grad_clip_norm`, then applies a bias-corrected Adam
/// update with decoupled weight decay. Decay applies to matrices only
/// (embeddings and projections), not to biases or layer-norm parameters.
pub fn optimizer_step<F: Scalar>(
    params: &mut ModelParams<F>,
    mut grads: Gradients<F>,
    opt: &mut OptState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (i, g) in grads.tensors.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(params.tensor_name(i).to_string()));
        }
    }
    grads.clip(cfg.grad_clip_norm);
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, g) in grads.tensors.iter().enumerate() {
        let decay = if params.layout.specs[i].dims.len() == 2 {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        let p = &mut params.tensors[i].data;
        let m = &mut opt.m[i].data;
        let v = &mut opt.v[i].data;
        for k in 0..p.len() {
            let gk = g.data[k].to_f64().unwrap();
            let mk = b1 * m[k].to_f64().unwrap() + (1.0 - b1) * gk;
            let vk = b2 * v[k].to_f64().unwrap() + (1.0 - b2) * gk * gk;
            m[k] = F::c(mk);
            v[k] = F::c(vk);
            let update = (mk / c1) / ((vk / c2).sqrt() + cfg.adam_eps);
            let pk = p[k].to_f64().unwrap();
            p[k] = F::c(pk * decay - lr * update);
        }
    }
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

/// Serializes parameters, optimizer moments and configuration.
pub fn to_checkpoint(
    params: &ModelParams<f32>,
    opt: Option<&OptState<f32>>,
    extra: &[(String, String)],
) -> Checkpoint {
    let mut cfg = config::model_config_pairs(&params.config);
    if let Some(o) = opt {
        cfg.push(("step".into(), o.step.to_string()));
    }
    cfg.extend(extra.iter().cloned());
    let mut tensors = Vec::new();
    let record = |prefix: &str, i: usize, t: &Mat<f32>| TensorRecord {
        name: format!("{prefix}{}", params.layout.specs[i].name),
        dims: params.layout.specs[i].dims.clone(),
        data: t.data.clone(),
    };
    for (i, t) in params.tensors.iter().enumerate() {
        tensors.push(record("", i, t));
    }
    if let Some(o) = opt {
        for (i, t) in o.m.iter().enumerate() {
            tensors.push(record("adam.m.", i, t));
        }
        for (i, t) in o.v.iter().enumerate() {
            tensors.push(record("adam.v.", i, t));
        }
    }
    Checkpoint { config: cfg, tensors }
}

/// Restores parameters, and optimizer state when the checkpoint carries it.
pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(ModelParams<f32>, Option<OptState<f32>>)> {
    let cfg = config::model_config_from(|k| ckpt.get(k).map(str::to_string))?;
    let layout = crate::model::Layout::new(&cfg);
    let fetch = |prefix: &str| -> Result<Option<Vec<Mat<f32>>>> {
        let mut out = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let name = format!("{prefix}{}", spec.name);
            let Some(rec) = ckpt.tensor(&name) else {
                if prefix.is_empty() {
                    return Err(Error::Model(format!("checkpoint lacks tensor {name}")));
                }
                return Ok(None);
            };
            if rec.dims != spec.dims {
                return Err(Error::Model(format!(
                    "tensor {name} has dims {:?}, expected {:?}",
                    rec.dims, spec.dims
                )));
            }
            let (r, c) = spec.rows_cols();
            out.push(Mat::from_vec(r, c, rec.data.clone()));
        }
        Ok(Some(out))
    };
    let params = ModelParams::from_tensors(&cfg, fetch("")?.expect("required"))?;
    let opt = match (fetch("adam.m.")?, fetch("adam.v.")?, ckpt.get("step")) {
        (Some(m), Some(v), Some(step)) => Some(OptState {
            m,
            v,
            step: step
                .parse()
                .map_err(|_| Error::Model(format!("bad step {step:?}")))?,
        }),
        _ => None,
    };
    Ok((params, opt))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams<f32>,
    opt: Option<&OptState<f32>>,
    extra: &[(String, String)],
) -> Result<()> {
    Ok(to_checkpoint(params, opt, extra).save(path)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, Option<OptState<f32>>)> {
    from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut s = String::from("step,loss,lr\n");
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected step,loss,lr".into(),
        };
        let mut f = line.split(',');
        let (Some(s), Some(l), Some(r)) = (f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        out.push(LossRecord {
            step: s.parse().map_err(|_| bad())?,
            loss: l.parse().map_err(|_| bad())?,
            lr: r.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Everything the pretraining loop needs besides the output directory.
#[derive(Debug, Clone)]
pub struct PretrainSpec<'a> {
    pub corpus: &'a [Document],
    pub vocab: &'a Vocab,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub max_len: usize,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_interval: usize,
    /// Stops early after this many steps (simulates an interruption).
    pub stop_after: Option<usize>,
    /// Extra key=value pairs echoed into the checkpoint.
    pub extra_config: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams<f32>,
    pub losses: Vec<LossRecord>,
    pub checkpoint: PathBuf,
    pub resumed_from: Option<usize>,
}

const STREAM_INIT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_ORDER: u64 = 3;

/// The documents forming batch `step`: each epoch visits every document once
/// in an order drawn from the epoch's seed.
pub fn batch_documents(n_docs: usize, batch_size: usize, seed: u64, step: usize) -> (usize, Vec<usize>) {
    let per_epoch = n_docs.div_ceil(batch_size);
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    let mut r = rng::seeded(rng::mix(rng::mix(seed, STREAM_ORDER), epoch as u64));
    let order = permutation(n_docs, &mut r);
    let end = ((within + 1) * batch_size).min(n_docs);
    (epoch, order[within * batch_size..end].to_vec())
}

/// Denoising pretraining. Resumes from `out_dir/checkpoint.bin` when present.
pub fn pretrain(spec: &PretrainSpec<'_>, out_dir: &Path) -> Result<PretrainOutcome> {
    if spec.corpus.is_empty() {
        return Err(Error::Train("pretraining corpus is empty".into()));
    }
    spec.train.validate()?;
    spec.noise.validate()?;
    if spec.noise.kind().is_none() {
        return Err(Error::Noise("no noise function enabled".into()));
    }
    if spec.model.vocab_size != spec.vocab.size() {
        return Err(Error::Train(format!(
            "model vocab_size {} differs from vocabulary size {}",
            spec.model.vocab_size,
            spec.vocab.size()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let loss_path = out_dir.join(LOSS_FILE);
    let seed = spec.train.seed;

    let (mut params, mut opt, mut losses, resumed_from) = if ckpt_path.exists() {
        let (p, o) = load_checkpoint(&ckpt_path)?;
        let o = o.ok_or_else(|| Error::Train("checkpoint lacks optimizer state".into()))?;
        if p.config != spec.model {
            return Err(Error::Train(
                "existing checkpoint was written with a different model config".into(),
            ));
        }
        let k = o.step as usize;
        let mut l = if loss_path.exists() {
            read_loss_csv(&loss_path)?
        } else {
            Vec::new()
        };
        l.retain(|r| r.step <= k);
        if l.len() != k {
            return Err(Error::Train(format!(
                "loss history has {} rows but the checkpoint is at step {k}",
                l.len()
            )));
        }
        (p, o, l, Some(k))
    } else {
        let p = ModelParams::init_seeded(&spec.model, rng::mix(seed, STREAM_INIT))?;
        let o = OptState::new(&p);
        (p, o, Vec::new(), None)
    };

    let mut extra = spec.extra_config.clone();
    extra.extend(config::train_config_pairs(&spec.train));
    let total = spec.train.total_steps;
    let stop = spec.stop_after.unwrap_or(total).min(total);
    let mut step = opt.step as usize;
    while step < stop {
        let (epoch, docs) = batch_documents(spec.corpus.len(), spec.train.batch_size, seed, step);
        let noise = NoiseConfig {
            seed: rng::mix(spec.noise.seed, epoch as u64),
            ..spec.noise.clone()
        };
        let batch = docs
            .iter()
            .map(|&d| make_pretraining_example(&spec.corpus[d], spec.vocab, &noise, spec.max_len).map(Example::from))
            .collect::<Result<Vec<_>>>()?;
        let lr = lr_at(step, &spec.train)?;
        let drop_seed = rng::mix(rng::mix(seed, STREAM_DROPOUT), step as u64);
        let (grads, loss) = compute_gradients(&params, &batch, Some(drop_seed))?;
        optimizer_step(&mut params, grads, &mut opt, lr, &spec.train)?;
        step += 1;
        losses.push(LossRecord { step, loss, lr });
        let due = spec.checkpoint_interval > 0 && step.is_multiple_of(spec.checkpoint_interval);
        if due || step == stop {
            save_checkpoint(&ckpt_path, &params, Some(&opt), &extra)?;
            write_loss_csv(&loss_path, &losses)?;
        }
    }
    if !ckpt_path.exists() {
        save_checkpoint(&ckpt_path, &params, Some(&opt), &extra)?;
        write_loss_csv(&loss_path, &losses)?;
    }
    Ok(PretrainOutcome {
        params,
        losses,
        checkpoint: ckpt_path,
        resumed_from,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: ModelParams<f32>,
    /// 1-based epoch of the retained checkpoint.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metrics: Vec<f64>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f32>,
}

/// Fine-tunes for `cfg.epochs` epochs, calling `eval_hook` after each one and
/// keeping the parameters with the highest metric (earliest epoch on ties).
/// The schedule spans `epochs * ceil(n / batch_size)` steps.
pub fn finetune<H>(
    init: &ModelParams<f32>,
    train_set: &[Example],
    cfg: &TrainConfig,
    mut eval_hook: H,
) -> Result<FinetuneOutcome>
where
    H: FnMut(&ModelParams<f32>, usize) -> Result<f64>,
{
    if train_set.is_empty() {
        return Err(Error::Train("fine-tuning set is empty".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Train("epochs must be positive".into()));
    }
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = TrainConfig {
        total_steps: cfg.epochs * per_epoch,
        ..cfg.clone()
    };
    schedule.validate()?;
    let mut params = init.clone();
    let mut opt = OptState::new(&params);
    let mut best: Option<(ModelParams<f32>, usize, f64)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut r = rng::seeded(rng::mix(rng::mix(cfg.seed, STREAM_ORDER), epoch as u64));
        let order = permutation(train_set.len(), &mut r);
        let mut sum = 0.0f32;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let lr = lr_at(step, &schedule)?;
            let drop_seed = rng::mix(rng::mix(cfg.seed, STREAM_DROPOUT), step as u64);
            let (grads, loss) = compute_gradients(&params, &batch, Some(drop_seed))?;
            optimizer_step(&mut params, grads, &mut opt, lr, &schedule)?;
            sum += loss;
            step += 1;
        }
        epoch_losses.push(sum / per_epoch as f32);
        let metric = eval_hook(&params, epoch + 1)?;
        metrics.push(metric);
        if best.as_ref().is_none_or(|(_, _, m)| metric > *m) {
            best = Some((params.clone(), epoch + 1, metric));
        }
    }
    let (best, best_epoch, best_metric) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        best,
        best_epoch,
        best_metric,
        metrics,
        epoch_losses,
    })
}
