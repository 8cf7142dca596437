//! Post-norm encoder-decoder transformer with GELU feed-forward blocks,
//! learned absolute positions and tied input/output token embeddings, plus
//! a pointer head for NER.
//!
//! All forward passes are recorded on a [`Tape`], so inference and training
//! share one implementation.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::bpe::{TokenSeq, BOS, PAD};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tape::{Mat, NodeId, Scalar, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    /// Entity-type slots available to the pointer head.
    pub ner_types: usize,
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 64,
            max_positions: 128,
            dropout_rate: 0.0,
            ner_types: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.vocab_size <= crate::bpe::NUM_SPECIALS {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Embedding,
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    init: Init,
}

impl TensorSpec {
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("tensors are rank 1 or 2"),
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EncLayer {
    attn: Attn,
    ln1: Norm,
    ff: FeedForward,
    ln2: Norm,
}

#[derive(Debug, Clone, PartialEq)]
struct DecLayer {
    self_attn: Attn,
    ln1: Norm,
    cross: Attn,
    ln2: Norm,
    ff: FeedForward,
    ln3: Norm,
}

/// Indices of every tensor in the flat parameter list, derived from the config.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc_emb_ln: Norm,
    dec_emb_ln: Norm,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    type_emb: usize,
}

struct LayoutBuilder {
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, dims: Vec<usize>, init: Init) -> usize {
        self.specs.push(TensorSpec { name, dims, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(
            format!("{prefix}.weight"),
            vec![fan_in, fan_out],
            Init::Glorot { fan_in, fan_out },
        );
        let b = self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros);
        (w, b)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.out"), d, d);
        Attn {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            b: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForward {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, d_ff);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), d_ff, d);
        FeedForward { w1, b1, w2, b2 }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = LayoutBuilder { specs: Vec::new() };
        let tok_emb = b.add("embed.tokens".into(), vec![cfg.vocab_size, d], Init::Embedding);
        let enc_pos = b.add("encoder.positions".into(), vec![cfg.max_positions, d], Init::Embedding);
        let dec_pos = b.add("decoder.positions".into(), vec![cfg.max_positions, d], Init::Embedding);
        let enc_emb_ln = b.norm("encoder.embed_norm", d);
        let dec_emb_ln = b.norm("decoder.embed_norm", d);
        let enc = (0..cfg.n_enc_layers)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                EncLayer {
                    attn: b.attn(&format!("{p}.self_attn"), d),
                    ln1: b.norm(&format!("{p}.self_attn_norm"), d),
                    ff: b.ff(&p, d, cfg.d_ff),
                    ln2: b.norm(&format!("{p}.ff_norm"), d),
                }
            })
            .collect();
        let dec = (0..cfg.n_dec_layers)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                DecLayer {
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ln1: b.norm(&format!("{p}.self_attn_norm"), d),
                    cross: b.attn(&format!("{p}.cross_attn"), d),
                    ln2: b.norm(&format!("{p}.cross_attn_norm"), d),
                    ff: b.ff(&p, d, cfg.d_ff),
                    ln3: b.norm(&format!("{p}.ff_norm"), d),
                }
            })
            .collect();
        // row 0 scores/embeds the pointer EOS, rows 1.. the entity types
        let type_emb = b.add("pointer.types".into(), vec![cfg.ner_types + 1, d], Init::Embedding);
        Layout {
            specs: b.specs,
            tok_emb,
            enc_pos,
            dec_pos,
            enc_emb_ln,
            dec_emb_ln,
            enc,
            dec,
            type_emb,
        }
    }

    pub fn type_embedding_index(&self) -> usize {
        self.type_emb
    }

    pub fn token_embedding_index(&self) -> usize {
        self.tok_emb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub tensors: Vec<Mat<F>>,
}

impl<F: Scalar> ModelParams<F> {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains and
    /// Normal(0, 0.02) embeddings.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let tensors = layout
            .specs
            .iter()
            .map(|spec| {
                let (r, c) = spec.rows_cols();
                let data = (0..r * c)
                    .map(|_| {
                        let v: f64 = match spec.init {
                            Init::Embedding => normal.sample(rng),
                            Init::Glorot { fan_in, fan_out } => {
                                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                                rng.random_range(-bound..bound)
                            }
                            Init::Zeros => 0.0,
                            Init::Ones => 1.0,
                        };
                        // round through f32 so f32 and f64 models start identical
                        F::c(v as f32 as f64)
                    })
                    .collect();
                Mat::from_vec(r, c, data)
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            layout,
            tensors,
        })
    }

    pub fn init_seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(cfg, &mut rng::seeded(seed))
    }

    /// Builds a parameter set from raw tensors, checking shapes against the layout.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Mat<F>>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if tensors.len() != layout.specs.len() {
            return Err(Error::Model(format!(
                "expected {} tensors, got {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.specs.iter().zip(&tensors) {
            if spec.rows_cols() != (t.rows, t.cols) {
                return Err(Error::Model(format!("shape mismatch for {}", spec.name)));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            layout,
            tensors,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    pub fn tensor_name(&self, i: usize) -> &str {
        &self.layout.specs[i].name
    }
}

/// Encoder output for one source sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates<F: Scalar> {
    pub hidden: Mat<F>,
    /// `true` where the source token is not PAD.
    pub key_mask: Vec<bool>,
}

/// Pointer-head output alphabet for NER.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointerSymbol {
    /// Token position in the wrapped source sequence.
    Position(usize),
    /// Entity type index.
    Type(usize),
    Eos,
}

/// Column layout of pointer logits: source positions, then types, then EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointerSpace {
    pub n_src: usize,
    pub n_types: usize,
}

impl PointerSpace {
    pub fn width(&self) -> usize {
        self.n_src + self.n_types + 1
    }

    pub fn index(&self, sym: PointerSymbol) -> usize {
        match sym {
            PointerSymbol::Position(i) => i,
            PointerSymbol::Type(t) => self.n_src + t,
            PointerSymbol::Eos => self.n_src + self.n_types,
        }
    }

    pub fn symbol(&self, idx: usize) -> PointerSymbol {
        if idx < self.n_src {
            PointerSymbol::Position(idx)
        } else if idx < self.n_src + self.n_types {
            PointerSymbol::Type(idx - self.n_src)
        } else {
            PointerSymbol::Eos
        }
    }
}

/// Dropout state threaded through a training forward pass.
pub struct Dropout<'r> {
    rng: Option<&'r mut Rng>,
    rate: f64,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Self { rng: None, rate: 0.0 }
    }

    pub fn train(rng: &'r mut Rng, rate: f64) -> Self {
        Self {
            rng: Some(rng),
            rate,
        }
    }

    fn apply<F: Scalar>(&mut self, t: &mut Tape<'_, F>, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.rate <= 0.0 {
            return x;
        }
        let keep = F::c(1.0 / (1.0 - self.rate));
        let mult = (0..t.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        t.dropout(x, mult)
    }
}

/// Graph-building forward passes over one parameter set.
pub struct Net<'p, F: Scalar> {
    pub params: &'p ModelParams<F>,
}

impl<'p, F: Scalar> Net<'p, F> {
    pub fn new(params: &'p ModelParams<F>) -> Self {
        Self { params }
    }

    pub fn tape(&self) -> Tape<'p, F> {
        Tape::new(&self.params.tensors)
    }

    fn cfg(&self) -> &ModelConfig {
        &self.params.config
    }

    fn lay(&self) -> &Layout {
        &self.params.layout
    }

    fn check_ids(&self, ids: &[u32], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Model(format!("empty {what}")));
        }
        if ids.len() > self.cfg().max_positions {
            return Err(Error::Model(format!(
                "{what} length {} exceeds max_positions {}",
                ids.len(),
                self.cfg().max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.cfg().vocab_size) {
            return Err(Error::Model(format!(
                "{what} id {bad} outside vocabulary of {}",
                self.cfg().vocab_size
            )));
        }
        Ok(())
    }

    fn attention(
        &self,
        t: &mut Tape<'p, F>,
        a: &Attn,
        q_in: NodeId,
        kv_in: NodeId,
        allowed: &[bool],
    ) -> NodeId {
        let (wq, bq) = (t.param(a.wq), t.param(a.bq));
        let (wk, bk) = (t.param(a.wk), t.param(a.bk));
        let (wv, bv) = (t.param(a.wv), t.param(a.bv));
        let q = t.linear(q_in, wq, bq);
        let k = t.linear(kv_in, wk, bk);
        let v = t.linear(kv_in, wv, bv);
        let dh = self.cfg().head_dim();
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let heads = (0..self.cfg().n_heads)
            .map(|h| {
                let qh = t.slice_cols(q, h * dh, dh);
                let kh = t.slice_cols(k, h * dh, dh);
                let vh = t.slice_cols(v, h * dh, dh);
                let s = t.matmul_t(qh, kh);
                let s = t.scale(s, scale);
                let p = t.masked_softmax(s, allowed);
                t.matmul(p, vh)
            })
            .collect();
        let ctx = t.concat_cols(heads);
        let (wo, bo) = (t.param(a.wo), t.param(a.bo));
        t.linear(ctx, wo, bo)
    }

    fn norm(&self, t: &mut Tape<'p, F>, n: &Norm, x: NodeId) -> NodeId {
        let (g, b) = (t.param(n.g), t.param(n.b));
        t.layer_norm(x, g, b)
    }

    fn feed_forward(&self, t: &mut Tape<'p, F>, f: &FeedForward, x: NodeId) -> NodeId {
        let (w1, b1) = (t.param(f.w1), t.param(f.b1));
        let (w2, b2) = (t.param(f.w2), t.param(f.b2));
        let h = t.linear(x, w1, b1);
        let h = t.gelu(h);
        t.linear(h, w2, b2)
    }

    /// Residual block: `norm(x + dropout(sublayer))`.
    fn residual(&self, t: &mut Tape<'p, F>, drop: &mut Dropout<'_>, x: NodeId, y: NodeId, n: &Norm) -> NodeId {
        let y = drop.apply(t, y);
        let s = t.add(x, y);
        self.norm(t, n, s)
    }

    fn embed_positions(
        &self,
        t: &mut Tape<'p, F>,
        drop: &mut Dropout<'_>,
        x: NodeId,
        pos_table: usize,
        ln: &Norm,
    ) -> NodeId {
        let n = t.value(x).rows;
        let pos = t.param(pos_table);
        let p = t.gather(pos, &(0..n).collect::<Vec<_>>());
        let x = t.add(x, p);
        let x = self.norm(t, ln, x);
        drop.apply(t, x)
    }

    /// Encodes `ids`; PAD positions are masked as attention keys.
    pub fn encoder(&self, t: &mut Tape<'p, F>, ids: &[u32], drop: &mut Dropout<'_>) -> Result<(NodeId, Vec<bool>)> {
        self.check_ids(ids, "source")?;
        let n = ids.len();
        let key_mask: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let allowed: Vec<bool> = (0..n * n).map(|i| key_mask[i % n]).collect();
        let emb = t.param(self.lay().tok_emb);
        let x = t.gather(emb, &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let lay = self.lay();
        let mut x = self.embed_positions(t, drop, x, lay.enc_pos, &lay.enc_emb_ln);
        for layer in &lay.enc {
            let a = self.attention(t, &layer.attn, x, x, &allowed);
            x = self.residual(t, drop, x, a, &layer.ln1);
            let f = self.feed_forward(t, &layer.ff, x);
            x = self.residual(t, drop, x, f, &layer.ln2);
        }
        Ok((x, key_mask))
    }

    /// Runs the decoder stack over already-embedded inputs (`m x d`, without
    /// positions) and returns the final hidden states.
    pub fn decoder(
        &self,
        t: &mut Tape<'p, F>,
        enc: NodeId,
        enc_keys: &[bool],
        inputs: NodeId,
        dec_keys: &[bool],
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        let m = t.value(inputs).rows;
        if m > self.cfg().max_positions {
            return Err(Error::Model(format!(
                "decoder length {m} exceeds max_positions {}",
                self.cfg().max_positions
            )));
        }
        let n = enc_keys.len();
        let causal: Vec<bool> = (0..m * m)
            .map(|i| {
                let (q, k) = (i / m, i % m);
                k <= q && dec_keys[k]
            })
            .collect();
        let cross: Vec<bool> = (0..m * n).map(|i| enc_keys[i % n]).collect();
        let lay = self.lay();
        let mut x = self.embed_positions(t, drop, inputs, lay.dec_pos, &lay.dec_emb_ln);
        for layer in &lay.dec {
            let a = self.attention(t, &layer.self_attn, x, x, &causal);
            x = self.residual(t, drop, x, a, &layer.ln1);
            let c = self.attention(t, &layer.cross, x, enc, &cross);
            x = self.residual(t, drop, x, c, &layer.ln2);
            let f = self.feed_forward(t, &layer.ff, x);
            x = self.residual(t, drop, x, f, &layer.ln3);
        }
        Ok(x)
    }

    /// Token-level decoder: returns logits `prefix_len x vocab`.
    pub fn token_logits(
        &self,
        t: &mut Tape<'p, F>,
        enc: NodeId,
        enc_keys: &[bool],
        prefix: &[u32],
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        self.check_ids(prefix, "target prefix")?;
        let emb = t.param(self.lay().tok_emb);
        let x = t.gather(emb, &prefix.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let keys: Vec<bool> = prefix.iter().map(|&i| i != PAD).collect();
        let h = self.decoder(t, enc, enc_keys, x, &keys, drop)?;
        Ok(t.matmul_t(h, emb))
    }

    /// Teacher-forced mean NLL of `target` (BOS ... EOS, optionally PAD-filled).
    pub fn seq2seq_loss(
        &self,
        t: &mut Tape<'p, F>,
        source: &[u32],
        target: &[u32],
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        if target.len() < 2 {
            return Err(Error::Model("target needs at least BOS and one token".into()));
        }
        if target[0] != BOS {
            return Err(Error::Model("target must start with BOS".into()));
        }
        let (enc, keys) = self.encoder(t, source, drop)?;
        let inputs = &target[..target.len() - 1];
        let logits = self.token_logits(t, enc, &keys, inputs, drop)?;
        let gold = target[1..]
            .iter()
            .map(|&g| (g != PAD).then_some(g as usize))
            .collect();
        Ok(t.cross_entropy(logits, gold))
    }

    fn pointer_inputs(
        &self,
        t: &mut Tape<'p, F>,
        source: &[u32],
        space: PointerSpace,
        prefix: &[PointerSymbol],
    ) -> Result<NodeId> {
        let emb = t.param(self.lay().tok_emb);
        let types = t.param(self.lay().type_emb);
        let mut rows = vec![(emb, BOS as usize)];
        for &sym in prefix {
            rows.push(match sym {
                PointerSymbol::Position(i) if i < space.n_src => (emb, source[i] as usize),
                PointerSymbol::Type(j) if j < space.n_types => (types, j + 1),
                PointerSymbol::Eos => (types, 0),
                other => {
                    return Err(Error::Model(format!(
                        "pointer prefix symbol {other:?} outside {space:?}"
                    )))
                }
            });
        }
        Ok(t.rows(rows))
    }

    /// Pointer logits for every step of `BOS + prefix`: one row per input
    /// symbol, columns laid out by [`PointerSpace`]. Positions that are not
    /// the first subtoken of a word score negative infinity.
    pub fn pointer_logits(
        &self,
        t: &mut Tape<'p, F>,
        enc: NodeId,
        source: &TokenSeq,
        n_types: usize,
        prefix: &[PointerSymbol],
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        if n_types > self.cfg().ner_types {
            return Err(Error::Model(format!(
                "{n_types} entity types but the model has {} slots",
                self.cfg().ner_types
            )));
        }
        let space = PointerSpace {
            n_src: source.len(),
            n_types,
        };
        let enc_keys: Vec<bool> = source.ids.iter().map(|&i| i != PAD).collect();
        let inputs = self.pointer_inputs(t, &source.ids, space, prefix)?;
        let keys = vec![true; prefix.len() + 1];
        let h = self.decoder(t, enc, &enc_keys, inputs, &keys, drop)?;
        let scale = F::c(1.0 / (self.cfg().d_model as f64).sqrt());

        let pos = t.matmul_t(h, enc);
        let pos = t.scale(pos, scale);
        let pos = t.mask_cols(pos, source.word_start.clone());

        let types = t.param(self.lay().type_emb);
        let mut rows: Vec<(NodeId, usize)> = (1..=n_types).map(|j| (types, j)).collect();
        rows.push((types, 0));
        let targets = t.rows(rows);
        let typ = t.matmul_t(h, targets);
        let typ = t.scale(typ, scale);
        Ok(t.concat_cols(vec![pos, typ]))
    }

    /// Teacher-forced pointer NLL; `target` must end with EOS.
    pub fn pointer_loss(
        &self,
        t: &mut Tape<'p, F>,
        source: &TokenSeq,
        n_types: usize,
        target: &[PointerSymbol],
        drop: &mut Dropout<'_>,
    ) -> Result<NodeId> {
        if target.last() != Some(&PointerSymbol::Eos) {
            return Err(Error::Model("pointer target must end with EOS".into()));
        }
        let space = PointerSpace {
            n_src: source.len(),
            n_types,
        };
        for sym in target {
            if let PointerSymbol::Position(i) = sym {
                if *i >= source.len() || !source.word_start[*i] {
                    return Err(Error::Model(format!(
                        "pointer target references non-word-start position {i}"
                    )));
                }
            }
        }
        let (enc, _) = self.encoder(t, &source.ids, drop)?;
        let logits = self.pointer_logits(t, enc, source, n_types, &target[..target.len() - 1], drop)?;
        let gold = target.iter().map(|&s| Some(space.index(s))).collect();
        Ok(t.cross_entropy(logits, gold))
    }
}

/// Eval-mode encoding of one source sequence.
pub fn encode<F: Scalar>(params: &ModelParams<F>, input: &[u32]) -> Result<EncoderStates<F>> {
    let net = Net::new(params);
    let mut t = net.tape();
    let (h, key_mask) = net.encoder(&mut t, input, &mut Dropout::eval())?;
    Ok(EncoderStates {
        hidden: t.value(h).clone(),
        key_mask,
    })
}

/// Eval-mode logits (`prefix_len x vocab`) for a BOS-initial prefix.
pub fn decode_forward<F: Scalar>(
    params: &ModelParams<F>,
    enc: &EncoderStates<F>,
    prefix: &[u32],
) -> Result<Mat<F>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Model("decoder prefix must start with BOS".into()));
    }
    check_states(params, enc)?;
    let net = Net::new(params);
    let mut t = net.tape();
    let e = t.constant(enc.hidden.clone());
    let l = net.token_logits(&mut t, e, &enc.key_mask, prefix, &mut Dropout::eval())?;
    Ok(t.value(l).clone())
}

fn check_states<F: Scalar>(params: &ModelParams<F>, enc: &EncoderStates<F>) -> Result<()> {
    if enc.hidden.cols != params.config.d_model || enc.hidden.rows != enc.key_mask.len() {
        return Err(Error::Model("encoder states do not match the model".into()));
    }
    Ok(())
}

pub fn seq2seq_nll<F: Scalar>(params: &ModelParams<F>, source: &[u32], target: &[u32]) -> Result<F> {
    let net = Net::new(params);
    let mut t = net.tape();
    let l = net.seq2seq_loss(&mut t, source, target, &mut Dropout::eval())?;
    Ok(t.scalar(l))
}

pub fn pointer_logits<F: Scalar>(
    params: &ModelParams<F>,
    enc: &EncoderStates<F>,
    source: &TokenSeq,
    n_types: usize,
    prefix: &[PointerSymbol],
) -> Result<Mat<F>> {
    check_states(params, enc)?;
    if enc.hidden.rows != source.len() {
        return Err(Error::Model("encoder states do not match the source".into()));
    }
    let net = Net::new(params);
    let mut t = net.tape();
    let e = t.constant(enc.hidden.clone());
    let l = net.pointer_logits(&mut t, e, source, n_types, prefix, &mut Dropout::eval())?;
    Ok(t.value(l).clone())
}

/// Row-wise log-softmax; negative-infinity entries stay negative infinity.
pub fn log_softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}
