//! Encoder, insertion decoder, slot pooling, tag and pointer heads.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, JointSpan, ParamId, ParamSet, Scalar, Var};
use crate::corpus::{LanguagePair, Vocabulary};
use crate::error::ModelError;
use crate::oracle::Hypothesis;
use crate::parse_ir::{SourceQuery, TargetToken};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub d_dec: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub copy_enabled: bool,
    /// Add decoder positional encodings to copied pointer rows as well.
    pub copy_positional: bool,
    pub labeled_close: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_enc: 128,
            d_dec: 128,
            enc_layers: 2,
            dec_layers: 4,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            copy_enabled: true,
            copy_positional: true,
            labeled_close: false,
            max_len: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_enc == 0 || self.d_dec == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("sizes must be positive");
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be at least 1");
        }
        if self.d_dec % self.heads != 0 || (self.enc_layers > 0 && self.d_enc % self.heads != 0) {
            return bad("heads must divide the hidden sizes");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub states: Array2<T>,
    pub mask: Vec<bool>,
}

impl<T> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// What the encoder consumes: source word ids, or externally computed
/// `m x d_enc` input vectors that replace the embedding lookup.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a, T> {
    Tokens(&'a [usize]),
    Embedded(ArrayView2<'a, T>),
}

/// Half-open row ranges of row-stacked examples.
pub type Segments = Vec<(usize, usize)>;

/// Supplies `m x d_enc` encoder inputs in place of the embedding lookup.
pub trait SourceEmbedder: Sync {
    fn embed(&self, query: &SourceQuery) -> Array2<f64>;
}

/// Word vectors shared across languages: each language-A word owns a random
/// concept vector, and each aligned language-B word gets that vector plus a
/// small word-specific offset. Unknown words embed to zero.
#[derive(Debug, Clone)]
pub struct ConceptEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl ConceptEmbedder {
    pub fn new(pair: &LanguagePair, dim: usize, offset_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut table: HashMap<String, Vec<f64>> = HashMap::new();
        for w in &pair.a.vocab {
            table.insert(w.clone(), (0..dim).map(|_| normal.sample(&mut rng)).collect());
        }
        let mut b_words: Vec<(&String, &String)> = pair.b_to_a.iter().collect();
        b_words.sort();
        for (b, a) in b_words {
            let base = table[a].clone();
            let v = base.iter().map(|x| x + offset_scale * normal.sample(&mut rng)).collect();
            table.insert(b.clone(), v);
        }
        ConceptEmbedder { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl SourceEmbedder for ConceptEmbedder {
    fn embed(&self, query: &SourceQuery) -> Array2<f64> {
        let mut out = Array2::zeros((query.len(), self.dim));
        for (i, w) in query.tokens().iter().enumerate() {
            if let Some(v) = self.table.get(w) {
                out.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
            }
        }
        out
    }
}

/// Training mode applies dropout with the given stream; eval mode is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Ids {
    src_embed: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    tag_embed: ParamId,
    ptr_embed: Option<ParamId>,
    copy: Option<ParamId>,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
    slot_w: ParamId,
    tag_w: ParamId,
    tag_b: ParamId,
    ptr_wq: ParamId,
    ptr_bq: ParamId,
    ptr_wk: ParamId,
    ptr_bk: ParamId,
}

/// Parameter names and shapes, in creation order.
fn layout(cfg: &ModelConfig, tags: usize, words: usize) -> Vec<(String, (usize, usize), Init)> {
    let (de, dd) = (cfg.d_enc, cfg.d_dec);
    let mut out = Vec::new();
    let mut push = |name: String, shape: (usize, usize), init: Init| out.push((name, shape, init));
    let attn = |push: &mut dyn FnMut(String, (usize, usize), Init), p: &str, dq: usize, dkv: usize, d: usize| {
        for (w, b, rows) in [("wq", "bq", dq), ("wk", "bk", dkv), ("wv", "bv", dkv), ("wo", "bo", d)] {
            push(format!("{p}.{w}"), (rows, d), Init::Xavier);
            push(format!("{p}.{b}"), (1, d), Init::Zeros);
        }
    };
    let ln = |push: &mut dyn FnMut(String, (usize, usize), Init), p: &str, d: usize| {
        push(format!("{p}.g"), (1, d), Init::Ones);
        push(format!("{p}.b"), (1, d), Init::Zeros);
    };
    let ffn = |push: &mut dyn FnMut(String, (usize, usize), Init), p: &str, d: usize, mult: usize| {
        push(format!("{p}.w1"), (d, d * mult), Init::Xavier);
        push(format!("{p}.b1"), (1, d * mult), Init::Zeros);
        push(format!("{p}.w2"), (d * mult, d), Init::Xavier);
        push(format!("{p}.b2"), (1, d), Init::Zeros);
    };

    push("enc.embed".into(), (words, de), Init::Embedding);
    for l in 0..cfg.enc_layers {
        ln(&mut push, &format!("enc.{l}.ln1"), de);
        attn(&mut push, &format!("enc.{l}.attn"), de, de, de);
        ln(&mut push, &format!("enc.{l}.ln2"), de);
        ffn(&mut push, &format!("enc.{l}.ffn"), de, cfg.ffn_mult);
    }
    ln(&mut push, "enc.ln", de);
    push("dec.tag_embed".into(), (tags, dd), Init::Embedding);
    if cfg.copy_enabled {
        push("dec.copy".into(), (de, dd), Init::Identity);
    } else {
        push("dec.ptr_embed".into(), (cfg.max_len, dd), Init::Embedding);
    }
    for l in 0..cfg.dec_layers {
        ln(&mut push, &format!("dec.{l}.ln1"), dd);
        attn(&mut push, &format!("dec.{l}.self"), dd, dd, dd);
        ln(&mut push, &format!("dec.{l}.ln2"), dd);
        attn(&mut push, &format!("dec.{l}.cross"), dd, de, dd);
        ln(&mut push, &format!("dec.{l}.ln3"), dd);
        ffn(&mut push, &format!("dec.{l}.ffn"), dd, cfg.ffn_mult);
    }
    ln(&mut push, "dec.ln", dd);
    push("slot.w".into(), (2 * dd, dd), Init::Xavier);
    push("tag.w".into(), (dd, tags), Init::Xavier);
    push("tag.b".into(), (1, tags), Init::Zeros);
    push("ptr.wq".into(), (dd, dd), Init::Xavier);
    push("ptr.bq".into(), (1, dd), Init::Zeros);
    push("ptr.wk".into(), (de, dd), Init::Xavier);
    push("ptr.bk".into(), (1, dd), Init::Zeros);
    out
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Embedding,
    Identity,
    Zeros,
    Ones,
}

fn init_matrix<T: Scalar>(shape: (usize, usize), init: Init, rng: &mut ChaCha8Rng) -> Array2<T> {
    let (r, c) = shape;
    match init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::Identity => Array2::from_shape_fn(shape, |(i, j)| if i == j { T::one() } else { T::zero() }),
        Init::Xavier => {
            let limit = (6.0 / (r + c) as f64).sqrt();
            Array2::from_shape_fn(shape, |_| T::of(rng.random_range(-limit..limit)))
        }
        Init::Embedding => {
            let normal = Normal::new(0.0, (c as f64).powf(-0.5)).unwrap();
            Array2::from_shape_fn(shape, |_| T::of(normal.sample(rng)))
        }
    }
}

/// Fixed sinusoidal position table.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// `q kᵀ / √w` where `w` is the shared (post-projection) width.
pub fn scaled_dot_scores<T: Scalar>(q: ArrayView2<T>, k: ArrayView2<T>) -> Array2<T> {
    let w = T::of(q.ncols() as f64).sqrt();
    q.dot(&k.t()).mapv(|x| x / w)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row-wise softmax over `[tag_logits | ptr_scores]`.
pub fn joint_distribution<T: Scalar>(tag_logits: ArrayView2<T>, ptr_scores: ArrayView2<T>) -> Array2<T> {
    let joint = ndarray::concatenate(Axis(1), &[tag_logits, ptr_scores]).expect("row counts differ");
    log_softmax_rows(joint.view()).mapv(|v| v.exp())
}

/// Graph nodes of one forward pass, exposed for gradient probes.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub enc: Var,
    pub dec_in: Var,
    pub r: Var,
    pub s: Var,
    pub tag_logits: Var,
    pub ptr_scores: Var,
    /// `(T-1) x (V+m)` unnormalized scores.
    pub joint: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamSet<T>,
    ids: Ids,
    pe_enc: Array2<T>,
    pe_dec: Array2<T>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&config, vocab.size(), vocab.source_size()) {
            params.add(name, init_matrix(shape, init, &mut rng));
        }
        Self::from_params(config, vocab, params)
    }

    /// Wraps existing parameters; names and shapes must match the layout.
    pub fn from_params(config: ModelConfig, vocab: Vocabulary, params: ParamSet<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config, vocab.size(), vocab.source_size());
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!("expected {} parameters, found {}", expected.len(), params.len())));
        }
        for (name, shape, _) in &expected {
            match params.id(name) {
                Some(id) if params.get(id).dim() == *shape => {}
                Some(_) => return Err(ModelError::Config(format!("parameter {name} has the wrong shape"))),
                None => return Err(ModelError::Config(format!("missing parameter {name}"))),
            }
        }
        let id = |n: &str| params.id(n).unwrap();
        let attn = |p: &str| AttnIds {
            wq: id(&format!("{p}.wq")),
            bq: id(&format!("{p}.bq")),
            wk: id(&format!("{p}.wk")),
            bk: id(&format!("{p}.bk")),
            wv: id(&format!("{p}.wv")),
            bv: id(&format!("{p}.bv")),
            wo: id(&format!("{p}.wo")),
            bo: id(&format!("{p}.bo")),
        };
        let ln = |p: &str| LnIds { g: id(&format!("{p}.g")), b: id(&format!("{p}.b")) };
        let ffn = |p: &str| FfnIds {
            w1: id(&format!("{p}.w1")),
            b1: id(&format!("{p}.b1")),
            w2: id(&format!("{p}.w2")),
            b2: id(&format!("{p}.b2")),
        };
        let ids = Ids {
            src_embed: id("enc.embed"),
            enc: (0..config.enc_layers)
                .map(|l| EncLayer {
                    ln1: ln(&format!("enc.{l}.ln1")),
                    attn: attn(&format!("enc.{l}.attn")),
                    ln2: ln(&format!("enc.{l}.ln2")),
                    ffn: ffn(&format!("enc.{l}.ffn")),
                })
                .collect(),
            enc_ln: ln("enc.ln"),
            tag_embed: id("dec.tag_embed"),
            ptr_embed: params.id("dec.ptr_embed"),
            copy: params.id("dec.copy"),
            dec: (0..config.dec_layers)
                .map(|l| DecLayer {
                    ln1: ln(&format!("dec.{l}.ln1")),
                    self_attn: attn(&format!("dec.{l}.self")),
                    ln2: ln(&format!("dec.{l}.ln2")),
                    cross: attn(&format!("dec.{l}.cross")),
                    ln3: ln(&format!("dec.{l}.ln3")),
                    ffn: ffn(&format!("dec.{l}.ffn")),
                })
                .collect(),
            dec_ln: ln("dec.ln"),
            slot_w: id("slot.w"),
            tag_w: id("tag.w"),
            tag_b: id("tag.b"),
            ptr_wq: id("ptr.wq"),
            ptr_bq: id("ptr.bq"),
            ptr_wk: id("ptr.wk"),
            ptr_bk: id("ptr.bk"),
        };
        let pe_enc = sinusoidal_positions(config.max_len, config.d_enc);
        let pe_dec = sinusoidal_positions(config.max_len, config.d_dec);
        Ok(Model { config, vocab, params, ids, pe_enc, pe_dec })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Id of the source embedding table.
    pub fn source_embedding(&self) -> ParamId {
        self.ids.src_embed
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model::from_params(self.config.clone(), self.vocab.clone(), self.params.cast()).expect("same layout")
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, mode: &mut Mode) -> Var {
        let rate = self.config.dropout;
        match mode {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - rate));
                let mask = Array2::from_shape_fn(g.shape(x), |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    fn layer_norm(&self, g: &mut Graph<T>, x: Var, ln: &LnIds) -> Var {
        let (gm, bt) = (g.param(ln.g), g.param(ln.b));
        g.layer_norm(x, gm, bt)
    }

    fn attend(&self, g: &mut Graph<T>, xq: Var, xkv: Var, a: &AttnIds, q_segs: &Segments, kv_segs: &Segments) -> Var {
        let p = |g: &mut Graph<T>, w, b| (g.param(w), g.param(b));
        let (wq, bq) = p(g, a.wq, a.bq);
        let (wk, bk) = p(g, a.wk, a.bk);
        let (wv, bv) = p(g, a.wv, a.bv);
        let (wo, bo) = p(g, a.wo, a.bo);
        let q = g.linear(xq, wq, Some(bq));
        let k = g.linear(xkv, wk, Some(bk));
        let v = g.linear(xkv, wv, Some(bv));
        let o = g.attention_segments(q, k, v, self.config.heads, q_segs.clone(), kv_segs.clone());
        g.linear(o, wo, Some(bo))
    }

    fn feed_forward(&self, g: &mut Graph<T>, x: Var, f: &FfnIds) -> Var {
        let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
        let h = g.linear(x, w1, Some(b1));
        let h = g.gelu(h);
        g.linear(h, w2, Some(b2))
    }

    fn residual(&self, g: &mut Graph<T>, x: Var, y: Var, mode: &mut Mode) -> Var {
        let y = self.dropout(g, y, mode);
        g.add(x, y)
    }

    fn positions(table: &Array2<T>, segs: &Segments) -> Array2<T> {
        let total = segs.last().map_or(0, |s| s.1);
        let mut out = Array2::zeros((total, table.ncols()));
        for &(a, b) in segs {
            out.slice_mut(ndarray::s![a..b, ..]).assign(&table.slice(ndarray::s![..b - a, ..]));
        }
        out
    }

    /// Encoder states `m x d_enc` as a graph node.
    pub fn encode_in(&self, g: &mut Graph<T>, input: EncoderInput<T>, mode: &mut Mode) -> Result<Var, ModelError> {
        Ok(self.encode_batch_in(g, &[input], mode)?.0)
    }

    /// Encodes row-stacked sources; returns the states and each source's rows.
    /// All inputs must be of the same kind.
    pub fn encode_batch_in(&self, g: &mut Graph<T>, inputs: &[EncoderInput<T>], mode: &mut Mode) -> Result<(Var, Segments), ModelError> {
        let mut segs = Vec::with_capacity(inputs.len());
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for input in inputs {
            let start = segs.last().map_or(0, |s: &(usize, usize)| s.1);
            let m = match input {
                EncoderInput::Tokens(t) => {
                    if let Some(&bad) = t.iter().find(|&&i| i >= self.vocab.source_size()) {
                        return Err(ModelError::Index { index: bad, len: self.vocab.source_size() });
                    }
                    ids.extend_from_slice(t);
                    t.len()
                }
                EncoderInput::Embedded(x) => {
                    if x.ncols() != self.config.d_enc {
                        return Err(ModelError::Domain(format!("injected width {} != d_enc {}", x.ncols(), self.config.d_enc)));
                    }
                    rows.push(*x);
                    x.nrows()
                }
            };
            self.check_source_len(m)?;
            segs.push((start, start + m));
        }
        let x = match (ids.is_empty(), rows.is_empty()) {
            (false, true) => g.gather(self.ids.src_embed, &ids),
            (true, false) => g.constant(ndarray::concatenate(Axis(0), &rows).expect("widths checked")),
            _ => return Err(ModelError::Domain("a batch must not mix token and injected inputs".into())),
        };
        let pe = g.constant(Self::positions(&self.pe_enc, &segs));
        let mut x = g.add(x, pe);
        x = self.dropout(g, x, mode);
        for layer in &self.ids.enc {
            let h = self.layer_norm(g, x, &layer.ln1);
            let h = self.attend(g, h, h, &layer.attn, &segs, &segs);
            x = self.residual(g, x, h, mode);
            let h = self.layer_norm(g, x, &layer.ln2);
            let h = self.feed_forward(g, h, &layer.ffn);
            x = self.residual(g, x, h, mode);
        }
        Ok((self.layer_norm(g, x, &self.ids.enc_ln), segs))
    }

    fn check_source_len(&self, m: usize) -> Result<(), ModelError> {
        if m == 0 {
            return Err(ModelError::Domain("empty source".into()));
        }
        if m > self.config.max_len {
            return Err(ModelError::Length { len: m, max: self.config.max_len });
        }
        Ok(())
    }

    /// Decoder input rows for `hyp`; pointer rows copy projected encoder states
    /// or use per-position pointer embeddings.
    pub fn embed_hypothesis_in(&self, g: &mut Graph<T>, hyp: &[TargetToken], enc: Var, mode: &mut Mode) -> Result<Var, ModelError> {
        let m = g.shape(enc).0;
        Ok(self.embed_batch_in(g, &[hyp], enc, &vec![(0, m)], mode)?.0)
    }

    /// Row-stacked decoder inputs; hypothesis `e` copies from encoder rows `enc_segs[e]`.
    pub fn embed_batch_in(
        &self,
        g: &mut Graph<T>,
        hyps: &[&[TargetToken]],
        enc: Var,
        enc_segs: &Segments,
        mode: &mut Mode,
    ) -> Result<(Var, Segments), ModelError> {
        let unk = self.vocab.tag_id(&TargetToken::Unk).expect("specials");
        let mut tag_ids = Vec::new();
        let mut pointers = Vec::new();
        let mut order = Vec::new();
        let mut segs = Vec::with_capacity(hyps.len());
        for (hyp, &(e0, e1)) in hyps.iter().zip(enc_segs) {
            let t = hyp.len();
            if t > self.config.max_len {
                return Err(ModelError::Length { len: t, max: self.config.max_len });
            }
            let start = segs.last().map_or(0, |s: &(usize, usize)| s.1);
            segs.push((start, start + t));
            for tok in hyp.iter() {
                match tok {
                    TargetToken::Pointer(i) => {
                        if *i >= e1 - e0 {
                            return Err(ModelError::Index { index: *i, len: e1 - e0 });
                        }
                        order.push((true, pointers.len()));
                        pointers.push((e0 + i, *i));
                    }
                    other => {
                        order.push((false, tag_ids.len()));
                        tag_ids.push(self.vocab.tag_id(other).unwrap_or(unk));
                    }
                }
            }
        }
        let tags = (!tag_ids.is_empty()).then(|| g.gather(self.ids.tag_embed, &tag_ids));
        let ptr_source = if pointers.is_empty() {
            None
        } else if let Some(copy) = self.ids.copy {
            let w = g.param(copy);
            Some((g.matmul(enc, w), true))
        } else {
            let table = self.ids.ptr_embed.expect("pointer embeddings");
            let local: Vec<usize> = pointers.iter().map(|p| p.1).collect();
            Some((g.gather(table, &local), false))
        };
        let rows = order
            .iter()
            .map(|&(is_ptr, k)| {
                if is_ptr {
                    let (src, by_enc_row) = ptr_source.unwrap();
                    (src, if by_enc_row { pointers[k].0 } else { k })
                } else {
                    (tags.unwrap(), k)
                }
            })
            .collect();
        let x = g.stack_rows(rows);
        let mut pe = Self::positions(&self.pe_dec, &segs);
        if !self.config.copy_positional {
            for (row, tok) in hyps.iter().flat_map(|h| h.iter()).enumerate() {
                if tok.is_pointer() {
                    pe.row_mut(row).fill(T::zero());
                }
            }
        }
        let pe = g.constant(pe);
        let x = g.add(x, pe);
        Ok((self.dropout(g, x, mode), segs))
    }

    /// Unmasked self-attention plus cross-attention over `enc`.
    pub fn decode_states_in(&self, g: &mut Graph<T>, dec_in: Var, enc: Var, mode: &mut Mode) -> Var {
        let (t, m) = (g.shape(dec_in).0, g.shape(enc).0);
        self.decode_batch_in(g, dec_in, &vec![(0, t)], enc, &vec![(0, m)], mode)
    }

    pub fn decode_batch_in(&self, g: &mut Graph<T>, dec_in: Var, dec_segs: &Segments, enc: Var, enc_segs: &Segments, mode: &mut Mode) -> Var {
        let mut x = dec_in;
        for layer in &self.ids.dec {
            let h = self.layer_norm(g, x, &layer.ln1);
            let h = self.attend(g, h, h, &layer.self_attn, dec_segs, dec_segs);
            x = self.residual(g, x, h, mode);
            let h = self.layer_norm(g, x, &layer.ln2);
            let h = self.attend(g, h, enc, &layer.cross, dec_segs, enc_segs);
            x = self.residual(g, x, h, mode);
            let h = self.layer_norm(g, x, &layer.ln3);
            let h = self.feed_forward(g, h, &layer.ffn);
            x = self.residual(g, x, h, mode);
        }
        self.layer_norm(g, x, &self.ids.dec_ln)
    }

    /// `concat(r[1:], r[:-1]) · W_s`.
    pub fn pool_slots_in(&self, g: &mut Graph<T>, r: Var) -> Result<Var, ModelError> {
        let t = g.shape(r).0;
        Ok(self.pool_batch_in(g, r, &vec![(0, t)])?.0)
    }

    /// Slot pooling within each hypothesis; returns the slot rows of each.
    pub fn pool_batch_in(&self, g: &mut Graph<T>, r: Var, dec_segs: &Segments) -> Result<(Var, Segments), ModelError> {
        let mut right = Vec::new();
        let mut left = Vec::new();
        let mut segs = Vec::with_capacity(dec_segs.len());
        for &(a, b) in dec_segs {
            if b - a < 2 {
                return Err(ModelError::Domain(format!("slot pooling needs at least 2 rows, got {}", b - a)));
            }
            let start = segs.last().map_or(0, |s: &(usize, usize)| s.1);
            segs.push((start, start + b - a - 1));
            right.extend((a + 1..b).map(|i| (r, i)));
            left.extend((a..b - 1).map(|i| (r, i)));
        }
        let right = g.stack_rows(right);
        let left = g.stack_rows(left);
        let cat = g.concat_cols(right, left);
        let w = g.param(self.ids.slot_w);
        Ok((g.matmul(cat, w), segs))
    }

    pub fn tag_logits_in(&self, g: &mut Graph<T>, s: Var) -> Var {
        let (w, b) = (g.param(self.ids.tag_w), g.param(self.ids.tag_b));
        g.linear(s, w, Some(b))
    }

    /// Scores of every slot row against every encoder row.
    pub fn pointer_scores_in(&self, g: &mut Graph<T>, s: Var, enc: Var) -> Var {
        let (wq, bq) = (g.param(self.ids.ptr_wq), g.param(self.ids.ptr_bq));
        let (wk, bk) = (g.param(self.ids.ptr_wk), g.param(self.ids.ptr_bk));
        let q = g.linear(s, wq, Some(bq));
        let k = g.linear(enc, wk, Some(bk));
        let scores = g.matmul_t(q, k);
        let width = g.shape(q).1;
        g.scale(scores, T::one() / T::of(width as f64).sqrt())
    }

    /// Decoder half of the forward pass given encoder states already in `g`.
    pub fn forward_from(&self, g: &mut Graph<T>, enc: Var, hyp: &[TargetToken], mode: &mut Mode) -> Result<Forward, ModelError> {
        let dec_in = self.embed_hypothesis_in(g, hyp, enc, mode)?;
        let r = self.decode_states_in(g, dec_in, enc, mode);
        let s = self.pool_slots_in(g, r)?;
        let tag_logits = self.tag_logits_in(g, s);
        let ptr_scores = self.pointer_scores_in(g, s, enc);
        let joint = g.concat_cols(tag_logits, ptr_scores);
        Ok(Forward { enc, dec_in, r, s, tag_logits, ptr_scores, joint })
    }

    pub fn forward(&self, g: &mut Graph<T>, input: EncoderInput<T>, hyp: &[TargetToken], mode: &mut Mode) -> Result<Forward, ModelError> {
        let enc = self.encode_in(g, input, mode)?;
        self.forward_from(g, enc, hyp, mode)
    }

    /// Sum over examples of `weights[e]` times the mean slot KL between
    /// `golds[e]` (`(T_e-1) x (V+m_e)`) and the model's joint distribution.
    pub fn batch_loss(
        &self,
        g: &mut Graph<T>,
        inputs: &[EncoderInput<T>],
        hyps: &[&[TargetToken]],
        golds: Vec<Array2<T>>,
        weights: &[T],
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        let (enc, enc_segs) = self.encode_batch_in(g, inputs, mode)?;
        let (dec_in, dec_segs) = self.embed_batch_in(g, hyps, enc, &enc_segs, mode)?;
        let r = self.decode_batch_in(g, dec_in, &dec_segs, enc, &enc_segs, mode);
        let (s, slot_segs) = self.pool_batch_in(g, r, &dec_segs)?;
        let tag = self.tag_logits_in(g, s);
        let ptr = self.pointer_scores_in(g, s, enc);
        let blocks = golds
            .into_iter()
            .zip(weights)
            .enumerate()
            .map(|(e, (gold, &w))| (JointSpan { rows: slot_segs[e], cols: enc_segs[e] }, gold, w))
            .collect();
        Ok(g.joint_kl(tag, ptr, blocks))
    }

    fn eval_encoder(&self, input: EncoderInput<T>) -> Result<EncoderOutput<T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode_in(&mut g, input, &mut Mode::Eval)?;
        let states = g.value(enc).to_owned();
        Ok(EncoderOutput { mask: vec![true; states.nrows()], states })
    }

    /// Eval-mode encoding; unknown words map to the UNK id.
    pub fn encode(&self, query: &SourceQuery) -> Result<EncoderOutput<T>, ModelError> {
        self.eval_encoder(EncoderInput::Tokens(&self.vocab.encode_query(query)))
    }

    pub fn encode_input(&self, input: EncoderInput<T>) -> Result<EncoderOutput<T>, ModelError> {
        self.eval_encoder(input)
    }

    pub fn embed_hypothesis(&self, hyp: &Hypothesis, enc: &EncoderOutput<T>) -> Result<Array2<T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let e = g.constant(enc.states.clone());
        let x = self.embed_hypothesis_in(&mut g, hyp.tokens(), e, &mut Mode::Eval)?;
        Ok(g.value(x).to_owned())
    }

    pub fn decode_states(&self, dec_in: &Array2<T>, enc: &EncoderOutput<T>) -> Array2<T> {
        let mut g = Graph::new(&self.params);
        let e = g.constant(enc.states.clone());
        let x = g.constant(dec_in.clone());
        let r = self.decode_states_in(&mut g, x, e, &mut Mode::Eval);
        g.value(r).to_owned()
    }

    pub fn pool_slots(&self, r: &Array2<T>) -> Result<Array2<T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(r.clone());
        let s = self.pool_slots_in(&mut g, x)?;
        Ok(g.value(s).to_owned())
    }

    pub fn pointer_scores(&self, s: &Array2<T>, enc: &EncoderOutput<T>) -> Array2<T> {
        let mut g = Graph::new(&self.params);
        let e = g.constant(enc.states.clone());
        let x = g.constant(s.clone());
        let p = self.pointer_scores_in(&mut g, x, e);
        g.value(p).to_owned()
    }

    /// `(T-1) x (V+m)` joint log-probabilities for every slot of `hyp`.
    pub fn slot_log_probs(&self, enc: &EncoderOutput<T>, hyp: &Hypothesis) -> Result<Array2<T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let e = g.constant(enc.states.clone());
        let f = self.forward_from(&mut g, e, hyp.tokens(), &mut Mode::Eval)?;
        Ok(log_softmax_rows(g.value(f.joint)))
    }
}
