//! Batches from sampled subsequences, the KL slot loss, Noam-scheduled Adam,
//! gradient checking and checkpoints.

mod checkpoint;

use std::io::Write;
use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, ParamId, ParamSet, Scalar};
use crate::corpus::{Example, Vocabulary};
use crate::parse_ir::TargetToken;
use crate::decode_eval::{evaluate, DecodeConfig, InjectedScorer};
use crate::error::{ModelError, TrainError};
use crate::exec::Execution;
use crate::model::{EncoderInput, Mode, Model, SourceEmbedder};
use crate::oracle::{balanced_alignment, build_slot_distribution, sample_subsequence, subsequence_at, sample_subsequence_keeping, Hypothesis, SlotTargetDistribution, Weighting};

pub use checkpoint::{Checkpoint, Metrics, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub lr_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weighting: Weighting,
    pub input_src_training: bool,
    pub freeze_encoder_embeddings: bool,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub clip_norm: f64,
    /// 0 evaluates on the dev set only at the end.
    pub eval_every: usize,
    /// Dev examples decoded per evaluation; 0 means all.
    pub dev_limit: usize,
    pub log_every: usize,
    /// Examples per gradient work unit; fixes the summation order.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 30_000,
            warmup_steps: 500,
            lr_factor: 0.15,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            weighting: Weighting::default(),
            input_src_training: false,
            freeze_encoder_embeddings: false,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 1.0,
            eval_every: 0,
            dev_limit: 0,
            log_every: 100,
            grad_chunk: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if !(self.lr_factor > 0.0) {
            return bad("lr_factor must be positive");
        }
        if self.batch_size == 0 || self.grad_chunk == 0 {
            return bad("batch_size and grad_chunk must be positive");
        }
        if let Weighting::Tree { tau } = self.weighting {
            if !(tau > 0.0) {
                return bad("tau must be positive");
            }
        }
        Ok(())
    }

    /// Noam schedule.
    pub fn lr(&self, step: usize, d_model: usize) -> f64 {
        noam_lr(step, d_model, self.warmup_steps, self.lr_factor)
    }

    /// Flat `key = value` text.
    pub fn to_kv(&self) -> String {
        let (weighting, tau) = match self.weighting {
            Weighting::Tree { tau } => ("tree", tau),
            Weighting::Uniform => ("uniform", 1.0),
        };
        let rows: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weighting", weighting.to_string()),
            ("tau", tau.to_string()),
            ("input_src_training", self.input_src_training.to_string()),
            ("freeze_encoder_embeddings", self.freeze_encoder_embeddings.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("dev_limit", self.dev_limit.to_string()),
            ("log_every", self.log_every.to_string()),
            ("grad_chunk", self.grad_chunk.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses [`TrainConfig::to_kv`] output; missing keys keep their defaults,
    /// `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        let mut weighting = "tree".to_string();
        let mut tau = 1.0;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", no + 1)))?;
            fn parse<V: std::str::FromStr>(value: &str, key: &str, no: usize) -> Result<V, TrainError> {
                value.parse().map_err(|_| TrainError::Config(format!("line {}: bad value for {key}", no + 1)))
            }
            match key {
                "batch_size" => cfg.batch_size = parse(value, key, no)?,
                "max_steps" => cfg.max_steps = parse(value, key, no)?,
                "warmup_steps" => cfg.warmup_steps = parse(value, key, no)?,
                "lr_factor" => cfg.lr_factor = parse(value, key, no)?,
                "adam_beta1" => cfg.adam_beta1 = parse(value, key, no)?,
                "adam_beta2" => cfg.adam_beta2 = parse(value, key, no)?,
                "adam_eps" => cfg.adam_eps = parse(value, key, no)?,
                "weighting" => weighting = value.to_string(),
                "tau" => tau = parse(value, key, no)?,
                "input_src_training" => cfg.input_src_training = parse(value, key, no)?,
                "freeze_encoder_embeddings" => cfg.freeze_encoder_embeddings = parse(value, key, no)?,
                "seed" => cfg.seed = parse(value, key, no)?,
                "checkpoint_every" => cfg.checkpoint_every = parse(value, key, no)?,
                "clip_norm" => cfg.clip_norm = parse(value, key, no)?,
                "eval_every" => cfg.eval_every = parse(value, key, no)?,
                "dev_limit" => cfg.dev_limit = parse(value, key, no)?,
                "log_every" => cfg.log_every = parse(value, key, no)?,
                "grad_chunk" => cfg.grad_chunk = parse(value, key, no)?,
                other => return Err(TrainError::Config(format!("line {}: unknown key {other}", no + 1))),
            }
        }
        cfg.weighting = match weighting.as_str() {
            "tree" => Weighting::Tree { tau },
            "uniform" => Weighting::Uniform,
            other => return Err(TrainError::Config(format!("unknown weighting {other}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `factor · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, factor: f64) -> f64 {
    let s = step.max(1) as f64;
    factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// `KL(gold || pred)` over gold's support.
pub fn slot_loss(pred: &[f64], gold: &SlotTargetDistribution) -> f64 {
    gold.probs.iter().filter(|(_, &g)| g > 0.0).map(|(&k, &g)| g * (g.ln() - pred[k].ln())).sum()
}

/// Mean of the per-slot losses.
pub fn sequence_loss(slot_losses: &[f64]) -> Result<f64, ModelError> {
    if slot_losses.is_empty() {
        return Err(ModelError::Domain("no slots".into()));
    }
    Ok(slot_losses.iter().sum::<f64>() / slot_losses.len() as f64)
}

/// One training instance: a sampled hypothesis and the gold distribution of each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    /// Index into the example slice the batch was drawn from.
    pub example: usize,
    pub hypothesis: Hypothesis,
    pub gold: Vec<SlotTargetDistribution>,
}

/// Samples one subsequence per listed example.
pub fn make_batch<R: Rng>(
    examples: &[Example],
    indices: &[usize],
    vocab: &Vocabulary,
    weighting: Weighting,
    input_src_training: bool,
    rng: &mut R,
) -> Vec<TrainItem> {
    indices
        .iter()
        .map(|&i| {
            let target = &examples[i].target;
            let (sampled, _) = if input_src_training {
                sample_subsequence_keeping(target, |t| t.is_pointer(), rng)
            } else {
                sample_subsequence(target, rng)
            };
            // repeated tokens make the sampled positions ambiguous; realign so
            // the gold depends only on the hypothesis
            let positions = balanced_alignment(sampled.body(), target.body()).expect("sampled from target");
            let (hypothesis, cands) = subsequence_at(target, &positions);
            let gold = cands.iter().map(|c| build_slot_distribution(c, weighting, vocab)).collect();
            TrainItem { example: i, hypothesis, gold }
        })
        .collect()
}

/// Visits every example once per epoch in a fresh random order.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        EpochSampler { order: (0..len).collect(), pos: len }
    }

    pub fn next_indices<R: Rng>(&mut self, count: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn dense_gold<T: Scalar>(gold: &[SlotTargetDistribution], width: usize) -> Array2<T> {
    let mut out = Array2::zeros((gold.len(), width));
    for (r, g) in gold.iter().enumerate() {
        for (&k, &p) in &g.probs {
            out[[r, k]] += T::of(p);
        }
    }
    out
}

/// Summed per-item losses and their gradients, computed in one row-stacked graph.
pub fn chunk_gradients<T: Scalar>(
    model: &Model<T>,
    examples: &[Example],
    items: &[TrainItem],
    embedder: Option<&dyn SourceEmbedder>,
    dropout_seed: u64,
) -> Result<(f64, Grads<T>), ModelError> {
    chunk_pass(model, examples, items, embedder, dropout_seed, true).map(|(l, g)| (l, g.expect("requested")))
}

fn chunk_pass<T: Scalar>(
    model: &Model<T>,
    examples: &[Example],
    items: &[TrainItem],
    embedder: Option<&dyn SourceEmbedder>,
    dropout_seed: u64,
    backward: bool,
) -> Result<(f64, Option<Grads<T>>), ModelError> {
    let mut g = Graph::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut mode = if model.config().dropout > 0.0 { Mode::Train(&mut rng) } else { Mode::Eval };
    let ids: Vec<Vec<usize>>;
    let injected: Vec<Array2<T>>;
    let inputs: Vec<EncoderInput<T>> = match embedder {
        Some(e) => {
            injected = items.iter().map(|it| e.embed(&examples[it.example].query).mapv(T::of)).collect();
            injected.iter().map(|x| EncoderInput::Embedded(x.view())).collect()
        }
        None => {
            ids = items.iter().map(|it| model.vocab().encode_query(&examples[it.example].query)).collect();
            ids.iter().map(|t| EncoderInput::Tokens(t)).collect()
        }
    };
    let v = model.vocab().size();
    let hyps: Vec<&[TargetToken]> = items.iter().map(|it| it.hypothesis.tokens()).collect();
    let golds = items
        .iter()
        .zip(&inputs)
        .map(|(it, input)| {
            let m = match input {
                EncoderInput::Tokens(t) => t.len(),
                EncoderInput::Embedded(x) => x.nrows(),
            };
            dense_gold(&it.gold, v + m)
        })
        .collect();
    let weights = vec![T::one(); items.len()];
    let loss = model.batch_loss(&mut g, &inputs, &hyps, golds, &weights, &mut mode)?;
    let value = g.value(loss)[[0, 0]].to_f64().unwrap();
    Ok((value, backward.then(|| g.backward(loss).params)))
}

/// Loss and parameter gradients of one item.
pub fn item_gradients<T: Scalar>(
    model: &Model<T>,
    example: &Example,
    item: &TrainItem,
    embedder: Option<&dyn SourceEmbedder>,
    dropout_seed: u64,
) -> Result<(f64, Grads<T>), ModelError> {
    let item = TrainItem { example: 0, hypothesis: item.hypothesis.clone(), gold: item.gold.clone() };
    chunk_gradients(model, std::slice::from_ref(example), std::slice::from_ref(&item), embedder, dropout_seed)
}

/// Mean loss and mean gradient over a batch. Items are processed in fixed
/// chunks and summed in order, so the result does not depend on `exec`.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    examples: &[Example],
    items: &[TrainItem],
    embedder: Option<&dyn SourceEmbedder>,
    seed: u64,
    chunk: usize,
    exec: Execution,
) -> Result<(f64, Grads<T>), ModelError> {
    let chunks: Vec<&[TrainItem]> = items.chunks(chunk.max(1)).collect();
    let partial = exec.map(&chunks, |c, part| {
        chunk_gradients(model, examples, part, embedder, seed ^ (c as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    });
    let mut loss = 0.0;
    let mut grads = Grads::new(model.params().len());
    for p in partial {
        let (l, g) = p?;
        loss += l;
        grads.accumulate(&g);
    }
    let n = items.len().max(1) as f64;
    grads.scale(T::of(1.0 / n));
    Ok((loss / n, grads))
}

/// Adam with externally supplied learning rate.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array2<T>> = params.ids().map(|id| Array2::zeros(params.get(id).dim())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>, lr: f64, frozen: &[ParamId]) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for id in params.ids() {
            if frozen.contains(&id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dev_em: Option<f64>,
}

/// Knobs of a training run that are not part of [`TrainConfig`].
#[derive(Default)]
pub struct FitOptions<'a> {
    pub exec: Execution,
    /// Replaces the source embedding lookup with injected vectors.
    pub embedder: Option<&'a dyn SourceEmbedder>,
    /// Receives one JSON object per logged step.
    pub metrics: Option<&'a mut dyn Write>,
    /// Destination of periodic checkpoints.
    pub checkpoint_path: Option<PathBuf>,
    pub dev_decode: DecodeConfig,
}

#[derive(Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricRecord>,
}

fn dev_em(model: &Model<f32>, dev: &[Example], cfg: &TrainConfig, opts: &FitOptions) -> Result<Option<f64>, ModelError> {
    if dev.is_empty() {
        return Ok(None);
    }
    let dev = if cfg.dev_limit > 0 { &dev[..cfg.dev_limit.min(dev.len())] } else { dev };
    let report = match opts.embedder {
        Some(e) => evaluate(&InjectedScorer::new(model, e), dev, &opts.dev_decode, opts.exec)?.0,
        None => evaluate(model, dev, &opts.dev_decode, opts.exec)?.0,
    };
    Ok(Some(report.em))
}

/// Trains `model` on `train`, reporting dev EM on `dev`.
pub fn fit(mut model: Model<f32>, train: &[Example], dev: &[Example], cfg: &TrainConfig, mut opts: FitOptions) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = EpochSampler::new(train.len());
    let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let frozen = if cfg.freeze_encoder_embeddings { vec![model.source_embedding()] } else { Vec::new() };
    let d = model.config().d_dec;
    let mut history = Vec::new();
    let mut last_loss = f64::NAN;
    let mut last_dev = None;
    for step in 1..=cfg.max_steps {
        let indices = sampler.next_indices(cfg.batch_size, &mut rng);
        let items = make_batch(train, &indices, model.vocab(), cfg.weighting, cfg.input_src_training, &mut rng);
        let seed = rng.random::<u64>();
        let (loss, mut grads) = batch_gradients(&model, train, &items, opts.embedder, seed, cfg.grad_chunk, opts.exec)?;
        let norm = grads.global_norm();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        if cfg.clip_norm > 0.0 && f64::from(norm) > cfg.clip_norm {
            grads.scale((cfg.clip_norm / f64::from(norm)) as f32);
        }
        let lr = cfg.lr(step, d);
        adam.step(model.params_mut(), &grads, lr, &frozen);
        last_loss = loss;

        let evaluate_now = cfg.eval_every > 0 && step % cfg.eval_every == 0 || step == cfg.max_steps;
        let dev_score = if evaluate_now { dev_em(&model, dev, cfg, &opts)? } else { None };
        if dev_score.is_some() {
            last_dev = dev_score;
        }
        if step == 1 || step % cfg.log_every.max(1) == 0 || dev_score.is_some() {
            let rec = MetricRecord { step, loss, lr, dev_em: dev_score };
            if let Some(w) = opts.metrics.as_mut() {
                serde_json::to_writer(&mut **w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            history.push(rec);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(path) = &opts.checkpoint_path {
                let ck = Checkpoint::new(model.clone(), cfg.clone(), step, Metrics { loss, dev_em: last_dev });
                ck.save(path)?;
            }
        }
    }
    let checkpoint = Checkpoint::new(model, cfg.clone(), cfg.max_steps, Metrics { loss: last_loss, dev_em: last_dev });
    if let Some(path) = &opts.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(Trained { checkpoint, history })
}

/// What [`gradcheck`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckTarget {
    /// A single linear map under a fixed linear readout.
    LinearToy,
    /// The whole network at width `d`, KL slot loss on a sampled hypothesis.
    FullStack { d: usize },
}

/// Entrywise `|a - n| / max(|a|, |n|, 1e-6)`.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Fourth-order central differences with step `epsilon` against the tape over every parameter entry;
/// returns the largest relative error.
pub fn gradcheck(target: GradcheckTarget, seed: u64, epsilon: f64) -> Result<f64, ModelError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(ModelError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        GradcheckTarget::LinearToy => {
            let mut params = ParamSet::new();
            let w = params.add("w", Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)));
            let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
            let c = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
            let loss = |p: &ParamSet<f64>, backward: bool| -> (f64, Option<Grads<f64>>) {
                let mut g = Graph::new(p);
                let (xv, wv) = (g.constant(x.clone()), g.param(w));
                let y = g.matmul(xv, wv);
                let out = g.weighted_sum(y, c.clone());
                (g.value(out)[[0, 0]], backward.then(|| g.backward(out).params))
            };
            Ok(compare(&params, epsilon, loss))
        }
        GradcheckTarget::FullStack { d } => {
            let spec = crate::corpus::GrammarSpec::default();
            let examples = crate::corpus::generate_synthetic(&spec, 2, seed).map_err(|e| ModelError::Domain(e.to_string()))?;
            let vocab = crate::corpus::build_vocab(&examples);
            let config = crate::model::ModelConfig {
                d_enc: d,
                d_dec: d,
                enc_layers: 1,
                dec_layers: 2,
                heads: 2,
                ffn_mult: 2,
                dropout: 0.0,
                max_len: 64,
                seed,
                ..Default::default()
            };
            let model: Model<f64> = Model::new(config, vocab)?;
            let items = make_batch(&examples, &[0, 1], model.vocab(), Weighting::default(), false, &mut rng);
            let loss = |p: &ParamSet<f64>, backward: bool| -> (f64, Option<Grads<f64>>) {
                let m = Model::from_params(model.config().clone(), model.vocab().clone(), p.clone()).unwrap();
                chunk_pass(&m, &examples, &items, None, 0, backward).unwrap()
            };
            Ok(compare(model.params(), epsilon, loss))
        }
    }
}

fn compare<F>(params: &ParamSet<f64>, eps: f64, f: F) -> f64
where
    F: Fn(&ParamSet<f64>, bool) -> (f64, Option<Grads<f64>>),
{
    let grads = f(params, true).1.expect("gradients");
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for id in params.ids() {
        let (rows, cols) = params.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = params.get(id)[[r, c]];
                let mut at = |h: f64| {
                    p.get_mut(id)[[r, c]] = orig + h;
                    f(&p, false).0
                };
                // fourth-order central difference
                let numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
                p.get_mut(id)[[r, c]] = orig;
                let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                worst = worst.max(relative_error(analytic, numeric));
            }
        }
    }
    worst
}
