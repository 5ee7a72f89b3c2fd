//! Parallel greedy insertion decoding and corpus evaluation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::corpus::{Example, Vocabulary};
use crate::error::ModelError;
use crate::exec::Execution;
use crate::model::{EncoderInput, EncoderOutput, Model, SourceEmbedder};
use crate::oracle::{balanced_alignment, build_slot_distribution, oracle_schedule, subsequence_at, Hypothesis, Weighting};
use crate::parse_ir::{delinearize, exact_match, intent_of, SourceQuery, TargetSequence, TargetToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    #[default]
    Scratch,
    InputSrc,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Scratch => "scratch",
            DecodeMode::InputSrc => "input-src",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scratch" => Ok(DecodeMode::Scratch),
            "input-src" | "input_src" => Ok(DecodeMode::InputSrc),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Subtracted from the NO_INSERT log-probability of every slot.
    pub penalty: f64,
    pub max_steps: usize,
    /// Cap on body length; a hypothesis this long is not extended further.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { mode: DecodeMode::Scratch, penalty: 0.0, max_steps: 64, max_len: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Natural,
    StepCap,
    LengthCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    /// Insertion steps, not counting the final all-NO_INSERT check.
    pub steps_used: usize,
    pub tokens_per_step: Vec<usize>,
    pub terminated: Termination,
    /// Scorer invocations, including the convergence check.
    pub model_calls: usize,
}

/// Anything that yields per-slot joint log-probabilities for a hypothesis.
pub trait Scorer: Sync {
    type Context: Send;

    fn vocab(&self) -> &Vocabulary;

    fn prepare(&self, query: &SourceQuery) -> Result<Self::Context, ModelError>;

    /// `(T-1) x (V+m)` log-probabilities.
    fn slot_log_probs(&self, ctx: &Self::Context, hyp: &Hypothesis) -> Result<Array2<f64>, ModelError>;

    /// Longest hypothesis (BOS/EOS included) the scorer accepts.
    fn max_hypothesis_len(&self) -> usize {
        usize::MAX
    }
}

impl<T: Scalar> Scorer for Model<T> {
    type Context = EncoderOutput<T>;

    fn vocab(&self) -> &Vocabulary {
        Model::vocab(self)
    }

    fn prepare(&self, query: &SourceQuery) -> Result<EncoderOutput<T>, ModelError> {
        self.encode(query)
    }

    fn slot_log_probs(&self, ctx: &EncoderOutput<T>, hyp: &Hypothesis) -> Result<Array2<f64>, ModelError> {
        Ok(Model::slot_log_probs(self, ctx, hyp)?.mapv(|x| x.to_f64().unwrap()))
    }

    fn max_hypothesis_len(&self) -> usize {
        self.config().max_len
    }
}

/// A model whose encoder reads injected vectors instead of word embeddings.
pub struct InjectedScorer<'a, T: Scalar, E: ?Sized> {
    model: &'a Model<T>,
    embedder: &'a E,
}

impl<'a, T: Scalar, E: SourceEmbedder + ?Sized> InjectedScorer<'a, T, E> {
    pub fn new(model: &'a Model<T>, embedder: &'a E) -> Self {
        InjectedScorer { model, embedder }
    }
}

impl<T: Scalar, E: SourceEmbedder + ?Sized> Scorer for InjectedScorer<'_, T, E> {
    type Context = EncoderOutput<T>;

    fn vocab(&self) -> &Vocabulary {
        self.model.vocab()
    }

    fn prepare(&self, query: &SourceQuery) -> Result<EncoderOutput<T>, ModelError> {
        let x = self.embedder.embed(query).mapv(T::of);
        self.model.encode_input(EncoderInput::Embedded(x.view()))
    }

    fn slot_log_probs(&self, ctx: &EncoderOutput<T>, hyp: &Hypothesis) -> Result<Array2<f64>, ModelError> {
        Scorer::slot_log_probs(self.model, ctx, hyp)
    }

    fn max_hypothesis_len(&self) -> usize {
        self.model.config().max_len
    }
}

/// How an [`OracleScorer`] spreads mass over a slot's candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    /// Point mass on the token the balanced-tree schedule inserts next.
    Schedule,
    /// The training target distribution under the given weighting.
    Weighted(Weighting),
}

/// A teacher that knows the gold target of every query it was built from.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    vocab: Vocabulary,
    targets: HashMap<Vec<String>, TargetSequence>,
    mode: OracleMode,
}

pub struct OracleContext {
    target: TargetSequence,
    m: usize,
    /// Each schedule hypothesis with the insertions that extend it.
    schedule: Vec<(Hypothesis, Vec<(usize, TargetToken)>)>,
}

impl OracleScorer {
    pub fn new(vocab: Vocabulary, examples: &[Example], mode: OracleMode) -> Self {
        let mut targets = HashMap::new();
        for ex in examples {
            targets.entry(ex.query.tokens().to_vec()).or_insert_with(|| ex.target.clone());
        }
        OracleScorer { vocab, targets, mode }
    }
}

impl Scorer for OracleScorer {
    type Context = OracleContext;

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn prepare(&self, query: &SourceQuery) -> Result<OracleContext, ModelError> {
        let target = self
            .targets
            .get(query.tokens())
            .cloned()
            .ok_or_else(|| ModelError::Domain("query unknown to the oracle".into()))?;
        let schedule = match self.mode {
            OracleMode::Schedule => {
                let mut hyp = Hypothesis::empty();
                let mut out = Vec::new();
                for step in oracle_schedule(&target) {
                    out.push((hyp, step.insertions));
                    hyp = step.hypothesis;
                }
                out.push((hyp, Vec::new()));
                out
            }
            OracleMode::Weighted(_) => Vec::new(),
        };
        Ok(OracleContext { target, m: query.len(), schedule })
    }

    fn slot_log_probs(&self, ctx: &OracleContext, hyp: &Hypothesis) -> Result<Array2<f64>, ModelError> {
        let width = self.vocab.size() + ctx.m;
        let mut out = Array2::from_elem((hyp.slot_count(), width), f64::NEG_INFINITY);
        let body = ctx.target.body();
        if let OracleMode::Schedule = self.mode {
            if let Some(k) = ctx.schedule.iter().position(|(h, _)| h == hyp) {
                out.column_mut(self.vocab.no_insert()).fill(0.0);
                for (slot, tok) in &ctx.schedule[k].1 {
                    let col = self.vocab.joint_index(tok).unwrap_or(self.vocab.size());
                    out[[*slot, self.vocab.no_insert()]] = f64::NEG_INFINITY;
                    out[[*slot, col]] = 0.0;
                }
                return Ok(out);
            }
        }
        let weighting = match self.mode {
            OracleMode::Weighted(w) => w,
            OracleMode::Schedule => Weighting::Tree { tau: 1e-3 },
        };
        let positions = balanced_alignment(hyp.body(), body)
            .ok_or_else(|| ModelError::Domain("hypothesis is not a subsequence of the target".into()))?;
        let (_, cands) = subsequence_at(&ctx.target, &positions);
        for (slot, c) in cands.iter().enumerate() {
            let dist = build_slot_distribution(c, weighting, &self.vocab);
            for (col, p) in dist.probs {
                if col >= width {
                    return Err(ModelError::Domain(format!("target points past the {}-word query", ctx.m)));
                }
                out[[slot, col]] = p.ln();
            }
        }
        Ok(out)
    }
}

/// The first hypothesis of a decode.
pub fn initial_hypothesis(mode: DecodeMode, m: usize) -> Hypothesis {
    match mode {
        DecodeMode::Scratch => Hypothesis::empty(),
        DecodeMode::InputSrc => Hypothesis::from_body((0..m).map(TargetToken::Pointer)),
    }
}

/// Picks the argmax token of every slot after applying the penalty and mode
/// mask; ties go to the lowest joint column.
pub fn choose_insertions(log_probs: &Array2<f64>, vocab: &Vocabulary, cfg: &DecodeConfig) -> Vec<(usize, TargetToken)> {
    let v = vocab.size();
    let no_insert = vocab.no_insert();
    let limit = match cfg.mode {
        DecodeMode::Scratch => log_probs.ncols(),
        DecodeMode::InputSrc => v,
    };
    let mut out = Vec::new();
    for (slot, row) in log_probs.rows().into_iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (col, &lp) in row.iter().take(limit).enumerate() {
            let score = if col == no_insert { lp - cfg.penalty } else { lp };
            if score > best.0 || best.1 == usize::MAX {
                best = (score, col);
            }
        }
        if best.1 != no_insert {
            out.push((slot, vocab.joint_token(best.1)));
        }
    }
    out
}

/// One parallel insertion step.
pub fn greedy_insert_step<S: Scorer>(
    scorer: &S,
    ctx: &S::Context,
    hyp: &Hypothesis,
    cfg: &DecodeConfig,
) -> Result<(Hypothesis, usize), ModelError> {
    let lp = scorer.slot_log_probs(ctx, hyp)?;
    let ins = choose_insertions(&lp, scorer.vocab(), cfg);
    Ok((hyp.insert(&ins), ins.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub sequence: TargetSequence,
    pub stats: DecodeStats,
    /// Whether the output delinearizes against the query.
    pub valid: bool,
}

pub fn decode<S: Scorer>(scorer: &S, query: &SourceQuery, cfg: &DecodeConfig) -> Result<Decoded, ModelError> {
    let ctx = scorer.prepare(query)?;
    decode_with(scorer, &ctx, query, cfg)
}

pub fn decode_with<S: Scorer>(scorer: &S, ctx: &S::Context, query: &SourceQuery, cfg: &DecodeConfig) -> Result<Decoded, ModelError> {
    if cfg.max_steps == 0 {
        return Err(ModelError::Domain("max_steps must be at least 1".into()));
    }
    let mut hyp = initial_hypothesis(cfg.mode, query.len());
    let mut tokens_per_step = Vec::new();
    let mut model_calls = 0;
    let terminated = loop {
        if hyp.len() - 2 >= cfg.max_len {
            break Termination::LengthCap;
        }
        let (next, inserted) = greedy_insert_step(scorer, ctx, &hyp, cfg)?;
        model_calls += 1;
        if inserted == 0 {
            break Termination::Natural;
        }
        if tokens_per_step.len() == cfg.max_steps {
            break Termination::StepCap;
        }
        if next.len() > scorer.max_hypothesis_len() {
            break Termination::LengthCap;
        }
        hyp = next;
        tokens_per_step.push(inserted);
    };
    let sequence = hyp.into_sequence();
    let valid = delinearize(&sequence, query).is_ok();
    let stats = DecodeStats { steps_used: tokens_per_step.len(), tokens_per_step, terminated, model_calls };
    Ok(Decoded { sequence, stats, valid })
}

pub const HISTOGRAM_STEPS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "EM")]
    pub em: f64,
    #[serde(rename = "IC")]
    pub ic: f64,
    /// Mean insertion steps, excluding the convergence check.
    pub avg_steps: f64,
    /// Mean model calls, convergence check included.
    pub avg_steps_inclusive: f64,
    /// Entry `k` is the mean tokens inserted at step `k+1` over the examples
    /// that performed that step.
    pub tokens_per_step: Vec<f64>,
    pub invalid_rate: f64,
    pub count: usize,
    pub avg_target_len: f64,
    pub avg_output_len: f64,
    pub step_cap_rate: f64,
    pub length_cap_rate: f64,
}

/// Per-example outcome kept alongside the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub decoded: Decoded,
    pub exact: bool,
    pub intent_ok: bool,
}

pub fn evaluate<S: Scorer>(scorer: &S, data: &[Example], cfg: &DecodeConfig, exec: Execution) -> Result<(EvalReport, Vec<Outcome>), ModelError> {
    let outcomes: Vec<Result<Outcome, ModelError>> = exec.map(data, |_, ex| {
        let decoded = decode(scorer, &ex.query, cfg)?;
        let exact = exact_match(&decoded.sequence, &ex.target);
        let intent_ok = match (intent_of(&decoded.sequence), intent_of(&ex.target)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        };
        Ok(Outcome { decoded, exact, intent_ok })
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((summarize(data, &outcomes), outcomes))
}

pub fn summarize(data: &[Example], outcomes: &[Outcome]) -> EvalReport {
    let n = outcomes.len().max(1) as f64;
    let frac = |f: &dyn Fn(&Outcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
    let mean = |f: &dyn Fn(&Outcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let mut sums = [0.0; HISTOGRAM_STEPS];
    let mut counts = [0usize; HISTOGRAM_STEPS];
    for o in outcomes {
        for (k, &t) in o.decoded.stats.tokens_per_step.iter().take(HISTOGRAM_STEPS).enumerate() {
            sums[k] += t as f64;
            counts[k] += 1;
        }
    }
    EvalReport {
        em: frac(&|o| o.exact),
        ic: frac(&|o| o.intent_ok),
        avg_steps: mean(&|o| o.decoded.stats.steps_used as f64),
        avg_steps_inclusive: mean(&|o| o.decoded.stats.model_calls as f64),
        tokens_per_step: sums.iter().zip(counts).map(|(&s, c)| if c == 0 { 0.0 } else { s / c as f64 }).collect(),
        invalid_rate: frac(&|o| !o.decoded.valid),
        count: outcomes.len(),
        avg_target_len: data.iter().map(|e| e.target.len() as f64).sum::<f64>() / n,
        avg_output_len: mean(&|o| o.decoded.sequence.len() as f64),
        step_cap_rate: frac(&|o| o.decoded.stats.terminated == Termination::StepCap),
        length_cap_rate: frac(&|o| o.decoded.stats.terminated == Termination::LengthCap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic, GrammarSpec, DEFAULT_LANGUAGE};
    use crate::oracle::steps_lower_bound;

    fn ex(tokens: &str, target: &str) -> Example {
        Example {
            query: SourceQuery::from_text(tokens).unwrap(),
            target: TargetSequence::parse_rendering(target).unwrap(),
            language_tag: DEFAULT_LANGUAGE.into(),
        }
    }

    /// Always prefers NO_INSERT, or always something else.
    struct Constant {
        vocab: Vocabulary,
        favourite: usize,
    }

    impl Scorer for Constant {
        type Context = usize;
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }
        fn prepare(&self, q: &SourceQuery) -> Result<usize, ModelError> {
            Ok(q.len())
        }
        fn slot_log_probs(&self, m: &usize, hyp: &Hypothesis) -> Result<Array2<f64>, ModelError> {
            let w = self.vocab.size() + m;
            let mut out = Array2::from_elem((hyp.slot_count(), w), (0.1f64 / (w - 1) as f64).ln());
            out.column_mut(self.favourite).fill(0.9f64.ln());
            Ok(out)
        }
    }

    #[test]
    fn oracle_decodes_worked_example_in_three_steps() {
        let e = ex("a b c", "[IN:X @0 @1 @2 ]");
        let vocab = build_vocab(std::slice::from_ref(&e));
        for mode in [OracleMode::Schedule, OracleMode::Weighted(Weighting::Tree { tau: 1.0 })] {
            let oracle = OracleScorer::new(vocab.clone(), std::slice::from_ref(&e), mode);
            let d = decode(&oracle, &e.query, &DecodeConfig::default()).unwrap();
            assert_eq!(d.sequence, e.target);
            assert_eq!(d.stats.steps_used, 3);
            assert_eq!(d.stats.model_calls, 4);
            assert_eq!(d.stats.terminated, Termination::Natural);
            assert_eq!(d.stats.tokens_per_step, vec![1, 2, 2]);
            assert!(d.valid);
        }
    }

    #[test]
    fn oracle_step_sequence_matches_schedule() {
        let data = generate_synthetic(&GrammarSpec::default(), 200, 3).unwrap();
        let vocab = build_vocab(&data);
        let oracle = OracleScorer::new(vocab, &data, OracleMode::Schedule);
        for e in &data {
            let ctx = oracle.prepare(&e.query).unwrap();
            let mut hyp = Hypothesis::empty();
            for step in oracle_schedule(&e.target) {
                let (next, inserted) = greedy_insert_step(&oracle, &ctx, &hyp, &DecodeConfig::default()).unwrap();
                assert_eq!(inserted, step.insertions.len());
                assert_eq!(next, step.hypothesis);
                hyp = next;
            }
            let d = decode_with(&oracle, &ctx, &e.query, &DecodeConfig::default()).unwrap();
            assert_eq!(d.stats.steps_used, steps_lower_bound(e.target.len()));
        }
    }

    #[test]
    fn input_src_keeps_pointers_and_needs_two_steps() {
        let e = ex("a b c", "[IN:X @0 @1 @2 ]");
        let vocab = build_vocab(std::slice::from_ref(&e));
        let oracle = OracleScorer::new(vocab, std::slice::from_ref(&e), OracleMode::Weighted(Weighting::default()));
        let cfg = DecodeConfig { mode: DecodeMode::InputSrc, ..DecodeConfig::default() };
        let d = decode(&oracle, &e.query, &cfg).unwrap();
        assert_eq!(d.sequence, e.target);
        assert!(d.stats.steps_used <= 2);
    }

    #[test]
    fn convergence_caps_and_penalty() {
        let e = ex("a b", "[IN:X @0 @1 ]");
        let vocab = build_vocab(std::slice::from_ref(&e));
        let quiet = Constant { vocab: vocab.clone(), favourite: vocab.no_insert() };
        let ctx = quiet.prepare(&e.query).unwrap();
        let (h, n) = greedy_insert_step(&quiet, &ctx, &Hypothesis::empty(), &DecodeConfig::default()).unwrap();
        assert_eq!((h, n), (Hypothesis::empty(), 0));
        let d = decode(&quiet, &e.query, &DecodeConfig::default()).unwrap();
        assert_eq!(d.stats.steps_used, 0);
        assert!(!d.valid);

        let forced = DecodeConfig { penalty: 1e9, max_len: 40, ..DecodeConfig::default() };
        let d = decode(&quiet, &e.query, &forced).unwrap();
        assert_eq!(d.stats.terminated, Termination::LengthCap);
        assert!(d.sequence.len() >= 40);

        let busy = Constant { vocab: vocab.clone(), favourite: vocab.size() };
        let capped = DecodeConfig { max_steps: 1, ..DecodeConfig::default() };
        let d = decode(&busy, &e.query, &capped).unwrap();
        assert_eq!(d.stats.terminated, Termination::StepCap);
        assert_eq!(d.stats.steps_used, 1);
        assert_eq!(d.stats.tokens_per_step.iter().sum::<usize>(), d.sequence.len());
    }

    #[test]
    fn ties_go_to_lowest_column() {
        let e = ex("a b", "[IN:X @0 @1 ]");
        let vocab = build_vocab(std::slice::from_ref(&e));
        let lp = Array2::from_elem((1, vocab.size() + 2), -1.0);
        let ins = choose_insertions(&lp, &vocab, &DecodeConfig::default());
        assert_eq!(ins, vec![(0, vocab.tag(0).clone())]);
        let masked = choose_insertions(&lp, &vocab, &DecodeConfig { mode: DecodeMode::InputSrc, ..DecodeConfig::default() });
        assert!(masked.iter().all(|(_, t)| !t.is_pointer()));
    }

    #[test]
    fn evaluation_report() {
        let data = vec![ex("a b", "[IN:X @0 @1 ]"), ex("c", "[IN:Y [SL:s @0 ] ]")];
        let vocab = build_vocab(&data);
        let oracle = OracleScorer::new(vocab.clone(), &data, OracleMode::Schedule);
        let (r, _) = evaluate(&oracle, &data, &DecodeConfig::default(), Execution::Sequential).unwrap();
        assert_eq!((r.em, r.ic, r.invalid_rate), (1.0, 1.0, 0.0));
        assert_eq!(r.tokens_per_step.len(), HISTOGRAM_STEPS);
        assert_eq!(r.tokens_per_step[0], 1.0);
        assert_eq!(r.avg_steps, 3.0);
        assert_eq!(r.avg_steps_inclusive, 4.0);

        let quiet = Constant { vocab: vocab.clone(), favourite: vocab.no_insert() };
        let (r, _) = evaluate(&quiet, &data, &DecodeConfig::default(), Execution::Parallel).unwrap();
        assert_eq!((r.em, r.ic, r.invalid_rate), (0.0, 0.0, 1.0));
        let json = serde_json::to_value(&r).unwrap();
        for key in ["EM", "IC", "avg_steps", "tokens_per_step", "invalid_rate"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
