//! Acceptance criteria, run in order; prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use insertion_parser::corpus::{build_vocab, generate_synthetic, load_bio, load_top_tsv, train_test_split, Example, GrammarSpec, WordOrder};
use insertion_parser::decode_eval::{
    decode_with, evaluate, greedy_insert_step, DecodeConfig, DecodeMode, EvalReport, InjectedScorer, OracleMode, OracleScorer, Scorer,
};
use insertion_parser::exec::Execution;
use insertion_parser::model::{ConceptEmbedder, Model, ModelConfig, SourceEmbedder};
use insertion_parser::oracle::{
    oracle_schedule, sample_subsequence, steps_lower_bound, subsequence_at, tree_weights, uniform_weights, Hypothesis, Weighting,
};
use insertion_parser::parse_ir::{delinearize, linearize, SourceQuery, TargetSequence, TargetToken};
use insertion_parser::training::{fit, gradcheck, Checkpoint, Metrics, FitOptions, GradcheckTarget, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const PENALTY_GRID: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Corpus {
    train: Vec<Example>,
    dev: Vec<Example>,
    test: Vec<Example>,
}

fn corpus() -> Corpus {
    let all = generate_synthetic(&GrammarSpec::default(), 5500, 7).unwrap();
    let (train, test) = train_test_split(&all, 500, 7);
    // held out from both, only used to pick the decoding penalty
    let dev = generate_synthetic(&GrammarSpec::default(), 500, 1234).unwrap();
    Corpus { train, dev, test }
}

fn small_config(seed: u64, d: usize) -> ModelConfig {
    ModelConfig { d_enc: d, d_dec: d, enc_layers: 2, dec_layers: 3, heads: 4, dropout: 0.0, seed, ..Default::default() }
}

struct MainModel {
    model: Model<f32>,
    penalty: f64,
    train_secs: f64,
}

fn train_main(c: &Corpus) -> MainModel {
    let tc = TrainConfig { batch_size: 64, max_steps: 6000, lr_factor: 0.4, seed: 0, log_every: 0, ..Default::default() };
    let start = Instant::now();
    let trained = fit(Model::new(small_config(0, 64), build_vocab(&c.train)).unwrap(), &c.train, &[], &tc, FitOptions::default()).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let model = trained.checkpoint.model;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for p in PENALTY_GRID {
        let em = report(&model, &c.dev, DecodeMode::Scratch, p).em;
        if em > best.0 {
            best = (em, p);
        }
    }
    MainModel { model, penalty: best.1, train_secs }
}

fn report<S: Scorer>(scorer: &S, data: &[Example], mode: DecodeMode, penalty: f64) -> EvalReport {
    evaluate(scorer, data, &DecodeConfig { mode, penalty, ..Default::default() }, Execution::Parallel).unwrap().0
}

fn c1_exact_match(c: &Corpus, m: &MainModel) -> Outcome {
    let r = report(&m.model, &c.test, DecodeMode::Scratch, m.penalty);
    outcome(
        r.em >= 0.90 && r.ic >= 0.98 && m.train_secs <= 3.0 * 3600.0,
        format!("test EM {:.3} (>= 0.90), IC {:.3} (>= 0.98), penalty {} chosen on dev, training {:.0}s", r.em, r.ic, m.penalty, m.train_secs),
    )
}

fn oracle_steps_exact(examples: &[Example]) -> Result<usize, String> {
    let vocab = build_vocab(examples);
    let oracle = OracleScorer::new(vocab, examples, OracleMode::Weighted(Weighting::Tree { tau: 1.0 }));
    let cfg = DecodeConfig { max_len: 4096, ..Default::default() };
    for ex in examples {
        let ctx = oracle.prepare(&ex.query).map_err(|e| e.to_string())?;
        let out = decode_with(&oracle, &ctx, &ex.query, &cfg).map_err(|e| e.to_string())?;
        let n = ex.target.len();
        if out.sequence != ex.target || out.stats.steps_used != steps_lower_bound(n) {
            return Err(format!("n={n}: {} steps, expected {}", out.stats.steps_used, steps_lower_bound(n)));
        }
    }
    Ok(examples.len())
}

/// Pointer-only bodies of the given lengths.
fn flat_examples(lengths: &[usize]) -> Vec<Example> {
    lengths
        .iter()
        .map(|&n| Example {
            query: SourceQuery::new((0..n).map(|i| format!("n{n}w{i}"))).unwrap(),
            target: TargetSequence::from_body((0..n).map(TargetToken::Pointer)),
            language_tag: "en".into(),
        })
        .collect()
}

fn c2_step_law(c: &Corpus, m: &MainModel) -> Outcome {
    let mut corpus: Vec<Example> = c.train.clone();
    corpus.extend(c.test.iter().cloned());
    let mut lengths: Vec<usize> = (1..=64).collect();
    lengths.extend([100, 127, 128, 129, 255, 256, 257, 511, 512, 513, 777, 1000, 1023, 1024]);
    let oracle = oracle_steps_exact(&corpus).and_then(|a| oracle_steps_exact(&flat_examples(&lengths)).map(|b| a + b));
    let scratch = report(&m.model, &c.test, DecodeMode::Scratch, m.penalty);
    let input = report(&m.model, &c.test, DecodeMode::InputSrc, m.penalty);
    let (rs, ri) = (scratch.avg_steps / scratch.avg_target_len, input.avg_steps / input.avg_target_len);
    let oracle_text = match &oracle {
        Ok(k) => format!("oracle exact on {k} targets"),
        Err(e) => format!("oracle mismatch: {e}"),
    };
    outcome(
        oracle.is_ok() && rs <= 0.45 && ri <= 0.30,
        format!(
            "{oracle_text}; trained steps/length scratch {:.2}/{:.2} = {rs:.3} (<= 0.45), input-src {:.2}/{:.2} = {ri:.3} (<= 0.30); histogram {:?}",
            scratch.avg_steps,
            scratch.avg_target_len,
            input.avg_steps,
            input.avg_target_len,
            scratch.tokens_per_step.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

fn c3_gradcheck() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        worst = worst.max(gradcheck(GradcheckTarget::FullStack { d: 8 }, seed, 1e-3).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 60.0, format!("max relative error {worst:.2e} over 10 seeds at d=8 (< 1e-4), {secs:.1}s (< 60s)"))
}

fn letters(body: &[u8]) -> TargetSequence {
    TargetSequence::from_body(body.iter().map(|&b| TargetToken::OpenIntent(((b'A' + b) as char).to_string())))
}

fn c4_oracle_math() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    for tau in [0.1, 0.5, 1.0, 1.5, 2.0] {
        for i in 1..=64usize {
            let w = tree_weights(i, tau).unwrap();
            let sum: f64 = w.iter().sum();
            let centre = (i - 1) / 2;
            let symmetric = (0..i).all(|j| (w[j] - w[i - 1 - j]).abs() < 1e-12);
            let argmax = w.iter().all(|&x| x <= w[centre] + 1e-15);
            if (sum - 1.0).abs() > 1e-12 || !symmetric || !argmax {
                failures.push(format!("tree_weights({i}, {tau})"));
            }
        }
    }
    for i in 1..=64usize {
        let limit = tree_weights(i, 1e9).unwrap();
        let u = uniform_weights(i).unwrap();
        if limit.iter().zip(&u).any(|(a, b)| (a - b).abs() > 1e-6) {
            failures.push(format!("uniform limit at i={i}"));
        }
    }

    // subsets of a 4-token body: P(S) = 1 / ((n+1) * C(n, |S|))
    let target = letters(&[0, 1, 2, 3]);
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts: HashMap<Vec<TargetToken>, usize> = HashMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        let (h, _) = sample_subsequence(&target, &mut rng);
        *counts.entry(h.body().to_vec()).or_default() += 1;
    }
    let binom = |k: usize| (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64);
    let mut chi2 = 0.0;
    for mask in 0u32..(1 << n) {
        let positions: Vec<usize> = (0..n).filter(|b| mask & (1 << b) != 0).collect();
        let (h, _) = subsequence_at(&target, &positions);
        let expected = draws as f64 / ((n + 1) as f64 * binom(positions.len()));
        let observed = counts.get(h.body()).copied().unwrap_or(0) as f64;
        chi2 += (observed - expected).powi(2) / expected;
    }
    let p = 1.0 - ChiSquared::new(((1 << n) - 1) as f64).unwrap().cdf(chi2);
    if p <= 0.01 {
        failures.push(format!("sampler chi-square p = {p:.4}"));
    }

    let (checked, errors) = exhaustive_reconstruction();
    failures.extend(errors);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 60.0,
        format!(
            "tree weights i<=64 x 5 taus, uniform limit, sampler chi-square p = {p:.3} (> 0.01), {checked} subsequences reconstructed, {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

/// Every subsequence of every body of length <= 8 over {A, B} and of every
/// short corpus target: inserting the slot candidates restores the target,
/// the schedule has the optimal step count, and oracle decoding from the
/// subsequence finishes the target.
fn exhaustive_reconstruction() -> (usize, Vec<String>) {
    let mut targets: Vec<TargetSequence> = Vec::new();
    for n in 0..=8usize {
        for bits in 0u32..(1 << n) {
            targets.push(letters(&(0..n).map(|b| ((bits >> b) & 1) as u8).collect::<Vec<_>>()));
        }
    }
    let mut examples: Vec<Example> = targets
        .into_iter()
        .enumerate()
        .map(|(k, target)| Example { query: SourceQuery::new([format!("q{k}")]).unwrap(), target, language_tag: "en".into() })
        .collect();
    let synthetic = generate_synthetic(&GrammarSpec::default(), 2000, 3).unwrap();
    examples.extend(synthetic.into_iter().filter(|e| e.target.len() <= 8));
    let oracle = OracleScorer::new(build_vocab(&examples), &examples, OracleMode::Weighted(Weighting::Tree { tau: 1.0 }));
    let cfg = DecodeConfig::default();
    let mut errors = Vec::new();
    let mut checked = 0;
    for ex in &examples {
        let target = &ex.target;
        let n = target.len();
        let schedule = oracle_schedule(target);
        if schedule.len() != steps_lower_bound(n) || schedule.last().map_or(n != 0, |s| s.hypothesis.body() != target.body()) {
            errors.push(format!("schedule of {}", target.render()));
        }
        let ctx = oracle.prepare(&ex.query).unwrap();
        for mask in 0u32..(1 << n) {
            let positions: Vec<usize> = (0..n).filter(|b| mask & (1 << b) != 0).collect();
            let (hyp, cands) = subsequence_at(target, &positions);
            let insertions: Vec<(usize, Vec<TargetToken>)> = cands.iter().map(|c| (c.slot, c.candidates.clone())).collect();
            let mut body = Vec::new();
            for (slot, cand) in &insertions {
                body.extend(cand.iter().cloned());
                if *slot < hyp.body().len() {
                    body.push(hyp.body()[*slot].clone());
                }
            }
            if body != target.body() {
                errors.push(format!("candidates of {:?} in {}", positions, target.render()));
            }
            let mut h: Hypothesis = hyp;
            for _ in 0..=steps_lower_bound(n) {
                let (next, inserted) = greedy_insert_step(&oracle, &ctx, &h, &cfg).unwrap();
                if inserted == 0 {
                    break;
                }
                h = next;
            }
            if h.body() != target.body() {
                errors.push(format!("oracle from {:?} in {}", positions, target.render()));
            }
            checked += 1;
        }
    }
    errors.truncate(5);
    (checked, errors)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn ablation_config(seed: u64, weighting: Weighting) -> TrainConfig {
    TrainConfig { batch_size: 32, max_steps: 1500, lr_factor: 0.4, seed, weighting, log_every: 0, ..Default::default() }
}

fn c5_tau_ordering(c: &Corpus) -> Outcome {
    let mut by_tau = Vec::new();
    for tau in [1.0, 0.1] {
        let ems: Vec<f64> = (0..3)
            .map(|seed| {
                let tc = ablation_config(seed, Weighting::Tree { tau });
                let model = Model::new(small_config(seed, 64), build_vocab(&c.train)).unwrap();
                let trained = fit(model, &c.train, &[], &tc, FitOptions::default()).unwrap();
                report(&trained.checkpoint.model, &c.test, DecodeMode::Scratch, 0.0).em
            })
            .collect();
        by_tau.push(ems);
    }
    let (a, b) = (mean(&by_tau[0]), mean(&by_tau[1]));
    outcome(a >= b, format!("scratch EM tau=1.0 {a:.3} {:?} >= tau=0.1 {b:.3} {:?}", by_tau[0], by_tau[1]))
}

fn c6_transfer() -> Outcome {
    let spec = GrammarSpec::default();
    let swapped = spec.derive_language("b", 11, WordOrder::Identity);
    let permuted = spec.derive_language("b", 11, WordOrder::ReverseSpans);
    let d = 64;
    let embedder = ConceptEmbedder::new(&swapped, d, 0.3, 5);
    let train = generate_synthetic(&swapped.a, 2000, 7).unwrap();
    let test_b = generate_synthetic(&swapped.b, 300, 99).unwrap();
    let test_perm = generate_synthetic(&permuted.b, 300, 99).unwrap();
    let vocab = build_vocab(&train);
    // [copy on, copy off] x [scratch, input-src] per seed, plus the permuted language
    let mut em: HashMap<(bool, DecodeMode), Vec<f64>> = HashMap::new();
    let mut perm: HashMap<bool, Vec<f64>> = HashMap::new();
    for copy in [true, false] {
        for seed in 0..3 {
            let mc = ModelConfig { copy_enabled: copy, ..small_config(seed, d) };
            let tc = ablation_config(seed, Weighting::default());
            let opts = FitOptions { embedder: Some(&embedder as &dyn SourceEmbedder), ..Default::default() };
            let trained = fit(Model::new(mc, vocab.clone()).unwrap(), &train, &[], &tc, opts).unwrap();
            let scorer = InjectedScorer::new(&trained.checkpoint.model, &embedder);
            for mode in [DecodeMode::Scratch, DecodeMode::InputSrc] {
                em.entry((copy, mode)).or_default().push(report(&scorer, &test_b, mode, 0.0).em);
            }
            perm.entry(copy).or_default().push(report(&scorer, &test_perm, DecodeMode::InputSrc, 0.0).em);
        }
    }
    let m = |copy, mode| mean(&em[&(copy, mode)]);
    let best = m(true, DecodeMode::InputSrc);
    let no_copy = m(false, DecodeMode::InputSrc);
    let no_input = m(true, DecodeMode::Scratch);
    outcome(
        best >= no_copy && best >= no_input,
        format!(
            "zero-shot on lexicon-swapped B: copy+input-src {best:.3} >= no copy {no_copy:.3}, >= scratch {no_input:.3} (no copy, scratch {:.3}); reversed-span B (info): copy {:.3}, no copy {:.3}",
            m(false, DecodeMode::Scratch),
            mean(&perm[&true]),
            mean(&perm[&false])
        ),
    )
}

fn c7_penalty_monotone(c: &Corpus, m: &MainModel) -> Outcome {
    let lens: Vec<f64> = PENALTY_GRID.iter().map(|&p| report(&m.model, &c.test, DecodeMode::Scratch, p).avg_output_len).collect();
    let monotone = lens.windows(2).all(|w| w[1] >= w[0]);
    outcome(monotone, format!("mean output length over penalties {PENALTY_GRID:?}: {:?}", lens.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()))
}

fn c8_round_trips(c: &Corpus, m: &MainModel) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad_trees = 0;
    for _ in 0..1000 {
        let (tree, query) = common::random_tree(&mut rng, 4);
        let ok = linearize(&tree, &query).ok().and_then(|s| delinearize(&s, &query).ok()).is_some_and(|t| t == tree);
        bad_trees += usize::from(!ok);
    }
    let top = load_top_tsv(common::fixture("top_sample.tsv")).unwrap();
    let bio = load_bio(common::fixture("bio_sample.bio")).unwrap();
    let loaders_ok = top.examples.len() == 2 && top.skipped.len() == 1 && bio.examples.len() == 2 && bio.skipped.is_empty() && bio.repairs == 1;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("main.ckpt");
    Checkpoint::new(m.model.clone(), TrainConfig::default(), 0, Metrics { loss: 0.0, dev_em: None }).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model;
    let cfg = DecodeConfig { penalty: m.penalty, ..Default::default() };
    let (r0, o0) = evaluate(&m.model, &c.test, &cfg, Execution::Parallel).unwrap();
    let (r1, o1) = evaluate(&loaded, &c.test, &cfg, Execution::Sequential).unwrap();
    let same_outputs = o0.iter().zip(&o1).all(|(a, b)| a.decoded == b.decoded) && o0.len() == o1.len();
    let same_weights = m.model.params().ids().all(|id| {
        let (a, b) = (m.model.params().get(id), loaded.params().get(id));
        a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    outcome(
        bad_trees == 0 && loaders_ok && same_outputs && same_weights && r0 == r1,
        format!(
            "{} of 1000 random trees round-trip; TOP {} loaded / {} skipped, BIO {} loaded / {} repaired; checkpoint reload {} on {} test decodes",
            1000 - bad_trees,
            top.examples.len(),
            top.skipped.len(),
            bio.examples.len(),
            bio.repairs,
            if same_outputs && same_weights && r0 == r1 { "bitwise identical" } else { "DIFFERS" },
            o1.len()
        ),
    )
}

fn main() -> ExitCode {
    let total = Instant::now();
    let mut results: Vec<(u8, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: u8, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {id} [{}] {name}: {} ({secs:.0}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o, secs));
    };

    run(3, "gradient check", &mut c3_gradcheck);
    run(4, "oracle math", &mut c4_oracle_math);
    let c = corpus();
    let main_model = train_main(&c);
    run(1, "synthetic exact match", &mut || c1_exact_match(&c, &main_model));
    run(2, "step-count law", &mut || c2_step_law(&c, &main_model));
    run(7, "termination monotonicity", &mut || c7_penalty_monotone(&c, &main_model));
    run(8, "round trips, loaders, checkpoint", &mut || c8_round_trips(&c, &main_model));
    run(5, "tau ordering", &mut || c5_tau_ordering(&c));
    run(6, "copy and input-src transfer", &mut c6_transfer);

    results.sort_by_key(|r| r.0);
    println!("\nsummary ({:.0}s total)", total.elapsed().as_secs_f64());
    for (id, name, o, _) in &results {
        println!("  {} criterion {id}: {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    if results.iter().all(|r| r.2.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
