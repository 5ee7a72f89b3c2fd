use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use insertion_parser::corpus::{build_vocab, generate_synthetic, load_bio, load_jsonl, load_top_tsv, write_jsonl, Example, GrammarSpec, LoadReport};
use insertion_parser::decode_eval::{decode, evaluate, DecodeConfig, DecodeMode};
use insertion_parser::exec::Execution;
use insertion_parser::model::{Model, ModelConfig};
use insertion_parser::oracle::Weighting;
use insertion_parser::parse_ir::{SourceQuery, TargetToken};
use insertion_parser::training::{fit, gradcheck, Checkpoint, FitOptions, GradcheckTarget, TrainConfig};

#[derive(Parser)]
#[command(name = "insertion-parser", version, about = "Insertion-based semantic parsing with pointer and copy mechanisms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a synthetic corpus as JSON lines.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Parse one query.
    Parse(ParseArgs),
    /// Finite-difference check of the loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Grammar specification (JSON); the built-in grammar when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Top,
    Bio,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightingKind {
    Tree,
    Uniform,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Scratch,
    InputSrc,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Scratch => DecodeMode::Scratch,
            ModeArg::InputSrc => DecodeMode::InputSrc,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Input format; guessed from the extension when omitted (.tsv top, .bio bio, else jsonl).
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_enum, default_value = "scratch")]
    mode: ModeArg,
    /// Subtracted from the no-insertion log-probability.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    penalty: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    max_steps: u64,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig { mode: self.mode.into(), penalty: self.penalty, max_steps: self.max_steps as usize, max_len: self.max_len }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Dev set for periodic EM.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    /// Training config as `key = value` lines; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines metrics stream.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// `input-src` trains on hypotheses that keep every source pointer.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingKind>,
    #[arg(long, value_parser = positive)]
    tau: Option<f64>,
    #[arg(long, value_enum, default_value = "on")]
    copy: Switch,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = positive)]
    lr_factor: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 4)]
    dec_layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Whitespace-tokenized query.
    query: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradTarget {
    Linear,
    Full,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "full")]
    target: GradTarget,
    /// Model width for the full-stack check.
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a finite value >= 0".into())
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a finite value > 0".into())
    }
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn load(args: &DataArgs) -> Res<LoadReport> {
    load_path(&args.data, args.format)
}

fn load_path(path: &Path, format: Option<Format>) -> Res<LoadReport> {
    let format = format.unwrap_or(match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => Format::Top,
        Some("bio") => Format::Bio,
        _ => Format::Jsonl,
    });
    let report = match format {
        Format::Jsonl => load_jsonl(path)?,
        Format::Top => load_top_tsv(path)?,
        Format::Bio => load_bio(path)?,
    };
    for s in &report.skipped {
        eprintln!("{}:{}: skipped ({})", path.display(), s.line, s.category);
    }
    if report.examples.is_empty() {
        return Err(format!("{}: no usable examples", path.display()).into());
    }
    Ok(report)
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn print(value: serde_json::Value) -> Res<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Res<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_str::<GrammarSpec>(&std::fs::read_to_string(p)?)?,
        None => GrammarSpec::default(),
    };
    let examples = generate_synthetic(&spec, a.count, a.seed)?;
    match &a.out {
        Some(p) => write_jsonl(std::io::BufWriter::new(std::fs::File::create(p)?), &examples)?,
        None => write_jsonl(std::io::stdout().lock(), &examples)?,
    }
    Ok(())
}

fn train(a: TrainArgs) -> Res<()> {
    let train = load(&a.data)?.examples;
    let dev: Vec<Example> = match &a.dev {
        Some(p) => load_path(p, None)?.examples,
        None => Vec::new(),
    };
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_kv(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.input_src_training = m == ModeArg::InputSrc;
    }
    match (a.weighting, a.tau) {
        (Some(WeightingKind::Uniform), Some(_)) => return Err("--tau applies to tree weighting only".into()),
        (Some(WeightingKind::Uniform), None) => cfg.weighting = Weighting::Uniform,
        (Some(WeightingKind::Tree), tau) => cfg.weighting = Weighting::Tree { tau: tau.unwrap_or(1.0) },
        (None, Some(tau)) => cfg.weighting = Weighting::Tree { tau },
        (None, None) => {}
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(seed, max_steps, batch_size, lr_factor, warmup_steps, eval_every, checkpoint_every);
    cfg.validate()?;
    let mc = ModelConfig {
        d_enc: a.d,
        d_dec: a.d,
        enc_layers: a.enc_layers,
        dec_layers: a.dec_layers,
        heads: a.heads,
        dropout: a.dropout,
        copy_enabled: a.copy == Switch::On,
        max_len: a.max_len,
        seed: cfg.seed,
        ..Default::default()
    };
    let model = Model::new(mc, build_vocab(&train))?;
    let mut metrics = match &a.metrics {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let opts = FitOptions {
        exec: exec(a.sequential),
        metrics: metrics.as_mut().map(|w| w as &mut dyn std::io::Write),
        checkpoint_path: Some(a.out.clone()),
        ..Default::default()
    };
    let trained = fit(model, &train, &dev, &cfg, opts)?;
    trained.checkpoint.save(&a.out)?;
    print(json!({
        "checkpoint": a.out,
        "steps": trained.checkpoint.step,
        "final_loss": trained.checkpoint.metrics.loss,
        "dev_em": trained.checkpoint.metrics.dev_em,
        "train_examples": train.len(),
        "parameters": trained.checkpoint.model.params().element_count(),
    }))
}

fn eval(a: EvalArgs) -> Res<()> {
    let data = load(&a.data)?.examples;
    let ck = Checkpoint::load(&a.ckpt)?;
    let (report, _) = evaluate(&ck.model, &data, &a.decode.config(), exec(a.sequential))?;
    print(serde_json::to_value(report)?)
}

fn render_with_words(tokens: &[TargetToken], query: &SourceQuery) -> String {
    let words = query.tokens();
    tokens
        .iter()
        .filter(|t| !matches!(t, TargetToken::Bos | TargetToken::Eos))
        .map(|t| match t {
            TargetToken::Pointer(i) => words.get(*i).cloned().unwrap_or_else(|| t.to_string()),
            other => other.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse(a: ParseArgs) -> Res<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let query = SourceQuery::from_text(&a.query)?;
    let out = decode(&ck.model, &query, &a.decode.config())?;
    print(json!({
        "parse": render_with_words(out.sequence.tokens(), &query),
        "sequence": out.sequence.render(),
        "valid": out.valid,
        "steps": out.stats.steps_used,
        "tokens_per_step": out.stats.tokens_per_step,
        "terminated": out.stats.terminated,
    }))
}

fn gradcheck_cmd(a: GradcheckArgs) -> Res<bool> {
    let target = match a.target {
        GradTarget::Linear => GradcheckTarget::LinearToy,
        GradTarget::Full => GradcheckTarget::FullStack { d: a.d },
    };
    let mut errors = Vec::new();
    for seed in a.seed..a.seed + a.seeds.max(1) {
        errors.push(gradcheck(target, seed, a.eps)?);
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    let pass = worst < a.tolerance;
    print(json!({ "max_rel_error": worst, "per_seed": errors, "tolerance": a.tolerance, "pass": pass }))?;
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Parse(a) => parse(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
