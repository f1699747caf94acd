//! `fasda`: the command-line pipeline for few-shot adversarial text-strip
//! domain adaptation.
//!
//! One subcommand per pipeline stage: render datasets, pretrain the
//! recognizer on the source domain, adapt it against the pair
//! discriminator, finetune baselines, evaluate, and dump diagnostics.
//! Every run is a deterministic function of its inputs and seed, and every
//! run writes its resolved configuration next to its outputs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 checkpoint error, 1 internal failure.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fasda_core::checkpoint::{load_checkpoint, peek_precision, save_checkpoint, CheckpointError};
use fasda_core::config::ConfigError;
use fasda_core::data::{
    generate_dataset, load_dataset, save_dataset, validate_labels, DataError, Dataset, DomainSpec,
    GenSpec, Image, Sample,
};
use fasda_core::decoder::decode_greedy;
use fasda_core::encoder::{encode, image_tensor};
use fasda_core::eval::{check_geometry, evaluate, EvalError};
use fasda_core::pairs::{extract_char_features, sample_pairs};
use fasda_core::scalar::wide;
use fasda_core::{CharFeature, Config, FinetuneMode, Precision, Scalar, TrainError, Trainer};

// ---- errors -----------------------------------------------------------------

struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Display) -> CliError {
        CliError {
            code: 2,
            msg: msg.to_string(),
        }
    }

    fn data(msg: impl Display) -> CliError {
        CliError {
            code: 3,
            msg: msg.to_string(),
        }
    }

    fn ckpt(msg: impl Display) -> CliError {
        CliError {
            code: 4,
            msg: msg.to_string(),
        }
    }

    fn internal(msg: impl Display) -> CliError {
        CliError {
            code: 1,
            msg: msg.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::ckpt(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::data(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Checkpoint(c) => CliError::ckpt(c),
            TrainError::Config(c) => CliError::usage(c),
            TrainError::Empty { .. } => CliError::data(e),
            other => CliError::internal(other),
        }
    }
}

// ---- argument grammar -------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "fasda",
    version,
    about = "Few-shot adversarial domain adaptation for text-strip recognition"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic labeled strip dataset into a directory.
    GenData(GenDataArgs),
    /// Pretrain the recognizer on a labeled source dataset.
    TrainSource(TrainSourceArgs),
    /// Adapt a pretrained recognizer to a target domain adversarially.
    Adapt(AdaptArgs),
    /// Finetune a pretrained recognizer on target (or mixed) batches.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a dataset and write a per-sample report.
    Eval(EvalArgs),
    /// Dump the pair groups built from one source and one target strip.
    InspectPairs(InspectPairsArgs),
    /// Dump the attention heatmap for one sample as PGM + TSV.
    DumpAttention(DumpAttentionArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples to render.
    #[arg(long)]
    n: usize,
    /// Domain name recorded in the dataset metadata.
    #[arg(long, default_value = "clean")]
    domain: String,
    /// Symbols labels are drawn from (defaults to the model default).
    #[arg(long)]
    alphabet: Option<String>,
    /// Strip height in pixels (defaults to the model default).
    #[arg(long)]
    height: Option<usize>,
    /// Glyph cell width in pixels (defaults to the model default).
    #[arg(long)]
    glyph_width: Option<usize>,
    /// Shortest label length.
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    /// Longest label length (defaults to the model default).
    #[arg(long)]
    max_len: Option<usize>,
    /// Generation seed; same seed, same bytes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Max absolute horizontal shear factor.
    #[arg(long, default_value_t = 0.0)]
    shear: f64,
    /// Max absolute vertical jitter in pixels.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Per-pixel Gaussian noise sigma on the [0,1] scale.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Swap ink and background polarity.
    #[arg(long)]
    invert: bool,
}

#[derive(Args)]
struct TrainSourceArgs {
    /// Labeled source dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Configuration file of `key = value` lines applied over defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual `key=value` overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct AdaptArgs {
    /// Labeled source dataset directory.
    #[arg(long)]
    source: PathBuf,
    /// Labeled target dataset directory (the few-shot set).
    #[arg(long)]
    target: PathBuf,
    /// Input checkpoint (usually from train-source).
    #[arg(long)]
    ckpt: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Configuration file applied over the checkpoint's configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual `key=value` overrides, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Weight of the confusion loss in the recognizer update.
    #[arg(long)]
    gamma: Option<f64>,
    /// Inclusive-attention self weight in [0,1]; 1 disables widening.
    #[arg(long)]
    lambda: Option<f64>,
    /// Inclusive-attention neighborhood radius.
    #[arg(long)]
    eta: Option<usize>,
    /// Disable inclusive attention entirely.
    #[arg(long)]
    no_ia: bool,
    /// Pair feature: `cr` (attention context) or `cr+` (decoder state).
    #[arg(long)]
    feature: Option<String>,
    /// Drop the adversarial term; recognizer updates use only the
    /// recognition loss (discriminator still trains and logs).
    #[arg(long)]
    att_only: bool,
    /// Number of adversarial rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Discriminator warmup steps before the rounds.
    #[arg(long)]
    mcd_steps: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// `t` for target-only batches, `s+t` for ratio-mixed batches.
    #[arg(long)]
    mode: String,
    /// Labeled source dataset directory (required for mode s+t).
    #[arg(long)]
    source: Option<PathBuf>,
    /// Labeled target dataset directory.
    #[arg(long)]
    target: PathBuf,
    /// Input checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Individual `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Number of finetuning steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output report path (TSV, one row per sample).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; the report is identical for any value.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct InspectPairsArgs {
    /// Checkpoint providing the feature extractor.
    #[arg(long)]
    ckpt: PathBuf,
    /// Source dataset directory.
    #[arg(long)]
    source: PathBuf,
    /// Target dataset directory.
    #[arg(long)]
    target: PathBuf,
    /// Index of the source strip.
    #[arg(long, default_value_t = 0)]
    source_sample: usize,
    /// Index of the target strip.
    #[arg(long, default_value_t = 0)]
    target_sample: usize,
}

#[derive(Args)]
struct DumpAttentionArgs {
    /// Checkpoint providing the recognizer.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory holding the sample.
    #[arg(long)]
    data: PathBuf,
    /// Index of the sample to decode.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Output directory for attention.pgm and attention.tsv.
    #[arg(long)]
    out: PathBuf,
}

// ---- shared helpers ---------------------------------------------------------

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

fn apply_sets(cfg: &mut Config, sets: &[String]) -> Result<(), CliError> {
    for kv in sets {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(CliError::usage(format!(
                "--set expects KEY=VALUE, got `{kv}`"
            )));
        };
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(())
}

fn parse_feature(s: &str) -> Result<CharFeature, CliError> {
    match s {
        "cr" => Ok(CharFeature::Context),
        "cr+" => Ok(CharFeature::ContextPlus),
        other => other
            .parse()
            .map_err(|_| CliError::usage(format!("expected feature cr|cr+, got `{other}`"))),
    }
}

fn parse_mode(s: &str) -> Result<FinetuneMode, CliError> {
    match s {
        "t" => Ok(FinetuneMode::TargetOnly),
        "s+t" => Ok(FinetuneMode::SourcePlusTarget),
        other => Err(CliError::usage(format!(
            "expected mode t|s+t, got `{other}`"
        ))),
    }
}

/// Load a dataset and verify it matches the model geometry and alphabet.
fn load_checked(dir: &Path, cfg: &Config) -> Result<Dataset, CliError> {
    let ds = load_dataset(dir)?;
    check_geometry(&cfg.model, &ds)?;
    validate_labels(&ds, &cfg.model.alphabet)?;
    Ok(ds)
}

fn pick_sample<'d>(ds: &'d Dataset, index: usize, what: &str) -> Result<&'d Sample, CliError> {
    ds.samples.get(index).ok_or_else(|| {
        CliError::usage(format!(
            "{what} sample index {index} out of range (dataset has {})",
            ds.samples.len()
        ))
    })
}

/// Checkpoint, resolved config, and loss log, side by side.
fn write_run_artifacts<F: Scalar>(out: &Path, tr: &Trainer<F>) -> Result<(), CliError> {
    save_checkpoint(out, &tr.to_checkpoint())?;
    write_text(&sibling(out, ".config"), &tr.cfg.render())?;
    write_text(&sibling(out, ".log.tsv"), &tr.log.to_tsv())?;
    Ok(())
}

fn gen_threads() -> Result<usize, CliError> {
    match std::env::var("FASDA_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
            CliError::usage(format!(
                "FASDA_THREADS must be a positive integer, got `{v}`"
            ))
        }),
        Err(_) => Ok(1),
    }
}

// ---- subcommand bodies ------------------------------------------------------

fn run_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let defaults = Config::default().model;
    let spec = GenSpec {
        domain_name: a.domain.clone(),
        alphabet: a.alphabet.clone().unwrap_or(defaults.alphabet),
        height: a.height.unwrap_or(defaults.height),
        glyph_width: a.glyph_width.unwrap_or(defaults.glyph_width),
        min_len: a.min_len,
        max_len: a.max_len.unwrap_or(defaults.max_len),
        count: a.n,
        seed: a.seed,
        domain: DomainSpec {
            shear: a.shear,
            jitter: a.jitter,
            noise_sigma: a.noise,
            invert: a.invert,
        },
        threads: gen_threads()?,
    };
    let ds = generate_dataset(&spec)?;
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} samples ({}) to {}",
        ds.len(),
        a.domain,
        a.out.display()
    );
    Ok(())
}

fn run_train_source(a: &TrainSourceArgs) -> Result<(), CliError> {
    let mut cfg = Config::default();
    if let Some(p) = &a.config {
        cfg.apply_text(&read_text(p)?)?;
    }
    apply_sets(&mut cfg, &a.set)?;
    cfg.validate()?;
    match cfg.model.precision {
        Precision::Single => train_source_run::<f32>(a, cfg),
        Precision::Double => train_source_run::<f64>(a, cfg),
    }
}

fn train_source_run<F: Scalar>(a: &TrainSourceArgs, cfg: Config) -> Result<(), CliError> {
    let source = load_checked(&a.data, &cfg)?;
    let steps = cfg.train.pretrain_steps;
    let mut tr = Trainer::<F>::new(cfg)?;
    tr.pretrain_attention(&source.samples, steps)?;
    write_run_artifacts(&a.out, &tr)?;
    println!(
        "pretrained {} steps on {} samples -> {}",
        steps,
        source.len(),
        a.out.display()
    );
    Ok(())
}

fn run_adapt(a: &AdaptArgs) -> Result<(), CliError> {
    match peek_precision(&a.ckpt)? {
        Precision::Single => adapt_run::<f32>(a),
        Precision::Double => adapt_run::<f64>(a),
    }
}

fn adapt_run<F: Scalar>(a: &AdaptArgs) -> Result<(), CliError> {
    let mut ckpt = load_checkpoint::<F>(&a.ckpt)?;
    let mut cfg = Config::parse(&ckpt.config_text)?;
    if let Some(p) = &a.config {
        cfg.apply_text(&read_text(p)?)?;
    }
    apply_sets(&mut cfg, &a.set)?;
    if let Some(g) = a.gamma {
        cfg.train.gamma = g;
    }
    if let Some(l) = a.lambda {
        cfg.model.lambda = l;
    }
    if let Some(e) = a.eta {
        cfg.model.eta = e;
    }
    if a.no_ia {
        cfg.model.ia_enabled = false;
    }
    if let Some(f) = &a.feature {
        cfg.train.feature = parse_feature(f)?;
    }
    if a.att_only {
        cfg.train.att_only = true;
    }
    if let Some(r) = a.rounds {
        cfg.train.adversarial_rounds = r;
    }
    if let Some(m) = a.mcd_steps {
        cfg.train.mcd_pretrain_steps = m;
    }
    cfg.validate()?;
    ckpt.config_text = cfg.render();

    let mut tr = Trainer::<F>::from_checkpoint(&ckpt)?;
    let source = load_checked(&a.source, &tr.cfg)?;
    let target = load_checked(&a.target, &tr.cfg)?;
    let warmup = tr.cfg.train.mcd_pretrain_steps;
    let rounds = tr.cfg.train.adversarial_rounds;
    tr.begin_adam_phase();
    tr.pretrain_mcd(&source.samples, &target.samples, warmup)?;
    tr.adversarial_rounds(&source.samples, &target.samples, rounds)?;
    write_run_artifacts(&a.out, &tr)?;
    println!(
        "adapted {} rounds ({} warmup steps) -> {}",
        rounds,
        warmup,
        a.out.display()
    );
    Ok(())
}

fn run_finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    match peek_precision(&a.ckpt)? {
        Precision::Single => finetune_run::<f32>(a),
        Precision::Double => finetune_run::<f64>(a),
    }
}

fn finetune_run<F: Scalar>(a: &FinetuneArgs) -> Result<(), CliError> {
    let mode = parse_mode(&a.mode)?;
    let mut ckpt = load_checkpoint::<F>(&a.ckpt)?;
    let mut cfg = Config::parse(&ckpt.config_text)?;
    apply_sets(&mut cfg, &a.set)?;
    if let Some(s) = a.steps {
        cfg.train.finetune_steps = s;
    }
    cfg.validate()?;
    ckpt.config_text = cfg.render();

    let mut tr = Trainer::<F>::from_checkpoint(&ckpt)?;
    let target = load_checked(&a.target, &tr.cfg)?;
    let source = match (&a.source, mode) {
        (Some(dir), _) => load_checked(dir, &tr.cfg)?.samples,
        (None, FinetuneMode::SourcePlusTarget) => {
            return Err(CliError::usage("--mode s+t requires --source"));
        }
        (None, FinetuneMode::TargetOnly) => Vec::new(),
    };
    let steps = tr.cfg.train.finetune_steps;
    tr.begin_adam_phase();
    tr.finetune(&source, &target.samples, mode, steps)?;
    write_run_artifacts(&a.out, &tr)?;
    println!(
        "finetuned {} steps (mode {}) -> {}",
        steps,
        a.mode,
        a.out.display()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<(), CliError> {
    match peek_precision(&a.ckpt)? {
        Precision::Single => eval_run::<f32>(a),
        Precision::Double => eval_run::<f64>(a),
    }
}

fn eval_run<F: Scalar>(a: &EvalArgs) -> Result<(), CliError> {
    if a.threads == 0 {
        return Err(CliError::usage("--threads must be at least 1"));
    }
    let ckpt = load_checkpoint::<F>(&a.ckpt)?;
    let tr = Trainer::<F>::from_checkpoint(&ckpt)?;
    let data = load_checked(&a.data, &tr.cfg)?;
    let report = evaluate(&tr.cfg.model, &tr.gen, &data, a.threads)?;
    write_text(&a.out, &report.to_tsv())?;
    write_text(&sibling(&a.out, ".config"), &tr.cfg.render())?;
    print!("{}", report.summary());
    Ok(())
}

fn run_inspect_pairs(a: &InspectPairsArgs) -> Result<(), CliError> {
    match peek_precision(&a.ckpt)? {
        Precision::Single => inspect_pairs_run::<f32>(a),
        Precision::Double => inspect_pairs_run::<f64>(a),
    }
}

fn inspect_pairs_run<F: Scalar>(a: &InspectPairsArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint::<F>(&a.ckpt)?;
    let tr = Trainer::<F>::from_checkpoint(&ckpt)?;
    let source = load_checked(&a.source, &tr.cfg)?;
    let target = load_checked(&a.target, &tr.cfg)?;
    let s = pick_sample(&source, a.source_sample, "source")?;
    let t = pick_sample(&target, a.target_sample, "target")?;

    let which = tr.cfg.train.feature;
    let (sf, _) =
        extract_char_features(&tr.cfg.model, &tr.gen, s, which).map_err(CliError::data)?;
    let (tf, _) =
        extract_char_features(&tr.cfg.model, &tr.gen, t, which).map_err(CliError::data)?;
    let batch = sample_pairs(&sf, &tf);
    let counts = batch.counts();

    println!("source\t{}\t{}", s.id, s.label);
    println!("target\t{}\t{}", t.id, t.label);
    println!(
        "counts\t{}\t{}\t{}\t{}",
        counts[0], counts[1], counts[2], counts[3]
    );
    let sc: Vec<char> = s.label.chars().collect();
    let tc: Vec<char> = t.label.chars().collect();
    for (i, &ca) in sc.iter().enumerate() {
        for (j, &cb) in sc.iter().enumerate() {
            let group = if ca == cb { 0 } else { 2 };
            println!("pair\t{group}\tsrc:{i}\tsrc:{j}\t{ca}\t{cb}");
        }
        for (j, &cb) in tc.iter().enumerate() {
            let group = if ca == cb { 1 } else { 3 };
            println!("pair\t{group}\tsrc:{i}\ttgt:{j}\t{ca}\t{cb}");
        }
    }
    Ok(())
}

fn run_dump_attention(a: &DumpAttentionArgs) -> Result<(), CliError> {
    match peek_precision(&a.ckpt)? {
        Precision::Single => dump_attention_run::<f32>(a),
        Precision::Double => dump_attention_run::<f64>(a),
    }
}

fn dump_attention_run<F: Scalar>(a: &DumpAttentionArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint::<F>(&a.ckpt)?;
    let tr = Trainer::<F>::from_checkpoint(&ckpt)?;
    let data = load_checked(&a.data, &tr.cfg)?;
    let sample = pick_sample(&data, a.sample, "data")?;

    let cfg = &tr.cfg.model;
    let features =
        encode(cfg, &tr.gen, &image_tensor(&sample.image)).map_err(CliError::internal)?;
    let out = decode_greedy(cfg, &tr.gen, &features, cfg.max_len).map_err(CliError::internal)?;
    let decoded = fasda_core::decoder::decode_label(cfg, &out.indices);

    let rows = out.alphas_inclusive.len();
    let m = features.shape()[0];
    let mut img = Image::new(rows, m);
    let mut tsv = String::new();
    for (step, alpha) in out.alphas_inclusive.iter().enumerate() {
        for (pos, &v) in alpha.iter().enumerate() {
            let w = wide(v);
            img.pixels[step * m + pos] = (w * 255.0).round().clamp(0.0, 255.0) as u8;
            tsv.push_str(&format!("{step}\t{pos}\t{w:?}\n"));
        }
    }
    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::internal(format!("{}: {e}", a.out.display())))?;
    fasda_core::data::write_pgm(&a.out.join("attention.pgm"), &img)?;
    write_text(&a.out.join("attention.tsv"), &tsv)?;
    println!("decoded\t{decoded}");
    println!(
        "wrote {rows}x{m} heatmap for {} to {}",
        sample.id,
        a.out.display()
    );
    Ok(())
}

// ---- entry ------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::GenData(a) => run_gen_data(a),
        Cmd::TrainSource(a) => run_train_source(a),
        Cmd::Adapt(a) => run_adapt(a),
        Cmd::Finetune(a) => run_finetune(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::InspectPairs(a) => run_inspect_pairs(a),
        Cmd::DumpAttention(a) => run_dump_attention(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fasda: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
