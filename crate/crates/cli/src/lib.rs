//! Command-line front end: training, evaluation, verification, inspection
//! and synthetic data generation.

pub mod config;
pub mod error;
pub mod manifest;
pub mod runner;
pub mod verify;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hyfuse_core::data::{generate_synthetic, SyntheticSpec, SyntheticTask};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult, EXIT_OK, EXIT_USAGE};
use crate::manifest::RunManifest;
use crate::runner::{Inputs, TRACE_FILE};
use crate::verify::{run_suite, VerifyOptions, SUITES};

/// Environment variable consulted for the output directory when neither
/// `--out` nor `output_dir` is given.
pub const OUTPUT_DIR_ENV: &str = "MKG_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "hyfuse", version, about = "Hybrid-fusion multimodal knowledge graph completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and report metrics on the evaluation split
    Train(TrainArgs),
    /// Evaluate a saved checkpoint
    Eval(EvalArgs),
    /// Run the numerical self-checks
    Verify(VerifyArgs),
    /// Print the parameter layout, or a fusion trace with --trace
    Inspect(InspectArgs),
    /// Write a synthetic dataset
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// link, re or ner
    #[arg(long)]
    task: Option<String>,
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Train on k examples per class
    #[arg(long = "k-shot")]
    k_shot: Option<usize>,
    /// Number of seeds to average
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "entity-epochs")]
    entity_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Fusion depths; several values run a sweep
    #[arg(long = "lm-layers", value_delimiter = ',')]
    lm_layers: Vec<usize>,
    /// Ablations (none, no_pgi, no_caf, independent); several values run a sweep
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, valid or test
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run only the named suite (repeatable)
    #[arg(long)]
    only: Vec<String>,
    /// Inject a known fault; `w3-grad` corrupts the fusion FFN gradient
    #[arg(long)]
    mutate: Option<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training example to trace
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Dump attention, gates and similarity matrices for one example
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// link, re or ner
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    triples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    examples: Option<usize>,
}

/// Defaults, then the config file, then flags.
fn base_config(c: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    if let Some(t) = &c.task {
        cfg.set("task", t)?;
    }
    if let Some(d) = &c.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &c.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// `--out`, else `output_dir`, else `$MKG_OUTPUT_DIR`, else `runs`.
fn resolve_output(cfg: &mut RunConfig) -> PathBuf {
    let dir = cfg
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    cfg.output_dir = Some(dir.clone());
    dir
}

fn start_run(command: &str, cfg: &mut RunConfig) -> CliResult<(Inputs, PathBuf)> {
    cfg.validate()?;
    let out = resolve_output(cfg);
    let inputs = Inputs::load(cfg)?;
    RunManifest::new(command, cfg, inputs.paths().to_vec(), &out).write()?;
    Ok((inputs, out))
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(k) = a.k_shot {
        cfg.train.k_shot = Some(k);
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(e) = a.entity_epochs {
        cfg.train.entity_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let [l] = a.lm_layers[..] {
        cfg.model.fusion_layers = l;
    }
    if let [ab] = &a.ablate[..] {
        cfg.set("ablation", ab)?;
    }
    let sweep = a.lm_layers.len() > 1 || a.ablate.len() > 1;
    let (inputs, out) = start_run("train", &mut cfg)?;
    if !sweep {
        let report = runner::train_seeds(&cfg, &inputs, &out)?;
        print!("{}", report.to_kv());
        return Ok(());
    }
    let layers = if a.lm_layers.is_empty() { vec![cfg.model.fusion_layers] } else { a.lm_layers };
    let ablations = if a.ablate.is_empty() { vec![cfg.model.ablation.as_str().to_string()] } else { a.ablate };
    let mut variants = Vec::new();
    for &l in &layers {
        for ab in &ablations {
            let mut v = cfg.clone();
            v.model.fusion_layers = l;
            v.set("ablation", ab)?;
            v.validate()?;
            variants.push(v);
        }
    }
    runner::train_sweep(&inputs, &out, &variants)?;
    let table = out.join(runner::SWEEP_FILE);
    print!("{}", fs::read_to_string(&table).map_err(|e| io_err(&table, e))?);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    if let Some(s) = &a.split {
        cfg.set("eval_split", s)?;
    }
    let (inputs, out) = start_run("eval", &mut cfg)?;
    let report = runner::eval_checkpoint(&cfg, &inputs, &a.checkpoint, &out)?;
    print!("{}", report.to_kv());
    Ok(())
}

fn verify(a: VerifyArgs) -> CliResult<()> {
    let opts = VerifyOptions {
        corrupt_w3_grad: match a.mutate.as_deref() {
            None => false,
            Some("w3-grad") => true,
            Some(other) => return Err(CliError::Usage(format!("unknown mutation `{other}` (expected w3-grad)"))),
        },
    };
    for name in &a.only {
        if !SUITES.contains(&name.as_str()) {
            return Err(CliError::Usage(format!("unknown suite `{name}` (expected one of {})", SUITES.join(", "))));
        }
    }
    let selected: Vec<&str> = if a.only.is_empty() {
        SUITES.to_vec()
    } else {
        SUITES.iter().copied().filter(|s| a.only.iter().any(|o| o == s)).collect()
    };
    let mut failed = Vec::new();
    for name in selected {
        let report = run_suite(name, &opts).expect("suite names are checked above");
        println!("{report}");
        if !report.passed() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

fn inspect(a: InspectArgs) -> CliResult<()> {
    let mut cfg = base_config(&a.common)?;
    let (inputs, out) = start_run("inspect", &mut cfg)?;
    if a.trace {
        let text = runner::trace_example(&cfg, &inputs, a.checkpoint.as_deref(), a.index)?;
        let path = out.join(TRACE_FILE);
        fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
        print!("{text}");
    } else {
        print!("{}", runner::describe_model(&cfg, &inputs)?);
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let task = SyntheticTask::parse(&a.task).map_err(|e| CliError::Usage(e.to_string()))?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        entities: a.entities.unwrap_or(d.entities),
        relations: a.relations.unwrap_or(d.relations),
        triples: a.triples.unwrap_or(d.triples),
        classes: a.classes.unwrap_or(d.classes),
        examples: a.examples.unwrap_or(d.examples),
        image: d.image,
    };
    let written = generate_synthetic(task, a.seed, &spec, &a.out)?;
    for p in written.iter().filter(|p| p.extension().is_some_and(|e| e == "tsv")) {
        println!("{}", p.display());
    }
    log::info!("wrote {} files under {}", written.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
        Command::Inspect(a) => inspect(a),
        Command::Generate(a) => generate(a),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
