//! The `parahtr` command line: dataset generation, training, evaluation,
//! transcription and gradient checks. Every file a command writes lands
//! under `--out`.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::data::{generate_corpus, load_dataset, read_pgm, save_dataset, GenSpec, SegmentConfig, Span};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_attention, transcribe, Pipeline};
use crate::model::Model;
use crate::optim::{
    layer_suite, model_suite, run_curriculum, CurriculumRun, GradcheckConfig, GradcheckReport, LogWriter, PhaseData, Progress,
};

#[derive(Debug, Parser)]
#[command(name = "parahtr", version, about = "Paragraph handwriting recognition with implicit line segmentation")]
pub struct Cli {
    /// Seed for generation, initialization and shuffling; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic paragraph corpus with a manifest.
    Gen(GenArgs),
    /// Run the training curriculum from the config.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Print the transcription of one image.
    Transcribe(TranscribeArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Lines per paragraph, `n` or `min..max`.
    #[arg(long, default_value = "3")]
    pub lines: Span<usize>,
    #[arg(long, default_value = "4..8")]
    pub chars_per_line: Span<usize>,
    #[arg(long, default_value = "0123456789 ")]
    pub alphabet: String,
    #[arg(long, default_value_t = 2)]
    pub scale: usize,
    #[arg(long, default_value = "0..1", allow_hyphen_values = true)]
    pub jitter: Span<i64>,
    #[arg(long, default_value = "3..6", allow_hyphen_values = true)]
    pub line_gap: Span<i64>,
    #[arg(long, default_value_t = 0.0)]
    pub touch_prob: f64,
    #[arg(long, default_value_t = 2)]
    pub char_gap: usize,
    #[arg(long, default_value_t = 4)]
    pub margin: usize,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest; overrides `data.train`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation manifest; overrides `data.validation`.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Projection-profile line segmentation feeding a line model.
    Projection,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Evaluate an explicit-segmentation pipeline; the checkpoint is then
    /// used as the line recognizer.
    #[arg(long)]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Args)]
pub struct TranscribeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary PGM image.
    pub image: PathBuf,
    /// Write attention maps and an overlay to this directory (inside `--out`).
    #[arg(long)]
    pub attention: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Layer,
    Model,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::Layer)]
    pub scope: Scope,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(cli, args, stdout),
        Command::Train(args) => cmd_train(cli, args, stdout),
        Command::Eval(args) => cmd_eval(cli, args, stdout),
        Command::Transcribe(args) => cmd_transcribe(cli, args, stdout),
        Command::Gradcheck(args) => cmd_gradcheck(cli, args, stdout),
    }
}

fn print(stdout: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(stdout, "{text}").map_err(|e| Error::io("standard output", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_gen(cli: &Cli, args: &GenArgs, stdout: &mut dyn Write) -> Result<i32> {
    let spec = GenSpec {
        alphabet: args.alphabet.clone(),
        lines: args.lines,
        chars_per_line: args.chars_per_line,
        scale: args.scale,
        jitter: args.jitter,
        line_gap: args.line_gap,
        touch_prob: args.touch_prob,
        char_gap: args.char_gap,
        margin: args.margin,
        noise: args.noise,
        seed: cli.seed.unwrap_or(0),
    };
    let samples = generate_corpus(&spec, args.count)?;
    let manifest = save_dataset(&cli.out, &samples)?;
    print(stdout, &format!("wrote {} samples to {}", samples.len(), manifest.display()))?;
    Ok(0)
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

/// Manifest paths in a config are relative to the config file.
fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs, stdout: &mut dyn Write) -> Result<i32> {
    let (config, base) = load_config(cli)?;
    let alphabet = config.alphabet()?;
    let train_path = args
        .train
        .clone()
        .or_else(|| config.data.train.as_ref().map(|p| resolve(&base, p)))
        .ok_or_else(|| Error::Config("data.train: no training manifest configured".into()))?;
    let train = load_dataset(&train_path, Some(&alphabet))?;
    let validation_path = args.validation.clone().or_else(|| config.data.validation.as_ref().map(|p| resolve(&base, p)));
    let validation = match &validation_path {
        Some(p) => load_dataset(p, Some(&alphabet))?,
        None => Vec::new(),
    };
    let mut data = Vec::with_capacity(config.phases.len());
    for phase in &config.phases {
        let (samples, source) = match &phase.manifest {
            Some(p) => {
                let path = resolve(&base, p);
                (load_dataset(&path, Some(&alphabet))?, path)
            }
            None => (train.clone(), train_path.clone()),
        };
        data.push(PhaseData::for_phase(
            phase,
            &samples,
            &validation,
            &alphabet,
            config.line_join,
            config.data.crop_margin,
            config.data.validation_slice,
            &source,
        )?);
    }
    let (mut model, start) = match &args.resume {
        Some(path) => Model::load(path)?,
        None => (Model::new(&config)?, Progress::default()),
    };
    create_dir(&cli.out)?;
    let log_path = cli.out.join("train.log");
    let fresh = fs::metadata(&log_path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = LogWriter::new(file, fresh).map_err(|e| Error::io(&log_path, e))?;
    let run = CurriculumRun {
        phases: &config.phases,
        data: &data,
        optimizer: &config.optimizer,
        seed: config.seed,
        start,
        paragraph_steps: config.attention.steps,
        checkpoint_dir: Some(&cli.out),
    };
    let summaries = run_curriculum(&mut model, &run, &mut log)?;
    for s in &summaries {
        print(stdout, &s.log_line())?;
    }
    print(stdout, &format!("checkpoint {}", cli.out.join("model.ckpt").display()))?;
    Ok(0)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs, stdout: &mut dyn Write) -> Result<i32> {
    let (model, _) = Model::load(&args.checkpoint)?;
    let samples = load_dataset(&args.manifest, Some(model.alphabet()))?;
    let join = model.config().line_join;
    let (pipeline, name) = match args.baseline {
        Some(Baseline::Projection) => {
            (Pipeline::Projection(SegmentConfig::scaled(model.config().data.scale)), "eval-projection.tsv")
        }
        None => (Pipeline::Model, "eval.tsv"),
    };
    let report = evaluate(&model, &samples, pipeline, join);
    create_dir(&cli.out)?;
    let path = cli.out.join(name);
    fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
    print(stdout, &report.summary())?;
    Ok(0)
}

fn cmd_transcribe(cli: &Cli, args: &TranscribeArgs, stdout: &mut dyn Write) -> Result<i32> {
    let (model, _) = Model::load(&args.checkpoint)?;
    let image = read_pgm(&args.image)?;
    let (text, attention) = transcribe(&model, &image)?;
    print(stdout, &text)?;
    if let Some(dir) = &args.attention {
        let map = attention.ok_or_else(|| {
            Error::Config("--attention needs a checkpoint in attention-collapse mode".into())
        })?;
        let dir = cli.out.join(dir);
        export_attention(&image, &map, model.downsampling(), &dir)?;
    }
    Ok(0)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = GradcheckConfig { seed: cli.seed.unwrap_or(0), ..GradcheckConfig::default() };
    let cases = match args.scope {
        Scope::Layer => layer_suite(&cfg)?,
        Scope::Model => model_suite(&cfg)?,
    };
    let mut report = GradcheckReport::default();
    for (name, r) in cases {
        report.merge(&name, r);
    }
    create_dir(&cli.out)?;
    let path = cli.out.join("gradcheck.tsv");
    fs::write(&path, report.to_string()).map_err(|e| Error::io(&path, e))?;
    write!(stdout, "{report}").map_err(|e| Error::io("standard output", e))?;
    let threshold = args.threshold;
    let offenders = report.offenders(threshold);
    if offenders.is_empty() {
        print(stdout, &format!("ok: max relative error {:.3e} < {threshold:e}", report.max_error()))?;
        Ok(0)
    } else {
        let names: Vec<&str> = offenders.iter().map(|g| g.group.as_str()).collect();
        print(stdout, &format!("FAILED: {} over {threshold:e}: {}", names.len(), names.join(", ")))?;
        Ok(1)
    }
}
