//! `fewlora` command-line harness.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fewlora::bench::{
    ablation_rows_to_string, load_bundle, make_task, mean_row, pretrain, read_run_rows, run_method, run_rows_to_string,
    save_bundle, summarize, zero_shot_report, AblationGridSpec, FinetuneSettings, GridBlock, Method, PretrainSettings,
    RunReport,
};
use fewlora::data::{gen_synthetic, Dataset, SyntheticDatasetSpec};
use fewlora::model::save_checkpoint;
use fewlora::{EncoderChoice, LayerSpan, MatrixGroup};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "fewlora", version, about = "Few-shot low-rank adaptation of a desk-scale dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image-caption dataset.
    Gen(GenArgs),
    /// Contrastively pretrain a model on a dataset's caption pairs.
    Pretrain(PretrainArgs),
    /// Evaluate template prompts without training.
    Zeroshot(ZeroshotArgs),
    /// Few-shot training with one method over several seeds.
    Finetune(FinetuneArgs),
    /// Run the LoRA placement grid.
    Ablate(AblateArgs),
    /// Summarize run CSVs into a method by shots table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON dataset spec; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    pretrain_images_per_combo: Option<usize>,
    #[arg(long)]
    pixel_noise: Option<f64>,
    #[arg(long)]
    task_shift: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Shots of the support split whose complement is evaluated.
    #[arg(long, default_value_t = 4)]
    shots: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// CSV output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Fixed iteration count instead of 500 per shot.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    /// Attention matrices to adapt, e.g. `qkv`.
    #[arg(long)]
    matrices: Option<String>,
    /// bottom, up or all.
    #[arg(long)]
    span: Option<String>,
    /// vision, text or both.
    #[arg(long)]
    encoders: Option<String>,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// lora, soft-prompt, adapter or bias-only.
    #[arg(long, default_value = "lora")]
    method: String,
    /// JSON fine-tuning settings; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for runs.csv, training histories and LoRA checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// JSON with optional `grid` and `finetune` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the grid by the cross product of these lists.
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    spans: Option<Vec<String>>,
    #[arg(long = "encoder-choices", value_delimiter = ',')]
    encoder_choices: Option<Vec<String>>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Record wall-clock seconds (makes the CSV run-dependent).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or ablation CSV files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the table as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateConfig {
    grid: AblationGridSpec,
    finetune: FinetuneSettings,
}

enum Failure {
    Usage(String),
    Runtime(fewlora::Error),
}

impl From<fewlora::Error> for Failure {
    fn from(e: fewlora::Error) -> Self {
        match e {
            fewlora::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Runtime(with_path(p, e)))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn with_path(path: &Path, e: std::io::Error) -> fewlora::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into()
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Runtime(with_path(path, std::io::ErrorKind::NotFound.into())))
    }
}

fn parse<T: std::str::FromStr<Err = fewlora::Error>>(s: &str) -> CliResult<T> {
    s.parse().map_err(Failure::from)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let mut spec: SyntheticDatasetSpec = read_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.images_per_class {
        spec.images_per_class = v;
    }
    if let Some(v) = a.pretrain_images_per_combo {
        spec.pretrain_images_per_combo = v;
    }
    if let Some(v) = a.pixel_noise {
        spec.pixel_noise = v;
    }
    if let Some(v) = a.task_shift {
        spec.task_shift = v;
    }
    let dataset = gen_synthetic(&spec)?;
    dataset.save(&a.out)?;
    eprintln!(
        "wrote {} images ({} few-shot, {} pretraining) for {} classes to {}",
        dataset.num_images(),
        dataset.pool.len(),
        dataset.pretrain.len(),
        dataset.class_names.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut settings: PretrainSettings = read_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        settings.pretrain.epochs = v;
    }
    if let Some(v) = a.batch_size {
        settings.pretrain.batch_size = v;
    }
    if let Some(v) = a.lr {
        settings.pretrain.lr = v;
    }
    if let Some(v) = a.seed {
        settings.pretrain.seed = v;
        settings.init_seed = v;
    }
    require_dir(&a.dataset)?;
    let dataset = Dataset::load(&a.dataset)?;
    let start = Instant::now();
    let (model, vocab, history) = pretrain(&dataset, &settings)?;
    save_bundle(&model, &vocab, &a.out)?;
    history.save_csv(&a.out.join("pretrain_log.csv"))?;
    let last = history.records.last().map_or(f64::NAN, |r| r.loss);
    eprintln!(
        "pretrained {} parameters for {} steps in {:.1}s, final loss {last:.4}, tau {:.4}",
        model.num_params(),
        history.iterations(),
        start.elapsed().as_secs_f64(),
        model.temperature_value()
    );
    Ok(())
}

fn cmd_zeroshot(a: ZeroshotArgs) -> CliResult<()> {
    require_dir(&a.checkpoint)?;
    require_dir(&a.dataset)?;
    let (model, vocab) = load_bundle(&a.checkpoint)?;
    let dataset = Dataset::load(&a.dataset)?;
    let mut rows = Vec::new();
    for &seed in &a.seeds {
        let task = make_task(&dataset, &vocab, model.config().text.max_len, a.shots, seed)?;
        rows.push(zero_shot_report(&model, &task, seed, !a.no_timing)?);
    }
    if rows.len() > 1 {
        rows.extend(mean_row(&rows));
    }
    emit(a.out.as_deref(), &run_rows_to_string(&rows)?)
}

fn apply_train_flags(settings: &mut FinetuneSettings, f: &TrainFlags) -> CliResult<()> {
    if let Some(v) = f.shots {
        settings.shots = v;
    }
    if let Some(v) = &f.seeds {
        settings.seeds = v.clone();
    }
    if f.iterations.is_some() {
        settings.train.iterations = f.iterations;
    }
    if let Some(v) = f.lr {
        settings.train.lr = v;
    }
    if let Some(v) = f.batch_size {
        settings.train.batch_size = v;
    }
    if let Some(v) = f.rank {
        settings.placement.rank = v;
    }
    if let Some(v) = f.dropout {
        settings.placement.dropout = v;
    }
    if let Some(v) = f.scale {
        settings.placement.scale = v;
    }
    if let Some(v) = &f.matrices {
        settings.placement.matrices = parse(v)?;
    }
    if let Some(v) = &f.span {
        settings.placement.span = parse(v)?;
    }
    if let Some(v) = &f.encoders {
        settings.placement.encoders = parse(v)?;
    }
    if f.no_timing {
        settings.timing = false;
    }
    settings.validate()?;
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> CliResult<()> {
    let method: Method = parse(&a.method)?;
    if method == Method::ZeroShot {
        return Err(Failure::Usage("use the zeroshot command for template evaluation".into()));
    }
    let mut settings: FinetuneSettings = read_config(a.config.as_deref())?;
    apply_train_flags(&mut settings, &a.train)?;
    require_dir(&a.checkpoint)?;
    require_dir(&a.dataset)?;
    let (model, vocab) = load_bundle(&a.checkpoint)?;
    let dataset = Dataset::load(&a.dataset)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
    }
    let mut rows: Vec<RunReport> = Vec::new();
    for &seed in &settings.seeds {
        let task = make_task(&dataset, &vocab, model.config().text.max_len, settings.shots, seed)?;
        let run = run_method(&model, &task, method, &settings, seed)?;
        eprintln!(
            "{method} seed {seed}: zero-shot {:.3} -> {:.3} after {} iterations",
            run.report.zs_acc.unwrap_or(f64::NAN),
            run.report.acc.unwrap_or(f64::NAN),
            run.report.iters
        );
        if let Some(out) = &a.out {
            run.history.save_csv(&out.join(format!("history_{method}_seed{seed}.csv")))?;
            if let Some(adapted) = &run.adapted {
                adapted.save_lora(&out.join(format!("lora_seed{seed}")))?;
                save_checkpoint(&adapted.merged_model()?, &out.join(format!("merged_seed{seed}")))?;
            }
        }
        rows.push(run.report);
    }
    if rows.len() > 1 {
        rows.extend(mean_row(&rows));
    }
    let csv = run_rows_to_string(&rows)?;
    emit(a.out.as_ref().map(|o| o.join("runs.csv")).as_deref(), &csv)?;
    if a.out.is_some() {
        print!("{csv}");
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let mut config: AblateConfig = read_config(a.config.as_deref())?;
    config.finetune.timing = a.timing;
    apply_train_flags(&mut config.finetune, &TrainFlags { no_timing: !a.timing, ..a.train.clone() })?;
    if let Some(v) = a.train.shots {
        config.grid.shots = v;
    }
    if let Some(v) = &a.train.seeds {
        config.grid.seeds = v.clone();
    }
    if a.groups.is_some() || a.ranks.is_some() || a.spans.is_some() || a.encoder_choices.is_some() {
        let groups = match &a.groups {
            Some(g) => g.iter().map(|s| parse::<MatrixGroup>(s)).collect::<CliResult<Vec<_>>>()?,
            None => vec![config.finetune.placement.matrices.clone()],
        };
        let spans = match &a.spans {
            Some(g) => g.iter().map(|s| parse::<LayerSpan>(s)).collect::<CliResult<Vec<_>>>()?,
            None => vec![LayerSpan::All],
        };
        let encoders = match &a.encoder_choices {
            Some(g) => g.iter().map(|s| parse::<EncoderChoice>(s)).collect::<CliResult<Vec<_>>>()?,
            None => vec![EncoderChoice::Both],
        };
        let ranks = a.ranks.clone().unwrap_or_else(|| vec![config.finetune.placement.rank]);
        config.grid.blocks = vec![GridBlock { groups, ranks, spans, encoders }];
    }
    config.grid.validate()?;
    if let Some(n) = a.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    require_dir(&a.checkpoint)?;
    require_dir(&a.dataset)?;
    let (model, vocab) = load_bundle(&a.checkpoint)?;
    let dataset = Dataset::load(&a.dataset)?;
    let rows = fewlora::bench::run_ablation(&model, &dataset, &vocab, &config.grid, &config.finetune)?;
    emit(a.out.as_deref(), &ablation_rows_to_string(&rows)?)
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        let file = fs::File::open(path).map_err(|e| Failure::Runtime(with_path(path, e)))?;
        rows.extend(read_run_rows(file).map_err(|e| match e {
            fewlora::Error::Parse { line, message } => {
                Failure::Runtime(fewlora::Error::Parse { line, message: format!("{}: {message}", path.display()) })
            }
            other => other.into(),
        })?);
    }
    let table = summarize(&rows);
    print!("{}", table.render());
    println!("accuracy in percent; ** best, _ second best per column; toy-scale model on synthetic data");
    if let Some(path) = &a.json {
        emit(Some(path), &(serde_json::to_string_pretty(&table).map_err(fewlora::Error::from)? + "\n"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Zeroshot(a) => cmd_zeroshot(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
