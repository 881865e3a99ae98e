//! Experiment harness: pretraining, zero-shot and few-shot runs, the
//! placement ablation grid, and report aggregation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{adapter_finetune, bias_only_finetune, soft_prompt_finetune, AdapterConfig, SoftPromptConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fewshot::{
    contrastive_pretrain, evaluate, finetune_lora, mix_seed, sample_support_set, Classifier, FewShotTask, PretrainConfig,
    TrainConfig, TrainingHistory,
};
use crate::lora::{inject, trainable_param_count, AdaptedModel, EncoderChoice, LayerSpan, MatrixGroup, PlacementConfig};
use crate::model::{load_checkpoint, save_checkpoint, EncoderConfig, ModelConfig, Vocabulary};
use crate::DualEncoderModel;

/// Shot counts accepted by the harness.
pub const SHOT_GRID: [usize; 5] = [1, 2, 4, 8, 16];

pub const RUN_HEADER: &str = "method,config,shots,seed,zs_acc,acc,trainable,total,iters,seconds";
pub const ABLATION_HEADER: &str = "method,config,shots,seed,zs_acc,acc,trainable,total,iters,seconds,group,rank,span,encoders";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroShot,
    Lora,
    SoftPrompt,
    Adapter,
    BiasOnly,
}

impl Method {
    pub const TRAINED: [Method; 4] = [Method::Lora, Method::SoftPrompt, Method::Adapter, Method::BiasOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::Lora => "lora",
            Method::SoftPrompt => "soft-prompt",
            Method::Adapter => "adapter",
            Method::BiasOnly => "bias-only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Method::ZeroShot, Method::Lora, Method::SoftPrompt, Method::Adapter, Method::BiasOnly]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (lora, soft-prompt, adapter, bias-only)")))
    }
}

/// One evaluated run, or the seed mean of several (`seed == "mean"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub config: String,
    pub shots: usize,
    pub seed: String,
    pub zs_acc: Option<f64>,
    pub acc: Option<f64>,
    pub trainable: usize,
    pub total: usize,
    pub iters: usize,
    pub seconds: f64,
}

impl RunReport {
    pub fn is_mean(&self) -> bool {
        self.seed == "mean"
    }
}

/// Seed-mean row over `rows` (which must share method, config and shots).
pub fn mean_row(rows: &[RunReport]) -> Option<RunReport> {
    let first = rows.first()?;
    let mean = |get: fn(&RunReport) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(get).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(RunReport {
        seed: "mean".into(),
        zs_acc: mean(|r| r.zs_acc),
        acc: mean(|r| r.acc),
        seconds: rows.iter().map(|r| r.seconds).sum::<f64>() / rows.len() as f64,
        ..first.clone()
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse { line: p.line(), message: e.to_string() },
        None => Error::Format(e.to_string()),
    }
}

pub fn write_rows<R: Serialize>(rows: &[R], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_rows_to_string(rows: &[RunReport]) -> Result<String> {
    let mut buf = Vec::new();
    if rows.is_empty() {
        buf.extend_from_slice(RUN_HEADER.as_bytes());
        buf.push(b'\n');
    }
    write_rows(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Reads run-report rows; extra columns such as the ablation keys are ignored.
pub fn read_run_rows(input: impl Read) -> Result<Vec<RunReport>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    for col in RUN_HEADER.split(',') {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse { line: 1, message: format!("missing column {col:?}") });
        }
    }
    let mut rows = Vec::new();
    for row in r.deserialize::<RunReport>() {
        let row = row.map_err(csv_err)?;
        for acc in [row.acc, row.zs_acc].into_iter().flatten() {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::Parse { line: rows.len() as u64 + 2, message: format!("accuracy {acc} outside [0, 1]") });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Architecture knobs layered over the toy defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { depth: 4, width: 64, heads: 4, embed_dim: 32, max_len: 16, temperature: 0.07 }
    }
}

impl ModelSettings {
    pub fn model_config(&self, dataset: &Dataset, vocab: &Vocabulary) -> ModelConfig {
        let mut c = ModelConfig::toy(vocab.len())
            .with_encoder(EncoderConfig { depth: self.depth, width: self.width, heads: self.heads }, self.embed_dim);
        c.text.max_len = self.max_len;
        c.temperature = self.temperature;
        c.vision.image_height = dataset.spec.height;
        c.vision.image_width = dataset.spec.width;
        c.vision.channels = dataset.spec.channels;
        c
    }
}

/// Contents of a pretraining config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub model: ModelSettings,
    pub pretrain: PretrainConfig,
    /// Seed of the random initialization.
    pub init_seed: u64,
}

/// Model checkpoint plus the vocabulary it was trained with.
pub fn save_bundle(model: &DualEncoderModel<f32>, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    save_checkpoint(model, dir)?;
    fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(vocab)? + "\n")?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(DualEncoderModel<f32>, Vocabulary)> {
    let model = load_checkpoint::<f32>(dir)?;
    let vocab: Vocabulary = serde_json::from_str(&fs::read_to_string(dir.join("vocab.json"))?)
        .map_err(|e| Error::Format(format!("unreadable vocab.json: {e}")))?;
    if vocab.len() != model.config().text.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} words, checkpoint expects {}",
            vocab.len(),
            model.config().text.vocab_size
        )));
    }
    Ok((model, vocab))
}

/// Builds and contrastively pretrains a model on the dataset's pretraining pairs.
pub fn pretrain(dataset: &Dataset, settings: &PretrainSettings) -> Result<(DualEncoderModel<f32>, Vocabulary, TrainingHistory)> {
    let vocab = dataset.vocabulary();
    let config = settings.model.model_config(dataset, &vocab);
    let mut model = DualEncoderModel::new(config, settings.init_seed)?;
    let pairs = dataset.paired_data(&vocab, config.text.max_len)?;
    let history = contrastive_pretrain(&mut model, &pairs, &settings.pretrain)?;
    Ok((model, vocab, history))
}

/// Everything `finetune` needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub placement: PlacementConfig,
    pub soft_prompt: SoftPromptConfig,
    pub adapter: AdapterConfig,
    /// Largest allowed logit gap between dynamic and merged LoRA models.
    pub merge_tolerance: f64,
    /// Record wall-clock seconds; off gives byte-reproducible CSVs.
    pub timing: bool,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            shots: 4,
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            placement: PlacementConfig::default(),
            soft_prompt: SoftPromptConfig::default(),
            adapter: AdapterConfig::default(),
            merge_tolerance: 1e-5,
            timing: true,
        }
    }
}

impl FinetuneSettings {
    pub fn validate(&self) -> Result<()> {
        if !SHOT_GRID.contains(&self.shots) {
            return Err(Error::Config(format!("shots must be one of {SHOT_GRID:?}, got {}", self.shots)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.train.validate()
    }
}

/// A task drawn from the dataset pool with its prompts.
pub fn make_task(dataset: &Dataset, vocab: &Vocabulary, max_len: usize, shots: usize, seed: u64) -> Result<FewShotTask> {
    let prompts = dataset.class_prompts(vocab, max_len)?;
    sample_support_set(&dataset.pool, &dataset.class_names, &prompts, shots, seed)
}

/// Zero-shot accuracy on the query split of the task for `seed`.
pub fn zero_shot_report(model: &DualEncoderModel<f32>, task: &FewShotTask, seed: u64, timing: bool) -> Result<RunReport> {
    let start = Instant::now();
    let acc = evaluate(model, task)?;
    Ok(RunReport {
        method: Method::ZeroShot.to_string(),
        config: "template".into(),
        shots: 0,
        seed: seed.to_string(),
        zs_acc: Some(acc),
        acc: Some(acc),
        trainable: 0,
        total: model.num_params(),
        iters: 0,
        seconds: if timing { start.elapsed().as_secs_f64() } else { 0.0 },
    })
}

/// Result of one trained run.
pub struct MethodRun {
    pub report: RunReport,
    pub history: TrainingHistory,
    /// For LoRA, the trained adapted model.
    pub adapted: Option<AdaptedModel<f32>>,
}

/// Largest elementwise gap between the dynamic and merged LoRA logits on `task`'s query set.
pub fn merge_gap(adapted: &AdaptedModel<f32>, task: &FewShotTask) -> Result<f64> {
    let dynamic = adapted.class_logits(&task.query.pixels, task.query.len(), &task.prompts)?;
    let merged = adapted.merged_model()?;
    let folded = merged.class_logits(&task.query.pixels, task.query.len(), &task.prompts)?;
    Ok(dynamic.0.max_abs_diff(&folded.0))
}

/// Trains `method` on `task` starting from a copy of `model`.
pub fn run_method(
    model: &DualEncoderModel<f32>,
    task: &FewShotTask,
    method: Method,
    settings: &FinetuneSettings,
    seed: u64,
) -> Result<MethodRun> {
    let start = Instant::now();
    let zs_acc = evaluate(model, task)?;
    let train = TrainConfig { seed, ..settings.train };
    let total_base = model.num_params();
    let (config, acc, trainable, total, history, adapted) = match method {
        Method::ZeroShot => return Err(Error::Config("zero-shot runs have no training step".into())),
        Method::Lora => {
            let mut adapted = inject(model.clone(), &settings.placement, mix_seed(seed, 0x10a))?;
            let history = finetune_lora(&mut adapted, task, &train)?;
            let acc = evaluate(&adapted, task)?;
            let gap = merge_gap(&adapted, task)?;
            if !(gap < settings.merge_tolerance) {
                return Err(Error::Numeric(format!(
                    "merged logits differ from dynamic logits by {gap:e}, tolerance {:e}",
                    settings.merge_tolerance
                )));
            }
            let trainable = adapted.trainable_param_count();
            debug_assert_eq!(trainable, trainable_param_count(&settings.placement, model.config()));
            (settings.placement.digest(), acc, trainable, total_base + trainable, history, Some(adapted))
        }
        Method::SoftPrompt => {
            let (_, run) = soft_prompt_finetune(model, task, &settings.soft_prompt, &train)?;
            let config = format!("m{}", settings.soft_prompt.context_len);
            (config, run.accuracy, run.trainable, total_base + run.trainable, run.history, None)
        }
        Method::Adapter => {
            let (_, run) = adapter_finetune(model, task, &settings.adapter, &train)?;
            let config = format!("b{}/alpha{}", settings.adapter.bottleneck, settings.adapter.alpha);
            (config, run.accuracy, run.trainable, total_base + run.trainable, run.history, None)
        }
        Method::BiasOnly => {
            let mut copy = model.clone();
            let run = bias_only_finetune(&mut copy, task, &train)?;
            ("attn+mlp".to_string(), run.accuracy, run.trainable, total_base, run.history, None)
        }
    };
    let report = RunReport {
        method: method.to_string(),
        config,
        shots: task.shots,
        seed: seed.to_string(),
        zs_acc: Some(zs_acc),
        acc: Some(acc),
        trainable,
        total,
        iters: history.iterations(),
        seconds: if settings.timing { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    Ok(MethodRun { report, history, adapted })
}

/// One block of the ablation grid: the cross product of its lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub groups: Vec<MatrixGroup>,
    pub ranks: Vec<usize>,
    pub spans: Vec<LayerSpan>,
    pub encoders: Vec<EncoderChoice>,
}

/// Placement ablation: the union of its blocks, each cell run for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGridSpec {
    pub blocks: Vec<GridBlock>,
    pub shots: usize,
    pub seeds: Vec<u64>,
}

/// Matrix groups of the default grid: singletons and the nested q, qk, qkv, qkvo.
pub fn default_groups() -> Vec<MatrixGroup> {
    ["q", "k", "v", "o", "qk", "qkv", "qkvo"].iter().map(|g| g.parse().expect("valid group")).collect()
}

impl Default for AblationGridSpec {
    fn default() -> Self {
        Self {
            blocks: vec![
                GridBlock {
                    groups: default_groups(),
                    ranks: vec![1, 2, 4, 8, 16],
                    spans: vec![LayerSpan::All],
                    encoders: vec![EncoderChoice::Both],
                },
                GridBlock {
                    groups: default_groups(),
                    ranks: vec![2],
                    spans: vec![LayerSpan::Bottom, LayerSpan::Up],
                    encoders: vec![EncoderChoice::Both],
                },
            ],
            shots: 4,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridCell {
    pub group: MatrixGroup,
    pub rank: usize,
    pub span: LayerSpan,
    pub encoders: EncoderChoice,
}

impl GridCell {
    fn key(&self) -> String {
        format!("{}/{}/{}/r{}", self.group, self.span.as_str(), self.encoders.as_str(), self.rank)
    }
}

impl AblationGridSpec {
    /// Distinct cells in enumeration order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out: Vec<GridCell> = Vec::new();
        for b in &self.blocks {
            for group in &b.groups {
                for &rank in &b.ranks {
                    for &span in &b.spans {
                        for &encoders in &b.encoders {
                            let cell = GridCell { group: group.clone(), rank, span, encoders };
                            if !out.contains(&cell) {
                                out.push(cell);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() {
            return Err(Error::Config("ablation grid has no cells".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation grid needs at least one seed".into()));
        }
        if !SHOT_GRID.contains(&self.shots) {
            return Err(Error::Config(format!("shots must be one of {SHOT_GRID:?}, got {}", self.shots)));
        }
        Ok(())
    }
}

/// A run report extended with the grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub config: String,
    pub shots: usize,
    pub seed: String,
    pub zs_acc: Option<f64>,
    pub acc: Option<f64>,
    pub trainable: usize,
    pub total: usize,
    pub iters: usize,
    pub seconds: f64,
    pub group: String,
    pub rank: usize,
    pub span: LayerSpan,
    pub encoders: EncoderChoice,
}

impl AblationRow {
    fn new(cell: &GridCell, r: RunReport) -> Self {
        Self {
            method: r.method,
            config: r.config,
            shots: r.shots,
            seed: r.seed,
            zs_acc: r.zs_acc,
            acc: r.acc,
            trainable: r.trainable,
            total: r.total,
            iters: r.iters,
            seconds: r.seconds,
            group: cell.group.to_string(),
            rank: cell.rank,
            span: cell.span,
            encoders: cell.encoders,
        }
    }
}

/// Runs every (cell, seed) job, concurrently when the thread pool allows.
///
/// Rows come back ordered by cell then seed regardless of scheduling. A cell
/// whose placement does not fit the model yields rows without accuracies and
/// an `error:` config string instead of failing the grid.
pub fn run_ablation(
    model: &DualEncoderModel<f32>,
    dataset: &Dataset,
    vocab: &Vocabulary,
    grid: &AblationGridSpec,
    settings: &FinetuneSettings,
) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let max_len = model.config().text.max_len;
    let tasks: BTreeMap<u64, FewShotTask> = grid
        .seeds
        .iter()
        .map(|&s| Ok((s, make_task(dataset, vocab, max_len, grid.shots, s)?)))
        .collect::<Result<_>>()?;
    let cells = grid.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| grid.seeds.iter().map(move |&s| (c, s))).collect();
    let rows: Vec<Result<AblationRow>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cell = &cells[c];
            let placement = PlacementConfig {
                matrices: cell.group.clone(),
                span: cell.span,
                encoders: cell.encoders,
                rank: cell.rank,
                ..settings.placement.clone()
            };
            let task = &tasks[&seed];
            let report = match placement.validate(model.config()) {
                Err(e) => RunReport {
                    method: Method::Lora.to_string(),
                    config: format!("error: {e}"),
                    shots: grid.shots,
                    seed: seed.to_string(),
                    zs_acc: None,
                    acc: None,
                    trainable: 0,
                    total: model.num_params(),
                    iters: 0,
                    seconds: 0.0,
                },
                Ok(()) => {
                    let cell_settings = FinetuneSettings { placement, ..settings.clone() };
                    let run_seed = mix_seed(seed, fnv(&cell.key()));
                    let mut run = run_method(model, task, Method::Lora, &cell_settings, run_seed)?.report;
                    run.seed = seed.to_string();
                    run
                }
            };
            Ok(AblationRow::new(cell, report))
        })
        .collect();
    rows.into_iter().collect()
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn ablation_rows_to_string(rows: &[AblationRow]) -> Result<String> {
    let mut buf = Vec::new();
    if rows.is_empty() {
        buf.extend_from_slice(ABLATION_HEADER.as_bytes());
        buf.push(b'\n');
    }
    write_rows(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Mark given to a table cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub mean: f64,
    pub runs: usize,
    pub mark: Option<Rank>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub cells: Vec<Option<SummaryCell>>,
}

/// Method by shots table of mean accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub shots: Vec<usize>,
    pub rows: Vec<SummaryRow>,
}

/// Pivots per-seed rows into mean accuracy per (method, shots). Seed-mean
/// rows and rows without an accuracy are skipped. In each column the highest
/// mean is marked best (ties share the mark) and the next distinct value second.
pub fn summarize(rows: &[RunReport]) -> SummaryTable {
    let mut acc: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_mean()) {
        if let Some(a) = r.acc {
            acc.entry((r.method.clone(), r.shots)).or_default().push(a);
        }
    }
    let mut shots: Vec<usize> = acc.keys().map(|(_, s)| *s).collect();
    shots.sort_unstable();
    shots.dedup();
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if acc.keys().any(|(m, _)| m == &r.method) && !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut table = SummaryTable {
        rows: methods
            .iter()
            .map(|m| SummaryRow {
                method: m.clone(),
                cells: shots
                    .iter()
                    .map(|&s| {
                        acc.get(&(m.clone(), s)).map(|v| SummaryCell {
                            mean: v.iter().sum::<f64>() / v.len() as f64,
                            runs: v.len(),
                            mark: None,
                        })
                    })
                    .collect(),
            })
            .collect(),
        shots,
    };
    for col in 0..table.shots.len() {
        let mut values: Vec<f64> = table.rows.iter().filter_map(|r| r.cells[col].as_ref().map(|c| c.mean)).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        values.dedup();
        for row in &mut table.rows {
            if let Some(cell) = row.cells[col].as_mut() {
                cell.mark = if Some(&cell.mean) == values.first() {
                    Some(Rank::Best)
                } else if Some(&cell.mean) == values.get(1) {
                    Some(Rank::Second)
                } else {
                    None
                };
            }
        }
    }
    table
}

impl SummaryTable {
    /// Plain-text rendering; best values are wrapped in `**`, second-best in `_`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.shots.iter().map(|s| format!("{s}-shot")).collect();
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let _ = write!(out, "{:<width$}", "method");
        for h in &header {
            let _ = write!(out, " | {h:>10}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<width$}", row.method);
            for cell in &row.cells {
                let text = match cell {
                    None => "-".to_string(),
                    Some(c) => {
                        let v = format!("{:.1}", 100.0 * c.mean);
                        match c.mark {
                            Some(Rank::Best) => format!("**{v}**"),
                            Some(Rank::Second) => format!("_{v}_"),
                            None => v,
                        }
                    }
                };
                let _ = write!(out, " | {text:>10}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, shots: usize, seed: &str, acc: f64) -> RunReport {
        RunReport {
            method: method.into(),
            config: "c".into(),
            shots,
            seed: seed.into(),
            zs_acc: Some(0.1),
            acc: Some(acc),
            trainable: 1,
            total: 2,
            iters: 3,
            seconds: 0.0,
        }
    }

    #[test]
    fn default_grid_has_49_cells() {
        assert_eq!(AblationGridSpec::default().cells().len(), 49);
    }

    #[test]
    fn headers_match() {
        let text = run_rows_to_string(&[row("lora", 4, "0", 0.5)]).unwrap();
        assert_eq!(text.lines().next().unwrap(), RUN_HEADER);
        assert_eq!(run_rows_to_string(&[]).unwrap().trim_end(), RUN_HEADER);
        let cell = GridCell { group: "qk".parse().unwrap(), rank: 2, span: LayerSpan::Up, encoders: EncoderChoice::Text };
        let text = ablation_rows_to_string(&[AblationRow::new(&cell, row("lora", 4, "0", 0.5))]).unwrap();
        assert_eq!(text.lines().next().unwrap(), ABLATION_HEADER);
        assert!(text.ends_with(",qk,2,up,text\n"), "{text}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let rows = vec![row("lora", 4, "0", 0.5), row("lora", 4, "mean", 0.5)];
        let text = run_rows_to_string(&rows).unwrap();
        assert_eq!(read_run_rows(text.as_bytes()).unwrap(), rows);
        let bad = format!("{RUN_HEADER}\nlora,c,4,0,0.1,0.5,1,2,3,0\nlora,c,four,0,0.1,0.5,1,2,3,0\n");
        match read_run_rows(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let out_of_range = format!("{RUN_HEADER}\nlora,c,4,0,0.1,1.5,1,2,3,0\n");
        assert!(matches!(read_run_rows(out_of_range.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn summary_marks_best_and_ties() {
        let rows = vec![row("a", 1, "0", 0.5), row("a", 4, "0", 0.7), row("a", 16, "0", 0.9)];
        let t = summarize(&rows);
        assert_eq!(t.shots, vec![1, 4, 16]);
        assert_eq!(t.rows.len(), 1);

        let rows = vec![row("a", 4, "0", 0.6), row("b", 4, "0", 0.6), row("c", 4, "0", 0.4), row("d", 4, "0", 0.2)];
        let t = summarize(&rows);
        let marks: Vec<_> = t.rows.iter().map(|r| r.cells[0].as_ref().unwrap().mark).collect();
        assert_eq!(marks, vec![Some(Rank::Best), Some(Rank::Best), Some(Rank::Second), None]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<SummaryTable>(&json).unwrap(), t);
        assert!(t.render().contains("**60.0**"));
    }

    #[test]
    fn mean_rows() {
        let rows = vec![row("lora", 4, "0", 0.5), row("lora", 4, "1", 0.7)];
        let m = mean_row(&rows).unwrap();
        assert!(m.is_mean());
        assert!((m.acc.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn method_names() {
        for m in Method::TRAINED {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("full".parse::<Method>().is_err());
    }
}
