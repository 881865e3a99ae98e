//! Zero-shot prediction, few-shot fine-tuning and the contrastive pretrainer.
//!
//! Logits are cosine similarities `l[i][k] = f_i . t_k` of unit embeddings;
//! posteriors are `softmax(l / tau)` over classes. Fine-tuning minimizes the
//! mean cross-entropy of those posteriors on support batches.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::lora::AdaptedModel;
use crate::model::{ClassPrompt, Forward, ProjectionHook, TextBatch};
use crate::{cosine_lr, AdamW, AdamWConfig, DualEncoderModel, Scalar, Tensor, Var};

/// Images stored image-major as `f32` pixels, with one label per image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSet {
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub pixels_per_image: usize,
}

impl ImageSet {
    pub fn new(pixels: Vec<f32>, labels: Vec<usize>, pixels_per_image: usize) -> Result<Self> {
        if pixels_per_image == 0 || pixels.len() != labels.len() * pixels_per_image {
            return Err(shape_err!(
                "{} pixels for {} images of {pixels_per_image} values",
                pixels.len(),
                labels.len()
            ));
        }
        Ok(Self { pixels, labels, pixels_per_image })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.pixels_per_image..(i + 1) * self.pixels_per_image]
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixels_per_image);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet { pixels, labels: indices.iter().map(|&i| self.labels[i]).collect(), pixels_per_image: self.pixels_per_image }
    }
}

/// K classes with their prompts, a support set of `shots` images per class
/// and a disjoint query set.
#[derive(Debug, Clone)]
pub struct FewShotTask {
    pub class_names: Vec<String>,
    pub prompts: Vec<ClassPrompt>,
    pub shots: usize,
    pub support: ImageSet,
    pub query: ImageSet,
}

impl FewShotTask {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Draws `shots` images per class without replacement; the rest of the pool
/// becomes the query set. Every class needs at least `shots + 1` images.
pub fn sample_support_set(
    pool: &ImageSet,
    class_names: &[String],
    prompts: &[ClassPrompt],
    shots: usize,
    seed: u64,
) -> Result<FewShotTask> {
    if shots == 0 {
        return Err(domain_err!("shots must be at least 1"));
    }
    if prompts.len() != class_names.len() {
        return Err(shape_err!("{} prompts for {} classes", prompts.len(), class_names.len()));
    }
    let k = class_names.len();
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in pool.labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| Error::Input(format!("label {y} outside {k} classes")))?
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut support, mut query) = (Vec::new(), Vec::new());
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.len() <= shots {
            return Err(domain_err!(
                "class {} has {} images, needs at least {} for {shots} shots plus a query",
                class_names[c],
                members.len(),
                shots + 1
            ));
        }
        members.shuffle(&mut rng);
        support.extend_from_slice(&members[..shots]);
        query.extend_from_slice(&members[shots..]);
    }
    query.sort_unstable();
    Ok(FewShotTask {
        class_names: class_names.to_vec(),
        prompts: prompts.to_vec(),
        shots,
        support: pool.subset(&support),
        query: pool.subset(&query),
    })
}

/// Cosine logits `[n_images, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix<T>(pub Tensor<T>);

/// Class posteriors `[n_images, K]`, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix<T>(pub Tensor<T>);

/// `f t^T` for unit image rows `f: [n, d]` and prompt rows `t: [K, d]`.
pub fn logits_from_embeddings<T: Scalar>(images: &Tensor<T>, texts: &Tensor<T>) -> Result<LogitMatrix<T>> {
    if texts.matrix_dims().0 < 2 {
        return Err(domain_err!("zero-shot prediction needs at least 2 classes, got {}", texts.matrix_dims().0));
    }
    Ok(LogitMatrix(images.matmul(&texts.transpose())?))
}

/// Encodes every prompt and every image once and returns their cosine logits.
pub fn zero_shot_logits<T: Scalar>(
    model: &DualEncoderModel<T>,
    pixels: &[f32],
    n: usize,
    prompts: &[ClassPrompt],
) -> Result<LogitMatrix<T>> {
    model.class_logits(pixels, n, prompts)
}

/// `p[i][k] = exp(l[i][k] / tau) / sum_j exp(l[i][j] / tau)`.
pub fn posterior<T: Scalar>(logits: &LogitMatrix<T>, tau: f64) -> Result<PosteriorMatrix<T>> {
    if !(tau > 0.0) {
        return Err(domain_err!("temperature must be positive, got {tau}"));
    }
    let (_, k) = logits.0.matrix_dims();
    let inv = T::of(1.0 / tau);
    let mut data = logits.0.data().to_vec();
    for row in data.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) * inv).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(PosteriorMatrix(Tensor::new(logits.0.shape(), data)?))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let (_, k) = scores.matrix_dims();
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean `-ln p[i][y_i]`.
pub fn cross_entropy_loss<T: Scalar>(p: &PosteriorMatrix<T>, labels: &[usize]) -> Result<f64> {
    let (n, k) = p.0.matrix_dims();
    if labels.len() != n {
        return Err(shape_err!("{} labels for {n} rows", labels.len()));
    }
    let mut total = 0.0;
    for (row, &y) in p.0.data().chunks(k).zip(labels) {
        let py = row.get(y).ok_or_else(|| shape_err!("label {y} outside {k} classes"))?;
        total -= py.as_f64().ln();
    }
    Ok(total / n as f64)
}

/// The same loss evaluated from logits through a stable log-softmax of `l / tau`.
pub fn cross_entropy_from_logits<T: Scalar>(logits: &LogitMatrix<T>, tau: f64, labels: &[usize]) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(domain_err!("temperature must be positive, got {tau}"));
    }
    let (n, k) = logits.0.matrix_dims();
    if labels.len() != n {
        return Err(shape_err!("{} labels for {n} rows", labels.len()));
    }
    let mut total = 0.0;
    for (row, &y) in logits.0.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(shape_err!("label {y} outside {k} classes"));
        }
        let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / tau).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - scaled[y];
    }
    Ok(total / n as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Anything that scores images against class prompts.
pub trait Classifier<T: Scalar> {
    fn class_logits(&self, pixels: &[f32], n: usize, prompts: &[ClassPrompt]) -> Result<LogitMatrix<T>>;
}

impl<T: Scalar> Classifier<T> for DualEncoderModel<T> {
    fn class_logits(&self, pixels: &[f32], n: usize, prompts: &[ClassPrompt]) -> Result<LogitMatrix<T>> {
        if prompts.len() < 2 {
            return Err(domain_err!("zero-shot prediction needs at least 2 classes, got {}", prompts.len()));
        }
        let t = self.encode_prompts(prompts)?;
        let f = self.encode_images(pixels, n)?;
        logits_from_embeddings(&f, &t)
    }
}

impl<T: Scalar> Classifier<T> for AdaptedModel<T> {
    fn class_logits(&self, pixels: &[f32], n: usize, prompts: &[ClassPrompt]) -> Result<LogitMatrix<T>> {
        if prompts.len() < 2 {
            return Err(domain_err!("classification needs at least 2 classes, got {}", prompts.len()));
        }
        let t = self.encode_prompts(prompts)?;
        let f = self.encode_images(pixels, n)?;
        logits_from_embeddings(&f, &t)
    }
}

/// Top-1 accuracy on the query set.
pub fn evaluate<T: Scalar>(model: &impl Classifier<T>, task: &FewShotTask) -> Result<f64> {
    if task.query.is_empty() {
        return Err(domain_err!("query set is empty"));
    }
    let logits = model.class_logits(&task.query.pixels, task.query.len(), &task.prompts)?;
    Ok(accuracy(&predict(&logits.0), &task.query.labels))
}

/// Few-shot training hyper-parameters. The defaults are used for every task;
/// LoRA rank and dropout live in [`crate::PlacementConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations_per_shot: usize,
    /// Fixed iteration count; when unset, `iterations_per_shot * shots`.
    pub iterations: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 32,
            iterations_per_shot: 500,
            iterations: None,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn iterations_for(&self, shots: usize) -> usize {
        self.iterations.unwrap_or(self.iterations_per_shot * shots)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Per-step learning rate and loss of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<StepRecord>,
    /// Total step count the schedule was built for.
    pub total_steps: usize,
    pub base_lr: f64,
}

impl TrainingHistory {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Learning rate at steps `0..=T`; the last entry is the schedule's end point.
    pub fn lr_trace(&self) -> Vec<f64> {
        let mut lrs: Vec<f64> = self.records.iter().map(|r| r.lr).collect();
        if self.total_steps > 0 {
            lrs.push(cosine_lr(self.total_steps, self.total_steps, self.base_lr).unwrap_or(0.0));
        }
        lrs
    }

    /// Means of consecutive non-overlapping `window`-step blocks.
    pub fn smoothed_losses(&self, window: usize) -> Vec<f64> {
        self.records
            .chunks(window.max(1))
            .filter(|c| c.len() == window.max(1))
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(["step", "lr", "loss"]).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Batch indices over a support set: uniform with replacement when the set is
/// smaller than a batch, otherwise consecutive slices of a permutation that
/// is redrawn once exhausted.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(domain_err!("cannot sample batches of {batch} from {n} items"));
        }
        Ok(Self { n, batch, order: (0..n).collect(), pos: n, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.n < self.batch {
            return (0..self.batch).map(|_| self.rng.gen_range(0..self.n)).collect();
        }
        if self.pos + self.batch > self.n {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x632b_e59b_d9b4_e019).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A trainable few-shot method: records class logits (already divided by
/// `tau`) for a batch and exposes the tensors it updates.
///
/// `batch` holds the sampled support images and `indices` their positions in
/// the support set, so methods with frozen encoders can reuse cached features.
pub trait Objective<T: Scalar> {
    fn hook(&self) -> Option<&dyn ProjectionHook<T>> {
        None
    }

    fn record_logits(&self, fwd: &mut Forward<'_, T>, batch: &ImageSet, indices: &[usize]) -> Result<Var>;

    /// Trainable tensors with the names they are bound under.
    fn trainables(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

/// Shared cross-entropy loop: AdamW with a cosine schedule over `iterations`
/// steps, batches from [`BatchSampler`].
pub fn train_objective<T: Scalar>(
    objective: &mut impl Objective<T>,
    support: &ImageSet,
    cfg: &TrainConfig,
    iterations: usize,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let names: Vec<String> = objective.trainables().into_iter().map(|(n, _)| n).collect();
    let mut history = TrainingHistory { records: Vec::with_capacity(iterations), total_steps: iterations, base_lr: cfg.lr };
    if iterations == 0 {
        return Ok(history);
    }
    let mut sampler = BatchSampler::new(support.len(), cfg.batch_size, mix_seed(cfg.seed, 1))?;
    let mut opt = AdamW::new(cfg.optimizer());
    for step in 0..iterations {
        let lr = cosine_lr(step, iterations, cfg.lr)?;
        let indices = sampler.next_batch();
        let batch = support.subset(&indices);
        let abort = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "{msg}; training aborted at step {step}, last good step {}",
                step.checked_sub(1).map_or("none".to_string(), |s| s.to_string())
            )),
            other => other,
        };
        let (loss, grads, vars) = {
            let mut fwd = Forward::train(mix_seed(cfg.seed, 2 + step as u64)).with_hook(objective.hook());
            let logits = objective.record_logits(&mut fwd, &batch, &indices).map_err(abort)?;
            let loss = fwd.tape.cross_entropy(logits, &batch.labels).map_err(abort)?;
            let value = fwd.tape.value(loss).data()[0].as_f64();
            let grads = fwd.tape.backward(loss).map_err(abort)?;
            let vars: Vec<Option<Var>> = names.iter().map(|n| fwd.var(n)).collect();
            (value, grads, vars)
        };
        let mut params = objective.trainables();
        for ((_, t), var) in params.iter_mut().zip(&vars) {
            t.grad = var.and_then(|v| grads.get(v)).map(|g| g.data().to_vec());
        }
        let mut refs: Vec<&mut Tensor<T>> = params.into_iter().map(|(_, t)| t).collect();
        opt.step(&mut refs, lr).map_err(abort)?;
        refs.iter_mut().for_each(|t| t.zero_grad());
        history.records.push(StepRecord { step, lr, loss });
    }
    Ok(history)
}

struct LoraObjective<'a, T: Scalar> {
    model: &'a mut AdaptedModel<T>,
    prompts: &'a [ClassPrompt],
    inv_tau: T,
}

impl<T: Scalar> Objective<T> for LoraObjective<'_, T> {
    fn hook(&self) -> Option<&dyn ProjectionHook<T>> {
        self.model.hook()
    }

    fn record_logits(&self, fwd: &mut Forward<'_, T>, batch: &ImageSet, _: &[usize]) -> Result<Var> {
        record_class_logits(self.model.base(), fwd, &batch.pixels, batch.len(), self.prompts, self.inv_tau)
    }

    fn trainables(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.model.trainables_mut()
    }
}

/// Records `(f t^T) / tau` with every prompt re-encoded in this pass.
pub fn record_class_logits<T: Scalar>(
    model: &DualEncoderModel<T>,
    fwd: &mut Forward<'_, T>,
    pixels: &[f32],
    n: usize,
    prompts: &[ClassPrompt],
    inv_tau: T,
) -> Result<Var> {
    let f = model.image_embeddings(fwd, pixels, n)?;
    let batch = TextBatch::from_prompts(prompts)?;
    let t = model.text_embeddings(fwd, &batch, None)?;
    let l = fwd.tape.matmul_nt(f, t)?;
    fwd.tape.scale(l, inv_tau)
}

/// Trains the LoRA modules of `adapted` on the support set. The base model,
/// including `tau`, stays frozen; prompts are re-encoded every step.
pub fn finetune_lora<T: Scalar>(
    adapted: &mut AdaptedModel<T>,
    task: &FewShotTask,
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    if adapted.is_merged() {
        return Err(Error::State("cannot train merged modules; unmerge first".into()));
    }
    if adapted.modules().is_empty() {
        return Err(Error::State("model carries no LoRA modules".into()));
    }
    if task.support.is_empty() {
        return Err(domain_err!("support set is empty"));
    }
    let inv_tau = T::one() / adapted.base().temperature_value();
    let iterations = cfg.iterations_for(task.shots);
    let mut objective = LoraObjective { model: adapted, prompts: &task.prompts, inv_tau };
    train_objective(&mut objective, &task.support, cfg, iterations)
}

/// Image-caption pairs for contrastive pretraining.
#[derive(Debug, Clone)]
pub struct PairedData {
    pub images: ImageSet,
    pub captions: Vec<ClassPrompt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Lower bound on `tau`, so that `l / tau <= 1 / min_temperature`.
    pub min_temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 6, batch_size: 64, lr: 2e-3, weight_decay: 1e-2, min_temperature: 0.01, seed: 0 }
    }
}

/// Symmetric in-batch contrastive training of every parameter, `tau` included.
pub fn contrastive_pretrain<T: Scalar>(
    model: &mut DualEncoderModel<T>,
    data: &PairedData,
    cfg: &PretrainConfig,
) -> Result<TrainingHistory> {
    if cfg.batch_size < 2 {
        return Err(domain_err!("contrastive batches need at least 2 pairs, got {}", cfg.batch_size));
    }
    if data.captions.len() != data.images.len() {
        return Err(shape_err!("{} captions for {} images", data.captions.len(), data.images.len()));
    }
    let n = data.images.len();
    if n < cfg.batch_size {
        return Err(domain_err!("{n} pairs cannot fill a batch of {}", cfg.batch_size));
    }
    let per_epoch = n / cfg.batch_size;
    let total = per_epoch * cfg.epochs;
    let mut history = TrainingHistory { records: Vec::with_capacity(total), total_steps: total, base_lr: cfg.lr };
    model.params.set_trainable(|_| true);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let targets: Vec<usize> = (0..cfg.batch_size).collect();
    let tau_id = model.temperature;
    let floor = T::of(cfg.min_temperature);
    for step in 0..total {
        if step % per_epoch == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[(step % per_epoch) * cfg.batch_size..][..cfg.batch_size];
        let images = data.images.subset(idx);
        let captions: Vec<ClassPrompt> = idx.iter().map(|&i| data.captions[i].clone()).collect();
        let lr = cosine_lr(step, total, cfg.lr)?;
        let (loss, grads, vars) = {
            let mut fwd = Forward::train(mix_seed(cfg.seed, step as u64));
            let f = model.image_embeddings(&mut fwd, &images.pixels, images.len())?;
            let t = model.text_embeddings(&mut fwd, &TextBatch::from_prompts(&captions)?, None)?;
            let tau = fwd.param(&model.params, tau_id);
            let sim = fwd.tape.matmul_nt(f, t)?;
            let logits = fwd.tape.div_scalar(sim, tau)?;
            let image_to_text = fwd.tape.cross_entropy(logits, &targets)?;
            let logits_t = fwd.tape.transpose(logits)?;
            let text_to_image = fwd.tape.cross_entropy(logits_t, &targets)?;
            let both = fwd.tape.add(image_to_text, text_to_image)?;
            let loss = fwd.tape.scale(both, T::of(0.5))?;
            let value = fwd.tape.value(loss).data()[0].as_f64();
            let grads = fwd.tape.backward(loss)?;
            let vars: Vec<Option<Var>> = model.params.iter().map(|(_, name, _)| fwd.var(name)).collect();
            (value, grads, vars)
        };
        let mut refs: Vec<&mut Tensor<T>> = Vec::with_capacity(vars.len());
        for ((_, _, t), var) in model.params.iter_mut().zip(&vars) {
            t.grad = var.and_then(|v| grads.get(v)).map(|g| g.data().to_vec());
            refs.push(t);
        }
        opt.step(&mut refs, lr)?;
        refs.iter_mut().for_each(|t| t.zero_grad());
        let tau = model.params.get_mut(tau_id);
        if tau.data()[0] < floor {
            tau.data_mut()[0] = floor;
        }
        history.records.push(StepRecord { step, lr, loss });
    }
    Ok(history)
}
