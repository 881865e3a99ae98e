//! Comparison methods trained with the same loop as LoRA: learned context
//! vectors in place of the prompt template, a residual MLP adapter on image
//! features, and bias-only tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::fewshot::{
    evaluate, logits_from_embeddings, mix_seed, record_class_logits, train_objective, Classifier, FewShotTask, ImageSet,
    LogitMatrix, Objective, TrainConfig, TrainingHistory,
};
use crate::model::vocab::{BOS, EOS, PAD, TEMPLATE};
use crate::model::{ClassPrompt, Forward, TextBatch};
use crate::{DualEncoderModel, ParamId, Scalar, Tensor, Var};

/// Outcome of one baseline run.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub accuracy: f64,
    pub trainable: usize,
    pub history: TrainingHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftPromptConfig {
    /// Number of learned context vectors `M`.
    pub context_len: usize,
    pub lr: f64,
}

impl Default for SoftPromptConfig {
    fn default() -> Self {
        Self { context_len: 4, lr: 2e-3 }
    }
}

/// Shared context vectors `[M, d_text]` replacing the template words.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt<T> {
    pub context: Tensor<T>,
}

const CONTEXT: &str = "soft_prompt.context";

impl<T: Scalar> SoftPrompt<T> {
    /// Context initialized from the token embeddings of the template words,
    /// cycling through them when `M` exceeds the template length.
    pub fn from_template(model: &DualEncoderModel<T>, vocab_ids: &[u32], context_len: usize) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::Config("context length must be at least 1".into()));
        }
        if vocab_ids.len() != TEMPLATE.len() {
            return Err(Error::Config(format!("expected {} template ids, got {}", TEMPLATE.len(), vocab_ids.len())));
        }
        let table = model.params.get(model.text.token_embed);
        let d = table.matrix_dims().1;
        let mut data = Vec::with_capacity(context_len * d);
        for j in 0..context_len {
            data.extend_from_slice(table.row(vocab_ids[j % vocab_ids.len()] as usize));
        }
        Ok(Self { context: Tensor::new(&[context_len, d], data)?.trainable() })
    }

    pub fn context_len(&self) -> usize {
        self.context.matrix_dims().0
    }

    /// `[BOS, v_1..v_M, class tokens, EOS]`, with context rows addressed past the vocabulary.
    pub fn soften(&self, prompt: &ClassPrompt, vocab_size: usize, max_len: usize) -> Result<ClassPrompt> {
        let class = prompt.class_tokens();
        let m = self.context_len();
        let len = m + class.len() + 2;
        if len > max_len {
            return Err(Error::Config(format!(
                "{m} context vectors and class {:?} need {len} tokens, text length is {max_len}",
                prompt.class_name
            )));
        }
        let mut tokens = Vec::with_capacity(max_len);
        tokens.push(BOS);
        tokens.extend((0..m).map(|j| (vocab_size + j) as u32));
        tokens.extend_from_slice(class);
        tokens.push(EOS);
        tokens.resize(max_len, PAD);
        Ok(ClassPrompt { class_name: prompt.class_name.clone(), tokens })
    }

    fn batch(&self, model: &DualEncoderModel<T>, prompts: &[ClassPrompt]) -> Result<TextBatch> {
        let tc = model.config().text;
        let soft = prompts.iter().map(|p| self.soften(p, tc.vocab_size, tc.max_len)).collect::<Result<Vec<_>>>()?;
        TextBatch::from_prompts(&soft)
    }

    /// Records unit text embeddings for `prompts` with the learned context.
    pub fn record_text(&self, model: &DualEncoderModel<T>, fwd: &mut Forward<'_, T>, prompts: &[ClassPrompt]) -> Result<Var> {
        let batch = self.batch(model, prompts)?;
        let ctx = fwd.bind(CONTEXT, &self.context);
        model.text_embeddings(fwd, &batch, Some(ctx))
    }
}

/// A frozen model paired with learned context vectors.
pub struct SoftPromptClassifier<'a, T: Scalar> {
    pub model: &'a DualEncoderModel<T>,
    pub prompt: &'a SoftPrompt<T>,
}

impl<T: Scalar> Classifier<T> for SoftPromptClassifier<'_, T> {
    fn class_logits(&self, pixels: &[f32], n: usize, prompts: &[ClassPrompt]) -> Result<LogitMatrix<T>> {
        let mut fwd = Forward::eval();
        let t = self.prompt.record_text(self.model, &mut fwd, prompts)?;
        let t = fwd.tape.value(t).clone();
        logits_from_embeddings(&self.model.encode_images(pixels, n)?, &t)
    }
}

struct SoftPromptObjective<'a, T: Scalar> {
    model: &'a DualEncoderModel<T>,
    prompt: &'a mut SoftPrompt<T>,
    prompts: &'a [ClassPrompt],
    features: Tensor<T>,
    inv_tau: T,
}

impl<T: Scalar> Objective<T> for SoftPromptObjective<'_, T> {
    fn record_logits(&self, fwd: &mut Forward<'_, T>, _: &ImageSet, indices: &[usize]) -> Result<Var> {
        let all = fwd.tape.constant(self.features.clone());
        let f = fwd.tape.gather_rows(all, indices)?;
        let t = self.prompt.record_text(self.model, fwd, self.prompts)?;
        let l = fwd.tape.matmul_nt(f, t)?;
        fwd.tape.scale(l, self.inv_tau)
    }

    fn trainables(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![(CONTEXT.to_string(), &mut self.prompt.context)]
    }
}

fn template_ids(task: &FewShotTask) -> Result<Vec<u32>> {
    let p = task.prompts.first().ok_or_else(|| domain_err!("task has no prompts"))?;
    Ok(p.tokens[1..1 + TEMPLATE.len()].to_vec())
}

/// Learns `M` shared context vectors through the frozen text encoder.
pub fn soft_prompt_finetune<T: Scalar>(
    model: &DualEncoderModel<T>,
    task: &FewShotTask,
    cfg: &SoftPromptConfig,
    train: &TrainConfig,
) -> Result<(SoftPrompt<T>, BaselineRun)> {
    let mut prompt = SoftPrompt::from_template(model, &template_ids(task)?, cfg.context_len)?;
    let train = TrainConfig { lr: cfg.lr, ..*train };
    let features = model.encode_images(&task.support.pixels, task.support.len())?;
    let inv_tau = T::one() / model.temperature_value();
    let history = {
        let mut objective = SoftPromptObjective { model, prompt: &mut prompt, prompts: &task.prompts, features, inv_tau };
        train_objective(&mut objective, &task.support, &train, train.iterations_for(task.shots))?
    };
    let accuracy = evaluate(&SoftPromptClassifier { model, prompt: &prompt }, task)?;
    let trainable = prompt.context.len();
    Ok((prompt, BaselineRun { accuracy, trainable, history }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    /// Residual blend: `f' = normalize(alpha * mlp(f) + (1 - alpha) * f)`.
    pub alpha: f64,
    pub lr: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { bottleneck: 8, alpha: 0.2, lr: 1e-3 }
    }
}

/// Two-layer bottleneck MLP on image features, blended residually.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    pub down: Tensor<T>,
    pub down_bias: Tensor<T>,
    pub up: Tensor<T>,
    pub up_bias: Tensor<T>,
    pub alpha: f64,
}

const ADAPTER_NAMES: [&str; 4] = ["adapter.down", "adapter.down_bias", "adapter.up", "adapter.up_bias"];

impl<T: Scalar> Adapter<T> {
    /// Down projection uniform in `+-1/sqrt(d)`, up projection and biases zero,
    /// so the MLP starts with zero output.
    pub fn new(embed_dim: usize, bottleneck: usize, alpha: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(domain_err!("adapter blend {alpha} outside [0, 1]"));
        }
        if bottleneck == 0 || bottleneck >= embed_dim {
            return Err(Error::Config(format!("bottleneck {bottleneck} must lie in 1..{embed_dim}")));
        }
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let down = (0..bottleneck * embed_dim).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Ok(Self {
            down: Tensor::new(&[bottleneck, embed_dim], down)?.trainable(),
            down_bias: Tensor::zeros(&[bottleneck]).trainable(),
            up: Tensor::zeros(&[embed_dim, bottleneck]).trainable(),
            up_bias: Tensor::zeros(&[embed_dim]).trainable(),
            alpha,
        })
    }

    pub fn num_params(&self) -> usize {
        self.down.len() + self.down_bias.len() + self.up.len() + self.up_bias.len()
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.down, &mut self.down_bias, &mut self.up, &mut self.up_bias]
    }

    /// Records adapted unit features for feature rows `f`.
    pub fn record(&self, fwd: &mut Forward<'_, T>, f: Var) -> Result<Var> {
        // With alpha = 0 the blend is `f` itself, already unit-norm; returning it
        // untouched keeps the zero-shot logits bit for bit.
        if self.alpha == 0.0 {
            return Ok(f);
        }
        let wd = fwd.bind(ADAPTER_NAMES[0], &self.down);
        let bd = fwd.bind(ADAPTER_NAMES[1], &self.down_bias);
        let wu = fwd.bind(ADAPTER_NAMES[2], &self.up);
        let bu = fwd.bind(ADAPTER_NAMES[3], &self.up_bias);
        let h = fwd.tape.matmul_nt(f, wd)?;
        let h = fwd.tape.add_rows(h, bd)?;
        let h = fwd.tape.relu(h)?;
        let h = fwd.tape.matmul_nt(h, wu)?;
        let h = fwd.tape.add_rows(h, bu)?;
        let h = fwd.tape.scale(h, T::of(self.alpha))?;
        let keep = fwd.tape.scale(f, T::of(1.0 - self.alpha))?;
        let mixed = fwd.tape.add(h, keep)?;
        fwd.tape.l2_normalize_rows(mixed)
    }

    /// Eval-mode adapted features.
    pub fn apply(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut fwd = Forward::eval();
        let f = fwd.tape.constant(features.clone());
        let out = self.record(&mut fwd, f)?;
        Ok(fwd.tape.value(out).clone())
    }
}

/// A frozen model with an adapter on its image features.
pub struct AdapterClassifier<'a, T: Scalar> {
    pub model: &'a DualEncoderModel<T>,
    pub adapter: &'a Adapter<T>,
}

impl<T: Scalar> Classifier<T> for AdapterClassifier<'_, T> {
    fn class_logits(&self, pixels: &[f32], n: usize, prompts: &[ClassPrompt]) -> Result<LogitMatrix<T>> {
        let t = self.model.encode_prompts(prompts)?;
        let f = self.adapter.apply(&self.model.encode_images(pixels, n)?)?;
        logits_from_embeddings(&f, &t)
    }
}

struct AdapterObjective<'a, T: Scalar> {
    adapter: &'a mut Adapter<T>,
    features: Tensor<T>,
    texts: Tensor<T>,
    inv_tau: T,
}

impl<T: Scalar> Objective<T> for AdapterObjective<'_, T> {
    fn record_logits(&self, fwd: &mut Forward<'_, T>, _: &ImageSet, indices: &[usize]) -> Result<Var> {
        let all = fwd.tape.constant(self.features.clone());
        let f = fwd.tape.gather_rows(all, indices)?;
        let f = self.adapter.record(fwd, f)?;
        let t = fwd.tape.constant(self.texts.clone());
        let l = fwd.tape.matmul_nt(f, t)?;
        fwd.tape.scale(l, self.inv_tau)
    }

    fn trainables(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        ADAPTER_NAMES.iter().map(|n| n.to_string()).zip(self.adapter.tensors_mut()).collect()
    }
}

/// Trains an adapter on cached features of the frozen encoders.
pub fn adapter_finetune<T: Scalar>(
    model: &DualEncoderModel<T>,
    task: &FewShotTask,
    cfg: &AdapterConfig,
    train: &TrainConfig,
) -> Result<(Adapter<T>, BaselineRun)> {
    let mut adapter = Adapter::new(model.config().embed_dim, cfg.bottleneck, cfg.alpha, mix_seed(train.seed, 11))?;
    let train = TrainConfig { lr: cfg.lr, ..*train };
    let features = model.encode_images(&task.support.pixels, task.support.len())?;
    let texts = model.encode_prompts(&task.prompts)?;
    let inv_tau = T::one() / model.temperature_value();
    let history = {
        let mut objective = AdapterObjective { adapter: &mut adapter, features, texts, inv_tau };
        train_objective(&mut objective, &task.support, &train, train.iterations_for(task.shots))?
    };
    let accuracy = evaluate(&AdapterClassifier { model, adapter: &adapter }, task)?;
    let trainable = adapter.num_params();
    Ok((adapter, BaselineRun { accuracy, trainable, history }))
}

struct BiasObjective<'a, T: Scalar> {
    model: &'a mut DualEncoderModel<T>,
    biases: Vec<ParamId>,
    prompts: &'a [ClassPrompt],
    inv_tau: T,
}

impl<T: Scalar> Objective<T> for BiasObjective<'_, T> {
    fn record_logits(&self, fwd: &mut Forward<'_, T>, batch: &ImageSet, _: &[usize]) -> Result<Var> {
        record_class_logits(self.model, fwd, &batch.pixels, batch.len(), self.prompts, self.inv_tau)
    }

    fn trainables(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.model
            .params
            .iter_mut()
            .filter(|(id, _, _)| self.biases.contains(id))
            .map(|(_, name, t)| (name.to_string(), t))
            .collect()
    }
}

/// Trains only the attention and MLP biases of both encoders.
pub fn bias_only_finetune<T: Scalar>(
    model: &mut DualEncoderModel<T>,
    task: &FewShotTask,
    train: &TrainConfig,
) -> Result<BaselineRun> {
    let biases = model.bias_param_ids();
    model.params.freeze_all();
    for &id in &biases {
        model.params.get_mut(id).requires_grad = true;
    }
    let trainable = biases.iter().map(|&id| model.params.get(id).len()).sum();
    let inv_tau = T::one() / model.temperature_value();
    let history = {
        let mut objective = BiasObjective { model: &mut *model, biases, prompts: &task.prompts, inv_tau };
        train_objective(&mut objective, &task.support, train, train.iterations_for(task.shots))?
    };
    let accuracy = evaluate(&*model, task)?;
    Ok(BaselineRun { accuracy, trainable, history })
}
