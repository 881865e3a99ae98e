//! Miniature CLIP-style dual encoder: a patch-based vision transformer and a
//! token-based text transformer projecting into a shared unit-norm space.

mod checkpoint;
mod config;
mod forward;
mod params;
pub mod vocab;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, TensorEntry, TensorFile};
pub use config::{EncoderConfig, ModelConfig, TextConfig, VisionConfig};
pub use forward::{Forward, ProjectionHook};
pub use params::{ParamId, ParamStore};
pub use vocab::{tokenize_prompt, ClassPrompt, Vocabulary};

use crate::autodiff::AttentionLayout;
use crate::error::{shape_err, Error, Result};
use crate::{Scalar, Tensor, Var};

/// Images encoded per eval-mode forward pass.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Vision,
    Text,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 2] = [EncoderKind::Vision, EncoderKind::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Vision => "vision",
            EncoderKind::Text => "text",
        }
    }
}

/// One of the four attention projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMatrix {
    Q,
    K,
    V,
    O,
}

impl AttnMatrix {
    pub const ALL: [AttnMatrix; 4] = [AttnMatrix::Q, AttnMatrix::K, AttnMatrix::V, AttnMatrix::O];

    pub fn as_char(self) -> char {
        match self {
            AttnMatrix::Q => 'q',
            AttnMatrix::K => 'k',
            AttnMatrix::V => 'v',
            AttnMatrix::O => 'o',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            'q' => Some(AttnMatrix::Q),
            'k' => Some(AttnMatrix::K),
            'v' => Some(AttnMatrix::V),
            'o' => Some(AttnMatrix::O),
            _ => None,
        }
    }
}

/// Address of one attention projection matrix in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttnTarget {
    pub encoder: EncoderKind,
    pub layer: usize,
    pub matrix: AttnMatrix,
}

impl fmt::Display for AttnTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.encoder.as_str(), self.layer, self.matrix.as_char())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of one pre-norm transformer block. Projection weights
/// are stored `[out, in]` and fused across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionBlock {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn projection(&self, m: AttnMatrix) -> Linear {
        match m {
            AttnMatrix::Q => self.q,
            AttnMatrix::K => self.k,
            AttnMatrix::V => self.v,
            AttnMatrix::O => self.o,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub patch_embed: ParamId,
    pub class_token: ParamId,
    pub pos_embed: ParamId,
    pub ln_pre: Norm,
    pub blocks: Vec<AttentionBlock>,
    pub ln_post: Norm,
    pub proj: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub ln_final: Norm,
    pub proj: ParamId,
}

/// Token rows fed to the text encoder.
///
/// `rows` indexes the token-embedding table; indices `>= vocab_size` select
/// rows of `extra` instead (used by learned context vectors).
pub struct TextBatch {
    pub n_seq: usize,
    pub seq_len: usize,
    pub rows: Vec<usize>,
    pub eos: Vec<usize>,
}

impl TextBatch {
    /// Packs prompts, trimmed to the longest prompt in the batch.
    pub fn from_prompts(prompts: &[ClassPrompt]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("no prompts to encode".into()));
        }
        let mut eos = Vec::with_capacity(prompts.len());
        for p in prompts {
            let e = p
                .tokens
                .iter()
                .position(|&t| t == vocab::EOS)
                .ok_or_else(|| Error::Input(format!("prompt for {} has no EOS token", p.class_name)))?;
            eos.push(e);
        }
        let seq_len = eos.iter().max().copied().expect("non-empty") + 1;
        let mut rows = Vec::with_capacity(prompts.len() * seq_len);
        for p in prompts {
            rows.extend(p.tokens[..seq_len].iter().map(|&t| t as usize));
        }
        Ok(Self { n_seq: prompts.len(), seq_len, rows, eos })
    }

    fn key_mask(&self) -> Option<Vec<bool>> {
        if self.eos.iter().all(|&e| e + 1 == self.seq_len) {
            return None;
        }
        Some(
            self.eos
                .iter()
                .flat_map(|&e| (0..self.seq_len).map(move |j| j <= e))
                .collect(),
        )
    }
}

/// Vision encoder, text encoder and softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub temperature: ParamId,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        self.store.insert(name, Tensor::new(shape, data).expect("init shape").trainable())
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        self.store.insert(name, Tensor::new(shape, data).expect("init shape").trainable())
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.insert(name, Tensor::filled(shape, T::of(value)).trainable())
    }

    fn linear(&mut self, prefix: &str, out_dim: usize, in_dim: usize) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: self.uniform(format!("{prefix}.weight"), &[out_dim, in_dim], bound),
            bias: self.constant(format!("{prefix}.bias"), &[out_dim], 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{prefix}.gain"), &[d], 1.0),
            bias: self.constant(format!("{prefix}.bias"), &[d], 0.0),
        }
    }

    fn block(&mut self, prefix: &str, enc: &EncoderConfig) -> AttentionBlock {
        let d = enc.width;
        AttentionBlock {
            ln1: self.norm(&format!("{prefix}.ln1"), d),
            q: self.linear(&format!("{prefix}.attn.q"), d, d),
            k: self.linear(&format!("{prefix}.attn.k"), d, d),
            v: self.linear(&format!("{prefix}.attn.v"), d, d),
            o: self.linear(&format!("{prefix}.attn.o"), d, d),
            ln2: self.norm(&format!("{prefix}.ln2"), d),
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), 4 * d, d),
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), d, 4 * d),
            heads: enc.heads,
        }
    }
}

impl<T: Scalar> DualEncoderModel<T> {
    /// Randomly initialized model; every parameter starts trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let v = config.vision;
        let dv = v.encoder.width;
        let vision = VisionEncoder {
            patch_embed: init.uniform("vision.patch_embed".into(), &[dv, v.patch_dim()], 1.0 / (v.patch_dim() as f64).sqrt()),
            class_token: init.normal("vision.class_token".into(), &[1, dv], 0.02),
            pos_embed: init.normal("vision.pos_embed".into(), &[v.seq_len(), dv], 0.02),
            ln_pre: init.norm("vision.ln_pre", dv),
            blocks: (0..v.encoder.depth).map(|l| init.block(&format!("vision.blocks.{l}"), &v.encoder)).collect(),
            ln_post: init.norm("vision.ln_post", dv),
            proj: init.uniform("vision.proj".into(), &[config.embed_dim, dv], 1.0 / (dv as f64).sqrt()),
        };
        let t = config.text;
        let dt = t.encoder.width;
        let text = TextEncoder {
            token_embed: init.normal("text.token_embed".into(), &[t.vocab_size, dt], 0.02),
            pos_embed: init.normal("text.pos_embed".into(), &[t.max_len, dt], 0.01),
            blocks: (0..t.encoder.depth).map(|l| init.block(&format!("text.blocks.{l}"), &t.encoder)).collect(),
            ln_final: init.norm("text.ln_final", dt),
            proj: init.uniform("text.proj".into(), &[config.embed_dim, dt], 1.0 / (dt as f64).sqrt()),
        };
        let temperature = init.constant("temperature".into(), &[1], config.temperature);
        Ok(Self { config, params: store, vision, text, temperature })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn temperature_value(&self) -> T {
        self.params.get(self.temperature).data()[0]
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn blocks(&self, encoder: EncoderKind) -> &[AttentionBlock] {
        match encoder {
            EncoderKind::Vision => &self.vision.blocks,
            EncoderKind::Text => &self.text.blocks,
        }
    }

    pub fn encoder_config(&self, encoder: EncoderKind) -> &EncoderConfig {
        match encoder {
            EncoderKind::Vision => &self.config.vision.encoder,
            EncoderKind::Text => &self.config.text.encoder,
        }
    }

    /// Weight handle of an attention projection.
    pub fn projection_weight(&self, target: AttnTarget) -> Result<ParamId> {
        let blocks = self.blocks(target.encoder);
        blocks
            .get(target.layer)
            .map(|b| b.projection(target.matrix).weight)
            .ok_or_else(|| shape_err!("{target} addresses a layer beyond depth {}", blocks.len()))
    }

    /// Names of bias vectors in attention and MLP layers of both encoders.
    pub fn bias_param_ids(&self) -> Vec<ParamId> {
        EncoderKind::ALL
            .iter()
            .flat_map(|&e| self.blocks(e).iter())
            .flat_map(|b| [b.q.bias, b.k.bias, b.v.bias, b.o.bias, b.fc1.bias, b.fc2.bias])
            .collect()
    }

    /// Order-sensitive FNV-1a digest over parameter names and bit patterns.
    pub fn checksum(&self, mut filter: impl FnMut(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (_, name, t) in self.params.iter() {
            if !filter(name) {
                continue;
            }
            name.bytes().for_each(|b| eat(b as u64));
            t.data().iter().for_each(|v| eat(v.to_bits_u64()));
        }
        h
    }

    fn linear(
        &self,
        fwd: &mut Forward<'_, T>,
        x: Var,
        lin: Linear,
        target: Option<AttnTarget>,
    ) -> Result<Var> {
        let w = fwd.param(&self.params, lin.weight);
        let b = fwd.param(&self.params, lin.bias);
        let y = fwd.tape.matmul_nt(x, w)?;
        let mut y = fwd.tape.add_rows(y, b)?;
        if let (Some(target), Some(hook)) = (target, fwd.hook()) {
            if let Some(delta) = hook.delta(fwd, target, x)? {
                y = fwd.tape.add(y, delta)?;
            }
        }
        Ok(y)
    }

    fn norm(&self, fwd: &mut Forward<'_, T>, x: Var, norm: Norm) -> Result<Var> {
        let g = fwd.param(&self.params, norm.gain);
        let b = fwd.param(&self.params, norm.bias);
        fwd.tape.layer_norm(x, g, b)
    }

    /// Pre-norm residual block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
    pub fn block_forward(
        &self,
        fwd: &mut Forward<'_, T>,
        x: Var,
        block: &AttentionBlock,
        layout: AttentionLayout,
        encoder: EncoderKind,
        layer: usize,
    ) -> Result<Var> {
        let h = self.norm(fwd, x, block.ln1)?;
        let a = self.multi_head_attention(fwd, h, block, layout, encoder, layer)?;
        let x = fwd.tape.add(x, a)?;
        let h = self.norm(fwd, x, block.ln2)?;
        let m = self.linear(fwd, h, block.fc1, None)?;
        let m = fwd.tape.gelu(m)?;
        let m = self.linear(fwd, m, block.fc2, None)?;
        fwd.tape.add(x, m)
    }

    /// `concat(head_1..head_H) W_o` with `head_i = softmax(q_i k_i^T / sqrt(d_h)) v_i`.
    pub fn multi_head_attention(
        &self,
        fwd: &mut Forward<'_, T>,
        x: Var,
        block: &AttentionBlock,
        layout: AttentionLayout,
        encoder: EncoderKind,
        layer: usize,
    ) -> Result<Var> {
        let width = fwd.tape.value(x).matrix_dims().1;
        let expected = self.params.get(block.q.weight).shape()[1];
        if width != expected {
            return Err(shape_err!("attention input width {width} but block width {expected}"));
        }
        let target = |matrix| Some(AttnTarget { encoder, layer, matrix });
        let q = self.linear(fwd, x, block.q, target(AttnMatrix::Q))?;
        let k = self.linear(fwd, x, block.k, target(AttnMatrix::K))?;
        let v = self.linear(fwd, x, block.v, target(AttnMatrix::V))?;
        let heads = fwd.tape.attention(q, k, v, AttentionLayout { heads: block.heads, ..layout })?;
        self.linear(fwd, heads, block.o, target(AttnMatrix::O))
    }

    /// Splits images into flattened patches, row-major over the patch grid,
    /// each patch ordered (row, column, channel).
    pub fn patchify(&self, pixels: &[f32], n: usize) -> Result<Tensor<T>> {
        let v = &self.config.vision;
        let per = v.pixels_per_image();
        if pixels.len() != n * per || n == 0 {
            return Err(shape_err!(
                "expected {n} images of {}x{}x{} ({} values), got {} values",
                v.image_height,
                v.image_width,
                v.channels,
                n * per,
                pixels.len()
            ));
        }
        let (p, c, w) = (v.patch_size, v.channels, v.image_width);
        let (gh, gw) = (v.image_height / p, v.image_width / p);
        let mut out = Vec::with_capacity(n * per);
        for img in pixels.chunks(per) {
            for py in 0..gh {
                for px in 0..gw {
                    for dy in 0..p {
                        let start = ((py * p + dy) * w + px * p) * c;
                        out.extend(img[start..start + p * c].iter().map(|&x| T::of(x as f64)));
                    }
                }
            }
        }
        Tensor::new(&[n * gh * gw, v.patch_dim()], out)
    }

    /// Records the vision encoder for `n` images; returns unit rows `[n, d_e]`.
    pub fn image_embeddings(&self, fwd: &mut Forward<'_, T>, pixels: &[f32], n: usize) -> Result<Var> {
        let vc = self.config.vision;
        let patches = self.patchify(pixels, n)?;
        let np = vc.num_patches();
        let s = vc.seq_len();
        let enc = &self.vision;
        let x = fwd.tape.constant(patches);
        let w = fwd.param(&self.params, enc.patch_embed);
        let emb = fwd.tape.matmul_nt(x, w)?;
        let cls = fwd.param(&self.params, enc.class_token);
        let all = fwd.tape.concat_rows(&[cls, emb])?;
        let ids: Vec<usize> = (0..n)
            .flat_map(|b| std::iter::once(0).chain((0..np).map(move |j| 1 + b * np + j)))
            .collect();
        let mut h = fwd.tape.gather_rows(all, &ids)?;
        let pos = fwd.param(&self.params, enc.pos_embed);
        h = fwd.tape.add_rows(h, pos)?;
        h = self.norm(fwd, h, enc.ln_pre)?;
        let layout = AttentionLayout { n_seq: n, seq_len: s, heads: vc.encoder.heads, key_mask: None };
        for (l, block) in enc.blocks.iter().enumerate() {
            h = self.block_forward(fwd, h, block, layout.clone(), EncoderKind::Vision, l)?;
        }
        let cls_rows: Vec<usize> = (0..n).map(|b| b * s).collect();
        let pooled = fwd.tape.gather_rows(h, &cls_rows)?;
        let pooled = self.norm(fwd, pooled, enc.ln_post)?;
        let proj = fwd.param(&self.params, enc.proj);
        let z = fwd.tape.matmul_nt(pooled, proj)?;
        fwd.tape.l2_normalize_rows(z)
    }

    /// Records the text encoder; returns unit rows `[n_seq, d_e]`.
    pub fn text_embeddings(&self, fwd: &mut Forward<'_, T>, batch: &TextBatch, extra: Option<Var>) -> Result<Var> {
        let tc = self.config.text;
        let enc = &self.text;
        if batch.seq_len > tc.max_len {
            return Err(shape_err!("sequence length {} exceeds max {}", batch.seq_len, tc.max_len));
        }
        let table = fwd.param(&self.params, enc.token_embed);
        let extra_rows = extra.map(|e| fwd.tape.value(e).matrix_dims().0).unwrap_or(0);
        if let Some(&bad) = batch.rows.iter().find(|&&r| r >= tc.vocab_size + extra_rows) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", tc.vocab_size)));
        }
        let source = match extra {
            Some(e) => fwd.tape.concat_rows(&[table, e])?,
            None => table,
        };
        let mut h = fwd.tape.gather_rows(source, &batch.rows)?;
        let pos_all = fwd.param(&self.params, enc.pos_embed);
        let pos_ids: Vec<usize> = (0..batch.seq_len).collect();
        let pos = fwd.tape.gather_rows(pos_all, &pos_ids)?;
        h = fwd.tape.add_rows(h, pos)?;
        let layout = AttentionLayout {
            n_seq: batch.n_seq,
            seq_len: batch.seq_len,
            heads: tc.encoder.heads,
            key_mask: batch.key_mask(),
        };
        for (l, block) in enc.blocks.iter().enumerate() {
            h = self.block_forward(fwd, h, block, layout.clone(), EncoderKind::Text, l)?;
        }
        let eos_rows: Vec<usize> = batch.eos.iter().enumerate().map(|(b, &e)| b * batch.seq_len + e).collect();
        let pooled = fwd.tape.gather_rows(h, &eos_rows)?;
        let pooled = self.norm(fwd, pooled, enc.ln_final)?;
        let proj = fwd.param(&self.params, enc.proj);
        let z = fwd.tape.matmul_nt(pooled, proj)?;
        fwd.tape.l2_normalize_rows(z)
    }

    /// Eval-mode image embeddings `[n, d_e]`, optionally through a projection hook.
    pub fn encode_images_with(&self, hook: Option<&dyn ProjectionHook<T>>, pixels: &[f32], n: usize) -> Result<Tensor<T>> {
        let per = self.config.vision.pixels_per_image();
        if pixels.len() != n * per || n == 0 {
            return Err(shape_err!("expected {n} images of {per} values, got {} values", pixels.len()));
        }
        let mut out = Vec::with_capacity(n * self.config.embed_dim);
        for chunk in pixels.chunks(EVAL_CHUNK * per) {
            let mut fwd = Forward::eval().with_hook(hook);
            let z = self.image_embeddings(&mut fwd, chunk, chunk.len() / per)?;
            out.extend_from_slice(fwd.tape.value(z).data());
        }
        Tensor::new(&[n, self.config.embed_dim], out)
    }

    /// Eval-mode prompt embeddings `[K, d_e]`, optionally through a projection hook.
    pub fn encode_prompts_with(&self, hook: Option<&dyn ProjectionHook<T>>, prompts: &[ClassPrompt]) -> Result<Tensor<T>> {
        let batch = TextBatch::from_prompts(prompts)?;
        let mut fwd = Forward::eval().with_hook(hook);
        let z = self.text_embeddings(&mut fwd, &batch, None)?;
        Ok(fwd.tape.value(z).clone())
    }

    pub fn encode_images(&self, pixels: &[f32], n: usize) -> Result<Tensor<T>> {
        self.encode_images_with(None, pixels, n)
    }

    pub fn encode_prompts(&self, prompts: &[ClassPrompt]) -> Result<Tensor<T>> {
        self.encode_prompts_with(None, prompts)
    }

    /// Unit-norm embedding `[d_e]` of one `[h, w, c]` image.
    pub fn encode_image(&self, image: &Tensor<f32>) -> Result<Tensor<T>> {
        let v = &self.config.vision;
        if image.shape() != [v.image_height, v.image_width, v.channels] {
            return Err(shape_err!(
                "image of shape {:?}, model expects [{}, {}, {}]",
                image.shape(),
                v.image_height,
                v.image_width,
                v.channels
            ));
        }
        self.encode_images(image.data(), 1)?.reshape(&[self.config.embed_dim])
    }

    /// Unit-norm embedding `[d_e]` of one prompt.
    pub fn encode_text(&self, prompt: &ClassPrompt) -> Result<Tensor<T>> {
        self.encode_prompts(std::slice::from_ref(prompt))?.reshape(&[self.config.embed_dim])
    }

    /// Copy with every tensor converted to another precision.
    pub fn cast<U: Scalar>(&self) -> DualEncoderModel<U> {
        let mut params = ParamStore::default();
        for (_, name, t) in self.params.iter() {
            params.insert(name, t.cast());
        }
        DualEncoderModel {
            config: self.config,
            params,
            vision: self.vision.clone(),
            text: self.text.clone(),
            temperature: self.temperature,
        }
    }
}
