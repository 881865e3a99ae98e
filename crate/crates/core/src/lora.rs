//! Low-rank adaptation of attention projections.
//!
//! A module adds `gamma * B A x` to a frozen projection `W x`, with
//! `A: [r, d_in]` drawn Kaiming-uniform and `B: [d_out, r]` starting at zero,
//! so a freshly injected model computes exactly what the base model does.
//! During training the delta is evaluated in factored form; [`AdaptedModel::merge`]
//! folds it into `W` for inference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::model::{
    read_tensor_file, write_tensor_file, ClassPrompt, DualEncoderModel, EncoderKind, Forward, ModelConfig,
    ProjectionHook,
};
use crate::{AttnMatrix, AttnTarget, ParamId, Scalar, Tape, Tensor, Var};

/// Which blocks of each selected encoder receive modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSpan {
    /// First half of the stack, `[0, ceil(L/2))`.
    Bottom,
    /// Second half, `[ceil(L/2), L)`.
    Up,
    All,
}

impl LayerSpan {
    pub const ALL: [LayerSpan; 3] = [LayerSpan::Bottom, LayerSpan::Up, LayerSpan::All];

    pub fn layers(self, depth: usize) -> std::ops::Range<usize> {
        let split = depth.div_ceil(2);
        match self {
            LayerSpan::Bottom => 0..split,
            LayerSpan::Up => split..depth,
            LayerSpan::All => 0..depth,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerSpan::Bottom => "bottom",
            LayerSpan::Up => "up",
            LayerSpan::All => "all",
        }
    }
}

impl FromStr for LayerSpan {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom" => Ok(LayerSpan::Bottom),
            "up" => Ok(LayerSpan::Up),
            "all" => Ok(LayerSpan::All),
            _ => Err(Error::Config(format!("unknown layer span {s:?} (bottom, up, all)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    Vision,
    Text,
    Both,
}

impl EncoderChoice {
    pub fn includes(self, e: EncoderKind) -> bool {
        matches!(
            (self, e),
            (EncoderChoice::Both, _) | (EncoderChoice::Vision, EncoderKind::Vision) | (EncoderChoice::Text, EncoderKind::Text)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderChoice::Vision => "vision",
            EncoderChoice::Text => "text",
            EncoderChoice::Both => "both",
        }
    }
}

impl FromStr for EncoderChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(EncoderChoice::Vision),
            "text" => Ok(EncoderChoice::Text),
            "both" => Ok(EncoderChoice::Both),
            _ => Err(Error::Config(format!("unknown encoder choice {s:?} (vision, text, both)"))),
        }
    }
}

/// Non-empty set of attention projections, written like `qkv`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MatrixGroup(BTreeSet<AttnMatrix>);

impl MatrixGroup {
    pub fn new(matrices: impl IntoIterator<Item = AttnMatrix>) -> Result<Self> {
        let set: BTreeSet<_> = matrices.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("matrix group must not be empty".into()));
        }
        Ok(Self(set))
    }

    pub fn contains(&self, m: AttnMatrix) -> bool {
        self.0.contains(&m)
    }

    pub fn iter(&self) -> impl Iterator<Item = AttnMatrix> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for MatrixGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|m| write!(f, "{}", m.as_char()))
    }
}

impl FromStr for MatrixGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let ms = s
            .chars()
            .map(|c| AttnMatrix::from_char(c).ok_or_else(|| Error::Config(format!("unknown attention matrix {c:?} in {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ms)
    }
}

impl TryFrom<String> for MatrixGroup {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MatrixGroup> for String {
    fn from(g: MatrixGroup) -> Self {
        g.to_string()
    }
}

/// Where modules go and how they are shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    pub matrices: MatrixGroup,
    pub span: LayerSpan,
    pub encoders: EncoderChoice,
    pub rank: usize,
    /// Constant multiplier `gamma` on the low-rank delta. The common
    /// `alpha / r` convention corresponds to `scale = alpha / rank`.
    pub scale: f64,
    /// Dropout on the module input, delta path only.
    pub dropout: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            matrices: MatrixGroup::new([AttnMatrix::Q, AttnMatrix::K, AttnMatrix::V]).expect("non-empty"),
            span: LayerSpan::All,
            encoders: EncoderChoice::Both,
            rank: 2,
            scale: 1.0,
            dropout: 0.25,
        }
    }
}

impl PlacementConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        for e in EncoderKind::ALL.into_iter().filter(|&e| self.encoders.includes(e)) {
            let width = encoder_dims(model, e).width;
            if self.rank > width {
                return Err(Error::Config(format!(
                    "rank {} exceeds the {} projection size {width}",
                    self.rank,
                    e.as_str()
                )));
            }
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be a finite non-negative number, got {}", self.scale)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.targets(model).is_empty() {
            return Err(Error::Config(format!("span {} selects no layers", self.span.as_str())));
        }
        Ok(())
    }

    /// Every projection selected by this placement, in canonical order.
    pub fn targets(&self, model: &ModelConfig) -> Vec<AttnTarget> {
        let mut out = Vec::new();
        for encoder in EncoderKind::ALL.into_iter().filter(|&e| self.encoders.includes(e)) {
            for layer in self.span.layers(encoder_dims(model, encoder).depth) {
                for matrix in self.matrices.iter() {
                    out.push(AttnTarget { encoder, layer, matrix });
                }
            }
        }
        out
    }

    /// Short stable description, e.g. `qkv/all/both/r2`.
    pub fn digest(&self) -> String {
        format!("{}/{}/{}/r{}", self.matrices, self.span.as_str(), self.encoders.as_str(), self.rank)
    }
}

fn encoder_dims(model: &ModelConfig, e: EncoderKind) -> crate::model::EncoderConfig {
    match e {
        EncoderKind::Vision => model.vision.encoder,
        EncoderKind::Text => model.text.encoder,
    }
}

/// `sum over selected projections of r * (d_out + d_in)`.
pub fn trainable_param_count(cfg: &PlacementConfig, model: &ModelConfig) -> usize {
    cfg.targets(model)
        .iter()
        .map(|t| {
            let d = encoder_dims(model, t.encoder).width;
            cfg.rank * (d + d)
        })
        .sum()
}

/// The low-rank pair `(A, B)` attached to one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule<T> {
    /// `[r, d_in]`, trainable.
    pub a: Tensor<T>,
    /// `[d_out, r]`, trainable.
    pub b: Tensor<T>,
    pub scale: f64,
    pub dropout: f64,
}

/// Creates a module for a `[d1, d2]` weight: `A` Kaiming-uniform over fan-in
/// `d2` (bound `sqrt(6 / d2)`), `B` zero.
pub fn init_lora<T: Scalar>(d1: usize, d2: usize, rank: usize, scale: f64, dropout: f64, seed: u64) -> Result<LoraModule<T>> {
    if rank == 0 || rank > d1.min(d2) {
        return Err(domain_err!("rank {rank} outside [1, min({d1}, {d2})]"));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(domain_err!("dropout {dropout} outside [0, 1)"));
    }
    let bound = (6.0 / d2 as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<T> = (0..rank * d2).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Ok(LoraModule {
        a: Tensor::new(&[rank, d2], a)?.trainable(),
        b: Tensor::zeros(&[d1, rank]).trainable(),
        scale,
        dropout,
    })
}

impl<T: Scalar> LoraModule<T> {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Dense `gamma * B A`, `[d_out, d_in]`.
    pub fn delta_weight(&self) -> Result<Tensor<T>> {
        let ba = self.b.matmul(&self.a)?;
        let g = T::of(self.scale);
        let data = ba.data().iter().map(|&v| v * g).collect();
        Tensor::new(ba.shape(), data)
    }

    /// Records `gamma * (drop(x) A^T) B^T` for row inputs `x: [n, d_in]`,
    /// with `A` and `B` bound under `name`.
    pub fn record_delta(&self, fwd: &mut Forward<'_, T>, name: &str, x: Var) -> Result<Var> {
        let a = fwd.bind(&format!("{name}.a"), &self.a);
        let b = fwd.bind(&format!("{name}.b"), &self.b);
        let xd = fwd.dropout(x, self.dropout)?;
        let u = fwd.tape.matmul_nt(xd, a)?;
        let d = fwd.tape.matmul_nt(u, b)?;
        if self.scale == 1.0 {
            Ok(d)
        } else {
            fwd.tape.scale(d, T::of(self.scale))
        }
    }
}

/// `h = W x + gamma B A drop(x)` for a single column input `x: [d2]`.
///
/// Dropout applies only in training mode and only on the delta path.
pub fn lora_forward<T: Scalar, R: Rng>(
    weight: &Tensor<T>,
    module: &LoraModule<T>,
    x: &Tensor<T>,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if weight.shape().len() != 2 {
        return Err(shape_err!("weight must be 2-D, got {:?}", weight.shape()));
    }
    let (d1, d2) = (weight.shape()[0], weight.shape()[1]);
    if x.len() != d2 || module.a.shape()[1] != d2 || module.b.shape()[0] != d1 || module.b.shape()[1] != module.rank() {
        return Err(shape_err!(
            "weight {:?}, A {:?}, B {:?} and input {:?} are inconsistent",
            weight.shape(),
            module.a.shape(),
            module.b.shape(),
            x.shape()
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, d2])?);
    let w = tape.constant(weight.clone());
    let a = tape.constant(module.a.clone());
    let b = tape.constant(module.b.clone());
    let base = tape.matmul_nt(xv, w)?;
    let xd = tape.dropout(xv, module.dropout, training, rng)?;
    let u = tape.matmul_nt(xd, a)?;
    let delta = tape.matmul_nt(u, b)?;
    let delta = tape.scale(delta, T::of(module.scale))?;
    let h = tape.add(base, delta)?;
    tape.value(h).clone().reshape(&[d1])
}

fn module_name(t: &AttnTarget) -> String {
    format!("lora.{t}")
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A frozen base model plus low-rank modules on selected projections.
#[derive(Debug, Clone)]
pub struct AdaptedModel<T> {
    base: DualEncoderModel<T>,
    placement: Option<PlacementConfig>,
    modules: BTreeMap<AttnTarget, LoraModule<T>>,
    snapshots: Option<Vec<(ParamId, Tensor<T>)>>,
}

/// Wraps `model`, freezes it and attaches freshly initialized modules.
pub fn inject<T: Scalar>(model: DualEncoderModel<T>, cfg: &PlacementConfig, seed: u64) -> Result<AdaptedModel<T>> {
    let mut adapted = AdaptedModel::new(model);
    adapted.inject(cfg, seed)?;
    Ok(adapted)
}

impl<T: Scalar> AdaptedModel<T> {
    /// Wraps `model` without modules; all base parameters become frozen.
    pub fn new(mut model: DualEncoderModel<T>) -> Self {
        model.params.freeze_all();
        Self { base: model, placement: None, modules: BTreeMap::new(), snapshots: None }
    }

    pub fn inject(&mut self, cfg: &PlacementConfig, seed: u64) -> Result<()> {
        if self.placement.is_some() {
            return Err(Error::State("model already carries LoRA modules".into()));
        }
        cfg.validate(self.base.config())?;
        for (i, target) in cfg.targets(self.base.config()).into_iter().enumerate() {
            let w = self.base.params.get(self.base.projection_weight(target)?);
            let (d1, d2) = (w.shape()[0], w.shape()[1]);
            let module = init_lora(d1, d2, cfg.rank, cfg.scale, cfg.dropout, derive_seed(seed, i as u64))?;
            self.modules.insert(target, module);
        }
        self.placement = Some(cfg.clone());
        Ok(())
    }

    pub fn base(&self) -> &DualEncoderModel<T> {
        &self.base
    }

    pub fn placement(&self) -> Option<&PlacementConfig> {
        self.placement.as_ref()
    }

    pub fn modules(&self) -> &BTreeMap<AttnTarget, LoraModule<T>> {
        &self.modules
    }

    pub fn module_mut(&mut self, target: &AttnTarget) -> Option<&mut LoraModule<T>> {
        self.modules.get_mut(target)
    }

    pub fn is_merged(&self) -> bool {
        self.snapshots.is_some()
    }

    /// Elements of every registered `A` and `B`.
    pub fn trainable_param_count(&self) -> usize {
        self.modules.values().map(LoraModule::num_params).sum()
    }

    /// Mutable `A`/`B` tensors in canonical order, with their bind names.
    pub fn trainables_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.modules.len());
        for (t, m) in self.modules.iter_mut() {
            let name = module_name(t);
            out.push((format!("{name}.a"), &mut m.a));
            out.push((format!("{name}.b"), &mut m.b));
        }
        out
    }

    /// Hook for forward passes; `None` once merged since the base then
    /// already contains the deltas.
    pub fn hook(&self) -> Option<&dyn ProjectionHook<T>> {
        if self.is_merged() || self.modules.is_empty() {
            None
        } else {
            Some(self)
        }
    }

    pub fn encode_images(&self, pixels: &[f32], n: usize) -> Result<Tensor<T>> {
        self.base.encode_images_with(self.hook(), pixels, n)
    }

    pub fn encode_prompts(&self, prompts: &[ClassPrompt]) -> Result<Tensor<T>> {
        self.base.encode_prompts_with(self.hook(), prompts)
    }

    /// Folds `gamma B A` into every adapted weight, keeping the originals for
    /// [`AdaptedModel::unmerge`].
    pub fn merge(&mut self) -> Result<&DualEncoderModel<T>> {
        if self.is_merged() {
            return Err(Error::State("modules are already merged".into()));
        }
        let mut snapshots = Vec::with_capacity(self.modules.len());
        for (target, module) in &self.modules {
            let id = self.base.projection_weight(*target)?;
            let delta = module.delta_weight()?;
            let w = self.base.params.get_mut(id);
            snapshots.push((id, w.clone()));
            for (wi, &di) in w.data_mut().iter_mut().zip(delta.data()) {
                *wi += di;
            }
        }
        self.snapshots = Some(snapshots);
        Ok(&self.base)
    }

    /// Restores the pre-merge weights bit for bit.
    pub fn unmerge(&mut self) -> Result<()> {
        let snapshots = self
            .snapshots
            .take()
            .ok_or_else(|| Error::State("unmerge without a prior merge".into()))?;
        for (id, original) in snapshots {
            *self.base.params.get_mut(id) = original;
        }
        Ok(())
    }

    /// Plain model with every delta folded in; `self` is left untouched.
    pub fn merged_model(&self) -> Result<DualEncoderModel<T>> {
        let mut copy = self.clone();
        if !copy.is_merged() {
            copy.merge()?;
        }
        Ok(copy.base)
    }

    /// Same model and modules at another precision.
    pub fn cast<U: Scalar>(&self) -> AdaptedModel<U> {
        let cast_module = |m: &LoraModule<T>| LoraModule { a: m.a.cast(), b: m.b.cast(), scale: m.scale, dropout: m.dropout };
        AdaptedModel {
            base: self.base.cast(),
            placement: self.placement.clone(),
            modules: self.modules.iter().map(|(t, m)| (*t, cast_module(m))).collect(),
            snapshots: self
                .snapshots
                .as_ref()
                .map(|s| s.iter().map(|(id, t)| (*id, t.cast())).collect()),
        }
    }

    /// Writes only the `A`/`B` tensors and the placement.
    pub fn save_lora(&self, path: &Path) -> Result<()> {
        let placement = self.placement.as_ref().ok_or_else(|| Error::State("no modules to save".into()))?;
        let names: Vec<(String, String)> = self
            .modules
            .keys()
            .map(|t| (format!("{}.a", module_name(t)), format!("{}.b", module_name(t))))
            .collect();
        let mut tensors = Vec::new();
        for ((na, nb), m) in names.iter().zip(self.modules.values()) {
            tensors.push((na.as_str(), &m.a));
            tensors.push((nb.as_str(), &m.b));
        }
        let meta = serde_json::json!({ "placement": placement, "model_config": self.base.config() });
        write_tensor_file(path, "lora", meta, &tensors)
    }

    /// Attaches modules saved by [`AdaptedModel::save_lora`] to `base`.
    pub fn load_lora(base: DualEncoderModel<T>, path: &Path) -> Result<Self> {
        let file = read_tensor_file::<T>(path)?;
        if file.kind != "lora" {
            return Err(Error::Format(format!("expected a LoRA checkpoint, found {:?}", file.kind)));
        }
        let placement: PlacementConfig = serde_json::from_value(file.meta["placement"].clone())
            .map_err(|e| Error::Format(format!("bad placement metadata: {e}")))?;
        let mut adapted = AdaptedModel::new(base);
        adapted.inject(&placement, 0).map_err(|e| Error::Format(format!("placement does not fit base: {e}")))?;
        let mut loaded: BTreeMap<String, Tensor<T>> = file.tensors.into_iter().collect();
        for (t, m) in adapted.modules.iter_mut() {
            for (suffix, slot) in [("a", &mut m.a), ("b", &mut m.b)] {
                let name = format!("{}.{suffix}", module_name(t));
                let tensor = loaded.remove(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
                if tensor.shape() != slot.shape() {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, base expects {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor.trainable();
            }
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(adapted)
    }
}

impl<T: Scalar> ProjectionHook<T> for AdaptedModel<T> {
    fn delta(&self, fwd: &mut Forward<'_, T>, target: AttnTarget, input: Var) -> Result<Option<Var>> {
        match self.modules.get(&target) {
            Some(m) if !self.is_merged() => m.record_delta(fwd, &module_name(&target), input).map(Some),
            _ => Ok(None),
        }
    }
}
