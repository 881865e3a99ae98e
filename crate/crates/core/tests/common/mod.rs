#![allow(dead_code)]

use fewlora::fewshot::record_class_logits;
use fewlora::model::{EncoderConfig, Forward};
use fewlora::{
    tokenize_prompt, Adapted64, AdaptedModel, ClassPrompt, EncoderChoice, LayerSpan, MatrixGroup, ModelConfig, PlacementConfig,
    Scalar, Tape, Tensor, Var, Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for relative error: gradients smaller than this are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Worst relative error between tape gradients and central differences over
/// every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone().trainable())).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap();
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            let numeric = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Fixed random projection that turns any tensor into a scalar loss with
/// non-degenerate gradients.
pub fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng(seed)));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod).unwrap()
}

pub fn identity(n: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

// ---------------------------------------------------------------------------
// Naive scalar-loop reference implementations, independent of the tape.

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.matrix_dims();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// `x W^T + b` with `W` stored `[out, in]`.
pub fn naive_linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wr, bi)| row.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>() + bi)
                .collect()
        })
        .collect()
}

pub fn naive_layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

pub fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One sequence of per-head attention; `valid[j]` marks attendable keys.
pub fn naive_heads(q: &Mat, k: &Mat, v: &Mat, heads: usize, valid: &[bool]) -> Mat {
    let s = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; s];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = (0..s).filter(|&j| valid[j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
            let e: Vec<f64> = (0..s).map(|j| if valid[j] { (scores[j] - max).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..s).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

pub fn add_mat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

// ---------------------------------------------------------------------------
// Small LoRA fixtures.

pub const CLASS_NAMES: [&str; 3] = ["red disc", "blue disc", "red bar"];

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::build(["red", "blue", "disc", "bar"])
}

/// Dual encoder with `depth` blocks of `width` per encoder on 16x16 images.
pub fn tiny_config(depth: usize, width: usize, heads: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(tiny_vocab().len()).with_encoder(EncoderConfig { depth, width, heads }, width / 2);
    c.text.max_len = 10;
    c
}

pub fn tiny_prompts(max_len: usize) -> Vec<ClassPrompt> {
    let vocab = tiny_vocab();
    CLASS_NAMES.iter().map(|n| tokenize_prompt(n, &vocab, max_len).unwrap()).collect()
}

pub fn random_pixels(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n * 256).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn placement(matrices: &str, span: LayerSpan, encoders: EncoderChoice, rank: usize) -> PlacementConfig {
    PlacementConfig { matrices: matrices.parse::<MatrixGroup>().unwrap(), span, encoders, rank, ..PlacementConfig::default() }
}

/// Fills every `B` with uniform values in `[-amp, amp]` so the deltas are non-zero.
pub fn randomize_b<T: Scalar>(adapted: &mut AdaptedModel<T>, amp: f64, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in adapted.trainables_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = T::of(r.gen_range(-amp..amp));
            }
        }
    }
}

/// Cross-entropy of the tempered class logits through the adapted model.
pub fn lora_loss(
    adapted: &Adapted64,
    pixels: &[f32],
    prompts: &[ClassPrompt],
    labels: &[usize],
    inv_tau: f64,
    names: &[String],
) -> (f64, Vec<Tensor<f64>>) {
    let training = !names.is_empty();
    let mut fwd = (if training { Forward::train(0) } else { Forward::eval() }).with_hook(adapted.hook());
    let logits = record_class_logits(adapted.base(), &mut fwd, pixels, labels.len(), prompts, inv_tau).unwrap();
    let loss = fwd.tape.cross_entropy(logits, labels).unwrap();
    let value = fwd.tape.value(loss).data()[0];
    if !training {
        return (value, Vec::new());
    }
    let grads = fwd.tape.backward(loss).unwrap();
    let analytic = names.iter().map(|n| grads.get(fwd.var(n).expect("module bound")).unwrap().clone()).collect();
    (value, analytic)
}

/// Worst relative error between tape gradients and central differences over
/// every element of every LoRA tensor, plus the number of elements checked.
/// Module dropout must be zero so both paths evaluate the same function.
pub fn lora_gradcheck(adapted: &mut Adapted64, pixels: &[f32], prompts: &[ClassPrompt], labels: &[usize], inv_tau: f64) -> (f64, usize) {
    let names: Vec<String> = adapted.trainables_mut().into_iter().map(|(n, _)| n).collect();
    let (_, analytic) = lora_loss(adapted, pixels, prompts, labels, inv_tau, &names);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = adapted.trainables_mut()[i].1.data()[j];
            let set = |a: &mut Adapted64, v: f64| a.trainables_mut()[i].1.data_mut()[j] = v;
            set(adapted, orig + FD_STEP);
            let plus = lora_loss(adapted, pixels, prompts, labels, inv_tau, &[]).0;
            set(adapted, orig - FD_STEP);
            let minus = lora_loss(adapted, pixels, prompts, labels, inv_tau, &[]).0;
            set(adapted, orig);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
