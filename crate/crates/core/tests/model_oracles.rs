//! Dual-encoder forward passes against step-by-step scalar references.

mod common;

use common::*;
use fewlora::model::{AttentionBlock, EncoderConfig, Forward, TextBatch};
use fewlora::{
    tokenize_prompt, AttentionLayout, ClassPrompt, DualEncoderModel, EncoderKind, ModelConfig, Model64, Tensor,
    Vocabulary,
};
use rand::Rng;

fn small_config(depth: usize, width: usize, heads: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(14).with_encoder(EncoderConfig { depth, width, heads }, width / 2);
    c.text.max_len = 12;
    c
}

/// Replaces zero-initialized biases and unit gains so every path is exercised.
fn perturb(model: &mut Model64, seed: u64) {
    let mut r = rng(seed);
    for (_, name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".gain") {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            for v in t.data_mut() {
                *v = base + r.gen_range(-0.3..0.3);
            }
        }
    }
}

fn p(model: &Model64, name: &str) -> Tensor<f64> {
    model.params.by_name(name).unwrap().clone()
}

fn naive_block(model: &Model64, prefix: &str, x: &Mat, heads: usize, valid: &[bool]) -> Mat {
    let lin = |x: &Mat, n: &str| naive_linear(x, &to_mat(&p(model, &format!("{prefix}.{n}.weight"))), p(model, &format!("{prefix}.{n}.bias")).data());
    let ln = |x: &Mat, n: &str| naive_layer_norm(x, p(model, &format!("{prefix}.{n}.gain")).data(), p(model, &format!("{prefix}.{n}.bias")).data());
    let h = ln(x, "ln1");
    let att = naive_heads(&lin(&h, "attn.q"), &lin(&h, "attn.k"), &lin(&h, "attn.v"), heads, valid);
    let x = add_mat(x, &lin(&att, "attn.o"));
    let h = ln(&x, "ln2");
    let m: Mat = lin(&h, "mlp.fc1").into_iter().map(|r| r.into_iter().map(naive_gelu).collect()).collect();
    add_mat(&x, &lin(&m, "mlp.fc2"))
}

fn naive_image(model: &Model64, pixels: &[f32]) -> Vec<f64> {
    let c = model.config().vision;
    let ps = c.patch_size;
    let mut tokens = vec![p(model, "vision.class_token").data().to_vec()];
    let w = to_mat(&p(model, "vision.patch_embed"));
    for gy in 0..c.image_height / ps {
        for gx in 0..c.image_width / ps {
            let mut patch = Vec::new();
            for dy in 0..ps {
                for dx in 0..ps {
                    patch.push(pixels[(gy * ps + dy) * c.image_width + gx * ps + dx] as f64);
                }
            }
            tokens.push(naive_linear(&vec![patch], &w, &vec![0.0; w.len()])[0].clone());
        }
    }
    let pos = to_mat(&p(model, "vision.pos_embed"));
    let mut x = add_mat(&tokens, &pos);
    x = naive_layer_norm(&x, p(model, "vision.ln_pre.gain").data(), p(model, "vision.ln_pre.bias").data());
    let valid = vec![true; x.len()];
    for l in 0..c.encoder.depth {
        x = naive_block(model, &format!("vision.blocks.{l}"), &x, c.encoder.heads, &valid);
    }
    let pooled = naive_layer_norm(&vec![x[0].clone()], p(model, "vision.ln_post.gain").data(), p(model, "vision.ln_post.bias").data());
    let proj = to_mat(&p(model, "vision.proj"));
    normalize(&naive_linear(&pooled, &proj, &vec![0.0; proj.len()])[0])
}

fn naive_text(model: &Model64, tokens: &[u32]) -> Vec<f64> {
    let c = model.config().text;
    let eos = tokens.iter().position(|&t| t == 2).unwrap();
    let table = to_mat(&p(model, "text.token_embed"));
    let pos = to_mat(&p(model, "text.pos_embed"));
    // explicit full-length sequence with pad keys masked out
    let mut x: Mat = tokens.iter().enumerate().map(|(i, &t)| table[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let valid: Vec<bool> = (0..tokens.len()).map(|j| j <= eos).collect();
    for l in 0..c.encoder.depth {
        x = naive_block(model, &format!("text.blocks.{l}"), &x, c.encoder.heads, &valid);
    }
    let pooled = naive_layer_norm(&vec![x[eos].clone()], p(model, "text.ln_final.gain").data(), p(model, "text.ln_final.bias").data());
    let proj = to_mat(&p(model, "text.proj"));
    normalize(&naive_linear(&pooled, &proj, &vec![0.0; proj.len()])[0])
}

#[test]
fn multi_head_attention_matches_per_head_oracle() {
    for seed in 0..5 {
        let mut model = Model64::new(small_config(1, 4, 2), seed).unwrap();
        perturb(&mut model, seed + 50);
        let x = random(&[3, 4], &mut rng(seed + 7));
        let block: AttentionBlock = model.vision.blocks[0];
        let mut fwd = Forward::eval();
        let xv = fwd.tape.constant(x.clone());
        let layout = AttentionLayout { n_seq: 1, seq_len: 3, heads: 2, key_mask: None };
        let out = model.multi_head_attention(&mut fwd, xv, &block, layout, EncoderKind::Vision, 0).unwrap();
        let prefix = "vision.blocks.0.attn";
        let lin = |n: &str, x: &Mat| naive_linear(x, &to_mat(&p(&model, &format!("{prefix}.{n}.weight"))), p(&model, &format!("{prefix}.{n}.bias")).data());
        let xm = to_mat(&x);
        let heads = naive_heads(&lin("q", &xm), &lin("k", &xm), &lin("v", &xm), 2, &[true; 3]);
        let expected = lin("o", &heads);
        let got = to_mat(fwd.tape.value(out));
        for (gr, er) in got.iter().zip(&expected) {
            for (g, e) in gr.iter().zip(er) {
                assert!((g - e).abs() < 1e-12, "seed {seed}: {g} vs {e}");
            }
        }
    }
}

#[test]
fn single_token_attention_reduces_to_value_output_path() {
    let mut model = Model64::new(small_config(1, 4, 2), 3).unwrap();
    perturb(&mut model, 4);
    let x = random(&[1, 4], &mut rng(5));
    let block = model.vision.blocks[0];
    let mut fwd = Forward::eval();
    let xv = fwd.tape.constant(x.clone());
    let layout = AttentionLayout { n_seq: 1, seq_len: 1, heads: 2, key_mask: None };
    let out = model.multi_head_attention(&mut fwd, xv, &block, layout, EncoderKind::Vision, 0).unwrap();
    let pre = "vision.blocks.0.attn";
    let lin = |n: &str, x: &Mat| naive_linear(x, &to_mat(&p(&model, &format!("{pre}.{n}.weight"))), p(&model, &format!("{pre}.{n}.bias")).data());
    let expected = lin("o", &lin("v", &to_mat(&x)));
    for (g, e) in fwd.tape.value(out).data().iter().zip(&expected[0]) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn zero_value_weights_give_zero_attention_output() {
    let mut model = Model64::new(small_config(1, 8, 2), 3).unwrap();
    for name in ["vision.blocks.0.attn.v.weight", "vision.blocks.0.attn.v.bias", "vision.blocks.0.attn.o.bias"] {
        let id = model.params.id(name).unwrap();
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let block = model.vision.blocks[0];
    let mut fwd = Forward::eval();
    let xv = fwd.tape.constant(random(&[5, 8], &mut rng(1)));
    let layout = AttentionLayout { n_seq: 1, seq_len: 5, heads: 2, key_mask: None };
    let out = model.multi_head_attention(&mut fwd, xv, &block, layout, EncoderKind::Vision, 0).unwrap();
    assert!(fwd.tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn image_encoder_matches_scripted_forward() {
    for seed in 0..3 {
        let mut model = Model64::new(small_config(2, 8, 2), seed).unwrap();
        perturb(&mut model, seed + 10);
        let px = random_pixels(2, seed + 20);
        let z = model.encode_images(&px, 2).unwrap();
        for i in 0..2 {
            let expected = naive_image(&model, &px[i * 256..(i + 1) * 256]);
            for (g, e) in z.row(i).iter().zip(&expected) {
                assert!((g - e).abs() < 1e-10, "seed {seed} image {i}: {g} vs {e}");
            }
        }
    }
}

#[test]
fn toy_image_encoder_matches_scripted_forward() {
    let mut model = Model64::new(ModelConfig::toy(10), 1).unwrap();
    perturb(&mut model, 2);
    let px = random_pixels(1, 3);
    let z = model.encode_images(&px, 1).unwrap();
    let expected = naive_image(&model, &px);
    for (g, e) in z.data().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-10, "{g} vs {e}");
    }
}

#[test]
fn text_encoder_matches_masked_oracle() {
    let vocab = Vocabulary::build(["red", "blue", "square", "disc", "large"]);
    let mut model = Model64::new(small_config(2, 8, 2), 4).unwrap();
    perturb(&mut model, 5);
    let prompts: Vec<ClassPrompt> = ["red square", "large blue disc", "disc"]
        .iter()
        .map(|n| tokenize_prompt(n, &vocab, 12).unwrap())
        .collect();
    let z = model.encode_prompts(&prompts).unwrap();
    for (i, p) in prompts.iter().enumerate() {
        let expected = naive_text(&model, &p.tokens);
        for (g, e) in z.row(i).iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10, "{}: {g} vs {e}", p.class_name);
        }
    }
}

#[test]
fn padding_does_not_change_text_embeddings() {
    let vocab = Vocabulary::build(["red", "blue", "square", "disc", "large"]);
    let mut model = DualEncoderModel::<f32>::new(small_config(2, 8, 2), 4).unwrap();
    let _ = &mut model;
    let short = tokenize_prompt("disc", &vocab, 12).unwrap();
    let long = tokenize_prompt("large blue disc", &vocab, 12).unwrap();
    let alone = model.encode_text(&short).unwrap();
    // encoded next to a longer prompt, the short one is padded and masked
    let batch = model.encode_prompts(&[long, short.clone()]).unwrap();
    for (a, b) in alone.data().iter().zip(batch.row(1)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(model.encode_text(&short).unwrap().bit_eq(&alone));
}

#[test]
fn full_stack_gradients_pass_finite_differences() {
    // depth-1, width-8 dual encoder; every parameter is checked
    let vocab = Vocabulary::build(["red", "blue", "disc"]);
    let mut config = small_config(1, 8, 2);
    config.text.vocab_size = vocab.len();
    let mut model = Model64::new(config, 8).unwrap();
    perturb(&mut model, 9);
    let prompts: Vec<ClassPrompt> = ["red disc", "blue disc", "disc"].iter().map(|n| tokenize_prompt(n, &vocab, 12).unwrap()).collect();
    let px = random_pixels(4, 10);
    let labels = [0usize, 2, 1, 1];
    let loss_of = |m: &Model64, grads: bool| {
        let mut fwd = if grads { Forward::train(0) } else { Forward::eval() };
        let img = m.image_embeddings(&mut fwd, &px, 4).unwrap();
        let txt = m.text_embeddings(&mut fwd, &TextBatch::from_prompts(&prompts).unwrap(), None).unwrap();
        let logits = fwd.tape.matmul_nt(img, txt).unwrap();
        let scaled = fwd.tape.scale(logits, 1.0 / 0.3).unwrap();
        let loss = fwd.tape.cross_entropy(scaled, &labels).unwrap();
        (fwd, loss)
    };
    let (mut fwd, loss) = loss_of(&model, true);
    let grads = fwd.tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        if name == "temperature" {
            continue;
        }
        let analytic = grads.get(fwd.var(&name).unwrap()).unwrap().clone();
        for j in 0..analytic.len() {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let (f1, l1) = loss_of(&model, false);
            model.params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let (f2, l2) = loss_of(&model, false);
            model.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (f1.tape.value(l1).data()[0] - f2.tape.value(l2).data()[0]) / (2.0 * FD_STEP);
            let e = rel_err(analytic.data()[j], numeric);
            assert!(e < REL_TOL, "{name}[{j}]: analytic {} numeric {numeric}", analytic.data()[j]);
            worst = worst.max(e);
        }
    }
    assert!(worst < REL_TOL);
}
