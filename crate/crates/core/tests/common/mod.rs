#![allow(dead_code)]

use gpaslab::autodiff::{Tape, Tensor, Var};
use gpaslab::data::Corpus;
use gpaslab::schemes::{ForwardOptions, ModelConfig, Scheme, SchemeConfig, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ff: Some(12),
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(scheme: Scheme, gpas: bool, n_layers: usize, seed: u64) -> TransformerModel<f64> {
    TransformerModel::new(tiny_config(n_layers), SchemeConfig::new(scheme, gpas), seed).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_ids(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Loss and every parameter gradient for one batch of `ids` (targets are
/// `ids` shifted by one, wrapping).
pub fn loss_and_grads(
    model: &TransformerModel<f64>,
    ids: &[usize],
    batch: usize,
    seq: usize,
) -> (f64, Vec<Tensor<f64>>) {
    let targets: Vec<usize> = (0..ids.len()).map(|i| ids[(i + 1) % ids.len()]).collect();
    let tape = Tape::new();
    let p = model.bind(&tape);
    let (loss, _) = model
        .loss(&tape, &p, ids, &targets, batch, seq, &ForwardOptions::default())
        .unwrap();
    let v = tape.value(loss).item();
    tape.backward(loss).unwrap();
    (v, model.params.collect_grads(&tape, &p).unwrap())
}

pub fn logits(model: &TransformerModel<f64>, ids: &[usize], batch: usize, seq: usize) -> Vec<f64> {
    let tape = Tape::new();
    let p = model.bind(&tape);
    let out = model.forward(&tape, &p, ids, batch, seq, &ForwardOptions::default()).unwrap();
    let v = tape.value(out.logits).data().to_vec();
    v
}

pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Zeroes every attention and FFN matrix, so each module outputs 0.
pub fn zero_modules(model: &mut TransformerModel<f64>) {
    let idx: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|s| [s.wq, s.wk, s.wv, s.wo, s.w_gate, s.w_up, s.w_down])
        .collect();
    for i in idx {
        let shape = model.params.get(i).shape().to_vec();
        *model.params.get_mut(i) = Tensor::zeros(shape);
    }
}

pub fn value(tape: &Tape<f64>, v: Var) -> Vec<f64> {
    let out = tape.value(v).data().to_vec();
    out
}

/// Pseudo-text long enough for a few batches at tiny dims.
pub fn toy_corpus(len: usize, seed: u64) -> Corpus {
    let words = ["the ", "gate ", "scales ", "residual ", "stream ", "and ", "norm ", "layer. "];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(len + 8);
    while bytes.len() < len {
        bytes.extend_from_slice(words[rng.random_range(0..words.len())].as_bytes());
    }
    bytes.truncate(len);
    // fold into the tiny vocabulary
    for b in &mut bytes {
        *b %= 16;
    }
    Corpus::new(bytes, 0.1, seed).unwrap()
}

fn layer_scalar(model: &TransformerModel<f64>, l: usize, x: &Tensor<f64>, up: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    let p = model.bind(&tape);
    let xv = tape.constant(x.clone());
    let y = model.forward_layer(&tape, &p, l, xv).unwrap();
    let yv = tape.value(y);
    yv.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
}

/// Parameter indices belonging to layer `l`, gate included.
pub fn layer_param_indices(model: &TransformerModel<f64>, l: usize) -> Vec<usize> {
    let s = &model.layers[l];
    let mut idx = s.attention_params();
    idx.extend(s.ffn_params());
    idx.extend(s.gate);
    idx
}

/// Worst normwise relative error between AD and central differences for
/// layer `l` of `model`, over the listed parameters and, if asked, the
/// layer input.
pub fn layer_fd_error(model: &TransformerModel<f64>, l: usize, seed: u64, params: &[usize], with_input: bool) -> f64 {
    use gpaslab::autodiff::gradcheck::{finite_difference_grad, relative_error};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.model.d_model;
    let x = random_tensor(&mut rng, &[2, 3, d], -1.5, 1.5);
    let up = random_tensor(&mut rng, &[2, 3, d], -1.0, 1.0);

    let tape = Tape::new();
    let p = model.bind(&tape);
    let xv = tape.param(x.clone());
    let y = model.forward_layer(&tape, &p, l, xv).unwrap();
    let u = tape.constant(up.clone());
    let prod = tape.mul(y, u).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    if with_input {
        let fd = finite_difference_grad(|t| layer_scalar(model, l, t, &up), &x, 1e-5);
        worst = worst.max(relative_error(tape.grad(xv).unwrap().data(), fd.data()));
    }
    for &i in params {
        let fd = finite_difference_grad(
            |t| {
                let mut m = model.clone();
                *m.params.get_mut(i) = t.clone();
                layer_scalar(&m, l, &x, &up)
            },
            model.params.get(i),
            1e-5,
        );
        let ad = tape.grad(p[i]).unwrap_or_else(|| Tensor::zeros(fd.shape().to_vec()));
        worst = worst.max(relative_error(ad.data(), fd.data()));
    }
    worst
}

/// Randomises gains and gates so no parameter sits at a special value.
pub fn perturb_norms_and_gates(model: &mut TransformerModel<f64>, seed: u64) {
    use gpaslab::schemes::ParamGroup;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.params.len() {
        let e = &model.params.entries()[i];
        let shape = e.value.shape().to_vec();
        match e.group {
            ParamGroup::Gate => *model.params.get_mut(i) = random_tensor(&mut rng, &shape, -1.2, 1.2),
            _ if !e.is_matrix => *model.params.get_mut(i) = random_tensor(&mut rng, &shape, 0.5, 1.5),
            _ => {}
        }
    }
}

/// Scales every matrix so tiny models have non-trivial activations.
pub fn scale_matrices(model: &mut TransformerModel<f64>, c: f64) {
    for i in 0..model.params.len() {
        if model.params.entries()[i].is_matrix {
            let t = model.params.get(i).map(|v| v * c);
            *model.params.get_mut(i) = t;
        }
    }
}
