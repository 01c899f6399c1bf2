//! Optimisation loop: Adam, warmup + cosine schedule, two-level clipping,
//! evaluation and resumable state.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint_header, CheckpointHeader, RngState, CHECKPOINT_MAGIC};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::data::{Batch, Corpus};
use crate::error::{Error, Result};
use crate::schemes::{ForwardOptions, ParamGroup, TransformerModel};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub global_clip: Option<f64>,
    /// Max |grad(alpha)| per gate, applied before global clipping.
    pub gate_clip: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub freeze_gates: bool,
    pub eval_interval: usize,
    pub eval_tokens: usize,
    pub split_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 32,
            seq_len: 256,
            global_clip: Some(1.0),
            gate_clip: Some(0.01),
            seed: 0,
            precision: Precision::F64,
            freeze_gates: false,
            eval_interval: 200,
            eval_tokens: 16384,
            split_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_interval == 0 || self.eval_tokens == 0 {
            return bad("batch_size, seq_len, eval_interval and eval_tokens must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        for c in [self.global_clip, self.gate_clip].into_iter().flatten() {
            if !(c > 0.0) {
                return bad("clip thresholds must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.split_fraction) {
            return bad("split_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 10% of the peak
/// at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.learning_rate;
    let (w, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return peak * step as f64 / w as f64;
    }
    if total <= w {
        return peak;
    }
    let progress = ((step - w) as f64 / (total - w) as f64).min(1.0);
    let floor = 0.1 * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &crate::schemes::ParamStore<T>) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update, skipping parameters flagged in `frozen`.
pub fn adam_step<T: Float>(
    params: &mut crate::schemes::ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    frozen: &[bool],
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let one = T::one();
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    for (i, g) in grads.iter().enumerate() {
        if frozen[i] {
            continue;
        }
        let p = params.get_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct ClipReport {
    /// Per-layer |grad(alpha)| before and after the gate clip.
    pub gate_pre: Vec<f64>,
    pub gate_post: Vec<f64>,
    /// L2 norm over all non-gate gradients before and after global clipping.
    pub global_pre: f64,
    pub global_post: f64,
    pub scale: f64,
}

/// Clips each gate gradient to `gate_clip` in magnitude, then rescales every
/// non-gate gradient so their joint L2 norm is at most `global_clip`.
pub fn clip_gradients<T: Float>(
    model: &TransformerModel<T>,
    grads: &mut [Tensor<T>],
    gate_clip: Option<f64>,
    global_clip: Option<f64>,
) -> ClipReport {
    let mut report = ClipReport {
        scale: 1.0,
        ..Default::default()
    };
    for slots in &model.layers {
        let Some(g) = slots.gate else { continue };
        let v = grads[g].item();
        report.gate_pre.push(v.f64().abs());
        if let Some(c) = gate_clip {
            let c = T::of(c);
            if v.abs() > c {
                grads[g] = Tensor::scalar(c.copysign(v));
            }
        }
        report.gate_post.push(grads[g].item().f64().abs());
    }
    let entries = model.params.entries();
    let norm = grads
        .iter()
        .zip(entries)
        .filter(|(_, e)| e.group != ParamGroup::Gate)
        .map(|(g, _)| g.sum_sq())
        .sum::<f64>()
        .sqrt();
    report.global_pre = norm;
    report.global_post = norm;
    if let Some(c) = global_clip {
        if norm > c {
            let s = c / norm;
            let st = T::of(s);
            for (g, e) in grads.iter_mut().zip(entries) {
                if e.group != ParamGroup::Gate {
                    g.data_mut().iter_mut().for_each(|v| *v = *v * st);
                }
            }
            report.scale = s;
            report.global_post = c;
        }
    }
    report
}

/// Loss and gradients of one batch.
pub struct StepGrads<T: Float> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub tape: Tape<T>,
    pub params: Vec<Var>,
    pub layer_inputs: Vec<Var>,
}

pub fn compute_gradients<T: Float>(model: &TransformerModel<T>, batch: &Batch) -> Result<StepGrads<T>> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let (loss, out) = model.loss(
        &tape,
        &params,
        &batch.inputs,
        &batch.targets,
        batch.batch,
        batch.seq,
        &ForwardOptions::default(),
    )?;
    let loss_value = tape.value(loss).item().f64();
    tape.backward(loss)?;
    let grads = model.params.collect_grads(&tape, &params)?;
    Ok(StepGrads {
        loss: loss_value,
        grads,
        tape,
        params,
        layer_inputs: out.layer_inputs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Token-mean cross-entropy over `batches`; perplexity is `exp(loss)`.
pub fn evaluate_batches<T: Float>(
    model: &TransformerModel<T>,
    batches: &[Batch],
    opts: &ForwardOptions,
) -> Result<EvalResult> {
    let mut total = 0.0;
    let mut tokens = 0;
    for b in batches {
        let tape = Tape::new();
        let params = model.bind(&tape);
        let (loss, _) = model.loss(&tape, &params, &b.inputs, &b.targets, b.batch, b.seq, opts)?;
        let n = b.targets.len();
        total += tape.value(loss).item().f64() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Config("evaluation needs at least one batch".into()));
    }
    let loss = total / tokens as f64;
    Ok(EvalResult {
        loss,
        perplexity: loss.exp(),
        tokens,
    })
}

pub fn evaluate<T: Float>(model: &TransformerModel<T>, corpus: &Corpus, cfg: &TrainConfig) -> Result<EvalResult> {
    let batches = corpus.eval_batches(cfg.eval_tokens, cfg.batch_size, cfg.seq_len)?;
    evaluate_batches(model, &batches, &ForwardOptions::default())
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState<T: Float> {
    pub model: TransformerModel<T>,
    pub adam: AdamState<T>,
    /// Optimizer updates applied so far; also the next batch index.
    pub step: usize,
    pub data_seed: u64,
}

impl<T: Float> TrainState<T> {
    pub fn new(model: TransformerModel<T>, data_seed: u64) -> Self {
        let adam = AdamState::new(&model.params);
        Self {
            model,
            adam,
            step: 0,
            data_seed,
        }
    }

    /// Parameters that the optimizer must leave untouched.
    pub fn frozen_mask(&self, cfg: &TrainConfig) -> Vec<bool> {
        let gate = self.model.gate();
        let freeze = cfg.freeze_gates || !gate.learnable;
        self.model
            .params
            .entries()
            .iter()
            .map(|e| freeze && e.group == ParamGroup::Gate)
            .collect()
    }
}

/// One row of the loss stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub perplexity: f64,
    pub lr: Option<f64>,
    pub global_grad_norm: Option<f64>,
}

/// Per-step view handed to hooks, taken after backward and clipping and
/// before the optimizer update.
pub struct StepContext<'a, T: Float> {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub model: &'a TransformerModel<T>,
    /// Raw gradients, before any clipping.
    pub raw_grads: &'a [Tensor<T>],
    pub clip: &'a ClipReport,
    pub tape: &'a Tape<T>,
    pub layer_inputs: &'a [Var],
}

pub trait TrainHooks<T: Float> {
    fn on_step(&mut self, _ctx: &StepContext<'_, T>) -> Result<()> {
        Ok(())
    }

    fn on_loss(&mut self, _row: &LossRow) -> Result<()> {
        Ok(())
    }

    /// Called after each periodic evaluation past step 0.
    fn on_checkpoint(&mut self, _state: &TrainState<T>, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl<T: Float> TrainHooks<T> for NoHooks {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub initial_eval: Option<EvalResult>,
    pub final_train_loss: Option<f64>,
    pub final_eval: EvalResult,
    pub gate_alphas: Vec<f64>,
}

fn eval_row(step: usize, r: &EvalResult) -> LossRow {
    LossRow {
        step,
        split: "eval".into(),
        loss: r.loss,
        perplexity: r.perplexity,
        lr: None,
        global_grad_norm: None,
    }
}

fn layer_grad_norms<T: Float>(model: &TransformerModel<T>, grads: &[Tensor<T>]) -> Vec<f64> {
    model
        .layers
        .iter()
        .map(|s| {
            s.attention_params()
                .into_iter()
                .chain(s.ffn_params())
                .map(|i| grads[i].sum_sq())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Runs updates `state.step + 1 ..= cfg.total_steps` of next-token training.
///
/// Evaluation happens before the first update of a fresh run, every
/// `eval_interval` updates, and after the last one. A non-finite loss or
/// gradient aborts with the last finite per-layer gradient norms.
pub fn train<T: Float>(
    state: &mut TrainState<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks<T>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let eval_batches = corpus.eval_batches(cfg.eval_tokens, cfg.batch_size, cfg.seq_len)?;
    let eval = |m: &TransformerModel<T>| evaluate_batches(m, &eval_batches, &ForwardOptions::default());
    state
        .model
        .set_gate_policy(!cfg.freeze_gates, cfg.gate_clip);
    let frozen = state.frozen_mask(cfg);

    let mut initial_eval = None;
    let mut last_eval = None;
    if state.step == 0 {
        let r = eval(&state.model)?;
        hooks.on_loss(&eval_row(0, &r))?;
        initial_eval = Some(r);
        last_eval = Some((0, r));
    }
    let mut last_norms: Vec<f64> = Vec::new();
    let mut final_train_loss = None;
    while state.step < cfg.total_steps {
        let k = state.step;
        let batch = corpus.next_batch(k, cfg.batch_size, cfg.seq_len)?;
        let diverged = |detail: String| Error::Diverged {
            step: k,
            detail: format!("{detail}; last finite layer grad norms {last_norms:?}"),
        };
        let sg = match compute_gradients(&state.model, &batch) {
            Ok(sg) => sg,
            Err(Error::NonFiniteGradient { op }) => {
                return Err(diverged(format!("non-finite gradient in {op}")));
            }
            Err(e) => return Err(e),
        };
        if !sg.loss.is_finite() {
            return Err(diverged(format!("loss {}", sg.loss)));
        }
        let raw = sg.grads.clone();
        let mut grads = sg.grads;
        let clip = clip_gradients(&state.model, &mut grads, cfg.gate_clip, cfg.global_clip);
        let lr = lr_at(k + 1, cfg);
        hooks.on_step(&StepContext {
            step: k,
            loss: sg.loss,
            lr,
            model: &state.model,
            raw_grads: &raw,
            clip: &clip,
            tape: &sg.tape,
            layer_inputs: &sg.layer_inputs,
        })?;
        hooks.on_loss(&LossRow {
            step: k,
            split: "train".into(),
            loss: sg.loss,
            perplexity: sg.loss.exp(),
            lr: Some(lr),
            global_grad_norm: Some(clip.global_pre),
        })?;
        last_norms = layer_grad_norms(&state.model, &raw);
        drop(sg.tape);
        adam_step(&mut state.model.params, &grads, &mut state.adam, lr, &frozen);
        state.step += 1;
        final_train_loss = Some(sg.loss);

        if state.step.is_multiple_of(cfg.eval_interval) || state.step == cfg.total_steps {
            let r = eval(&state.model)?;
            hooks.on_loss(&eval_row(state.step, &r))?;
            hooks.on_checkpoint(state, cfg)?;
            last_eval = Some((state.step, r));
        }
    }
    let final_eval = match last_eval {
        Some((s, r)) if s == state.step => r,
        _ => eval(&state.model)?,
    };
    Ok(RunSummary {
        steps: state.step,
        initial_eval,
        final_train_loss,
        final_eval,
        gate_alphas: state.model.gate_alphas(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchors() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 200,
            total_steps: 2000,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 5e-4);
        assert_eq!(lr_at(200, &cfg), 1e-3);
        assert!((lr_at(2000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(1100, &cfg) - 5.5e-4).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (200..=2000).map(|s| lr_at(s, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
