//! Layerwise measurements: residual-stream variance, gradient norms, gate
//! values, weight norms, layer importance and run comparison.
//!
//! Nothing here records on the tape; values are read back after the fact, so
//! enabling capture cannot change a forward value, a gradient or an update.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::schemes::{ForwardOptions, TransformerModel};
use crate::training::{evaluate_batches, LossRow, StepContext, TrainConfig, TrainHooks, TrainState};

/// One layer at one instrumented step. `layer` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub layer: usize,
    pub act_var: f64,
    pub grad_norm: f64,
    pub attn_grad_norm: f64,
    pub ffn_grad_norm: f64,
    pub gate_alpha: Option<f64>,
    /// Act(alpha) under the configured gate activation.
    pub gate_silu: Option<f64>,
    pub gate_grad: Option<f64>,
    pub attn_weight_norm: f64,
    pub ffn_weight_norm: f64,
}

/// Population variance of one row, two-pass.
pub fn row_variance(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n
}

/// Mean over rows (tokens) of the population variance across the last axis.
pub fn mean_row_variance<T: Float>(t: &Tensor<T>) -> f64 {
    let d = *t.shape().last().expect("rank >= 1");
    let mut row = vec![0.0; d];
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in t.data().chunks_exact(d) {
        row.iter_mut().zip(chunk).for_each(|(r, v)| *r = v.f64());
        total += row_variance(&row);
        rows += 1;
    }
    total / rows as f64
}

/// Variance of each layer's input, read from a finished forward pass.
pub fn measure_activation_variance<T: Float>(tape: &Tape<T>, layer_inputs: &[Var]) -> Vec<f64> {
    layer_inputs
        .iter()
        .map(|&v| mean_row_variance(&tape.value(v)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerGradNorm {
    pub attn: f64,
    pub ffn: f64,
    /// Over attention and FFN parameters together, gate excluded.
    pub total: f64,
    pub gate: Option<f64>,
}

fn group_norm<T: Float>(ts: &[Tensor<T>], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| ts[i].sum_sq()).sum::<f64>().sqrt()
}

pub fn measure_grad_norms<T: Float>(model: &TransformerModel<T>, grads: &[Tensor<T>]) -> Result<Vec<LayerGradNorm>> {
    if grads.len() != model.params.len() {
        return Err(Error::MissingGradients);
    }
    Ok(model
        .layers
        .iter()
        .map(|s| {
            let attn = group_norm(grads, &s.attention_params());
            let ffn = group_norm(grads, &s.ffn_params());
            LayerGradNorm {
                attn,
                ffn,
                total: attn.hypot(ffn),
                gate: s.gate.map(|g| grads[g].item().f64()),
            }
        })
        .collect())
}

/// Frobenius norms of (attention matrices, FFN matrices) per layer.
pub fn weight_norms<T: Float>(model: &TransformerModel<T>) -> Vec<(f64, f64)> {
    let values: Vec<Tensor<T>> = model.params.entries().iter().map(|e| e.value.clone()).collect();
    model
        .layers
        .iter()
        .map(|s| {
            (
                group_norm(&values, &[s.wq, s.wk, s.wv, s.wo]),
                group_norm(&values, &[s.w_gate, s.w_up, s.w_down]),
            )
        })
        .collect()
}

/// `(alpha, Act(alpha))` per layer; empty without GPAS.
pub fn gate_snapshot<T: Float>(model: &TransformerModel<T>) -> Vec<(f64, f64)> {
    let act = model.scheme.gate_activation;
    model
        .gate_alphas()
        .into_iter()
        .map(|a| (a, act.apply(a)))
        .collect()
}

/// Builds the records for one step from a finished backward pass.
pub fn collect_records<T: Float>(
    step: usize,
    model: &TransformerModel<T>,
    tape: &Tape<T>,
    layer_inputs: &[Var],
    grads: &[Tensor<T>],
) -> Result<Vec<MetricsRecord>> {
    let vars = measure_activation_variance(tape, layer_inputs);
    let norms = measure_grad_norms(model, grads)?;
    let weights = weight_norms(model);
    let gates = gate_snapshot(model);
    Ok((0..model.n_layers())
        .map(|l| MetricsRecord {
            step,
            layer: l + 1,
            act_var: vars[l],
            grad_norm: norms[l].total,
            attn_grad_norm: norms[l].attn,
            ffn_grad_norm: norms[l].ffn,
            gate_alpha: gates.get(l).map(|g| g.0),
            gate_silu: gates.get(l).map(|g| g.1),
            gate_grad: norms[l].gate,
            attn_weight_norm: weights[l].0,
            ffn_weight_norm: weights[l].1,
        })
        .collect())
}

/// Training hook that keeps loss rows and layer records in memory and, when
/// given a run directory, appends them to `metrics.jsonl` / `layers.jsonl`
/// and writes `checkpoint.bin` after each periodic evaluation.
pub struct Recorder {
    pub interval: usize,
    pub loss_rows: Vec<LossRow>,
    pub records: Vec<MetricsRecord>,
    out_dir: Option<PathBuf>,
    metrics: Option<std::io::BufWriter<std::fs::File>>,
    layers: Option<std::io::BufWriter<std::fs::File>>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAYERS_FILE: &str = "layers.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

impl Recorder {
    pub fn in_memory(interval: usize) -> Self {
        Self {
            interval: interval.max(1),
            loss_rows: Vec::new(),
            records: Vec::new(),
            out_dir: None,
            metrics: None,
            layers: None,
        }
    }

    /// Appends to the run directory's files (created or extended).
    pub fn to_dir(interval: usize, dir: &Path, append: bool) -> Result<Self> {
        let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            let path = dir.join(name);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(std::io::BufWriter::new(f))
        };
        Ok(Self {
            metrics: Some(open(METRICS_FILE)?),
            layers: Some(open(LAYERS_FILE)?),
            out_dir: Some(dir.to_path_buf()),
            ..Self::in_memory(interval)
        })
    }

    fn write_line(
        w: &mut Option<std::io::BufWriter<std::fs::File>>,
        dir: &Option<PathBuf>,
        name: &str,
        v: &impl Serialize,
    ) -> Result<()> {
        if let Some(w) = w {
            let mut line = serde_json::to_vec(v)?;
            line.push(b'\n');
            let path = dir.as_ref().map(|d| d.join(name)).unwrap_or_default();
            w.write_all(&line).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for (w, name) in [(&mut self.metrics, METRICS_FILE), (&mut self.layers, LAYERS_FILE)] {
            if let Some(w) = w {
                let path = self.out_dir.as_ref().map(|d| d.join(name)).unwrap_or_default();
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    pub fn metrics_jsonl(&self) -> String {
        to_jsonl(&self.loss_rows)
    }

    pub fn layers_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

pub fn to_jsonl<S: Serialize>(rows: &[S]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("plain data") + "\n")
        .collect()
}

impl<T: Float> TrainHooks<T> for Recorder {
    fn on_step(&mut self, ctx: &StepContext<'_, T>) -> Result<()> {
        if !ctx.step.is_multiple_of(self.interval) {
            return Ok(());
        }
        let recs = collect_records(ctx.step, ctx.model, ctx.tape, ctx.layer_inputs, ctx.raw_grads)?;
        for r in &recs {
            Self::write_line(&mut self.layers, &self.out_dir, LAYERS_FILE, r)?;
        }
        self.records.extend(recs);
        Ok(())
    }

    fn on_loss(&mut self, row: &LossRow) -> Result<()> {
        Self::write_line(&mut self.metrics, &self.out_dir, METRICS_FILE, row)?;
        self.loss_rows.push(row.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<T>, cfg: &TrainConfig) -> Result<()> {
        self.flush()?;
        if let Some(dir) = &self.out_dir {
            state.save(&dir.join(CHECKPOINT_FILE), cfg)?;
        }
        Ok(())
    }
}

/// Eval-loss change when each layer in turn is replaced by the identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub base_loss: f64,
    /// `removed_loss[l] - base_loss`: positive means the layer helps.
    pub deltas: Vec<f64>,
    pub removed_loss: Vec<f64>,
}

pub fn layer_importance<T: Float>(model: &TransformerModel<T>, batches: &[Batch]) -> Result<ImportanceReport> {
    let base = evaluate_batches(model, batches, &ForwardOptions::default())?.loss;
    let mut removed_loss = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let opts = ForwardOptions { skip_layer: Some(l) };
        removed_loss.push(evaluate_batches(model, batches, &opts)?.loss);
    }
    Ok(ImportanceReport {
        base_loss: base,
        deltas: removed_loss.iter().map(|r| r - base).collect(),
        removed_loss,
    })
}

impl ImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,base_loss,removed_loss,delta\n");
        for (l, (r, d)) in self.removed_loss.iter().zip(&self.deltas).enumerate() {
            s += &format!("{},{},{},{}\n", l + 1, self.base_loss, r, d);
        }
        s
    }
}

/// Per-run data read back from a run directory.
#[derive(Clone, Debug, Default)]
pub struct RunData {
    pub loss_rows: Vec<LossRow>,
    pub records: Vec<MetricsRecord>,
}

fn read_jsonl<D: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            loss_rows: read_jsonl(&dir.join(METRICS_FILE))?,
            records: read_jsonl(&dir.join(LAYERS_FILE))?,
        })
    }

    fn steps(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.records.iter().map(|r| r.step).collect();
        s.dedup();
        s
    }

    fn n_layers(&self) -> usize {
        self.records.iter().map(|r| r.layer).max().unwrap_or(0)
    }

    fn at(&self, step: usize) -> Vec<&MetricsRecord> {
        self.records.iter().filter(|r| r.step == step).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioRow {
    pub metric: String,
    pub layer: String,
    pub value_a: f64,
    pub value_b: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossDelta {
    pub step: usize,
    pub split: String,
    pub loss_a: f64,
    pub loss_b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub step: usize,
    pub ratios: Vec<RatioRow>,
    pub loss_deltas: Vec<LossDelta>,
}

/// `b / a`, defined as 1 when the two values are equal (including 0/0).
pub fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        b / a
    }
}

pub const RATIO_METRICS: [&str; 4] = ["act_var", "grad_norm", "attn_weight_norm", "ffn_weight_norm"];

fn metric(r: &MetricsRecord, name: &str) -> f64 {
    match name {
        "act_var" => r.act_var,
        "grad_norm" => r.grad_norm,
        "attn_weight_norm" => r.attn_weight_norm,
        _ => r.ffn_weight_norm,
    }
}

/// Per-layer `b / a` ratios at the last instrumented step plus loss-curve
/// deltas. Both runs must share depth and instrumentation schedule.
pub fn compare_runs(a: &RunData, b: &RunData) -> Result<Comparison> {
    let (sa, sb) = (a.steps(), b.steps());
    if sa != sb || sa.is_empty() {
        let head = |s: &[usize]| s.iter().take(4).map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        return Err(Error::ScheduleMismatch(format!(
            "instrumented steps differ: {} steps starting {} vs {} steps starting {}",
            sa.len(),
            head(&sa),
            sb.len(),
            head(&sb)
        )));
    }
    if a.n_layers() != b.n_layers() {
        return Err(Error::ScheduleMismatch(format!(
            "depths differ: {} vs {}",
            a.n_layers(),
            b.n_layers()
        )));
    }
    let step = *sa.last().unwrap();
    let (ra, rb) = (a.at(step), b.at(step));
    let mut ratios = Vec::new();
    for name in RATIO_METRICS {
        for (x, y) in ra.iter().zip(&rb) {
            let (va, vb) = (metric(x, name), metric(y, name));
            ratios.push(RatioRow {
                metric: name.into(),
                layer: x.layer.to_string(),
                value_a: va,
                value_b: vb,
                ratio: ratio(va, vb),
            });
        }
    }
    let max = |rs: &[&MetricsRecord]| rs.iter().map(|r| r.act_var).fold(f64::NEG_INFINITY, f64::max);
    let (ma, mb) = (max(&ra), max(&rb));
    ratios.push(RatioRow {
        metric: "act_var".into(),
        layer: "max".into(),
        value_a: ma,
        value_b: mb,
        ratio: ratio(ma, mb),
    });

    let loss_deltas = a
        .loss_rows
        .iter()
        .filter_map(|x| {
            b.loss_rows
                .iter()
                .find(|y| y.step == x.step && y.split == x.split)
                .map(|y| LossDelta {
                    step: x.step,
                    split: x.split.clone(),
                    loss_a: x.loss,
                    loss_b: y.loss,
                    delta: y.loss - x.loss,
                })
        })
        .collect();
    Ok(Comparison {
        step,
        ratios,
        loss_deltas,
    })
}

impl Comparison {
    pub fn ratios_csv(&self) -> String {
        let mut s = String::from("metric,layer,value_a,value_b,ratio\n");
        for r in &self.ratios {
            s += &format!("{},{},{},{},{}\n", r.metric, r.layer, r.value_a, r.value_b, r.ratio);
        }
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,split,loss_a,loss_b,delta\n");
        for r in &self.loss_deltas {
            s += &format!("{},{},{},{},{}\n", r.step, r.split, r.loss_a, r.loss_b, r.delta);
        }
        s
    }
}
