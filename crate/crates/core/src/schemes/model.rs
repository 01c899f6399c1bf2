use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{GpasPosition, ModelConfig, Scheme, SchemeConfig};
use super::params::{ParamGroup, ParamStore};
use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{attention, embed, ffn_swiglu, rmsnorm, AttentionParams, FfnParams, GpasGate};

/// Store indices of one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerSlots {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    /// Sandwich only: norm wrapping the attention output.
    pub attn_out_norm: Option<usize>,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
    pub ffn_out_norm: Option<usize>,
    pub gate: Option<usize>,
}

impl LayerSlots {
    pub fn attention_params(&self) -> Vec<usize> {
        let mut v = vec![self.attn_norm, self.wq, self.wk, self.wv, self.wo];
        v.extend(self.attn_out_norm);
        v
    }

    pub fn ffn_params(&self) -> Vec<usize> {
        let mut v = vec![self.ffn_norm, self.w_gate, self.w_up, self.w_down];
        v.extend(self.ffn_out_norm);
        v
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// 0-based layer replaced by the identity map.
    pub skip_layer: Option<usize>,
}

pub struct ForwardOutput {
    /// `[batch, seq, vocab]`.
    pub logits: Var,
    /// Residual-stream state entering each layer.
    pub layer_inputs: Vec<Var>,
}

/// Decoder-only transformer whose layers follow one normalization scheme.
#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub params: ParamStore<T>,
    pub embedding: usize,
    pub layers: Vec<LayerSlots>,
    pub final_norm: Option<usize>,
    pub lm_head: usize,
    gate: GpasGate,
}

impl<T: Float> TransformerModel<T> {
    /// Initialises every matrix from normal(0, init_std) drawn in a fixed
    /// order (embedding; per layer wq, wk, wv, wo, w_gate, w_up, w_down; head)
    /// so same-seed models of different schemes share their draws.
    pub fn new(model: ModelConfig, scheme: SchemeConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        scheme.validate(model.n_layers)?;
        let mut model = model;
        let mut scheme = scheme;
        model.resolve();
        scheme.resolve(model.n_layers);

        let (d, f, v, n) = (model.d_model, model.ffn_dim(), model.vocab_size, model.n_layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, model.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |shape: [usize; 2], scale: f64| -> Tensor<T> {
            let data = (0..shape[0] * shape[1])
                .map(|_| T::of(normal.sample(&mut rng) * scale))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("positive dims")
        };
        let beta = if scheme.scheme == Scheme::DeepNorm {
            scheme.deepnorm_constants(n).1
        } else {
            1.0
        };

        let mut p = ParamStore::default();
        let embedding = p.push("embedding".into(), ParamGroup::Embedding, None, true, draw([v, d], 1.0));
        let sandwich = scheme.scheme == Scheme::SandwichLn;
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let name = |s: &str| format!("layers.{l}.{s}");
            let (att, ffn, mat) = (ParamGroup::Attention, ParamGroup::Ffn, true);
            let attn_norm = p.push(name("attn_norm"), att, Some(l), false, Tensor::ones([d]));
            let wq = p.push(name("wq"), att, Some(l), mat, draw([d, d], 1.0));
            let wk = p.push(name("wk"), att, Some(l), mat, draw([d, d], 1.0));
            let wv = p.push(name("wv"), att, Some(l), mat, draw([d, d], beta));
            let wo = p.push(name("wo"), att, Some(l), mat, draw([d, d], beta));
            let attn_out_norm =
                sandwich.then(|| p.push(name("attn_out_norm"), att, Some(l), false, Tensor::ones([d])));
            let ffn_norm = p.push(name("ffn_norm"), ffn, Some(l), false, Tensor::ones([d]));
            let w_gate = p.push(name("w_gate"), ffn, Some(l), mat, draw([d, f], beta));
            let w_up = p.push(name("w_up"), ffn, Some(l), mat, draw([d, f], beta));
            let w_down = p.push(name("w_down"), ffn, Some(l), mat, draw([f, d], beta));
            let ffn_out_norm =
                sandwich.then(|| p.push(name("ffn_out_norm"), ffn, Some(l), false, Tensor::ones([d])));
            let gate = scheme
                .gpas_enabled
                .then(|| p.push(name("gate"), ParamGroup::Gate, Some(l), false, Tensor::zeros([1])));
            layers.push(LayerSlots {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                attn_out_norm,
                ffn_norm,
                w_gate,
                w_up,
                w_down,
                ffn_out_norm,
                gate,
            });
        }
        let lm_head = p.push("lm_head".into(), ParamGroup::Head, None, true, draw([d, v], 1.0));
        let final_norm = scheme
            .has_final_norm(n)
            .then(|| p.push("final_norm".into(), ParamGroup::FinalNorm, None, false, Tensor::ones([d])));

        let gate = GpasGate {
            activation: scheme.gate_activation,
            variant: scheme.gpas_variant,
            learnable: true,
            grad_clip: None,
        };
        Ok(Self {
            model,
            scheme,
            params: p,
            embedding,
            layers,
            final_norm,
            lm_head,
            gate,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn gate(&self) -> GpasGate {
        self.gate
    }

    pub fn set_gate_policy(&mut self, learnable: bool, grad_clip: Option<f64>) {
        self.gate.learnable = learnable;
        self.gate.grad_clip = grad_clip;
    }

    /// Current alpha per layer; empty without GPAS.
    pub fn gate_alphas(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| l.gate.map(|g| self.params.get(g).item().f64()))
            .collect()
    }

    pub fn set_gate_alphas(&mut self, alphas: &[f64]) -> Result<()> {
        if !self.scheme.gpas_enabled {
            return Err(Error::Config("gate values given but GPAS is disabled".into()));
        }
        if alphas.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "expected {} gate values, got {}",
                self.layers.len(),
                alphas.len()
            )));
        }
        for (l, &a) in alphas.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Config(format!("gate {l} is not finite")));
            }
            let g = self.layers[l].gate.expect("gpas enabled");
            *self.params.get_mut(g) = Tensor::scalar(T::of(a));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params.bind(tape)
    }

    fn apply_gate(&self, tape: &Tape<T>, x: Var, alpha: Option<Var>) -> Result<Var> {
        match alpha {
            Some(a) => self.gate.apply(tape, x, a),
            None => Ok(x),
        }
    }

    fn attn(&self, tape: &Tape<T>, p: &[Var], s: &LayerSlots, x: Var) -> Result<Var> {
        attention(
            tape,
            x,
            &AttentionParams {
                wq: p[s.wq],
                wk: p[s.wk],
                wv: p[s.wv],
                wo: p[s.wo],
                n_heads: self.model.n_heads,
                rope_base: self.model.rope_base,
            },
        )
    }

    fn ffn(&self, tape: &Tape<T>, p: &[Var], s: &LayerSlots, x: Var) -> Result<Var> {
        ffn_swiglu(
            tape,
            x,
            &FfnParams {
                w_gate: p[s.w_gate],
                w_up: p[s.w_up],
                w_down: p[s.w_down],
            },
        )
    }

    /// One Pre-family sub-layer: `x + out_norm(f(LN(x) * depth_scale))`, with
    /// the gate placed according to the configured position.
    #[allow(clippy::too_many_arguments)]
    fn pre_sublayer(
        &self,
        tape: &Tape<T>,
        x: Var,
        norm: Var,
        out_norm: Option<Var>,
        depth_scale: Option<T>,
        alpha: Option<Var>,
        f: &dyn Fn(Var) -> Result<Var>,
    ) -> Result<Var> {
        let eps = self.model.norm_eps;
        let normed = |v: Var| -> Result<Var> {
            let n = rmsnorm(tape, v, norm, eps)?;
            match depth_scale {
                Some(c) => tape.scale(n, c),
                None => Ok(n),
            }
        };
        let finish = |h: Var| -> Result<Var> {
            match out_norm {
                Some(g) => rmsnorm(tape, h, g, eps),
                None => Ok(h),
            }
        };
        let position = if alpha.is_some() {
            self.scheme.gpas_position
        } else {
            GpasPosition::AfterSublayer
        };
        match position {
            GpasPosition::AfterSublayer => {
                let h = finish(f(normed(x)?)?)?;
                let y = tape.add(x, h)?;
                self.apply_gate(tape, y, alpha)
            }
            GpasPosition::BeforeSublayer => {
                let xg = self.apply_gate(tape, x, alpha)?;
                let h = finish(f(normed(xg)?)?)?;
                tape.add(xg, h)
            }
            GpasPosition::AfterLayerNorm => {
                let n = self.apply_gate(tape, normed(x)?, alpha)?;
                let h = finish(f(n)?)?;
                tape.add(x, h)
            }
            GpasPosition::AfterModule => {
                let h = finish(f(normed(x)?)?)?;
                let h = self.apply_gate(tape, h, alpha)?;
                tape.add(x, h)
            }
        }
    }

    /// One Post-family sub-layer: `LN(c * G(x) + f(x))`; the module always
    /// sees the ungated `x`.
    fn post_sublayer(
        &self,
        tape: &Tape<T>,
        x: Var,
        norm: Var,
        shortcut_scale: Option<T>,
        alpha: Option<Var>,
        f: &dyn Fn(Var) -> Result<Var>,
    ) -> Result<Var> {
        let h = f(x)?;
        let mut s = self.apply_gate(tape, x, alpha)?;
        if let Some(c) = shortcut_scale {
            s = tape.scale(s, c)?;
        }
        let y = tape.add(s, h)?;
        rmsnorm(tape, y, norm, self.model.norm_eps)
    }

    fn layer_parts(&self, p: &[Var], l: usize) -> (&LayerSlots, Option<Var>) {
        let s = &self.layers[l];
        (s, s.gate.map(|g| p[g]))
    }

    /// `x + f(LN(x))` per sub-layer, gated when GPAS is on.
    pub fn forward_layer_preln(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
        self.pre_layer(tape, p, l, x, None)
    }

    /// Pre-LN with the normalized branch input divided by √l (1-based).
    pub fn forward_layer_lns(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
        let scale = (l > 0).then(|| T::of(1.0 / ((l + 1) as f64).sqrt()));
        self.pre_layer(tape, p, l, x, scale)
    }

    /// `x + LN(f(LN(x)))` per sub-layer.
    pub fn forward_layer_sandwich(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
        self.pre_layer(tape, p, l, x, None)
    }

    fn pre_layer(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var, scale: Option<T>) -> Result<Var> {
        let (s, alpha) = self.layer_parts(p, l);
        let x = self.pre_sublayer(
            tape,
            x,
            p[s.attn_norm],
            s.attn_out_norm.map(|i| p[i]),
            scale,
            alpha,
            &|v| self.attn(tape, p, s, v),
        )?;
        self.pre_sublayer(
            tape,
            x,
            p[s.ffn_norm],
            s.ffn_out_norm.map(|i| p[i]),
            scale,
            alpha,
            &|v| self.ffn(tape, p, s, v),
        )
    }

    /// `LN(x + f(x))` per sub-layer.
    pub fn forward_layer_postln(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
        self.post_layer(tape, p, l, x, None)
    }

    /// `LN(a * G(x) + f(x))` per sub-layer with the DeepNorm shortcut constant.
    pub fn forward_layer_deepnorm(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
        let a = self.scheme.deepnorm_constants(self.n_layers()).0;
        self.post_layer(tape, p, l, x, Some(T::of(a)))
    }

    /// Post rule (gate on the shortcut) for the leading layers, Pre rule after.
    pub fn forward_layer_mix(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
        if l < self.scheme.mix_postln(self.n_layers()) {
            self.post_layer(tape, p, l, x, None)
        } else {
            self.pre_layer(tape, p, l, x, None)
        }
    }

    fn post_layer(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var, c: Option<T>) -> Result<Var> {
        let (s, alpha) = self.layer_parts(p, l);
        let x = self.post_sublayer(tape, x, p[s.attn_norm], c, alpha, &|v| self.attn(tape, p, s, v))?;
        self.post_sublayer(tape, x, p[s.ffn_norm], c, alpha, &|v| self.ffn(tape, p, s, v))
    }

    /// Layer `l` (0-based) of the configured scheme.
    pub fn forward_layer(&self, tape: &Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
        match self.scheme.scheme {
            Scheme::PreLn => self.forward_layer_preln(tape, p, l, x),
            Scheme::Lns => self.forward_layer_lns(tape, p, l, x),
            Scheme::SandwichLn => self.forward_layer_sandwich(tape, p, l, x),
            Scheme::PostLn => self.forward_layer_postln(tape, p, l, x),
            Scheme::DeepNorm => self.forward_layer_deepnorm(tape, p, l, x),
            Scheme::MixLn => self.forward_layer_mix(tape, p, l, x),
        }
    }

    /// Embedding, every layer, optional final norm and the head.
    /// `ids` is a row-major `[batch, seq]` grid.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        p: &[Var],
        ids: &[usize],
        batch: usize,
        seq: usize,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        if p.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} bound parameters for a model with {}",
                p.len(),
                self.params.len()
            )));
        }
        if seq > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.model.max_seq_len
            )));
        }
        let mut x = embed(tape, p[self.embedding], ids, batch, seq, self.model.scale_embed)?;
        let mut layer_inputs = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            layer_inputs.push(x);
            if opts.skip_layer == Some(l) {
                continue;
            }
            x = self.forward_layer(tape, p, l, x)?;
        }
        if let Some(n) = self.final_norm {
            x = rmsnorm(tape, x, p[n], self.model.norm_eps)?;
        }
        let logits = tape.matmul(x, p[self.lm_head])?;
        Ok(ForwardOutput { logits, layer_inputs })
    }

    /// Mean next-token cross-entropy of `targets` given `inputs`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &Tape<T>,
        p: &[Var],
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
        opts: &ForwardOptions,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(tape, p, inputs, batch, seq, opts)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        Ok((loss, out))
    }
}
