use serde::{Deserialize, Serialize};

use crate::autodiff::GateActivation;
use crate::error::{Error, Result};
use crate::layers::{default_ffn_dim, GpasVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Scheme {
    #[serde(rename = "PostLN")]
    PostLn,
    DeepNorm,
    #[default]
    #[serde(rename = "PreLN")]
    PreLn,
    #[serde(rename = "SandwichLN")]
    SandwichLn,
    #[serde(rename = "MixLN")]
    MixLn,
    #[serde(rename = "LNS")]
    Lns,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::PostLn,
        Scheme::DeepNorm,
        Scheme::PreLn,
        Scheme::SandwichLn,
        Scheme::MixLn,
        Scheme::Lns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::PostLn => "PostLN",
            Scheme::DeepNorm => "DeepNorm",
            Scheme::PreLn => "PreLN",
            Scheme::SandwichLn => "SandwichLN",
            Scheme::MixLn => "MixLN",
            Scheme::Lns => "LNS",
        }
    }
}

/// Where the gate sits inside a Pre-LN sub-layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GpasPosition {
    /// Gate the residual sum `x + f(LN(x))`.
    #[default]
    AfterSublayer,
    /// Gate `x` first, then run the sub-layer on the gated state.
    BeforeSublayer,
    /// Gate the normalized branch input.
    AfterLayerNorm,
    /// Gate the module output before the residual add.
    AfterModule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// SwiGLU hidden width; defaults to 8/3·d_model rounded up to a multiple of 8.
    pub d_ff: Option<usize>,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
    pub scale_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 6,
            n_heads: 4,
            d_ff: None,
            max_seq_len: 256,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            init_std: 0.02,
            scale_embed: true,
        }
    }
}

impl ModelConfig {
    pub fn ffn_dim(&self) -> usize {
        self.d_ff.unwrap_or_else(|| default_ffn_dim(self.d_model))
    }

    pub fn resolve(&mut self) {
        self.d_ff = Some(self.ffn_dim());
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return bad("vocab_size, d_model, n_layers and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("head dimension must be even for rotary embeddings".into());
        }
        if self.ffn_dim() == 0 {
            return bad("d_ff must be positive".into());
        }
        if !(self.rope_base > 0.0 && self.norm_eps >= 0.0 && self.init_std > 0.0) {
            return bad("rope_base and init_std must be positive, norm_eps non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub gpas_enabled: bool,
    pub gpas_position: GpasPosition,
    pub gpas_variant: GpasVariant,
    pub gate_activation: GateActivation,
    /// Leading Post-LN layers under MixLN; defaults to ceil(L/4).
    pub mix_postln_layers: Option<usize>,
    /// Shortcut multiplier under DeepNorm; defaults to (2L)^(1/4).
    pub deepnorm_alpha: Option<f64>,
    /// Init scale for Wv, Wo and the FFN under DeepNorm; defaults to (8L)^(-1/4).
    pub deepnorm_beta: Option<f64>,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::PreLn,
            gpas_enabled: false,
            gpas_position: GpasPosition::AfterSublayer,
            gpas_variant: GpasVariant::StopGrad,
            gate_activation: GateActivation::Silu,
            mix_postln_layers: None,
            deepnorm_alpha: None,
            deepnorm_beta: None,
        }
    }
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, gpas_enabled: bool) -> Self {
        Self {
            scheme,
            gpas_enabled,
            ..Self::default()
        }
    }

    pub fn mix_postln(&self, n_layers: usize) -> usize {
        self.mix_postln_layers.unwrap_or(n_layers.div_ceil(4))
    }

    pub fn deepnorm_constants(&self, n_layers: usize) -> (f64, f64) {
        let l = n_layers as f64;
        (
            self.deepnorm_alpha.unwrap_or((2.0 * l).powf(0.25)),
            self.deepnorm_beta.unwrap_or((8.0 * l).powf(-0.25)),
        )
    }

    /// Fills every scheme-dependent default so the config echoes concretely.
    pub fn resolve(&mut self, n_layers: usize) {
        match self.scheme {
            Scheme::MixLn => self.mix_postln_layers = Some(self.mix_postln(n_layers)),
            Scheme::DeepNorm => {
                let (a, b) = self.deepnorm_constants(n_layers);
                self.deepnorm_alpha = Some(a);
                self.deepnorm_beta = Some(b);
            }
            _ => {}
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.gate_activation.validate().map_err(Error::Config)?;
        if self.gpas_enabled && self.scheme == Scheme::PostLn {
            return bad("GPAS is not defined for standalone PostLN; use DeepNorm or MixLN".into());
        }
        if self.gpas_position != GpasPosition::AfterSublayer && self.scheme != Scheme::PreLn {
            return bad(format!(
                "gpas_position {:?} is only supported for PreLN",
                self.gpas_position
            ));
        }
        if let Some(m) = self.mix_postln_layers {
            if m > n_layers {
                return bad(format!("mix_postln_layers {m} exceeds n_layers {n_layers}"));
            }
        }
        for (name, v) in [("deepnorm_alpha", self.deepnorm_alpha), ("deepnorm_beta", self.deepnorm_beta)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        Ok(())
    }

    /// Whether the stack ends with a final RMSNorm before the head.
    pub fn has_final_norm(&self, n_layers: usize) -> bool {
        match self.scheme {
            Scheme::PreLn | Scheme::SandwichLn | Scheme::Lns => true,
            Scheme::MixLn => self.mix_postln(n_layers) < n_layers,
            Scheme::PostLn | Scheme::DeepNorm => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deepnorm_decoder_constants() {
        let (a, b) = SchemeConfig::new(Scheme::DeepNorm, false).deepnorm_constants(6);
        assert!((a - 12f64.powf(0.25)).abs() < 1e-15);
        assert!((b - 48f64.powf(-0.25)).abs() < 1e-15);
    }

    #[test]
    fn mix_default_is_a_quarter_rounded_up() {
        let c = SchemeConfig::new(Scheme::MixLn, true);
        assert_eq!(c.mix_postln(24), 6);
        assert_eq!(c.mix_postln(6), 2);
        assert!(c.has_final_norm(6));
        let all = SchemeConfig {
            mix_postln_layers: Some(6),
            ..c
        };
        assert!(!all.has_final_norm(6));
    }

    #[test]
    fn rejects_unsupported_combinations() {
        assert!(SchemeConfig::new(Scheme::PostLn, true).validate(4).is_err());
        let mut c = SchemeConfig::new(Scheme::SandwichLn, true);
        c.gpas_position = GpasPosition::AfterModule;
        assert!(c.validate(4).is_err());
        c.scheme = Scheme::PreLn;
        assert!(c.validate(4).is_ok());
        let m = SchemeConfig {
            mix_postln_layers: Some(5),
            ..SchemeConfig::new(Scheme::MixLn, true)
        };
        assert!(m.validate(4).is_err());
    }

    #[test]
    fn scheme_names_roundtrip_through_json() {
        for s in Scheme::ALL {
            let j = serde_json::to_string(&s).unwrap();
            assert_eq!(j, format!("\"{}\"", s.name()));
            assert_eq!(serde_json::from_str::<Scheme>(&j).unwrap(), s);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<SchemeConfig, _> = serde_json::from_str(r#"{"scheme":"PreLN","gpas":true}"#);
        assert!(r.is_err());
    }
}
