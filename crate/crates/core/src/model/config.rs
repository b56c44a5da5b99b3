use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{self, KeyValue};
use crate::layers::{validate_cutoffs, Activation, GlobalMode, NormPosition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    NplmOld,
    Nplm,
    Transformer,
    TransformerN,
    TransformerC,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::NplmOld,
        ModelVariant::Nplm,
        ModelVariant::Transformer,
        ModelVariant::TransformerN,
        ModelVariant::TransformerC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::NplmOld => "NPLM_OLD",
            ModelVariant::Nplm => "NPLM",
            ModelVariant::Transformer => "TRANSFORMER",
            ModelVariant::TransformerN => "TRANSFORMER_N",
            ModelVariant::TransformerC => "TRANSFORMER_C",
        }
    }

    pub fn is_transformer(self) -> bool {
        matches!(
            self,
            ModelVariant::Transformer | ModelVariant::TransformerN | ModelVariant::TransformerC
        )
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected NPLM_OLD|NPLM|TRANSFORMER|TRANSFORMER_N|TRANSFORMER_C)"
                ))
            })
    }
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub n_layers: usize,
    pub d_emb: usize,
    /// Width of the residual stream.
    pub d_model: usize,
    /// Feed-forward inner width; for NPLM_OLD the width of its single
    /// tanh hidden layer.
    pub d_hidden: usize,
    pub d_concat: usize,
    pub n_heads: usize,
    pub k_concat: usize,
    /// Zero disables the learned kernels.
    pub n_global_kernels: usize,
    pub global_kernel_width: usize,
    pub global_mode: GlobalMode,
    /// Layer-0 attention window of TRANSFORMER_C.
    pub l0_window: usize,
    pub vocab_size: usize,
    /// Empty means a full softmax.
    pub adaptive_cutoffs: Vec<usize>,
    pub tie_weights: bool,
    pub dropout: f64,
    pub use_residual: bool,
    pub use_layernorm: bool,
    pub norm_position: NormPosition,
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale defaults for `variant`. `vocab_size` is left at zero and
    /// must be filled in from the data.
    pub fn for_variant(variant: ModelVariant) -> ModelConfig {
        let base = ModelConfig {
            variant,
            n_layers: 4,
            d_emb: 64,
            d_model: 64,
            d_hidden: 256,
            d_concat: 256,
            n_heads: 4,
            k_concat: 15,
            n_global_kernels: 5,
            global_kernel_width: 8,
            global_mode: GlobalMode::LearnedKernel,
            l0_window: 5,
            vocab_size: 0,
            adaptive_cutoffs: Vec::new(),
            tie_weights: true,
            dropout: 0.1,
            use_residual: true,
            use_layernorm: true,
            norm_position: NormPosition::Pre,
            activation: Activation::Relu,
        };
        match variant {
            ModelVariant::NplmOld => ModelConfig {
                n_layers: 1,
                d_emb: 60,
                d_model: 60,
                d_hidden: 100,
                k_concat: 5,
                n_global_kernels: 0,
                global_mode: GlobalMode::Disabled,
                tie_weights: false,
                dropout: 0.0,
                use_residual: false,
                use_layernorm: false,
                activation: Activation::Tanh,
                ..base
            },
            _ => base,
        }
    }

    /// Global summary actually used by the concat layer, if any.
    pub fn effective_global_mode(&self) -> GlobalMode {
        match self.global_mode {
            GlobalMode::LearnedKernel if self.n_global_kernels == 0 => GlobalMode::Disabled,
            mode => mode,
        }
    }

    /// Checks the variant-specific requirements, naming every offending
    /// field in one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_emb", self.d_emb),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("vocab_size", self.vocab_size),
        ] {
            need(v > 0, format!("{name} must be positive"));
        }
        need(
            (0.0..1.0).contains(&self.dropout),
            format!("dropout {} must lie in [0, 1)", self.dropout),
        );
        need(self.global_kernel_width > 0, "global_kernel_width must be positive".into());
        let cutoffs = validate_cutoffs(&self.adaptive_cutoffs, self.vocab_size);
        need(cutoffs.is_ok(), format!("adaptive_cutoffs: {}", cutoffs.err().map(|e| e.to_string()).unwrap_or_default()));
        let v = self.variant;
        match v {
            ModelVariant::NplmOld => {
                need(self.n_layers == 1, format!("n_layers must be 1 for {v}"));
                need(self.activation == Activation::Tanh, format!("activation must be tanh for {v}"));
                need(!self.use_residual, format!("use_residual must be false for {v}"));
                need(!self.use_layernorm, format!("use_layernorm must be false for {v}"));
                need(
                    self.effective_global_mode() == GlobalMode::Disabled,
                    format!("global_mode must be disabled for {v}"),
                );
            }
            ModelVariant::Nplm => {}
            _ => {
                need(
                    self.d_emb == self.d_model,
                    format!("d_emb ({}) must equal d_model ({}) for {v}", self.d_emb, self.d_model),
                );
                need(
                    self.n_heads > 0 && self.d_model.is_multiple_of(self.n_heads),
                    format!("d_model ({}) must be divisible by n_heads ({})", self.d_model, self.n_heads),
                );
            }
        }
        if matches!(v, ModelVariant::NplmOld | ModelVariant::Nplm | ModelVariant::TransformerN) {
            need(self.k_concat > 0, format!("k_concat must be at least 1 for {v}"));
            if v != ModelVariant::NplmOld {
                need(self.d_concat > 0, "d_concat must be positive".into());
            }
        }
        if v == ModelVariant::TransformerC {
            need(self.l0_window >= 1, format!("l0_window must be at least 1 for {v}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model config: {}", bad.join("; "))))
        }
    }
}

impl KeyValue for ModelConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_hidden", self.d_hidden.to_string()),
            ("d_concat", self.d_concat.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("k_concat", self.k_concat.to_string()),
            ("n_global_kernels", self.n_global_kernels.to_string()),
            ("global_kernel_width", self.global_kernel_width.to_string()),
            ("global_mode", self.global_mode.as_str().to_string()),
            ("l0_window", self.l0_window.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("adaptive_cutoffs", kv::format_list(&self.adaptive_cutoffs)),
            ("tie_weights", self.tie_weights.to_string()),
            ("dropout", self.dropout.to_string()),
            ("use_residual", self.use_residual.to_string()),
            ("use_layernorm", self.use_layernorm.to_string()),
            ("norm_position", self.norm_position.as_str().to_string()),
            ("activation", self.activation.as_str().to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let int = |v: &str| kv::parse::<usize>(key, v, "a non-negative integer");
        let named = |e: Error| match e {
            Error::Config(m) => format!("type error: {m}"),
            e => e.to_string(),
        };
        match key {
            "variant" => self.variant = value.parse().map_err(named)?,
            "n_layers" => self.n_layers = int(value)?,
            "d_emb" => self.d_emb = int(value)?,
            "d_model" => self.d_model = int(value)?,
            "d_hidden" => self.d_hidden = int(value)?,
            "d_concat" => self.d_concat = int(value)?,
            "n_heads" => self.n_heads = int(value)?,
            "k_concat" => self.k_concat = int(value)?,
            "n_global_kernels" => self.n_global_kernels = int(value)?,
            "global_kernel_width" => self.global_kernel_width = int(value)?,
            "global_mode" => self.global_mode = value.parse().map_err(named)?,
            "l0_window" => self.l0_window = int(value)?,
            "vocab_size" => self.vocab_size = int(value)?,
            "adaptive_cutoffs" => self.adaptive_cutoffs = kv::parse_list(key, value)?,
            "tie_weights" => self.tie_weights = kv::parse_bool(key, value)?,
            "dropout" => self.dropout = kv::parse(key, value, "a number")?,
            "use_residual" => self.use_residual = kv::parse_bool(key, value)?,
            "use_layernorm" => self.use_layernorm = kv::parse_bool(key, value)?,
            "norm_position" => self.norm_position = value.parse().map_err(named)?,
            "activation" => self.activation = value.parse().map_err(named)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
