//! `RunConfig`: every option the subcommands understand, with defaults,
//! filled from a `key = value` file and then from command-line flags.

use std::fmt::Display;
use std::path::Path;

use simpletron::attention::{AttentionKind, MaskMode, ScaleMode};
use simpletron::model::{HeadKind, ModelConfig, SkipLanding, Variant};
use simpletron::tensor::Activation;
use simpletron::DType;

use crate::CliError;

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, got `{s}`", stringify!($t)))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
via_from_str!(usize, u64, f64, String);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            _ => Err(format!("expected a boolean, got `{s}`")),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

macro_rules! via_parse {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                <$t>::parse(s).map_err(|e| e.to_string())
            }
            fn show(&self) -> String {
                self.name().to_string()
            }
        }
    )*};
}
via_parse!(Variant, AttentionKind, ScaleMode, MaskMode, SkipLanding, HeadKind, Activation);

impl ConfigValue for DType {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(format!("unknown dtype `{s}` (f32 or f64)")),
        }
    }
    fn show(&self) -> String {
        match self {
            DType::F32 => "f32".into(),
            DType::F64 => "f64".into(),
        }
    }
}

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() || s == "none" && T::parse_value("none").is_err() {
            return Ok(None);
        }
        T::parse_value(s).map(Some)
    }
    fn show(&self) -> String {
        self.as_ref().map(T::show).unwrap_or_default()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(T::parse_value).collect()
    }
    fn show(&self) -> String {
        self.iter().map(T::show).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, $flag:literal; )*) => {
        /// All options. Config-file keys use the field name; flags use the
        /// kebab-case form.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        pub const KEYS: &[&str] = &[$( stringify!($field) ),*];

        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct Flags {
            $( $(#[doc = $doc])* #[arg(long = $flag, value_name = "VALUE")] pub $field: Option<String>, )*
        }

        impl RunConfig {
            /// Sets one option from its textual form. `key` may use `-` or `_`;
            /// `in` names `input`.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                let norm = match key.replace('-', "_") {
                    k if k == "in" => "input".to_string(),
                    k => k,
                };
                match norm.as_str() {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| CliError::Usage(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn apply_flags(&mut self, flags: &Flags) -> Result<(), CliError> {
                $( if let Some(v) = &flags.$field { self.set(stringify!($field), v)?; } )*
                Ok(())
            }

            /// The configuration in file form, one `key = value` per line.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( out.push_str(&format!("{} = {}\n", stringify!($field), ConfigValue::show(&self.$field))); )*
                out
            }
        }
    };
}

run_config! {
    /// Seed for data generation, initialization, shuffling and dropout.
    seed: Option<u64> = None, "seed";
    variant: Variant = Variant::SimpleRes, "variant";
    /// Attention kind; defaults to the variant's own.
    attention: Option<AttentionKind> = None, "attention";
    /// Attention scale; defaults to the attention kind's own.
    scale: Option<ScaleMode> = None, "scale";
    mask: MaskMode = MaskMode::Pad, "mask";
    blocks: usize = 2, "blocks";
    heads: usize = 4, "heads";
    d_embed: usize = 64, "d-embed";
    d_hidden: usize = 64, "d-hidden";
    d_mlp: usize = 128, "d-mlp";
    dropout: f64 = 0.1, "dropout";
    activation: Activation = Activation::Gelu, "activation";
    skip_landing: SkipLanding = SkipLanding::BothSublayers, "skip-landing";
    dtype: DType = DType::F32, "dtype";
    /// majority, listops or matching.
    task: String = "majority".into(), "task";
    /// Number of generated training examples.
    n: usize = 10_000, "n";
    /// Held-out examples, generated or split off the training file.
    n_test: usize = 1000, "n-test";
    /// Sequence length of majority and matching examples.
    length: usize = 256, "length";
    /// Symbol ids (reserved ids included) for majority and matching.
    vocab: usize = 34, "vocab";
    classes: usize = 4, "classes";
    /// Probability that a majority token comes from the label's group.
    majority_bias: f64 = 0.25, "majority-bias";
    listops_depth: usize = 3, "listops-depth";
    listops_args: usize = 5, "listops-args";
    listops_max_length: usize = 128, "listops-max-length";
    /// Fraction of positions redrawn in positive matching pairs.
    match_rate: f64 = 0.1, "match-rate";
    /// Training data in the tab-separated text format.
    data: Option<String> = None, "data";
    test_data: Option<String> = None, "test-data";
    steps: usize = 2000, "steps";
    /// desk, classification, matching or listops.
    schedule: String = "desk".into(), "schedule";
    lr: Option<f64> = None, "lr";
    warmup: Option<usize> = None, "warmup";
    batch_size: usize = 32, "batch-size";
    accumulation: usize = 1, "accumulation";
    weight_decay: f64 = 0.1, "weight-decay";
    clip: Option<f64> = None, "clip";
    eval_every: usize = 250, "eval-every";
    /// Stop training once held-out accuracy reaches this value.
    target_accuracy: Option<f64> = None, "target-accuracy";
    /// Checkpoint whose matching tensors initialize the model.
    init: Option<String> = None, "init";
    /// Comma-separated freeze patterns, or `qkv`.
    freeze: Option<String> = None, "freeze";
    /// Redraw every unfrozen parameter after loading `init`.
    reinit: bool = false, "reinit";
    /// Input checkpoint.
    input: Option<String> = None, "in";
    /// Model sidecar; defaults to `<checkpoint>.cfg`.
    model_config: Option<String> = None, "model-config";
    to_kind: Option<AttentionKind> = None, "to-kind";
    out: Option<String> = None, "out";
    /// Per-block attention std CSV written by `eval`.
    std_out: Option<String> = None, "std-out";
    kinds: Vec<AttentionKind> = vec![AttentionKind::Simple, AttentionKind::Softmax], "kinds";
    lengths: Vec<usize> = vec![256, 512, 1024, 2048], "lengths";
    repeats: usize = 3, "repeats";
    timing: bool = true, "timing";
    memory_budget_mb: usize = 2048, "memory-budget-mb";
}

impl RunConfig {
    /// Defaults, then `path` if given, then flags.
    pub fn resolve(config_path: Option<&Path>, flags: &Flags) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = config_path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            for (k, v) in parse_pairs(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        cfg.apply_flags(flags)?;
        Ok(cfg)
    }

    pub fn require_seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("`{command}` needs --seed (or `seed = ...` in the config file)")))
    }
}

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Model description stored next to every checkpoint as `<checkpoint>.cfg`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: ModelConfig,
    pub dtype: DType,
    /// Freeze patterns carried over from `transfer`.
    pub freeze: Option<String>,
}

impl ModelFile {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            kv("variant", m.variant.name()),
            kv("attention", m.attention.name()),
            kv("scale", m.scale.name()),
            kv("mask", m.mask_mode.name()),
            kv("blocks", m.n_blocks),
            kv("heads", m.n_heads),
            kv("d_embed", m.d_embed),
            kv("d_hidden", m.d_hidden),
            kv("d_mlp", m.d_mlp),
            kv("vocab_size", m.vocab_size),
            kv("max_len", m.max_len),
            kv("n_classes", m.n_classes),
            kv("dropout", m.dropout_p),
            kv("activation", m.activation.name()),
            kv("skip_landing", m.skip_landing.name()),
            kv("head", m.head.name()),
            kv("ln_eps", m.ln_eps),
            kv("dtype", self.dtype.show()),
        ];
        if let Some(f) = &self.freeze {
            lines.push(kv("freeze", f));
        }
        lines.concat()
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut m = ModelConfig::new(Variant::SimpleRes);
        let mut dtype = DType::F32;
        let mut freeze = None;
        let mut attention = None;
        let mut scale = None;
        fn val<T: ConfigValue>(k: &str, v: &str) -> Result<T, CliError> {
            T::parse_value(v).map_err(|e| CliError::Usage(format!("model config `{k}`: {e}")))
        }
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "variant" => m.variant = val(&k, &v)?,
                "attention" => attention = Some(val(&k, &v)?),
                "scale" => scale = Some(val(&k, &v)?),
                "mask" => m.mask_mode = val(&k, &v)?,
                "blocks" => m.n_blocks = val(&k, &v)?,
                "heads" => m.n_heads = val(&k, &v)?,
                "d_embed" => m.d_embed = val(&k, &v)?,
                "d_hidden" => m.d_hidden = val(&k, &v)?,
                "d_mlp" => m.d_mlp = val(&k, &v)?,
                "vocab_size" => m.vocab_size = val(&k, &v)?,
                "max_len" => m.max_len = val(&k, &v)?,
                "n_classes" => m.n_classes = val(&k, &v)?,
                "dropout" => m.dropout_p = val(&k, &v)?,
                "activation" => m.activation = val(&k, &v)?,
                "skip_landing" => m.skip_landing = val(&k, &v)?,
                "head" => m.head = val(&k, &v)?,
                "ln_eps" => m.ln_eps = val(&k, &v)?,
                "dtype" => dtype = val(&k, &v)?,
                "freeze" => freeze = Some(v),
                _ => return Err(CliError::Usage(format!("unknown model config key `{k}`"))),
            }
        }
        m.attention = attention.unwrap_or(m.variant.default_attention());
        m.scale = scale.unwrap_or(m.attention.default_scale());
        m.validate()?;
        Ok(ModelFile { model: m, dtype, freeze })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::Runtime(e.into()))
    }
}

fn kv(k: &str, v: impl Display) -> String {
    format!("{k} = {v}\n")
}

/// `<checkpoint>.cfg`
pub fn sidecar_path(checkpoint: &str) -> String {
    format!("{checkpoint}.cfg")
}
