//! Run configuration: model geometry, training schedule, and the flat
//! `key = value` text codec shared by config files, resolved-config dumps,
//! and checkpoint snapshots.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Element precision for all tensors in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(Precision::Single),
            8 => Some(Precision::Double),
            _ => None,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(format!("expected single|double, got `{other}`")),
        }
    }
}

/// Which per-character tensor is exposed as the domain-adaptation feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharFeature {
    /// The attention context vector itself (pre-recurrence).
    Context,
    /// The decoder state after consuming the context (post-recurrence);
    /// the stronger variant.
    ContextPlus,
}

impl CharFeature {
    pub fn dim(self, cfg: &ModelConfig) -> usize {
        match self {
            CharFeature::Context => cfg.feature_dim,
            CharFeature::ContextPlus => cfg.decoder_hidden,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CharFeature::Context => "context",
            CharFeature::ContextPlus => "context-plus",
        }
    }
}

impl std::str::FromStr for CharFeature {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "context" => Ok(CharFeature::Context),
            "context-plus" | "context_plus" => Ok(CharFeature::ContextPlus),
            other => Err(format!("expected context|context-plus, got `{other}`")),
        }
    }
}

/// Architecture and geometry. The defaults describe the desk-scale model:
/// 16-pixel strips, digits, a two-stage conv column encoder into a
/// 32-dimensional feature sequence, and a 64-unit attention decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Recognized symbols in class-index order.
    pub alphabet: String,
    /// Strip height in pixels.
    pub height: usize,
    /// Horizontal pixels per glyph; strip width is `glyph_width * label_len`.
    pub glyph_width: usize,
    /// Longest label a dataset may contain and the decode step cap.
    pub max_len: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// Feature-map columns folded into one sequence position.
    pub column_stride: usize,
    /// Width of each encoded column feature (the vectors attention sees).
    pub feature_dim: usize,
    /// Run a recurrent pass over the column sequence after projection.
    pub encoder_rnn: bool,
    pub decoder_hidden: usize,
    pub attention_hidden: usize,
    pub embed_dim: usize,
    /// Inclusive-attention mix weight on the center column.
    pub lambda: f64,
    /// Inclusive-attention neighborhood radius.
    pub eta: usize,
    /// Apply inclusive reweighting; off forces the identity regardless of
    /// `lambda` (the ablation switch).
    pub ia_enabled: bool,
    /// Hidden width of both discriminator layers.
    pub mcd_hidden: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            alphabet: "0123456789".into(),
            height: 16,
            glyph_width: 8,
            max_len: 8,
            conv1_channels: 4,
            conv2_channels: 8,
            column_stride: 8,
            feature_dim: 32,
            encoder_rnn: true,
            decoder_hidden: 64,
            attention_hidden: 64,
            embed_dim: 16,
            lambda: 0.75,
            eta: 1,
            ia_enabled: true,
            mcd_hidden: 128,
            precision: Precision::Single,
        }
    }
}

impl ModelConfig {
    /// Full-scale preset: 32-pixel strips, digits plus letters, wide nets.
    pub fn full() -> Self {
        ModelConfig {
            alphabet: "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ".into(),
            height: 32,
            glyph_width: 16,
            max_len: 16,
            conv1_channels: 16,
            conv2_channels: 32,
            column_stride: 16,
            feature_dim: 128,
            encoder_rnn: true,
            decoder_hidden: 256,
            attention_hidden: 256,
            embed_dim: 64,
            lambda: 0.75,
            eta: 1,
            ia_enabled: true,
            mcd_hidden: 1024,
            precision: Precision::Single,
        }
    }

    /// The mix weight the decoder actually applies; disabling inclusive
    /// attention is exactly the identity-reweighting case.
    pub fn effective_lambda(&self) -> f64 {
        if self.ia_enabled {
            self.lambda
        } else {
            1.0
        }
    }

    pub fn symbols(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    /// Output classes: one per symbol plus the end marker.
    pub fn num_classes(&self) -> usize {
        self.alphabet.chars().count() + 1
    }

    pub fn eos_index(&self) -> usize {
        self.alphabet.chars().count()
    }

    /// Embedding table rows: classes plus a dedicated start-of-sequence row.
    pub fn embed_rows(&self) -> usize {
        self.num_classes() + 1
    }

    pub fn start_embed_index(&self) -> usize {
        self.num_classes()
    }

    pub fn char_index(&self, c: char) -> Option<usize> {
        self.alphabet.chars().position(|a| a == c)
    }

    pub fn width_for(&self, label_len: usize) -> usize {
        self.glyph_width * label_len.max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        if self.alphabet.is_empty() {
            return Err(ConfigError::Invalid("alphabet is empty".into()));
        }
        for c in self.alphabet.chars() {
            if !seen.insert(c) {
                return Err(ConfigError::Invalid(format!(
                    "alphabet repeats symbol `{c}`"
                )));
            }
        }
        if self.height < 8 {
            return Err(ConfigError::Invalid(format!(
                "height {} too small for two stride-2 stages",
                self.height
            )));
        }
        if self.glyph_width < 4 {
            return Err(ConfigError::Invalid(format!(
                "glyph_width {} below minimum 4",
                self.glyph_width
            )));
        }
        if self.max_len == 0 || self.column_stride == 0 {
            return Err(ConfigError::Invalid(
                "max_len and column_stride must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ConfigError::Invalid(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.eta == 0 {
            return Err(ConfigError::Invalid("eta must be at least 1".into()));
        }
        for (k, v) in [
            ("conv1_channels", self.conv1_channels),
            ("conv2_channels", self.conv2_channels),
            ("feature_dim", self.feature_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("attention_hidden", self.attention_hidden),
            ("embed_dim", self.embed_dim),
            ("mcd_hidden", self.mcd_hidden),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{k} must be positive")));
            }
        }
        Ok(())
    }
}

/// Training schedule and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Adam learning rate for adaptation and finetuning.
    pub lr: f64,
    /// Weight of the confusion term inside the recognizer update.
    pub gamma: f64,
    /// Attention pretraining steps on labeled source data.
    pub pretrain_steps: usize,
    /// Discriminator warmup steps before alternation begins.
    pub mcd_pretrain_steps: usize,
    pub adversarial_rounds: usize,
    /// Discriminator updates per round.
    pub d_steps: usize,
    /// Recognizer updates per round.
    pub g_steps: usize,
    /// Pair-group subsample size fed to each discriminator evaluation.
    pub pairs_per_group: usize,
    /// Source images per target image in mixed finetuning batches.
    pub source_target_ratio: usize,
    pub finetune_steps: usize,
    pub log_every: usize,
    /// Which per-character feature the adversarial pairs are built from.
    pub feature: CharFeature,
    /// Drop the confusion term from recognizer updates while keeping the
    /// batch and logging protocol identical.
    pub att_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 64,
            lr: 0.001,
            gamma: 5e-5,
            pretrain_steps: 1500,
            mcd_pretrain_steps: 200,
            adversarial_rounds: 2000,
            d_steps: 1,
            g_steps: 1,
            pairs_per_group: 64,
            source_target_ratio: 20,
            finetune_steps: 400,
            log_every: 1,
            feature: CharFeature::ContextPlus,
            att_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(ConfigError::Invalid(format!("lr {} not positive", self.lr)));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "gamma {} must be non-negative",
                self.gamma
            )));
        }
        if self.pairs_per_group == 0 {
            return Err(ConfigError::Invalid(
                "pairs_per_group must be positive".into(),
            ));
        }
        if self.d_steps == 0 || self.g_steps == 0 {
            return Err(ConfigError::Invalid(
                "d_steps and g_steps must be positive".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(ConfigError::Invalid("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

macro_rules! parse_field {
    ($key:expr, $value:expr) => {
        $value.parse().map_err(|e| ConfigError::BadValue {
            key: $key.to_string(),
            msg: format!("{e} (`{}`)", $value),
        })?
    };
}

impl Config {
    pub fn full() -> Self {
        Config {
            model: ModelConfig::full(),
            train: TrainConfig::default(),
        }
    }

    /// Set one field by its flat key. All key handling funnels through here
    /// so file parsing and flag overrides cannot drift apart.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "alphabet" => m.alphabet = value.to_string(),
            "height" => m.height = parse_field!(key, value),
            "glyph_width" => m.glyph_width = parse_field!(key, value),
            "max_len" => m.max_len = parse_field!(key, value),
            "conv1_channels" => m.conv1_channels = parse_field!(key, value),
            "conv2_channels" => m.conv2_channels = parse_field!(key, value),
            "column_stride" => m.column_stride = parse_field!(key, value),
            "feature_dim" => m.feature_dim = parse_field!(key, value),
            "encoder_rnn" => m.encoder_rnn = parse_field!(key, value),
            "decoder_hidden" => m.decoder_hidden = parse_field!(key, value),
            "attention_hidden" => m.attention_hidden = parse_field!(key, value),
            "embed_dim" => m.embed_dim = parse_field!(key, value),
            "lambda" => m.lambda = parse_field!(key, value),
            "eta" => m.eta = parse_field!(key, value),
            "ia_enabled" => m.ia_enabled = parse_field!(key, value),
            "mcd_hidden" => m.mcd_hidden = parse_field!(key, value),
            "precision" => {
                m.precision = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    msg: e,
                })?
            }
            "seed" => t.seed = parse_field!(key, value),
            "batch_size" => t.batch_size = parse_field!(key, value),
            "lr" => t.lr = parse_field!(key, value),
            "gamma" => t.gamma = parse_field!(key, value),
            "pretrain_steps" => t.pretrain_steps = parse_field!(key, value),
            "mcd_pretrain_steps" => t.mcd_pretrain_steps = parse_field!(key, value),
            "adversarial_rounds" => t.adversarial_rounds = parse_field!(key, value),
            "d_steps" => t.d_steps = parse_field!(key, value),
            "g_steps" => t.g_steps = parse_field!(key, value),
            "pairs_per_group" => t.pairs_per_group = parse_field!(key, value),
            "source_target_ratio" => t.source_target_ratio = parse_field!(key, value),
            "finetune_steps" => t.finetune_steps = parse_field!(key, value),
            "log_every" => t.log_every = parse_field!(key, value),
            "feature" => {
                t.feature = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    msg: e,
                })?
            }
            "att_only" => t.att_only = parse_field!(key, value),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment;
    /// blank lines are skipped; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Render every field as `key = value`, one per line, in fixed order.
    /// `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("alphabet", m.alphabet.clone());
        kv("height", m.height.to_string());
        kv("glyph_width", m.glyph_width.to_string());
        kv("max_len", m.max_len.to_string());
        kv("conv1_channels", m.conv1_channels.to_string());
        kv("conv2_channels", m.conv2_channels.to_string());
        kv("column_stride", m.column_stride.to_string());
        kv("feature_dim", m.feature_dim.to_string());
        kv("encoder_rnn", m.encoder_rnn.to_string());
        kv("decoder_hidden", m.decoder_hidden.to_string());
        kv("attention_hidden", m.attention_hidden.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("lambda", format!("{:?}", m.lambda));
        kv("eta", m.eta.to_string());
        kv("ia_enabled", m.ia_enabled.to_string());
        kv("mcd_hidden", m.mcd_hidden.to_string());
        kv("precision", m.precision.name().to_string());
        kv("seed", t.seed.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", format!("{:?}", t.lr));
        kv("gamma", format!("{:?}", t.gamma));
        kv("pretrain_steps", t.pretrain_steps.to_string());
        kv("mcd_pretrain_steps", t.mcd_pretrain_steps.to_string());
        kv("adversarial_rounds", t.adversarial_rounds.to_string());
        kv("d_steps", t.d_steps.to_string());
        kv("g_steps", t.g_steps.to_string());
        kv("pairs_per_group", t.pairs_per_group.to_string());
        kv("source_target_ratio", t.source_target_ratio.to_string());
        kv("finetune_steps", t.finetune_steps.to_string());
        kv("log_every", t.log_every.to_string());
        kv("feature", t.feature.name().to_string());
        kv("att_only", t.att_only.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()
    }
}
