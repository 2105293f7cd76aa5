//! Flat `key = value` run configuration with typed parsing.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: invalid value {value:?} for {key}: {reason}")]
    Value { line: usize, key: String, value: String, reason: String },
    #[error("config conflict on {key}: checkpoint has {stored}, requested {requested}")]
    Conflict { key: String, stored: String, requested: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! numeric_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
            fn format_value(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}

numeric_value!(usize, u64, f32, f64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err("expected true or false".into()),
        }
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

/// `auto` or a number.
impl ConfigValue for Option<Real> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            Ok(None)
        } else {
            Real::parse_value(s).map(Some)
        }
    }
    fn format_value(&self) -> String {
        match self {
            None => "auto".into(),
            Some(v) => v.format_value(),
        }
    }
}

macro_rules! enum_value {
    ($name:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),* }

        impl ConfigValue for $name {
            fn parse_value(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)*
                    _ => Err(format!("expected one of {}", [$($text),*].join(", "))),
                }
            }
            fn format_value(&self) -> String {
                match self { $($name::$variant => $text.to_string()),* }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.format_value())
            }
        }
    };
}

enum_value!(Stage { Pretrain => "pretrain", Mle => "mle", Scst => "scst" });
enum_value!(AggregatorKind { NetVlad => "netvlad", Gem => "gem" });
enum_value!(GlobalInputs { Contexts => "contexts", SinglePlusContexts => "single+contexts", All => "all" });

macro_rules! config_struct {
    ($(#[$meta:meta])* $name:ident { $( $(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr ; $arch:literal ),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                $name { $( $field: $default, )* }
            }
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Keys that change the network or its wiring.
            pub const ARCHITECTURE_KEYS: &'static [&'static str] = {
                const ALL: &[(&str, bool)] = &[$((stringify!($field), $arch)),*];
                const N: usize = {
                    let mut n = 0;
                    let mut i = 0;
                    while i < ALL.len() { if ALL[i].1 { n += 1; } i += 1; }
                    n
                };
                const OUT: [&str; N] = {
                    let mut out = [""; N];
                    let mut n = 0;
                    let mut i = 0;
                    while i < ALL.len() { if ALL[i].1 { out[n] = ALL[i].0; n += 1; } i += 1; }
                    out
                };
                &OUT
            };

            /// Sets one field from text. Returns `Err(None)` for unknown keys.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), Option<String>> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value).map_err(Some)?;
                        Ok(())
                    } )*
                    _ => Err(None),
                }
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(self.$field.format_value()), )*
                    _ => None,
                }
            }
        }
    };
}

config_struct! {
    /// Every knob of a run: network shape, wiring, schedule and evaluation.
    TrainConfig {
        stage: Stage = Stage::Pretrain; false,
        epochs: usize = 60; false,
        batch_size: usize = 8; false,
        lr_init: Real = 5e-4; false,
        lr_floor: Real = 1e-6; false,
        caption_lr_init: Real = 1e-3; false,
        caption_lr_floor: Real = 1e-6; false,
        weight_decay: Real = 0.1; false,
        grad_clip: Real = 0.1; false,
        seed: u64 = 0; false,
        /// Draw the FPS seed index from the run RNG during training.
        random_fps_seed: bool = true; false,
        holdout: usize = 40; false,
        eval_every: usize = 10; false,
        nms_iou: Real = 0.25; false,
        confidence_floor: Real = 0.05; false,
        beam_k: usize = 3; false,

        tokens: usize = 256; true,
        dim: usize = 64; true,
        heads: usize = 4; true,
        enc_layers: usize = 3; true,
        enc_ffn: usize = 128; true,
        dropout: Real = 0.0; true,
        mask_radius: Option<Real> = None; true,
        tok_radius: Real = 0.35; true,
        tok_nsample: usize = 16; true,
        n_context: usize = 64; true,
        ctx_radius: Real = 1.2; true,
        ctx_nsample: usize = 16; true,
        n_instance: usize = 32; true,
        inst_radius: Real = 0.3; true,
        inst_nsample: usize = 16; true,
        radius_reference_diagonal: Real = 9.0; true,
        dec_layers: usize = 2; true,
        dec_heads: usize = 4; true,
        dec_ffn: usize = 128; true,
        k_context: usize = 16; true,
        aggregator: AggregatorKind = AggregatorKind::NetVlad; true,
        netvlad_clusters: usize = 8; true,
        gem_p: Real = 3.0; true,
        cap_dim: usize = 64; true,
        cap_layers: usize = 2; true,
        cap_heads: usize = 4; true,
        cap_ffn: usize = 256; true,
        max_caption_len: usize = 16; true,
        instance_only: bool = false; true,
        no_global: bool = false; true,
        global_inputs: GlobalInputs = GlobalInputs::All; true,
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value).map_err(|e| match e {
                None => ConfigError::UnknownKey { line, key: key.to_string() },
                Some(reason) => ConfigError::Value { line, key: key.to_string(), value: value.to_string(), reason },
            })?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.dim % self.heads != 0 || self.dim % self.dec_heads != 0 {
            return bad(format!("dim {} must be divisible by the head counts", self.dim));
        }
        if self.cap_dim % self.cap_heads != 0 {
            return bad(format!("cap_dim {} must be divisible by cap_heads {}", self.cap_dim, self.cap_heads));
        }
        if self.dim % 2 != 0 {
            return bad("dim must be even for positional encodings".into());
        }
        if self.mask_radius.is_some_and(|r| !(r > 0.0)) {
            return bad("mask_radius must be positive".into());
        }
        if self.n_context > self.tokens || self.n_instance > self.tokens {
            return bad(format!("query counts ({}, {}) exceed tokens {}", self.n_context, self.n_instance, self.tokens));
        }
        if self.k_context > self.n_context {
            return bad(format!("k_context {} exceeds n_context {}", self.k_context, self.n_context));
        }
        if self.aggregator == AggregatorKind::NetVlad && self.netvlad_clusters < 2 {
            return bad("netvlad_clusters must be at least 2".into());
        }
        if !(self.gem_p > 0.0) {
            return bad("gem_p must be positive".into());
        }
        if self.max_caption_len < 3 || self.batch_size == 0 || self.beam_k == 0 {
            return bad("max_caption_len >= 3, batch_size >= 1 and beam_k >= 1 required".into());
        }
        if self.enc_layers == 0 {
            return bad("enc_layers must be at least 1".into());
        }
        Ok(())
    }

    /// Errors on the first architecture key whose value differs.
    pub fn check_compatible(&self, stored: &TrainConfig) -> Result<(), ConfigError> {
        for key in Self::ARCHITECTURE_KEYS {
            let (a, b) = (stored.get(key).unwrap(), self.get(key).unwrap());
            if a != b {
                return Err(ConfigError::Conflict { key: key.to_string(), stored: a, requested: b });
            }
        }
        Ok(())
    }

    /// Context queries and the aggregator exist only outside instance-only wiring.
    pub fn has_context_path(&self) -> bool {
        !self.instance_only
    }

    pub fn has_global(&self) -> bool {
        !self.instance_only && !self.no_global
    }

    /// Length of the contextual caption prefix.
    pub fn context_prefix_len(&self) -> usize {
        1 + self.k_context + usize::from(self.has_global())
    }

    /// Desk defaults for a stage (batch sizes 8/8/2, epochs 60/40/10).
    pub fn desk(stage: Stage) -> Self {
        let mut c = TrainConfig { stage, ..Default::default() };
        match stage {
            Stage::Pretrain => {}
            Stage::Mle => c.epochs = 40,
            Stage::Scst => {
                c.epochs = 10;
                c.batch_size = 2;
                c.caption_lr_init = 1e-6;
                c.caption_lr_floor = 1e-6;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.k_context = 8;
        c.mask_radius = Some(0.7);
        c.global_inputs = GlobalInputs::SinglePlusContexts;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_named() {
        let err = TrainConfig::parse("epochs = 3\nbogus = 1\n").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey { line: 2, key: "bogus".into() });
    }

    #[test]
    fn typed_values_checked() {
        assert!(matches!(TrainConfig::parse("epochs = -1"), Err(ConfigError::Value { .. })));
        assert!(matches!(TrainConfig::parse("aggregator = max"), Err(ConfigError::Value { .. })));
        assert!(matches!(TrainConfig::parse("k_context = 100"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn architecture_conflicts() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.epochs = 1;
        assert!(b.check_compatible(&a).is_ok());
        b.k_context = 8;
        assert!(matches!(b.check_compatible(&a), Err(ConfigError::Conflict { key, .. }) if key == "k_context"));
    }

    #[test]
    fn prefix_lengths() {
        let mut c = TrainConfig::default();
        for (k, len) in [(8, 10), (16, 18), (32, 34)] {
            c.k_context = k;
            assert_eq!(c.context_prefix_len(), len);
        }
        c.no_global = true;
        assert_eq!(c.context_prefix_len(), 33);
    }
}
