//! Run configuration and its flat `key = value` text form.
//!
//! Every setting has a canonical dotted key (`train.epochs`,
//! `synth.seed`, ...). The part after the section prefix may be used alone
//! when it names exactly one setting, so `epochs = 3` works but `seed = 3`
//! is rejected as ambiguous. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LocHead, ModelConfig};
use crate::synthetic::{ShapeFamily, SyntheticConfig};
use crate::tracker::PostProcessConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
    pub track: PostProcessConfig,
}

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl Value for usize {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn render(&self) -> String {
        // Display prints the shortest representation that round-trips
        self.to_string()
    }
}

impl Value for bool {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "true" | "on" | "yes" | "1" => Some(true),
            "false" | "off" | "no" | "0" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for LocHead {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for ShapeFamily {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

fn parse_value<T: Value>(key: &str, raw: &str) -> Result<T> {
    T::parse(raw).ok_or_else(|| Error::Config(format!("invalid value `{raw}` for `{key}`")))
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ ),* $(,)?) => {
        /// Canonical keys in the order they are written out.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            fn set_canonical(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $( $key => self.$($field).+ = parse_value(key, raw)?, )*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            fn get_canonical(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(Value::render(&self.$($field).+)), )*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "model.template_size" => model.template_size,
    "model.search_size" => model.search_size,
    "model.channels" => model.channels,
    "model.template_feature_size" => model.template_feature_size,
    "model.tower_depth" => model.tower_depth,
    "model.loc_head" => model.loc_head,
    "model.nonlocal" => model.nonlocal,
    "model.aggregate" => model.aggregate,
    "model.init_offset" => model.init_offset,
    "train.epochs" => train.epochs,
    "train.steps_per_epoch" => train.steps_per_epoch,
    "train.batch_size" => train.batch_size,
    "train.freeze_epochs" => train.freeze_epochs,
    "train.lr_start" => train.lr_start,
    "train.lr_end" => train.lr_end,
    "train.momentum" => train.momentum,
    "train.weight_decay" => train.weight_decay,
    "train.clip_norm" => train.clip_norm,
    "train.reg_weight" => train.reg_weight,
    "train.loc_weight" => train.loc_weight,
    "train.alpha" => train.labels.alpha,
    "train.beta" => train.labels.beta,
    "train.lambda_boundary" => train.labels.lambda_boundary,
    "train.center_shrink" => train.labels.center_shrink,
    "train.ladl" => train.labels.ladl,
    "train.lals" => train.labels.lals,
    "train.normalize" => train.labels.normalize,
    "train.seed" => train.seed,
    "train.shift" => train.shift,
    "train.scale_jitter" => train.scale_jitter,
    "train.max_gap" => train.max_gap,
    "synth.canvas" => synth.canvas,
    "synth.length" => synth.length,
    "synth.shapes" => synth.shapes,
    "synth.min_size" => synth.min_size,
    "synth.max_size" => synth.max_size,
    "synth.speed" => synth.speed,
    "synth.jitter" => synth.jitter,
    "synth.scale_min" => synth.scale_min,
    "synth.scale_max" => synth.scale_max,
    "synth.distractors" => synth.distractors,
    "synth.occlusion_prob" => synth.occlusion_prob,
    "synth.seed" => synth.seed,
    "track.window_influence" => track.window_influence,
    "track.penalty_k" => track.penalty_k,
    "track.top_n" => track.top_n,
    "track.context" => track.context,
    "track.size_lr" => track.size_lr,
    "track.min_size" => track.min_size,
}

/// Resolve a full or bare key to its canonical form.
pub fn resolve_key(key: &str) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    let matches: Vec<&'static str> = KEYS
        .iter()
        .copied()
        .filter(|k| k.split_once('.').is_some_and(|(_, rest)| rest == key))
        .collect();
    match matches.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::Config(format!("unknown config key `{key}`"))),
        many => Err(Error::Config(format!(
            "ambiguous config key `{key}` (use one of {})",
            many.join(", ")
        ))),
    }
}

impl RunConfig {
    /// Small crops and a narrow network for quick runs and tests.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                template_size: 63,
                search_size: 127,
                channels: 16,
                template_feature_size: 0,
                tower_depth: 2,
                init_offset: 16.0,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 6,
                steps_per_epoch: 60,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = resolve_key(key.trim())?;
        self.set_canonical(key, value.trim())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let key = resolve_key(key)?;
        Ok(self.get_canonical(key).expect("resolved keys are known"))
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Apply settings from config text on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = resolve_key(k.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            if !seen.insert(key) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            self.set_canonical(key, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every setting as `key = value`, one per line, in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get_canonical(k).expect("known key"));
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.track.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::toy();
        c.train.lr_start = 0.1 + 0.2;
        c.model.loc_head = LocHead::Centerness;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bare_keys_resolve_when_unique() {
        assert_eq!(resolve_key("epochs").unwrap(), "train.epochs");
        assert_eq!(resolve_key("window_influence").unwrap(), "track.window_influence");
        assert!(matches!(resolve_key("seed"), Err(Error::Config(m)) if m.contains("ambiguous")));
        assert!(matches!(resolve_key("min_size"), Err(Error::Config(_))));
        assert!(matches!(resolve_key("nope"), Err(Error::Config(m)) if m.contains("unknown")));
    }

    #[test]
    fn overrides_win_and_bad_values_fail() {
        let mut c = RunConfig::parse("train.epochs = 4\n# comment\nsynth.seed = 9 # trailing\n").unwrap();
        assert_eq!((c.train.epochs, c.synth.seed), (4, 9));
        c.apply_overrides(&["epochs=1"]).unwrap();
        assert_eq!(c.train.epochs, 1);
        assert!(c.apply_overrides(&["epochs=many"]).is_err());
        assert!(RunConfig::parse("train.epochs = 1\nepochs = 2\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::toy().validate().unwrap();
        assert_eq!(RunConfig::default().model.score_size().unwrap(), 25);
    }
}
