//! Run configuration: flat `key = value` text with typed parsing, unknown-key
//! rejection, and cross-field validation.

use std::collections::BTreeSet;

use crate::binq::EntropyConfig;
use crate::error::{Error, Result};
use crate::toktrain::{SyntheticDatasetSpec, TokenizerConfig};

/// Every tunable of the stack. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    // Data
    pub image_size: usize,
    pub num_classes: usize,
    // Tokenizer
    pub downsample: usize,
    pub d: usize,
    pub groups: usize,
    pub temperature: f64,
    pub entropy_weight: f64,
    pub tok_hidden: usize,
    pub commit_weight: f64,
    pub tok_lr: f64,
    pub tok_batch: usize,
    pub tok_steps: u64,
    // AR model
    pub patch_size: usize,
    pub backbone_width: usize,
    pub backbone_depth: usize,
    pub backbone_heads: usize,
    pub backbone_mlp_ratio: usize,
    pub head_width: usize,
    pub head_depth: usize,
    pub head_heads: usize,
    // AR training
    pub ar_lr: f64,
    pub ar_batch: usize,
    pub ar_steps: u64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub cond_drop_prob: f64,
    // Sampling
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub delta_clamp: f64,
}

impl Default for RunConfig {
    /// The desk-scale recipe: 32x32 four-class images, an 8x8 grid of 16-bit
    /// tokens, 2x2 patches.
    fn default() -> Self {
        RunConfig {
            seed: 7,
            image_size: 32,
            num_classes: 4,
            downsample: 4,
            d: 16,
            groups: 2,
            temperature: 1.0,
            entropy_weight: 0.1,
            tok_hidden: 64,
            commit_weight: 0.25,
            tok_lr: 1e-3,
            tok_batch: 16,
            tok_steps: 2000,
            patch_size: 2,
            backbone_width: 64,
            backbone_depth: 3,
            backbone_heads: 4,
            backbone_mlp_ratio: 4,
            head_width: 96,
            head_depth: 3,
            head_heads: 4,
            ar_lr: 1e-4,
            ar_batch: 8,
            ar_steps: 5000,
            warmup_steps: 100,
            grad_clip: 1.0,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            cond_drop_prob: 0.1,
            num_steps: 50,
            cfg_scale: 3.0,
            delta_clamp: 1e-3,
        }
    }
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl RunConfig {
            fn set_key(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = raw.parse().map_err(|_| {
                            Error::Config(format!(
                                "key '{key}': cannot parse '{raw}' as {}",
                                std::any::type_name_of_val(&self.$field)
                            ))
                        })?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown key '{key}'"))),
                }
            }

            /// Canonical `key = value` rendering, one line per field.
            pub fn to_config_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));)*
                out
            }
        }
    };
}

config_keys!(
    seed,
    image_size,
    num_classes,
    downsample,
    d,
    groups,
    temperature,
    entropy_weight,
    tok_hidden,
    commit_weight,
    tok_lr,
    tok_batch,
    tok_steps,
    patch_size,
    backbone_width,
    backbone_depth,
    backbone_heads,
    backbone_mlp_ratio,
    head_width,
    head_depth,
    head_heads,
    ar_lr,
    ar_batch,
    ar_steps,
    warmup_steps,
    grad_clip,
    weight_decay,
    ema_decay,
    cond_drop_prob,
    num_steps,
    cfg_scale,
    delta_clamp,
);

impl RunConfig {
    /// Parse `key = value` lines ('#' starts a comment). Unknown keys are
    /// rejected; unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set_key(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply `key=value` overrides on top of the parsed file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{ov}': expected key=value"))
            })?;
            self.set_key(key.trim(), value.trim())?;
        }
        self.validate()
    }

    /// Cross-field constraints; every violation names the fields involved.
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.d % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups ({}) must divide d ({})",
                self.groups, self.d
            )));
        }
        if self.downsample == 0 || self.image_size % self.downsample != 0 {
            return Err(Error::Config(format!(
                "downsample ({}) must divide image_size ({})",
                self.downsample, self.image_size
            )));
        }
        let grid = self.image_size / self.downsample;
        if self.patch_size == 0 || grid % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size ({}) must divide the token grid ({} = image_size/downsample)",
                self.patch_size, grid
            )));
        }
        if self.backbone_width % self.backbone_heads != 0 {
            return Err(Error::Config(format!(
                "backbone_heads ({}) must divide backbone_width ({})",
                self.backbone_heads, self.backbone_width
            )));
        }
        if self.backbone_width % 4 != 0 {
            return Err(Error::Config(format!(
                "backbone_width ({}) must be divisible by 4 (2D positional encoding)",
                self.backbone_width
            )));
        }
        if self.head_width % self.head_heads != 0 {
            return Err(Error::Config(format!(
                "head_heads ({}) must divide head_width ({})",
                self.head_heads, self.head_width
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(self.delta_clamp > 0.0) {
            return Err(Error::Config("delta_clamp must be positive".into()));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!(
                "cond_drop_prob ({}) must lie in [0, 1]",
                self.cond_drop_prob
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay ({}) must lie in [0, 1)", self.ema_decay)));
        }
        self.entropy_config().validate()?;
        self.tokenizer_config().validate()?;
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn entropy_config(&self) -> EntropyConfig {
        EntropyConfig {
            d: self.d,
            g: self.groups,
            temperature: self.temperature,
            weight: self.entropy_weight,
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            downsample: self.downsample,
            d: self.d,
            hidden_width: self.tok_hidden,
            entropy: self.entropy_config(),
            commit_weight: self.commit_weight,
        }
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            image_size: self.image_size,
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }

    pub fn all_keys() -> &'static [&'static str] {
        KEYS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_roundtrip_canonical_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_config_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // Every declared key appears in the canonical rendering.
        for key in RunConfig::all_keys() {
            assert!(text.contains(&format!("{key} = ")), "missing {key}");
        }
    }

    #[test]
    fn parse_accepts_comments_and_blanks() {
        let cfg = RunConfig::parse("# full recipe\n\nseed = 9   # rng\n d = 8 \ngroups=2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.d, 8);
    }

    #[test]
    fn parse_rejects_unknown_keys() {
        let err = RunConfig::parse("bogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn parse_rejects_duplicates_and_bad_values() {
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        let err = RunConfig::parse("seed = banana\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn validation_names_fields() {
        let err = RunConfig::parse("d = 10\ngroups = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("groups") && msg.contains("d"), "{msg}");

        let err = RunConfig::parse("image_size = 30\n").unwrap_err();
        assert!(err.to_string().contains("downsample"), "{err}");

        let err = RunConfig::parse("patch_size = 3\n").unwrap_err();
        assert!(err.to_string().contains("patch_size"), "{err}");
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["seed=123".into(), "cfg_scale = 2.5".into()]).unwrap();
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.cfg_scale, 2.5);
        assert!(cfg.apply_overrides(&["groups=7".into()]).is_err());
    }
}
