//! Flat `key = value` run configuration with dotted section keys. Unknown
//! keys are rejected so typos fail loudly, and every run can write back its
//! fully resolved settings.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::{EDUNetConfig, FgMode, Profile};
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: EDUNetConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub folds: usize,
}

impl RunConfig {
    pub fn tiny_default() -> Self {
        RunConfig {
            model: EDUNetConfig::tiny(3, 64),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            folds: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.augment.validate()?;
        if self.folds == 0 {
            return Err(Error::Config("folds must be >= 1".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` assignment; errors on unknown keys or bad values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value `{value}` for {what} `{key}`"));
        let as_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("integer"));
        let as_u64 = |v: &str| v.parse::<u64>().map_err(|_| bad("integer"));
        let as_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("number"));
        let as_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("boolean")),
        };
        match key {
            "model.profile" => {
                let profile: Profile = value.parse().map_err(|_| bad("profile"))?;
                let classes = self.model.num_classes;
                let size = self.model.input_size.0;
                self.model = match profile {
                    Profile::Tiny => EDUNetConfig::tiny(classes, size),
                    Profile::B0 => EDUNetConfig::b0(classes, size),
                };
            }
            "model.num_classes" => self.model.num_classes = as_usize(value)?,
            "model.input_size" => {
                let s = as_usize(value)?;
                self.model.input_size = (s, s);
            }
            "model.fg_attention_mode" => {
                self.model.fg_attention_mode = value.parse().map_err(|_| bad("attention mode"))?
            }
            "model.use_global" => self.model.use_global = as_bool(value)?,
            "model.use_local" => self.model.use_local = as_bool(value)?,
            "model.use_mcega" => self.model.use_mcega = as_bool(value)?,
            "train.alpha" => self.train.alpha = as_f64(value)?,
            "train.beta" => self.train.beta = as_f64(value)?,
            "train.lr" => self.train.lr = as_f64(value)?,
            "train.batch_size" => self.train.batch_size = as_usize(value)?,
            "train.max_epochs" => self.train.max_epochs = as_usize(value)?,
            "train.adam_beta1" => self.train.adam_beta1 = as_f64(value)?,
            "train.adam_beta2" => self.train.adam_beta2 = as_f64(value)?,
            "train.adam_eps" => self.train.adam_eps = as_f64(value)?,
            "train.sched_factor" => self.train.sched_factor = as_f64(value)?,
            "train.sched_patience" => self.train.sched_patience = as_usize(value)?,
            "train.sched_min_lr" => self.train.sched_min_lr = as_f64(value)?,
            "train.sched_threshold" => self.train.sched_threshold = as_f64(value)?,
            "train.seed" => self.train.seed = as_u64(value)?,
            "train.dice_smooth" => self.train.dice_smooth = as_f64(value)?,
            "train.include_background_in_loss" => {
                self.train.include_background_in_loss = as_bool(value)?
            }
            "augment.hflip_prob" => self.augment.hflip_prob = as_f64(value)?,
            "augment.rotate_prob" => self.augment.rotate_prob = as_f64(value)?,
            "augment.rotate_max_deg" => self.augment.rotate_max_deg = as_f64(value)?,
            "augment.brightness_prob" => self.augment.brightness_prob = as_f64(value)?,
            "augment.brightness_delta" => self.augment.brightness_delta = as_f64(value)?,
            "augment.contrast_prob" => self.augment.contrast_prob = as_f64(value)?,
            "augment.contrast_delta" => self.augment.contrast_delta = as_f64(value)?,
            "folds" => self.folds = as_usize(value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", ln + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.parse_text(&text)
    }

    /// Resolved settings in the same format `parse_text` accepts.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let a = &self.augment;
        let profile = match m.profile {
            Profile::Tiny => "tiny",
            Profile::B0 => "b0",
        };
        let fg = match m.fg_attention_mode {
            FgMode::Mean => "mean",
            FgMode::OneMinusBg => "one_minus_bg",
        };
        let _ = writeln!(s, "model.profile = {profile}");
        let _ = writeln!(s, "model.num_classes = {}", m.num_classes);
        let _ = writeln!(s, "model.input_size = {}", m.input_size.0);
        let _ = writeln!(s, "model.fg_attention_mode = {fg}");
        let _ = writeln!(s, "model.use_global = {}", m.use_global);
        let _ = writeln!(s, "model.use_local = {}", m.use_local);
        let _ = writeln!(s, "model.use_mcega = {}", m.use_mcega);
        let _ = writeln!(s, "train.alpha = {}", t.alpha);
        let _ = writeln!(s, "train.beta = {}", t.beta);
        let _ = writeln!(s, "train.lr = {}", t.lr);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.max_epochs = {}", t.max_epochs);
        let _ = writeln!(s, "train.adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(s, "train.adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(s, "train.adam_eps = {}", t.adam_eps);
        let _ = writeln!(s, "train.sched_factor = {}", t.sched_factor);
        let _ = writeln!(s, "train.sched_patience = {}", t.sched_patience);
        let _ = writeln!(s, "train.sched_min_lr = {}", t.sched_min_lr);
        let _ = writeln!(s, "train.sched_threshold = {}", t.sched_threshold);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.dice_smooth = {}", t.dice_smooth);
        let _ = writeln!(
            s,
            "train.include_background_in_loss = {}",
            t.include_background_in_loss
        );
        let _ = writeln!(s, "augment.hflip_prob = {}", a.hflip_prob);
        let _ = writeln!(s, "augment.rotate_prob = {}", a.rotate_prob);
        let _ = writeln!(s, "augment.rotate_max_deg = {}", a.rotate_max_deg);
        let _ = writeln!(s, "augment.brightness_prob = {}", a.brightness_prob);
        let _ = writeln!(s, "augment.brightness_delta = {}", a.brightness_delta);
        let _ = writeln!(s, "augment.contrast_prob = {}", a.contrast_prob);
        let _ = writeln!(s, "augment.contrast_delta = {}", a.contrast_delta);
        let _ = writeln!(s, "folds = {}", self.folds);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_comments() {
        let mut c = RunConfig::tiny_default();
        c.parse_text(
            "# run settings\n\
             train.lr = 0.001   # bumped\n\
             model.num_classes = 4\n\
             \n\
             augment.hflip_prob = 0\n",
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.model.num_classes, 4);
        assert_eq!(c.augment.hflip_prob, 0.0);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        let mut c = RunConfig::tiny_default();
        assert!(c.parse_text("train.momentum = 0.9").is_err());
        assert!(c.parse_text("train.lr = fast").is_err());
        assert!(c.parse_text("no equals sign").is_err());
    }

    #[test]
    fn render_parse_roundtrip() {
        let mut c = RunConfig::tiny_default();
        c.set("model.profile", "tiny").unwrap();
        c.set("train.lr", "0.00025").unwrap();
        c.set("model.use_mcega", "false").unwrap();
        let text = c.render();
        let mut d = RunConfig::tiny_default();
        d.parse_text(&text).unwrap();
        assert_eq!(d.render(), text);
        assert_eq!(d.train.lr, 0.00025);
        assert!(!d.model.use_mcega);
    }

    #[test]
    fn profile_switch_preserves_classes_and_size() {
        let mut c = RunConfig::tiny_default();
        c.set("model.num_classes", "4").unwrap();
        c.set("model.input_size", "128").unwrap();
        c.set("model.profile", "b0").unwrap();
        assert_eq!(c.model.num_classes, 4);
        assert_eq!(c.model.input_size, (128, 128));
        assert_eq!(c.model.profile, Profile::B0);
    }

    #[test]
    fn fusion_mode_is_fixed_mean() {
        let c = RunConfig::tiny_default();
        assert_eq!(c.model.fusion_mode, crate::model::FusionMode::AvgProb);
    }
}
