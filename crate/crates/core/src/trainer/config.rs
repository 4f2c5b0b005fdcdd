use std::fs;
use std::path::{Path, PathBuf};

use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::kv;
use crate::models::ModelConfig;
use crate::objective::{AdversarialForm, LossWeights};

/// Everything a training run needs. Serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TaskMode,
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// First epoch (1-based) trained at the decayed rate.
    pub lr_milestone: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adversarial_form: AdversarialForm,
    pub augment: bool,
    pub crop: usize,
    /// Validate every this many epochs (and after the last one); 0 disables.
    pub validation_interval: usize,
    pub checkpoint_interval: usize,
    /// Stop after this many optimizer steps in total; 0 means no limit.
    pub max_steps: usize,
    /// Stop once a validation reaches this PSNR in dB; 0 disables.
    pub target_psnr: f64,
    /// Cap on steps per epoch; 0 means one full pass over the data.
    pub steps_per_epoch: usize,
    pub clip_group: usize,
    pub train_root: Option<PathBuf>,
    pub train_split: Option<PathBuf>,
    pub val_root: Option<PathBuf>,
    pub val_split: Option<PathBuf>,
    /// Train on this many generated moving-rectangle triplets instead of files.
    pub synthetic_samples: usize,
    pub synthetic_size: usize,
    pub run_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TaskMode::SingleFrame,
            model: ModelConfig::default(),
            learning_rate: 1e-4,
            lr_decay: 0.1,
            lr_milestone: 100,
            epochs: 500,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            adversarial_form: AdversarialForm::default(),
            augment: true,
            crop: crate::data::DEFAULT_CROP,
            validation_interval: 5,
            checkpoint_interval: 1,
            max_steps: 0,
            target_psnr: 0.0,
            steps_per_epoch: 0,
            clip_group: crate::data::DEFAULT_CLIP_GROUP,
            train_root: None,
            train_split: None,
            val_root: None,
            val_split: None,
            synthetic_samples: 0,
            synthetic_size: 64,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if self.model.set(key, raw)? {
            return Ok(());
        }
        match key {
            "mode" => self.mode = raw.parse()?,
            "learning_rate" => self.learning_rate = kv::value(key, raw)?,
            "lr_decay" => self.lr_decay = kv::value(key, raw)?,
            "lr_milestone" => self.lr_milestone = kv::value(key, raw)?,
            "epochs" => self.epochs = kv::value(key, raw)?,
            "batch_size" => self.batch_size = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            "w_syn" => self.weights.synthesis = kv::value(key, raw)?,
            "w_flow" => self.weights.flow = kv::value(key, raw)?,
            "w_adv" => self.weights.adversarial = kv::value(key, raw)?,
            "adversarial_form" => self.adversarial_form = raw.parse()?,
            "augment" => self.augment = kv::flag(key, raw)?,
            "crop" => self.crop = kv::value(key, raw)?,
            "validation_interval" => self.validation_interval = kv::value(key, raw)?,
            "checkpoint_interval" => self.checkpoint_interval = kv::value(key, raw)?,
            "max_steps" => self.max_steps = kv::value(key, raw)?,
            "target_psnr" => self.target_psnr = kv::value(key, raw)?,
            "steps_per_epoch" => self.steps_per_epoch = kv::value(key, raw)?,
            "clip_group" => self.clip_group = kv::value(key, raw)?,
            "train_root" => self.train_root = opt_path(raw),
            "train_split" => self.train_split = opt_path(raw),
            "val_root" => self.val_root = opt_path(raw),
            "val_split" => self.val_split = opt_path(raw),
            "synthetic_samples" => self.synthetic_samples = kv::value(key, raw)?,
            "synthetic_size" => self.synthetic_size = kv::value(key, raw)?,
            "run_dir" => self.run_dir = PathBuf::from(raw),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = [
            ("mode", self.mode.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_milestone", self.lr_milestone.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("w_syn", self.weights.synthesis.to_string()),
            ("w_flow", self.weights.flow.to_string()),
            ("w_adv", self.weights.adversarial.to_string()),
            ("adversarial_form", self.adversarial_form.as_str().to_string()),
            ("augment", self.augment.to_string()),
            ("crop", self.crop.to_string()),
            ("validation_interval", self.validation_interval.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("target_psnr", self.target_psnr.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("clip_group", self.clip_group.to_string()),
            ("train_root", show_path(&self.train_root)),
            ("train_split", show_path(&self.train_split)),
            ("val_root", show_path(&self.val_root)),
            ("val_split", show_path(&self.val_split)),
            ("synthetic_samples", self.synthetic_samples.to_string()),
            ("synthetic_size", self.synthetic_size.to_string()),
            ("run_dir", self.run_dir.display().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(self.model.entries());
        out
    }

    pub fn to_text(&self) -> String {
        kv::render(&self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("`{name}` must be positive")))
            }
        };
        positive("learning_rate", self.learning_rate > 0.0 && self.learning_rate.is_finite())?;
        positive("lr_decay", self.lr_decay > 0.0 && self.lr_decay.is_finite())?;
        positive("epochs", self.epochs > 0)?;
        positive("batch_size", self.batch_size > 0)?;
        positive("checkpoint_interval", self.checkpoint_interval > 0)?;
        positive("crop", self.crop > 0)?;
        if !(self.target_psnr >= 0.0 && self.target_psnr.is_finite()) {
            return Err(Error::Config("`target_psnr` must be a non-negative number".into()));
        }
        if self.train_root.is_none() && self.synthetic_samples == 0 {
            return Err(Error::Config("set `train_root` or `synthetic_samples`".into()));
        }
        if self.synthetic_samples > 0 && self.mode != TaskMode::SingleFrame {
            return Err(Error::Config("synthetic data only supports single_frame mode".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch number.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_milestone {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("epochs", "3").unwrap();
        c.set("input_mode", "concat").unwrap();
        c.set("train_root", "/data/x").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(TrainConfig::from_text("bogus = 1").is_err());
    }
}
