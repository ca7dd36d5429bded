//! Flat key-value pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneKind, FitConfig};
use crate::error::{Error, Result};
use crate::evalharness::DEFAULT_AUGMENT_COUNT;
use crate::leafgan::{DiscriminatorConfig, GanConfig, GeneratorConfig, LossWeights};
use crate::lflseg::{Delta, SegConfig};

pub const ECHO_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Translation resolution.
    pub image_side: usize,
    /// Segmentation classifier resolution.
    pub lflseg_side: usize,
    pub delta: f64,
    pub lambda: f64,
    pub split_ratio: f64,
    pub backbone: String,

    pub lflseg_epochs: usize,
    pub lflseg_batch: usize,
    pub lflseg_lr: f64,
    pub lflseg_momentum: f64,
    pub lflseg_decay_epoch: usize,
    pub lflseg_width: usize,

    pub gan_epochs: usize,
    pub gan_batch: usize,
    pub gan_lr: f64,
    pub gan_filters: usize,
    pub gan_discriminator_filters: usize,
    pub gan_history: usize,
    /// 0 disables the identity term.
    pub gan_identity_weight: f64,
    pub gan_checkpoint_every: usize,

    pub eval_epochs: usize,
    pub eval_batch: usize,
    pub eval_lr: f64,
    pub eval_width: usize,
    pub augment_count: usize,

    pub composite: bool,

    pub lflseg_root: Option<PathBuf>,
    pub gan_root: Option<PathBuf>,
    pub mask_cache: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_side: 256,
            lflseg_side: 64,
            delta: Delta::DEFAULT.value(),
            lambda: LossWeights::default().lambda,
            split_ratio: 0.7,
            backbone: BackboneKind::SmallCnn.id().to_string(),
            lflseg_epochs: 30,
            lflseg_batch: 128,
            lflseg_lr: 1e-3,
            lflseg_momentum: 0.9,
            lflseg_decay_epoch: 20,
            lflseg_width: 8,
            gan_epochs: 200,
            gan_batch: 1,
            gan_lr: 2e-4,
            gan_filters: 64,
            gan_discriminator_filters: 64,
            gan_history: 50,
            gan_identity_weight: 0.0,
            gan_checkpoint_every: 10,
            eval_epochs: 30,
            eval_batch: 128,
            eval_lr: 1e-3,
            eval_width: 8,
            augment_count: DEFAULT_AUGMENT_COUNT,
            composite: false,
            lflseg_root: None,
            gan_root: None,
            mask_cache: None,
            checkpoint_dir: None,
            output_dir: None,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(())
}

fn positive_f(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::config(field, format!("{v} must be finite and positive")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::config(&field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Range checks for every numeric field.
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 || self.image_side % 4 != 0 {
            return Err(Error::config("image_side", format!("{} must be a multiple of 4 and at least 8", self.image_side)));
        }
        if self.lflseg_side < 8 || self.lflseg_side % 4 != 0 {
            return Err(Error::config("lflseg_side", format!("{} must be a multiple of 4 and at least 8", self.lflseg_side)));
        }
        Delta::new(self.delta)?;
        LossWeights::new(self.lambda)?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config("split_ratio", format!("{} must lie in (0, 1)", self.split_ratio)));
        }
        BackboneKind::parse(&self.backbone)?;
        positive("lflseg_epochs", self.lflseg_epochs)?;
        positive("lflseg_batch", self.lflseg_batch)?;
        positive_f("lflseg_lr", self.lflseg_lr)?;
        if !(0.0..1.0).contains(&self.lflseg_momentum) {
            return Err(Error::config("lflseg_momentum", format!("{} must lie in [0, 1)", self.lflseg_momentum)));
        }
        positive("lflseg_width", self.lflseg_width)?;
        positive("gan_epochs", self.gan_epochs)?;
        positive("gan_batch", self.gan_batch)?;
        positive_f("gan_lr", self.gan_lr)?;
        positive("gan_filters", self.gan_filters)?;
        positive("gan_discriminator_filters", self.gan_discriminator_filters)?;
        if !(self.gan_identity_weight.is_finite() && self.gan_identity_weight >= 0.0) {
            return Err(Error::config("gan_identity_weight", "must be finite and non-negative"));
        }
        positive("gan_checkpoint_every", self.gan_checkpoint_every)?;
        positive("eval_epochs", self.eval_epochs)?;
        positive("eval_batch", self.eval_batch)?;
        positive_f("eval_lr", self.eval_lr)?;
        positive("eval_width", self.eval_width)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective config into `run_dir`, returning the file path.
    pub fn echo(&self, run_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(ECHO_FILE);
        crate::image::write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }

    pub fn seg_config(&self) -> Result<SegConfig> {
        Ok(SegConfig {
            delta: Delta::new(self.delta)?,
            backbone: BackboneKind::parse(&self.backbone)?,
            input_side: self.lflseg_side,
        })
    }

    pub fn lflseg_fit(&self) -> FitConfig {
        FitConfig {
            epochs: self.lflseg_epochs,
            batch: self.lflseg_batch,
            lr: self.lflseg_lr,
            momentum: self.lflseg_momentum,
            decay_epoch: Some(self.lflseg_decay_epoch),
            decay_factor: 0.1,
            seed: crate::stage_seed(self.seed, "lflseg.fit"),
            flips: false,
        }
    }

    pub fn eval_fit(&self, tag: &str) -> FitConfig {
        FitConfig {
            epochs: self.eval_epochs,
            batch: self.eval_batch,
            lr: self.eval_lr,
            momentum: 0.9,
            decay_epoch: Some(20),
            decay_factor: 0.1,
            seed: crate::stage_seed(self.seed, &format!("eval.{tag}")),
            flips: true,
        }
    }

    pub fn gan_config(&self) -> Result<GanConfig> {
        let mut g = GanConfig::for_side(self.image_side);
        g.generator = GeneratorConfig::for_side(self.image_side, self.gan_filters);
        g.discriminator = DiscriminatorConfig {
            base_filters: self.gan_discriminator_filters,
            ..DiscriminatorConfig::default()
        };
        g.weights = LossWeights::new(self.lambda)?;
        g.lr = self.gan_lr;
        g.epochs = self.gan_epochs;
        g.batch = self.gan_batch;
        g.history = self.gan_history;
        g.identity_weight = (self.gan_identity_weight > 0.0).then_some(self.gan_identity_weight);
        g.seed = crate::stage_seed(self.seed, "gan");
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn delta_out_of_range_names_the_field() {
        match PipelineConfig::parse("delta = 1.5") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "delta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        match PipelineConfig::parse("deltta = 0.3") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "deltta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn echo_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            seed: 99,
            delta: 0.4,
            gan_root: Some("data/gan".into()),
            composite: true,
            ..PipelineConfig::default()
        };
        let path = cfg.echo(dir.path()).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(PipelineConfig::load(Path::new("/nonexistent/x.toml")), Err(Error::Io { .. })));
    }

    #[test]
    fn derived_stage_configs_validate() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.gan_config().unwrap().generator.residual_blocks, 9);
        assert_eq!(cfg.seg_config().unwrap().delta.value(), 0.35);
    }
}
