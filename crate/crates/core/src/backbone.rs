//! Pluggable image classifiers. LFLSeg and the evaluation harness share the
//! same backbone; Grad-CAM needs access to the last convolutional stage.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::nn::{Conv, Dense, ParamStore, SgdMomentum};

/// A classifier whose logits factor through a convolutional feature stage.
pub trait ConvStage {
    /// Last convolutional feature maps `A`, shape `(B, K, h, w)`.
    fn features(&self, xs: &Tensor) -> Result<Tensor>;
    /// Class scores computed from the feature maps.
    fn head(&self, features: &Tensor) -> Result<Tensor>;
}

pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, xs: &Tensor) -> Result<Tensor>;
    /// `None` for backbones without a convolutional feature stage.
    fn conv_stage(&self) -> Option<&dyn ConvStage>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    SmallCnn,
}

impl BackboneKind {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "small-cnn" => Ok(BackboneKind::SmallCnn),
            other => Err(Error::UnsupportedBackbone(format!(
                "`{other}` (available: small-cnn)"
            ))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            BackboneKind::SmallCnn => "small-cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmallCnnConfig {
    pub num_classes: usize,
    /// Channels of the first block; later blocks use 2×, 4× and 4×.
    pub width: usize,
    /// Number of leading blocks followed by 2×2 max pooling.
    pub pooled_blocks: usize,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            width: 8,
            pooled_blocks: 2,
        }
    }
}

/// Four 3×3 conv/ReLU blocks, global average pooling, one linear layer.
pub struct SmallCnn {
    cfg: SmallCnnConfig,
    params: ParamStore,
    blocks: Vec<Conv>,
    fc: Dense,
}

impl SmallCnn {
    pub fn new(cfg: SmallCnnConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::InvalidInput("a classifier needs at least two classes".into()));
        }
        if cfg.pooled_blocks > 4 || cfg.width == 0 {
            return Err(Error::InvalidInput(format!("bad small-cnn config {cfg:?}")));
        }
        let mut params = ParamStore::new(seed, dtype, device.clone());
        let w = cfg.width;
        let chans = [3, w, 2 * w, 4 * w, 4 * w];
        let blocks = (0..4)
            .map(|i| Conv::new(&mut params, &format!("block{i}"), chans[i], chans[i + 1], 3, 1, 1, None))
            .collect::<Result<Vec<_>>>()?;
        let fc = Dense::new(&mut params, "fc", 4 * w, cfg.num_classes)?;
        Ok(Self {
            cfg,
            params,
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> SmallCnnConfig {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Writes `<stem>.safetensors` plus a `<stem>.json` sidecar with the architecture.
    pub fn save(&self, weights: &Path) -> Result<()> {
        if let Some(dir) = weights.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.params.save(weights)?;
        let meta = CnnCheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            backbone: BackboneKind::SmallCnn,
            config: self.cfg,
        };
        let sidecar = weights.with_extension("json");
        crate::image::write_atomic(&sidecar, serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(weights: &Path, device: &Device) -> Result<Self> {
        let sidecar = weights.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: CnnCheckpointMeta = serde_json::from_str(&text)?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported classifier checkpoint {} v{}",
                meta.format, meta.version
            )));
        }
        let model = SmallCnn::new(meta.config, 0, DType::F32, device)?;
        model.params.load(weights)?;
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "leafgan-classifier";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CnnCheckpointMeta {
    format: String,
    version: u32,
    backbone: BackboneKind,
    config: SmallCnnConfig,
}

impl ConvStage for SmallCnn {
    fn features(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = xs.clone();
        for (i, conv) in self.blocks.iter().enumerate() {
            h = conv.forward(&h)?.relu()?;
            if i < self.cfg.pooled_blocks {
                h = h.max_pool2d(2)?;
            }
        }
        Ok(h)
    }

    fn head(&self, features: &Tensor) -> Result<Tensor> {
        let pooled = features.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.fc.forward(&pooled)?)
    }
}

impl Classifier for SmallCnn {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn logits(&self, xs: &Tensor) -> Result<Tensor> {
        self.head(&self.features(xs)?)
    }

    fn conv_stage(&self) -> Option<&dyn ConvStage> {
        Some(self)
    }
}

/// Mini-batch momentum training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epoch at which the learning rate is multiplied by `decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    /// Random horizontal/vertical flips applied on the fly.
    pub flips: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 128,
            lr: 1e-3,
            momentum: 0.9,
            decay_epoch: Some(20),
            decay_factor: 0.1,
            seed: 0,
            flips: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    pub samples_per_epoch: usize,
    pub steps: usize,
}

/// Trains `model` with cross-entropy on `(image, class index)` pairs.
pub fn fit_classifier(model: &SmallCnn, samples: &[(&Image, usize)], cfg: &FitConfig) -> Result<FitReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::config("epochs", "epochs and batch size must be positive"));
    }
    if let Some((_, bad)) = samples.iter().find(|(_, l)| *l >= model.num_classes()) {
        return Err(Error::Label(format!("class index {bad} out of range")));
    }
    let mut opt = SgdMomentum::new(model.params().vars(), cfg.lr, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = FitReport {
        samples_per_epoch: samples.len(),
        ..FitReport::default()
    };
    for epoch in 0..cfg.epochs {
        opt.lr = match cfg.decay_epoch {
            Some(d) if epoch >= d => cfg.lr * cfg.decay_factor,
            _ => cfg.lr,
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let flipped: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    let mut img = samples[i].0.clone();
                    if cfg.flips {
                        if rng.random_bool(0.5) {
                            img = img.flip_horizontal();
                        }
                        if rng.random_bool(0.5) {
                            img = img.flip_vertical();
                        }
                    }
                    img
                })
                .collect();
            let refs: Vec<&Image> = flipped.iter().collect();
            let xs = images_to_tensor(&refs, model.dtype(), model.device())?;
            let labels: Vec<u32> = chunk.iter().map(|&i| samples[i].1 as u32).collect();
            let ys = Tensor::new(labels.as_slice(), model.device())?;
            let loss = candle_nn::loss::cross_entropy(&model.logits(&xs)?, &ys)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("classifier loss (epoch {epoch})"),
                    iteration: report.steps as u64,
                });
            }
            opt.step(&loss.backward()?)?;
            total += value * chunk.len() as f64;
            report.steps += 1;
        }
        let mean = total / samples.len() as f64;
        debug!("epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Arg-max class for each image, evaluated in chunks of `batch`.
pub fn predict(model: &dyn Classifier, images: &[&Image], batch: usize, dtype: DType, device: &Device) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let xs = images_to_tensor(chunk, dtype, device)?;
        let pred: Vec<u32> = model.logits(&xs)?.argmax(D::Minus1)?.to_vec1()?;
        out.extend(pred.into_iter().map(|p| p as usize));
    }
    Ok(out)
}
