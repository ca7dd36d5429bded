//! Label-free leaf segmentation.
//!
//! A classifier is trained on "full leaf", "partial leaf" and "non-leaf"
//! images. The Grad-CAM heatmap of the full-leaf score, thresholded at `δ`,
//! is used as a binary leaf mask.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, IndexOp, Var, D};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::{fit_classifier, predict, BackboneKind, Classifier, FitConfig, SmallCnn, SmallCnnConfig};
use crate::datakit::{LabeledSample, LabeledSplit};
use crate::error::{Error, Result};
use crate::image::{bilinear_resize, images_to_tensor, Image};

pub use crate::image::{BinaryMask, HeatMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafClass {
    FullLeaf,
    PartialLeaf,
    NonLeaf,
}

impl LeafClass {
    pub const ALL: [LeafClass; 3] = [LeafClass::FullLeaf, LeafClass::PartialLeaf, LeafClass::NonLeaf];

    pub fn dir_name(self) -> &'static str {
        match self {
            LeafClass::FullLeaf => "full_leaf",
            LeafClass::PartialLeaf => "partial_leaf",
            LeafClass::NonLeaf => "non_leaf",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.dir_name() == name)
    }
}

/// Mask threshold, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Delta(f64);

impl Delta {
    pub const DEFAULT: Delta = Delta(0.35);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Delta(value))
        } else {
            Err(Error::config("delta", format!("{value} must lie strictly between 0 and 1")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Delta {
    fn default() -> Self {
        Delta::DEFAULT
    }
}

impl TryFrom<f64> for Delta {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Delta::new(v)
    }
}

impl From<Delta> for f64 {
    fn from(d: Delta) -> f64 {
        d.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    #[serde(default)]
    pub delta: Delta,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneKind,
    #[serde(default = "default_side")]
    pub input_side: usize,
}

fn default_backbone() -> BackboneKind {
    BackboneKind::SmallCnn
}

fn default_side() -> usize {
    64
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            delta: Delta::DEFAULT,
            backbone: BackboneKind::SmallCnn,
            input_side: default_side(),
        }
    }
}

/// A trained segmentation classifier together with its class vocabulary.
///
/// The vocabulary is normally all three classes; the two-class ablation
/// (full leaf vs. non-leaf) drops `PartialLeaf`.
pub struct LflsegModel {
    pub net: SmallCnn,
    pub classes: Vec<LeafClass>,
}

impl LflsegModel {
    pub fn new(classes: Vec<LeafClass>, width: usize, seed: u64, device: &Device) -> Result<Self> {
        if !classes.contains(&LeafClass::FullLeaf) {
            return Err(Error::Label("the vocabulary must contain the full-leaf class".into()));
        }
        let net = SmallCnn::new(
            SmallCnnConfig {
                num_classes: classes.len(),
                width,
                ..SmallCnnConfig::default()
            },
            seed,
            DType::F32,
            device,
        )?;
        Ok(Self { net, classes })
    }

    pub fn index_of(&self, class: LeafClass) -> Option<usize> {
        self.classes.iter().position(|c| *c == class)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.save(path)?;
        let vocab = path.with_extension("classes.json");
        crate::image::write_atomic(&vocab, serde_json::to_string(&self.classes)?.as_bytes())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let net = SmallCnn::load(path, device)?;
        let vocab = path.with_extension("classes.json");
        let text = std::fs::read_to_string(&vocab).map_err(|e| Error::io(&vocab, e))?;
        let classes: Vec<LeafClass> = serde_json::from_str(&text)?;
        if classes.len() != net.config().num_classes {
            return Err(Error::Checkpoint("class vocabulary does not match the classifier".into()));
        }
        Ok(Self { net, classes })
    }
}

#[derive(Debug, Clone)]
pub struct LflsegTraining {
    pub test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

fn indexed<'a>(model: &LflsegModel, samples: &'a [LabeledSample]) -> Vec<(&'a Image, usize)> {
    samples
        .iter()
        .filter_map(|s| model.index_of(s.label).map(|i| (&s.image, i)))
        .collect()
}

/// Trains the segmentation classifier and reports test accuracy.
///
/// Samples whose class is outside the model's vocabulary are ignored, which
/// lets the two-class ablation reuse a three-class split.
pub fn train_lflseg(model: &LflsegModel, split: &LabeledSplit, fit: &FitConfig) -> Result<LflsegTraining> {
    for class in &model.classes {
        if !split.train.iter().any(|s| s.label == *class) {
            return Err(Error::Label(format!("class {:?} missing from the training split", class)));
        }
        if !split.test.iter().any(|s| s.label == *class) {
            return Err(Error::Label(format!("class {:?} missing from the test split", class)));
        }
    }
    let train = indexed(model, &split.train);
    let report = fit_classifier(&model.net, &train, fit)?;
    let test = indexed(model, &split.test);
    let test_accuracy = accuracy(model, &test)?;
    Ok(LflsegTraining {
        test_accuracy,
        epoch_losses: report.epoch_losses,
    })
}

pub fn accuracy(model: &LflsegModel, samples: &[(&Image, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let images: Vec<&Image> = samples.iter().map(|(i, _)| *i).collect();
    let pred = predict(&model.net, &images, 64, model.net.dtype(), model.net.device())?;
    let hits = pred.iter().zip(samples).filter(|(p, (_, l))| **p == *l).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Intermediate quantities of one Grad-CAM evaluation.
#[derive(Debug, Clone)]
pub struct GradCamTrace {
    /// Feature maps `A^k`, flattened `(K, h, w)`.
    pub features: Vec<f64>,
    /// `∂score/∂A^k`, same layout as `features`.
    pub gradients: Vec<f64>,
    /// Channel weights `α_k` (spatial mean of the gradients).
    pub weights: Vec<f64>,
    /// Rectified weighted sum at feature resolution, `(h, w)`.
    pub raw: Vec<f64>,
    pub channels: usize,
    pub feat_height: usize,
    pub feat_width: usize,
    pub heatmap: HeatMap,
}

/// Grad-CAM heatmap for class index `target`, upsampled to the input size and
/// min-max normalized. A map with no positive raw activation stays all-zero.
pub fn gradcam_trace(classifier: &dyn Classifier, img: &Image, target: usize, dtype: DType, device: &Device) -> Result<GradCamTrace> {
    let stage = classifier
        .conv_stage()
        .ok_or_else(|| Error::UnsupportedBackbone("classifier has no convolutional feature stage".into()))?;
    if target >= classifier.num_classes() {
        return Err(Error::Label(format!("target class {target} out of range")));
    }
    let xs = images_to_tensor(&[img], dtype, device)?;
    let feats = stage.features(&xs)?.detach();
    let (_, k, fh, fw) = feats.dims4()?;
    let leaf = Var::from_tensor(&feats)?;
    let score = stage.head(leaf.as_tensor())?.i((0, target))?;
    let grads = score.backward()?;
    let grad = match grads.get(&leaf) {
        Some(g) => g.clone(),
        None => leaf.zeros_like()?,
    };
    let a = feats.i(0)?.to_dtype(DType::F64)?;
    let g = grad.i(0)?.to_dtype(DType::F64)?;
    let weights_t = g.mean(D::Minus1)?.mean(D::Minus1)?;
    let raw_t = a
        .broadcast_mul(&weights_t.reshape((k, 1, 1))?)?
        .sum(0)?
        .relu()?;
    let features: Vec<f64> = a.flatten_all()?.to_vec1()?;
    let gradients: Vec<f64> = g.flatten_all()?.to_vec1()?;
    let weights: Vec<f64> = weights_t.to_vec1()?;
    let raw: Vec<f64> = raw_t.flatten_all()?.to_vec1()?;
    let heatmap = normalize_cam(&raw, fh, fw, img.height(), img.width())?;
    Ok(GradCamTrace {
        features,
        gradients,
        weights,
        raw,
        channels: k,
        feat_height: fh,
        feat_width: fw,
        heatmap,
    })
}

/// Bilinear upsampling to `(h, w)` followed by min-max normalization.
pub fn normalize_cam(raw: &[f64], fh: usize, fw: usize, h: usize, w: usize) -> Result<HeatMap> {
    if !raw.iter().any(|v| *v > 0.0) {
        return Ok(HeatMap::zeros(h, w));
    }
    let plane: Vec<f32> = raw.iter().map(|v| *v as f32).collect();
    let up = bilinear_resize(&plane, fh, fw, h, w);
    let lo = up.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = up.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let values = if hi > lo {
        up.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![1.0; h * w]
    };
    HeatMap::new(h, w, values)
}

pub fn gradcam(model: &LflsegModel, img: &Image, target: LeafClass) -> Result<HeatMap> {
    let idx = model
        .index_of(target)
        .ok_or_else(|| Error::Label(format!("{target:?} is not in the vocabulary")))?;
    Ok(gradcam_trace(&model.net, img, idx, model.net.dtype(), model.net.device())?.heatmap)
}

/// `mask[i,j] = 1` iff `hm[i,j] ≥ δ`.
pub fn threshold_mask(hm: &HeatMap, delta: Delta) -> BinaryMask {
    let d = delta.value();
    let values = hm.values().iter().map(|v| (*v as f64 >= d) as u8).collect();
    BinaryMask::new(hm.height(), hm.width(), values).expect("same size as heatmap")
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: BinaryMask,
    /// The thresholded map was empty and an all-ones mask was substituted.
    pub fallback: bool,
}

/// Full-leaf Grad-CAM thresholded at `cfg.delta`; an empty result falls back to all ones.
///
/// Images at another resolution are segmented at `cfg.input_side` and the
/// mask is resized back with nearest-neighbour sampling.
pub fn segment(model: &LflsegModel, img: &Image, cfg: &SegConfig) -> Result<Segmentation> {
    let target = model.index_of(LeafClass::FullLeaf).unwrap_or(0);
    let side = cfg.input_side;
    if img.height() == side && img.width() == side {
        return segment_with(&model.net, target, img, cfg, model.net.dtype(), model.net.device());
    }
    let small = img.resize(side, side);
    let seg = segment_with(&model.net, target, &small, cfg, model.net.dtype(), model.net.device())?;
    Ok(Segmentation {
        mask: seg.mask.resize_nearest(img.height(), img.width()),
        fallback: seg.fallback,
    })
}

/// [`segment`] for an arbitrary classifier and target class index.
pub fn segment_with(
    classifier: &dyn Classifier,
    target: usize,
    img: &Image,
    cfg: &SegConfig,
    dtype: DType,
    device: &Device,
) -> Result<Segmentation> {
    let hm = gradcam_trace(classifier, img, target, dtype, device)?.heatmap;
    let mask = threshold_mask(&hm, cfg.delta);
    if mask.is_all_zero() {
        warn!("empty leaf mask; falling back to an all-ones mask");
        return Ok(Segmentation {
            mask: BinaryMask::ones(img.height(), img.width()),
            fallback: true,
        });
    }
    Ok(Segmentation { mask, fallback: false })
}

/// Per-domain mask store: `<root>/masks/<domain>/<stem>.png`.
#[derive(Debug, Clone)]
pub struct MaskCache {
    root: PathBuf,
}

impl MaskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn domain_dir(&self, domain: &str) -> PathBuf {
        self.root.join("masks").join(domain)
    }

    pub fn path(&self, domain: &str, stem: &str) -> PathBuf {
        self.domain_dir(domain).join(format!("{stem}.png"))
    }

    pub fn get(&self, domain: &str, stem: &str) -> Result<Option<BinaryMask>> {
        let p = self.path(domain, stem);
        if p.is_file() {
            BinaryMask::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn put(&self, domain: &str, stem: &str, mask: &BinaryMask) -> Result<PathBuf> {
        let p = self.path(domain, stem);
        mask.save_png(&p)?;
        Ok(p)
    }
}
