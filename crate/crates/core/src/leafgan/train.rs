use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{bs_terms, cycle_terms, discriminator_loss, gate, generator_adv, scalar, total_loss_tensor};
use super::state::{epoch_dir, GanState};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, BinaryMask, Image};

/// One unpaired training batch with its precomputed leaf masks.
pub struct MaskedBatch {
    pub real_x: Tensor,
    pub real_y: Tensor,
    /// `S_x`, shape `(B, 1, H, W)`.
    pub mask_x: Tensor,
    /// `S_y`, shape `(B, 1, H, W)`.
    pub mask_y: Tensor,
}

impl MaskedBatch {
    pub fn from_images(
        xs: &[&Image],
        masks_x: &[&BinaryMask],
        ys: &[&Image],
        masks_y: &[&BinaryMask],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if xs.len() != masks_x.len() || ys.len() != masks_y.len() {
            return Err(Error::Shape("every image needs exactly one mask".into()));
        }
        for (img, m) in xs.iter().zip(masks_x).chain(ys.iter().zip(masks_y)) {
            if !m.aligned_with(img) {
                return Err(Error::Shape(format!(
                    "mask {}x{} is not aligned with image {}x{}",
                    m.height(),
                    m.width(),
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(Self {
            real_x: images_to_tensor(xs, dtype, device)?,
            real_y: images_to_tensor(ys, dtype, device)?,
            mask_x: BinaryMask::stack(masks_x, dtype, device)?,
            mask_y: BinaryMask::stack(masks_y, dtype, device)?,
        })
    }
}

/// Loss values of one step. `adv_g`/`adv_f` are the generator-side
/// adversarial terms and `total` is the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
    pub bs: f64,
    pub total: f64,
    pub d_x: f64,
    pub d_y: f64,
}

/// One generator update on the masked objective, then one update of both
/// discriminators on gated real images and gated fakes from the history.
pub fn train_step(state: &mut GanState, batch: &MaskedBatch) -> Result<LossRecord> {
    let iteration = state.iteration;
    let tag = |e: Error| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, iteration },
        other => other,
    };
    let w = state.cfg.weights;
    let (x, y) = (&batch.real_x, &batch.real_y);
    let (s_x, s_y) = (&batch.mask_x, &batch.mask_y);

    let fake_y = state.g.forward(x)?;
    let rec_x = state.f.forward(&fake_y)?;
    let fake_x = state.f.forward(y)?;
    let rec_y = state.g.forward(&fake_x)?;
    let fake_y_s = gate(&fake_y, s_x)?;
    let fake_x_s = gate(&fake_x, s_y)?;

    let adv_g = generator_adv(&state.d_y, &fake_y_s)?;
    let adv_f = generator_adv(&state.d_x, &fake_x_s)?;
    let cyc = cycle_terms(x, &rec_x, y, &rec_y)?;
    let bs = bs_terms(x, &fake_y, s_x, y, &fake_x, s_y)?;
    let mut gen_loss = total_loss_tensor(&adv_g, &adv_f, &cyc, &bs, w)?;
    if let Some(id_w) = state.cfg.identity_weight {
        let idt = ((state.g.forward(y)? - y)?.abs()?.mean_all()? + (state.f.forward(x)? - x)?.abs()?.mean_all()?)?;
        gen_loss = (gen_loss + (idt * (w.lambda * id_w))?)?;
    }

    let pooled_y = state.pool_y.query(&fake_y_s.detach(), &mut state.rng)?;
    let pooled_x = state.pool_x.query(&fake_x_s.detach(), &mut state.rng)?;
    let d_y_loss = discriminator_loss(&state.d_y, &gate(y, s_y)?, &pooled_y)?;
    let d_x_loss = discriminator_loss(&state.d_x, &gate(x, s_x)?, &pooled_x)?;

    let record = LossRecord {
        iteration,
        adv_g: scalar(&adv_g, "adv_G").map_err(tag)?,
        adv_f: scalar(&adv_f, "adv_F").map_err(tag)?,
        cyc: scalar(&cyc, "cyc").map_err(tag)?,
        bs: scalar(&bs, "bs").map_err(tag)?,
        total: scalar(&gen_loss, "total").map_err(tag)?,
        d_x: scalar(&d_x_loss, "D_X loss").map_err(tag)?,
        d_y: scalar(&d_y_loss, "D_Y loss").map_err(tag)?,
    };

    let gen_grads = gen_loss.backward()?;
    state.opt_gen.step(&gen_grads)?;
    let disc_grads = (d_x_loss + d_y_loss)?.backward()?;
    state.opt_disc.step(&disc_grads)?;
    state.iteration += 1;
    Ok(record)
}

/// Images of both domains with their leaf masks.
pub struct UnpairedData {
    pub x: Vec<(Image, BinaryMask)>,
    pub y: Vec<(Image, BinaryMask)>,
}

impl UnpairedData {
    pub fn validate(&self, side: usize) -> Result<()> {
        if self.x.is_empty() || self.y.is_empty() {
            return Err(Error::config("gan_root", "both domains need at least one image"));
        }
        for (img, m) in self.x.iter().chain(&self.y) {
            if img.height() != side || img.width() != side {
                return Err(Error::Shape(format!(
                    "training image {}x{} does not match side {side}",
                    img.height(),
                    img.width()
                )));
            }
            if !m.aligned_with(img) {
                return Err(Error::Shape("mask not aligned with its image".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        self.x.len().max(self.y.len()).div_ceil(batch)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every this many epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
    pub loss_csv: Option<PathBuf>,
    /// Stop after this many steps in total (smoke runs); `None` runs all epochs.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Append-only CSV of `iter,adv_G,adv_F,cyc,bs,total`.
pub struct LossCsv {
    path: PathBuf,
}

impl LossCsv {
    pub const HEADER: &'static str = "iter,adv_G,adv_F,cyc,bs,total";

    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        if !path.exists() {
            std::fs::write(path, format!("{}\n", Self::HEADER)).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&self, r: &LossRecord) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{},{},{},{},{},{}", r.iteration, r.adv_g, r.adv_f, r.cyc, r.bs, r.total)
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs epochs from `state.epoch` up to the configured count.
///
/// An epoch covers `⌈max(|X|,|Y|)/batch⌉` steps; each domain is reshuffled
/// every epoch and wraps around when shorter. A non-finite loss aborts after
/// saving the untouched state as `last_good` under the checkpoint directory.
pub fn train(state: &mut GanState, data: &UnpairedData, opts: &TrainOptions) -> Result<TrainSummary> {
    let cfg = state.cfg.clone();
    data.validate(cfg.side)?;
    let csv = opts.loss_csv.as_deref().map(LossCsv::open).transpose()?;
    let steps = data.steps_per_epoch(cfg.batch);
    let mut summary = TrainSummary::default();
    let dtype = state.dtype();
    let device = state.device().clone();
    let every = opts.checkpoint_every.max(1);

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        state.set_lr(cfg.lr_at_epoch(epoch));
        let mut order_x: Vec<usize> = (0..data.x.len()).collect();
        let mut order_y: Vec<usize> = (0..data.y.len()).collect();
        order_x.shuffle(&mut state.rng);
        order_y.shuffle(&mut state.rng);
        for step in 0..steps {
            if opts.max_steps.is_some_and(|m| state.iteration >= m) {
                return Ok(summary);
            }
            let lo = step * cfg.batch;
            let hi = (lo + cfg.batch).min(data.x.len().max(data.y.len()));
            let idx: Vec<usize> = (lo..hi).collect();
            let pick_x: Vec<&(Image, BinaryMask)> = idx.iter().map(|i| &data.x[order_x[i % data.x.len()]]).collect();
            let pick_y: Vec<&(Image, BinaryMask)> = idx.iter().map(|i| &data.y[order_y[i % data.y.len()]]).collect();
            let batch = MaskedBatch::from_images(
                &pick_x.iter().map(|p| &p.0).collect::<Vec<_>>(),
                &pick_x.iter().map(|p| &p.1).collect::<Vec<_>>(),
                &pick_y.iter().map(|p| &p.0).collect::<Vec<_>>(),
                &pick_y.iter().map(|p| &p.1).collect::<Vec<_>>(),
                dtype,
                &device,
            )?;
            match train_step(state, &batch) {
                Ok(record) => {
                    if let Some(csv) = &csv {
                        csv.append(&record)?;
                    }
                    summary.records.push(record);
                }
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = &opts.checkpoint_dir {
                        let p = dir.join("last_good");
                        state.save_checkpoint(&p)?;
                        warn!("aborting on {e}; last good state saved to {}", p.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch += 1;
        if let Some(dir) = &opts.checkpoint_dir {
            if state.epoch % every == 0 || state.epoch == cfg.epochs {
                let p = epoch_dir(dir, state.epoch);
                state.save_checkpoint(&p)?;
                crate::image::write_atomic(
                    &dir.join("latest"),
                    p.file_name().expect("epoch dir name").to_string_lossy().as_bytes(),
                )?;
                summary.checkpoints.push(p);
            }
        }
        info!("epoch {} done at iteration {}", state.epoch, state.iteration);
    }
    Ok(summary)
}

/// Most recent checkpoint recorded under `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let pointer = dir.join("latest");
    let name = std::fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(dir.join(name.trim()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `G: X → Y`
    XToY,
    /// `F: Y → X`
    YToX,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "AtoB" | "x2y" | "XtoY" => Ok(Direction::XToY),
            "BtoA" | "y2x" | "YtoX" => Ok(Direction::YToX),
            other => Err(Error::config("direction", format!("`{other}` is not AtoB or BtoA"))),
        }
    }

    /// Letter of the output domain in the `trainA`/`trainB` convention.
    pub fn target_letter(self) -> &'static str {
        match self {
            Direction::XToY => "B",
            Direction::YToX => "A",
        }
    }
}

/// Translates one image. With a mask, returns `S⊙Gen(img) + (1−S)⊙img`, so
/// background pixels are copied from the input.
///
/// Inputs at another resolution are resized to the training side and the
/// output is resized back.
pub fn translate(state: &GanState, img: &Image, direction: Direction, composite: Option<&BinaryMask>) -> Result<Image> {
    let side = state.cfg.side;
    let input = img.to_range(crate::image::ValueRange::Signed);
    let resized = if input.height() != side || input.width() != side {
        warn!(
            "resizing {}x{} input to the training side {side}",
            input.height(),
            input.width()
        );
        input.resize(side, side)
    } else {
        input.clone()
    };
    let xs = images_to_tensor(&[&resized], state.dtype(), state.device())?;
    let out = match direction {
        Direction::XToY => state.g.forward(&xs)?,
        Direction::YToX => state.f.forward(&xs)?,
    };
    let mut generated = tensor_to_images(&out.detach())?.pop().expect("one image");
    if generated.height() != input.height() || generated.width() != input.width() {
        generated = generated.resize(input.height(), input.width());
    }
    let generated = generated.to_range(img.range());
    match composite {
        None => Ok(generated),
        Some(mask) => {
            if !mask.aligned_with(img) {
                return Err(Error::Shape("composite mask is not aligned with the input".into()));
            }
            composite_images(&generated, img, mask)
        }
    }
}

/// Leaf pixels from `generated`, background pixels verbatim from `original`.
pub fn composite_images(generated: &Image, original: &Image, mask: &BinaryMask) -> Result<Image> {
    Image::from_fn(original.height(), original.width(), original.range(), |y, x, c| {
        if mask.get(y, x) {
            generated.get(y, x, c)
        } else {
            original.get(y, x, c)
        }
    })
}
