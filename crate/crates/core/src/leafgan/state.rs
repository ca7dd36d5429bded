//! Networks, optimizers and bookkeeping of one translation model, plus
//! versioned checkpoints.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::buffer::HistoryBuffer;
use super::losses::LossWeights;
use super::networks::{DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, ResnetGenerator};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::stage_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    /// Training resolution (square).
    pub side: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub history: usize,
    /// Extra identity term `λ·w·(|G(y)−y| + |F(x)−x|)`; off unless set.
    pub identity_weight: Option<f64>,
    pub seed: u64,
}

impl GanConfig {
    /// Defaults at a given side: 6 or 9 residual blocks, 64 filters, Adam 2e-4.
    pub fn for_side(side: usize) -> Self {
        Self {
            side,
            generator: GeneratorConfig::for_side(side, 64),
            discriminator: DiscriminatorConfig::default(),
            weights: LossWeights::default(),
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 200,
            batch: 1,
            history: 50,
            identity_weight: None,
            seed: 0,
        }
    }

    /// Compact networks for 64² desk-scale experiments.
    pub fn desk(side: usize, filters: usize) -> Self {
        let mut cfg = Self::for_side(side);
        cfg.generator.base_filters = filters;
        cfg.discriminator.base_filters = filters;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || self.side % 4 != 0 {
            return Err(Error::config("image_side", format!("{} must be a multiple of 4 and at least 8", self.side)));
        }
        LossWeights::new(self.weights.lambda)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("gan_lr", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("gan_batch", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("gan_epochs", "must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Linear decay to zero over the second half of training.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let constant = self.epochs.div_ceil(2);
        let decay = self.epochs - constant;
        if epoch < constant {
            self.lr
        } else {
            let k = (epoch + 1 - constant) as f64 / (decay + 1) as f64;
            self.lr * (1.0 - k).max(0.0)
        }
    }
}

pub struct GanState {
    pub(crate) cfg: GanConfig,
    pub(crate) g_params: ParamStore,
    pub(crate) f_params: ParamStore,
    pub(crate) dx_params: ParamStore,
    pub(crate) dy_params: ParamStore,
    pub g: ResnetGenerator,
    pub f: ResnetGenerator,
    pub d_x: PatchDiscriminator,
    pub d_y: PatchDiscriminator,
    pub(crate) opt_gen: Adam,
    pub(crate) opt_disc: Adam,
    pub(crate) pool_x: HistoryBuffer,
    pub(crate) pool_y: HistoryBuffer,
    pub(crate) rng: ChaCha8Rng,
    pub iteration: u64,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl GanState {
    pub fn new(cfg: GanConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = DType::F32;
        let mut g_params = ParamStore::new(stage_seed(cfg.seed, "gan.G"), dtype, device.clone());
        let mut f_params = ParamStore::new(stage_seed(cfg.seed, "gan.F"), dtype, device.clone());
        let mut dx_params = ParamStore::new(stage_seed(cfg.seed, "gan.D_X"), dtype, device.clone());
        let mut dy_params = ParamStore::new(stage_seed(cfg.seed, "gan.D_Y"), dtype, device.clone());
        let g = ResnetGenerator::new(&mut g_params, cfg.generator)?;
        let f = ResnetGenerator::new(&mut f_params, cfg.generator)?;
        let d_x = PatchDiscriminator::new(&mut dx_params, cfg.discriminator)?;
        let d_y = PatchDiscriminator::new(&mut dy_params, cfg.discriminator)?;
        let mut gen_vars = g_params.vars();
        gen_vars.extend(f_params.vars());
        let mut disc_vars = dx_params.vars();
        disc_vars.extend(dy_params.vars());
        let opt_gen = Adam::new(gen_vars, cfg.lr, cfg.beta1, cfg.beta2)?;
        let opt_disc = Adam::new(disc_vars, cfg.lr, cfg.beta1, cfg.beta2)?;
        Ok(Self {
            pool_x: HistoryBuffer::new(cfg.history),
            pool_y: HistoryBuffer::new(cfg.history),
            rng: ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "gan.loop")),
            cfg,
            g_params,
            f_params,
            dx_params,
            dy_params,
            g,
            f,
            d_x,
            d_y,
            opt_gen,
            opt_disc,
            iteration: 0,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        self.g_params.device()
    }

    pub fn dtype(&self) -> DType {
        self.g_params.dtype()
    }

    pub(crate) fn set_lr(&mut self, lr: f64) {
        self.opt_gen.lr = lr;
        self.opt_disc.lr = lr;
    }

    /// Writes one checkpoint directory atomically (temp dir, then rename).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = tempfile::Builder::new()
            .prefix(".ckpt-")
            .tempdir_in(parent)
            .map_err(|e| Error::io(parent, e))?;
        let t = tmp.path();
        self.g_params.save(&t.join(blob_name("G")))?;
        self.f_params.save(&t.join(blob_name("F")))?;
        self.dx_params.save(&t.join(blob_name("D_X")))?;
        self.dy_params.save(&t.join(blob_name("D_Y")))?;
        self.opt_gen.save(&t.join(blob_name("opt_gen")))?;
        self.opt_disc.save(&t.join(blob_name("opt_disc")))?;
        save_pool(&self.pool_x, &t.join(blob_name("history_x")))?;
        save_pool(&self.pool_y, &t.join(blob_name("history_y")))?;
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            iteration: self.iteration,
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        std::fs::write(t.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(t, e))?;
        let staged = tmp.keep();
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::Checkpoint("manifest config hash mismatch".into()));
        }
        let mut state = GanState::new(manifest.config, device)?;
        state.g_params.load(&dir.join(blob_name("G")))?;
        state.f_params.load(&dir.join(blob_name("F")))?;
        state.dx_params.load(&dir.join(blob_name("D_X")))?;
        state.dy_params.load(&dir.join(blob_name("D_Y")))?;
        state.opt_gen.load(&dir.join(blob_name("opt_gen")))?;
        state.opt_disc.load(&dir.join(blob_name("opt_disc")))?;
        load_pool(&mut state.pool_x, &dir.join(blob_name("history_x")), device)?;
        load_pool(&mut state.pool_y, &dir.join(blob_name("history_y")), device)?;
        let seed_bytes = hex::decode(&manifest.rng_seed).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(
            manifest
                .rng_word_pos
                .parse()
                .map_err(|_| Error::Checkpoint("bad rng position".into()))?,
        );
        state.rng = rng;
        state.iteration = manifest.iteration;
        state.epoch = manifest.epoch;
        Ok(state)
    }

    /// Only the generators, for inference.
    pub fn load_generators(dir: &Path, device: &Device) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut state = GanState::new(manifest.config, device)?;
        state.g_params.load(&dir.join(blob_name("G")))?;
        state.f_params.load(&dir.join(blob_name("F")))?;
        state.iteration = manifest.iteration;
        state.epoch = manifest.epoch;
        Ok(state)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "leafgan-translation";
pub const MANIFEST_NAME: &str = "manifest.json";

fn blob_name(net: &str) -> String {
    format!("{net}.v{CHECKPOINT_VERSION}.safetensors")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub iteration: u64,
    pub seed: u64,
    pub config_hash: String,
    pub config: GanConfig,
    rng_seed: String,
    rng_word_pos: String,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != MANIFEST_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", m.format, m.version)));
    }
    Ok(m)
}

fn save_pool(pool: &HistoryBuffer, path: &Path) -> Result<()> {
    let mut state = pool.state();
    // safetensors refuses empty maps
    state.insert("len".into(), candle_core::Tensor::new(&[pool.len() as f64], &Device::Cpu)?);
    candle_core::safetensors::save(&state, path)?;
    Ok(())
}

fn load_pool(pool: &mut HistoryBuffer, path: &Path, device: &Device) -> Result<()> {
    let mut state = candle_core::safetensors::load(path, device)?;
    state.remove("len");
    pool.restore(state, device)
}

/// Checkpoint directory name for a completed epoch.
pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch_{epoch:04}"))
}
