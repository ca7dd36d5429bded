//! Mask-gated unpaired image translation.

mod buffer;
pub mod losses;
pub mod networks;
mod state;
mod train;

pub use buffer::HistoryBuffer;
pub use losses::{
    adv_loss_f, adv_loss_g, bs_loss, bs_terms, cycle_loss, cycle_terms, discriminator_loss, gate, generator_adv,
    total_loss, total_loss_tensor, LossWeights,
};
pub use networks::{DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, ResnetGenerator};
pub use state::{epoch_dir, read_manifest, GanConfig, GanState, Manifest};
pub use train::{
    composite_images, latest_checkpoint, train, train_step, translate, Direction, LossCsv, LossRecord, MaskedBatch,
    TrainOptions, TrainSummary, UnpairedData,
};
