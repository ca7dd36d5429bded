//! Command-line entry points.

use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::datakit::{
    assemble_lflseg_dataset, file_stem, load_domain_dataset, DomainTag, GanLayout, LabeledSample,
    LabeledSplit, LflsegLayout, PatchSpec,
};
use crate::error::{Error, Result};
use crate::evalharness::{compare_runs, evaluate, load_labeled_dir, train_classifier, EvalConfig, EvalReport, LabeledImage, RunTag};
use crate::image::{write_atomic, BinaryMask, Image, ValueRange};
use crate::leafgan::{latest_checkpoint, train, translate, Direction, GanState, TrainOptions, UnpairedData};
use crate::lflseg::{segment, train_lflseg, LeafClass, LflsegModel, MaskCache, SegConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "leafgan", about = "Leaf segmentation, mask-gated translation and augmentation evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label-free leaf segmentation
    #[command(subcommand)]
    Lflseg(LflsegCmd),
    /// Mask-gated translation
    #[command(subcommand)]
    Leafgan(LeafganCmd),
    /// Downstream classifier evaluation
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum LflsegCmd {
    /// Build the labeled full/partial/non-leaf train and test folders.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Folder with full_leaf/, partial_leaf_source/ and non_leaf/.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the leaf classifier on a prepared folder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Weights file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write one mask per input image.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum LeafganCmd {
    /// Train the translator on trainA/ and trainB/.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Mask cache root; masks live under <root>/masks/<domain>/.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Classifier used to fill missing masks.
        #[arg(long)]
        lflseg_model: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use all-ones masks (plain cycle-consistent translation).
        #[arg(long)]
        unmasked: bool,
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Translate a folder of images.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory, or a training directory holding `latest`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "AtoB")]
        direction: String,
        /// Copy background pixels from the input.
        #[arg(long)]
        composite: bool,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        lflseg_model: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Train and evaluate one disease classifier.
    Train {
        #[command(flatten)]
        common: Common,
        /// Folder with one subfolder per class.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Generated images, one subfolder per class; repeatable.
        #[arg(long)]
        augment: Vec<PathBuf>,
        #[arg(long, default_value = "baseline")]
        tag: String,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Side-by-side table of saved reports.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Output prefix; writes <out>.csv and <out>.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_effective(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn finish(cfg: &PipelineConfig, run_dir: &Path) -> Result<()> {
    cfg.validate()?;
    cfg.echo(run_dir)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn lflseg_prepare(common: &Common, root: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut cfg = load_effective(common)?;
    if root.is_some() {
        cfg.lflseg_root = root;
    }
    cfg.validate()?;
    let root = cfg
        .lflseg_root
        .clone()
        .ok_or_else(|| Error::config("lflseg_root", "no LFLSeg source folder given"))?;
    let layout = LflsegLayout::new(&root);
    let spec = PatchSpec::new(cfg.lflseg_side)?;
    let split = assemble_lflseg_dataset(
        &layout.full_leaf(),
        &layout.partial_leaf_source(),
        &layout.non_leaf(),
        &spec,
        cfg.split_ratio,
        crate::stage_seed(cfg.seed, "lflseg.split"),
    )?;
    write_split(&split, out)?;
    let (tr, te) = split.counts();
    write_json(&out.join("counts.json"), &serde_json::json!({ "train": tr, "test": te }))?;
    finish(&cfg, out)
}

fn write_split(split: &LabeledSplit, out: &Path) -> Result<()> {
    for (part, samples) in [("train", &split.train), ("test", &split.test)] {
        let mut next = [0usize; 3];
        for s in samples {
            let k = LeafClass::ALL.iter().position(|c| *c == s.label).expect("known class");
            let p = out.join(part).join(s.label.dir_name()).join(format!("{:05}.png", next[k]));
            next[k] += 1;
            s.image.save_png(&p)?;
        }
    }
    Ok(())
}

fn read_class_dir(dir: &Path, side: usize) -> Result<Vec<LabeledSample>> {
    let (_, items) = load_labeled_dir(dir, side)?;
    items
        .into_iter()
        .map(|i| {
            let label = LeafClass::from_dir_name(&i.class)
                .ok_or_else(|| Error::Label(format!("`{}` is not full_leaf, partial_leaf or non_leaf", i.class)))?;
            Ok(LabeledSample { image: i.image, label })
        })
        .collect()
}

fn lflseg_train_cmd(common: &Common, data: &Path, out: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_effective(common)?;
    if let Some(e) = epochs {
        cfg.lflseg_epochs = e;
    }
    cfg.validate()?;
    let split = LabeledSplit {
        train: read_class_dir(&data.join("train"), cfg.lflseg_side)?,
        test: read_class_dir(&data.join("test"), cfg.lflseg_side)?,
    };
    let classes: Vec<LeafClass> = LeafClass::ALL
        .iter()
        .copied()
        .filter(|c| split.train.iter().any(|s| s.label == *c))
        .collect();
    let model = LflsegModel::new(classes, cfg.lflseg_width, crate::stage_seed(cfg.seed, "lflseg.init"), &Device::Cpu)?;
    let result = train_lflseg(&model, &split, &cfg.lflseg_fit())?;
    model.save(out)?;
    info!("leaf classifier test accuracy {:.4}", result.test_accuracy);
    write_json(
        &out.with_extension("metrics.json"),
        &serde_json::json!({ "test_accuracy": result.test_accuracy, "epoch_losses": result.epoch_losses }),
    )?;
    finish(&cfg, &parent_dir(out))
}

fn lflseg_segment_cmd(common: &Common, model: &Path, input: &Path, out: &Path, delta: Option<f64>) -> Result<()> {
    let mut cfg = load_effective(common)?;
    if let Some(d) = delta {
        cfg.delta = d;
    }
    cfg.validate()?;
    if same_dir(input, out) {
        return Err(Error::config("out", "output folder must differ from the input folder"));
    }
    let seg = cfg.seg_config()?;
    let model = LflsegModel::load(model, &Device::Cpu)?;
    let ds = load_domain_dataset(input, DomainTag::Source, ValueRange::Unit, None)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for e in &ds.entries {
        let s = segment(&model, &e.image, &seg)?;
        s.mask.save_png(&out.join(format!("{}.png", e.stem())))?;
    }
    info!("wrote {} masks to {}", ds.entries.len(), out.display());
    // The echo goes next to the mask folder so the folder holds masks only.
    finish(&cfg, &parent_dir(out))
}

/// Mask for each image: cached copy, else segmented (and cached), else an error.
fn resolve_masks(
    domain: &str,
    entries: &[(String, Image)],
    cache: Option<&MaskCache>,
    model: Option<&LflsegModel>,
    seg: &SegConfig,
) -> Result<Vec<BinaryMask>> {
    entries
        .iter()
        .map(|(stem, img)| {
            if let Some(m) = cache.map(|c| c.get(domain, stem)).transpose()?.flatten() {
                return Ok(if m.aligned_with(img) { m } else { m.resize_nearest(img.height(), img.width()) });
            }
            let model = model.ok_or_else(|| {
                Error::config("mask_cache", format!("no cached mask for {domain}/{stem} and no leaf classifier configured"))
            })?;
            let m = segment(model, img, seg)?.mask;
            if let Some(c) = cache {
                c.put(domain, stem, &m)?;
            }
            Ok(m)
        })
        .collect()
}

fn load_domain(dir: &Path, side: usize) -> Result<Vec<(String, Image)>> {
    let ds = load_domain_dataset(dir, DomainTag::Source, ValueRange::Signed, Some(side))?;
    Ok(ds.entries.iter().map(|e| (e.stem(), e.image.clone())).collect())
}

#[allow(clippy::too_many_arguments)]
fn leafgan_train_cmd(
    common: &Common,
    data: Option<PathBuf>,
    masks: Option<PathBuf>,
    lflseg_model: Option<PathBuf>,
    checkpoints: Option<PathBuf>,
    epochs: Option<usize>,
    unmasked: bool,
    resume: bool,
) -> Result<()> {
    let mut cfg = load_effective(common)?;
    if data.is_some() {
        cfg.gan_root = data;
    }
    if masks.is_some() {
        cfg.mask_cache = masks;
    }
    if checkpoints.is_some() {
        cfg.checkpoint_dir = checkpoints;
    }
    if let Some(e) = epochs {
        cfg.gan_epochs = e;
    }
    cfg.validate()?;
    let root = cfg.gan_root.clone().ok_or_else(|| Error::config("gan_root", "no translation data folder given"))?;
    let ckpt = cfg
        .checkpoint_dir
        .clone()
        .ok_or_else(|| Error::config("checkpoint_dir", "no checkpoint folder given"))?;
    let layout = GanLayout::new(&root);
    let xs = load_domain(&layout.train_a(), cfg.image_side)?;
    let ys = load_domain(&layout.train_b(), cfg.image_side)?;
    let (mx, my) = if unmasked {
        (
            xs.iter().map(|(_, i)| BinaryMask::ones(i.height(), i.width())).collect(),
            ys.iter().map(|(_, i)| BinaryMask::ones(i.height(), i.width())).collect(),
        )
    } else {
        let cache = cfg.mask_cache.as_ref().map(MaskCache::new);
        let model = lflseg_model.as_deref().map(|p| LflsegModel::load(p, &Device::Cpu)).transpose()?;
        let seg = cfg.seg_config()?;
        (
            resolve_masks("trainA", &xs, cache.as_ref(), model.as_ref(), &seg)?,
            resolve_masks("trainB", &ys, cache.as_ref(), model.as_ref(), &seg)?,
        )
    };
    let data = UnpairedData {
        x: xs.into_iter().map(|(_, i)| i).zip(mx).collect(),
        y: ys.into_iter().map(|(_, i)| i).zip(my).collect(),
    };
    let gan_cfg = cfg.gan_config()?;
    let mut state = if resume && ckpt.join("latest").is_file() {
        let s = GanState::load_checkpoint(&latest_checkpoint(&ckpt)?, &Device::Cpu)?;
        if s.config().hash() != gan_cfg.hash() {
            return Err(Error::config("checkpoint_dir", "checkpoint was written with a different configuration"));
        }
        s
    } else {
        GanState::new(gan_cfg, &Device::Cpu)?
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(ckpt.clone()),
        checkpoint_every: cfg.gan_checkpoint_every,
        loss_csv: Some(ckpt.join("losses.csv")),
        max_steps: None,
    };
    let summary = train(&mut state, &data, &opts)?;
    info!("{} steps, {} checkpoints", summary.records.len(), summary.checkpoints.len());
    finish(&cfg, &ckpt)
}

#[allow(clippy::too_many_arguments)]
fn leafgan_generate_cmd(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    direction: &str,
    composite: bool,
    masks: Option<PathBuf>,
    lflseg_model: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_effective(common)?;
    cfg.composite |= composite;
    if masks.is_some() {
        cfg.mask_cache = masks;
    }
    cfg.validate()?;
    let direction = Direction::parse(direction)?;
    if same_dir(input, out) {
        return Err(Error::config("out", "output folder must differ from the input folder"));
    }
    let dir = if checkpoint.join("manifest.json").is_file() {
        checkpoint.to_path_buf()
    } else {
        latest_checkpoint(checkpoint)?
    };
    let state = GanState::load_generators(&dir, &Device::Cpu)?;
    let ds = load_domain_dataset(input, DomainTag::Source, ValueRange::Signed, None)?;
    let entries: Vec<(String, Image)> = ds.entries.iter().map(|e| (e.stem(), e.image.clone())).collect();
    let masks = if cfg.composite {
        let domain = file_stem(input);
        let cache = cfg.mask_cache.as_ref().map(MaskCache::new);
        let model = lflseg_model.as_deref().map(|p| LflsegModel::load(p, &Device::Cpu)).transpose()?;
        Some(resolve_masks(&domain, &entries, cache.as_ref(), model.as_ref(), &cfg.seg_config()?)?)
    } else {
        None
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let suffix = if cfg.composite { "_comp" } else { "" };
    for (i, (stem, img)) in entries.iter().enumerate() {
        let m = masks.as_ref().map(|m| &m[i]);
        let fake = translate(&state, img, direction, m)?;
        fake.save_png(&out.join(format!("{stem}_fake_{}{suffix}.png", direction.target_letter())))?;
    }
    info!("translated {} images into {}", entries.len(), out.display());
    finish(&cfg, &parent_dir(out))
}

fn load_augment_sets(dirs: &[PathBuf], classes: &[String], side: usize, per_class: usize) -> Result<Vec<Vec<LabeledImage>>> {
    dirs.iter()
        .map(|d| {
            let (aug_classes, items) = load_labeled_dir(d, side)?;
            if let Some(bad) = aug_classes.iter().find(|c| !classes.contains(c)) {
                return Err(Error::Label(format!("augmentation class `{bad}` in {} is not a target class", d.display())));
            }
            let mut kept = Vec::new();
            for c in &aug_classes {
                let of_class: Vec<LabeledImage> = items.iter().filter(|i| &i.class == c).cloned().collect();
                if of_class.len() < per_class {
                    warn!("{} has {} generated `{c}` images, fewer than {per_class}", d.display(), of_class.len());
                }
                kept.extend(of_class.into_iter().take(per_class));
            }
            Ok(kept)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn eval_train_cmd(
    common: &Common,
    train_dir: &Path,
    test_dir: &Path,
    augment: &[PathBuf],
    tag: &str,
    out: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_effective(common)?;
    if let Some(e) = epochs {
        cfg.eval_epochs = e;
    }
    cfg.validate()?;
    let tag = RunTag::parse(tag)?;
    let side = cfg.lflseg_side;
    let (classes, train_set) = load_labeled_dir(train_dir, side)?;
    let (test_classes, test_set) = load_labeled_dir(test_dir, side)?;
    if let Some(bad) = test_classes.iter().find(|c| !classes.contains(c)) {
        return Err(Error::Label(format!("test class `{bad}` has no training folder")));
    }
    let aug = load_augment_sets(augment, &classes, side, cfg.augment_count)?;
    let aug_refs: Vec<&[LabeledImage]> = aug.iter().map(|a| a.as_slice()).collect();
    let eval_cfg = EvalConfig {
        backbone: crate::backbone::BackboneKind::parse(&cfg.backbone)?,
        width: cfg.eval_width,
        fit: cfg.eval_fit(tag.as_str()),
    };
    let clf = train_classifier(&classes, &train_set, &aug_refs, &eval_cfg)?;
    let (cm, report) = evaluate(&clf, &test_set, tag)?;
    report.save_json(out)?;
    write_json(&out.with_extension("confusion.json"), &cm)?;
    finish(&cfg, &parent_dir(out))
}

fn eval_report_cmd(common: &Common, reports: &[PathBuf], out: &Path) -> Result<()> {
    let cfg = load_effective(common)?;
    cfg.validate()?;
    let loaded = reports.iter().map(|p| EvalReport::load_json(p)).collect::<Result<Vec<_>>>()?;
    let cmp = compare_runs(&loaded)?;
    let text = cmp.to_text();
    write_atomic(&out.with_extension("csv"), cmp.to_csv().as_bytes())?;
    write_atomic(&out.with_extension("txt"), text.as_bytes())?;
    print!("{text}");
    finish(&cfg, &parent_dir(out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Lflseg(LflsegCmd::Prepare { common, root, out }) => lflseg_prepare(&common, root, &out),
        Command::Lflseg(LflsegCmd::Train { common, data, out, epochs }) => lflseg_train_cmd(&common, &data, &out, epochs),
        Command::Lflseg(LflsegCmd::Segment { common, model, input, out, delta }) => {
            lflseg_segment_cmd(&common, &model, &input, &out, delta)
        }
        Command::Leafgan(LeafganCmd::Train { common, data, masks, lflseg_model, checkpoints, epochs, unmasked, resume }) => {
            leafgan_train_cmd(&common, data, masks, lflseg_model, checkpoints, epochs, unmasked, resume)
        }
        Command::Leafgan(LeafganCmd::Generate { common, checkpoint, input, out, direction, composite, masks, lflseg_model }) => {
            leafgan_generate_cmd(&common, &checkpoint, &input, &out, &direction, composite, masks, lflseg_model)
        }
        Command::Eval(EvalCmd::Train { common, train, test, augment, tag, out, epochs }) => {
            eval_train_cmd(&common, &train, &test, &augment, &tag, &out, epochs)
        }
        Command::Eval(EvalCmd::Report { common, reports, out }) => eval_report_cmd(&common, &reports, &out),
    }
}

/// One-line `error kind=<kind> [field=<field>] message="<text>"` diagnostic.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    match e {
        Error::Config { field, .. } => format!("error kind={} field={} message=\"{}\"", e.kind(), field, msg),
        _ => format!("error kind={} message=\"{}\"", e.kind(), msg),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::UnsupportedBackbone(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (including the program name), runs one stage and returns the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
