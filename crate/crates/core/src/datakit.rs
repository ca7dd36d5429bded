//! Dataset ingestion, the partial-leaf patch recipe, six-fold geometric
//! augmentation and LFLSeg dataset assembly.

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ValueRange};
use crate::lflseg::LeafClass;

/// Minimum side accepted when decoding images from disk.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub image: Image,
}

impl DatasetEntry {
    pub fn stem(&self) -> String {
        file_stem(&self.path)
    }
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Images of one translation domain, ordered by file name.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub root: PathBuf,
    pub domain: DomainTag,
    pub entries: Vec<DatasetEntry>,
    /// Files that failed to decode; each produced one warning.
    pub skipped: Vec<SkippedFile>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.entries.iter().map(|e| &e.image)
    }
}

/// Regular, non-hidden files directly under `dir`, sorted by file name.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::config(
            "path",
            format!("{} is not an existing directory", dir.display()),
        ));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let hidden = path
            .file_name()
            .map(|n| n.to_string_lossy().starts_with('.'))
            .unwrap_or(true);
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Non-hidden subdirectories of `dir`, sorted by name.
pub fn list_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::config("path", format!("{} is not an existing directory", dir.display())));
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let hidden = path.file_name().map(|n| n.to_string_lossy().starts_with('.')).unwrap_or(true);
        if path.is_dir() && !hidden {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Loads every decodable image under `path`.
///
/// When `side` is given, non-square images are center-cropped and all images
/// are resized to `side × side`.
pub fn load_domain_dataset(
    path: &Path,
    domain: DomainTag,
    range: ValueRange,
    side: Option<usize>,
) -> Result<DomainDataset> {
    let files = list_files(path)?;
    if files.is_empty() {
        return Err(Error::config(
            "path",
            format!("{} contains no files", path.display()),
        ));
    }
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for file in files {
        match Image::load(&file, range) {
            Ok(img) if img.height() < MIN_IMAGE_SIDE || img.width() < MIN_IMAGE_SIDE => {
                let reason = format!("{}x{} is below the {MIN_IMAGE_SIDE}px minimum", img.height(), img.width());
                warn!("skipping {}: {reason}", file.display());
                skipped.push(SkippedFile { path: file, reason });
            }
            Ok(img) => {
                let image = match side {
                    Some(s) => img.square_to(s),
                    None => img,
                };
                entries.push(DatasetEntry { path: file, image });
            }
            Err(e) => {
                warn!("skipping {}: {e}", file.display());
                skipped.push(SkippedFile {
                    path: file,
                    reason: e.to_string(),
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::config(
            "path",
            format!("no decodable images in {}", path.display()),
        ));
    }
    Ok(DomainDataset {
        root: path.to_path_buf(),
        domain,
        entries,
        skipped,
    })
}

/// Folder convention for unpaired translation datasets.
#[derive(Debug, Clone)]
pub struct GanLayout {
    pub root: PathBuf,
}

impl GanLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn train_a(&self) -> PathBuf {
        self.root.join("trainA")
    }
    pub fn train_b(&self) -> PathBuf {
        self.root.join("trainB")
    }
    pub fn test_a(&self) -> PathBuf {
        self.root.join("testA")
    }
    pub fn test_b(&self) -> PathBuf {
        self.root.join("testB")
    }
}

/// Folder convention for the three LFLSeg source classes.
#[derive(Debug, Clone)]
pub struct LflsegLayout {
    pub root: PathBuf,
}

impl LflsegLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn full_leaf(&self) -> PathBuf {
        self.root.join("full_leaf")
    }
    pub fn partial_leaf_source(&self) -> PathBuf {
        self.root.join("partial_leaf_source")
    }
    pub fn non_leaf(&self) -> PathBuf {
        self.root.join("non_leaf")
    }
}

/// Sliding-window recipe for "partial leaf" crops of an `N×N` image:
/// window `N/2`, stride `N/4`, giving a 3×3 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    side: usize,
}

impl PatchSpec {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 || side % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "patch side {side} must be a positive multiple of 4"
            )));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn window(&self) -> usize {
        self.side / 2
    }

    pub fn stride(&self) -> usize {
        self.side / 4
    }

    /// Top-left offsets along one axis: `{0, N/4, N/2}`.
    pub fn offsets(&self) -> [usize; 3] {
        let s = self.stride();
        [0, s, 2 * s]
    }
}

/// The nine overlapping `N/2×N/2` crops, row-major over the offset grid.
pub fn extract_partial_patches(img: &Image, spec: &PatchSpec) -> Result<Vec<Image>> {
    if !img.is_square() {
        return Err(Error::InvalidInput(format!(
            "patch extraction needs a square image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    if img.height() != spec.side() {
        return Err(Error::InvalidInput(format!(
            "image side {} does not match patch spec side {}",
            img.height(),
            spec.side()
        )));
    }
    let win = spec.window();
    let mut patches = Vec::with_capacity(9);
    for oy in spec.offsets() {
        for ox in spec.offsets() {
            patches.push(img.crop(oy, ox, win, win)?);
        }
    }
    Ok(patches)
}

/// `{identity, rot90, rot180, rot270, hflip, vflip}`, rotations clockwise.
pub fn augment_rot_flip(img: &Image) -> Vec<Image> {
    vec![
        img.clone(),
        img.rot90_cw(),
        img.rot180(),
        img.rot270_cw(),
        img.flip_horizontal(),
        img.flip_vertical(),
    ]
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: Image,
    pub label: LeafClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub full_leaf: usize,
    pub partial_leaf: usize,
    pub non_leaf: usize,
}

impl ClassCounts {
    pub fn of(samples: &[LabeledSample]) -> Self {
        let mut c = ClassCounts::default();
        for s in samples {
            *c.get_mut(s.label) += 1;
        }
        c
    }

    pub fn get(&self, class: LeafClass) -> usize {
        match class {
            LeafClass::FullLeaf => self.full_leaf,
            LeafClass::PartialLeaf => self.partial_leaf,
            LeafClass::NonLeaf => self.non_leaf,
        }
    }

    fn get_mut(&mut self, class: LeafClass) -> &mut usize {
        match class {
            LeafClass::FullLeaf => &mut self.full_leaf,
            LeafClass::PartialLeaf => &mut self.partial_leaf,
            LeafClass::NonLeaf => &mut self.non_leaf,
        }
    }

    /// max/min over the classes that are present.
    pub fn imbalance_ratio(&self) -> f64 {
        let present: Vec<usize> = [self.full_leaf, self.partial_leaf, self.non_leaf]
            .into_iter()
            .filter(|c| *c > 0)
            .collect();
        match (present.iter().max(), present.iter().min()) {
            (Some(&hi), Some(&lo)) => hi as f64 / lo as f64,
            _ => 1.0,
        }
    }
}

/// Ratio above which class imbalance is reported.
pub const IMBALANCE_WARN_RATIO: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl LabeledSplit {
    pub fn counts(&self) -> (ClassCounts, ClassCounts) {
        (ClassCounts::of(&self.train), ClassCounts::of(&self.test))
    }
}

/// Seeded shuffle of one class, then `floor(n·ratio)` to train and the rest to test.
pub fn split_class<T>(mut items: Vec<T>, ratio: f64, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
    items.shuffle(rng);
    // The epsilon keeps products like 90 × 0.7 from flooring to 62.
    let n_train = (items.len() as f64 * ratio + 1e-9).floor() as usize;
    let test = items.split_off(n_train);
    (items, test)
}

fn check_ratio(split_ratio: f64) -> Result<()> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::config(
            "split_ratio",
            format!("{split_ratio} must lie strictly between 0 and 1"),
        ));
    }
    Ok(())
}

/// In-memory assembly: full leaves ×6 (rotations/flips), partial-leaf sources ×9
/// (patch recipe, each patch resized back to `spec.side()`), non-leaf as given.
///
/// `partial_source` may be empty only when `require_partial` is false, which is
/// how the two-class (full/non-leaf) ablation is built.
pub fn assemble_from_images(
    full: &[Image],
    partial_source: &[Image],
    non_leaf: &[Image],
    spec: &PatchSpec,
    split_ratio: f64,
    seed: u64,
    require_partial: bool,
) -> Result<LabeledSplit> {
    check_ratio(split_ratio)?;
    let missing = |name: &str| Error::config(name, "class has no images; all three classes are required");
    if full.is_empty() {
        return Err(missing("full_leaf"));
    }
    if require_partial && partial_source.is_empty() {
        return Err(missing("partial_leaf_source"));
    }
    if non_leaf.is_empty() {
        return Err(missing("non_leaf"));
    }
    let side = spec.side();
    let full_samples: Vec<Image> = full
        .iter()
        .flat_map(|img| augment_rot_flip(&img.square_to(side)))
        .collect();
    let mut partial_samples = Vec::with_capacity(partial_source.len() * 9);
    for img in partial_source {
        for p in extract_partial_patches(&img.square_to(side), spec)? {
            partial_samples.push(p.resize(side, side));
        }
    }
    let non_samples: Vec<Image> = non_leaf.iter().map(|img| img.square_to(side)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, images) in [
        (LeafClass::FullLeaf, full_samples),
        (LeafClass::PartialLeaf, partial_samples),
        (LeafClass::NonLeaf, non_samples),
    ] {
        let (tr, te) = split_class(images, split_ratio, &mut rng);
        train.extend(tr.into_iter().map(|image| LabeledSample { image, label: class }));
        test.extend(te.into_iter().map(|image| LabeledSample { image, label: class }));
    }
    let split = LabeledSplit { train, test };
    let (tr, _) = split.counts();
    if tr.imbalance_ratio() > IMBALANCE_WARN_RATIO {
        warn!(
            "class imbalance {:.2} exceeds {IMBALANCE_WARN_RATIO}: full={} partial={} non={}",
            tr.imbalance_ratio(),
            tr.full_leaf,
            tr.partial_leaf,
            tr.non_leaf
        );
    }
    Ok(split)
}

/// Loads the three source folders and assembles a labeled train/test split.
pub fn assemble_lflseg_dataset(
    full_dir: &Path,
    partial_source_dir: &Path,
    nonleaf_dir: &Path,
    spec: &PatchSpec,
    split_ratio: f64,
    seed: u64,
) -> Result<LabeledSplit> {
    check_ratio(split_ratio)?;
    let load = |dir: &Path, field: &str| -> Result<Vec<Image>> {
        let ds = load_domain_dataset(dir, DomainTag::Source, ValueRange::Signed, Some(spec.side()))
            .map_err(|e| match e {
                Error::Config { message, .. } => Error::config(field, message),
                other => other,
            })?;
        Ok(ds.entries.into_iter().map(|e| e.image).collect())
    };
    let full = load(full_dir, "full_leaf")?;
    let partial = load(partial_source_dir, "partial_leaf_source")?;
    let non = load(nonleaf_dir, "non_leaf")?;
    assemble_from_images(&full, &partial, &non, spec, split_ratio, seed, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn distinct(h: usize, w: usize) -> Image {
        let n = (h * w) as f32;
        Image::from_fn(h, w, ValueRange::Unit, |y, x, _| (y * w + x) as f32 / n).unwrap()
    }

    #[test]
    fn patch_spec_rejects_bad_sides() {
        assert!(PatchSpec::new(10).is_err());
        assert!(PatchSpec::new(0).is_err());
        assert_eq!(PatchSpec::new(224).unwrap().offsets(), [0, 56, 112]);
    }

    #[test]
    fn paper_scale_patches() {
        let spec = PatchSpec::new(224).unwrap();
        let img = distinct(224, 224);
        let patches = extract_partial_patches(&img, &spec).unwrap();
        assert_eq!(patches.len(), 9);
        for (i, p) in patches.iter().enumerate() {
            assert_eq!((p.height(), p.width()), (112, 112));
            let (oy, ox) = ([0, 56, 112][i / 3], [0, 56, 112][i % 3]);
            assert_eq!(p.pixel(0, 0), img.pixel(oy, ox));
        }
    }

    #[test]
    fn four_by_four_hand_enumerated() {
        let img = distinct(4, 4);
        let spec = PatchSpec::new(4).unwrap();
        let patches = extract_partial_patches(&img, &spec).unwrap();
        // Windows of 2x2 at offsets {0,1,2}^2; values are indices/16 in every channel.
        let expect: Vec<[usize; 4]> = (0..3)
            .flat_map(|oy| (0..3).map(move |ox| (oy, ox)))
            .map(|(oy, ox)| {
                let i = oy * 4 + ox;
                [i, i + 1, i + 4, i + 5]
            })
            .collect();
        for (p, e) in patches.iter().zip(&expect) {
            let got = [p.get(0, 0, 0), p.get(0, 1, 0), p.get(1, 0, 0), p.get(1, 1, 0)];
            let want = e.map(|i| i as f32 / 16.0);
            assert_eq!(got, want);
        }
        // center patch at (1,1) is the central 2x2 block {5,6,9,10}
        assert_eq!(expect[4], [5, 6, 9, 10]);
        let uniq: std::collections::HashSet<_> = expect.iter().collect();
        assert_eq!(uniq.len(), 9);
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = Image::filled(8, 8, ValueRange::Unit, 0.25).unwrap();
        for p in extract_partial_patches(&img, &PatchSpec::new(8).unwrap()).unwrap() {
            assert!(p.data().iter().all(|v| *v == 0.25));
        }
    }

    #[test]
    fn patch_rejects_non_square_and_mismatched() {
        let spec = PatchSpec::new(8).unwrap();
        assert!(extract_partial_patches(&distinct(8, 12), &spec).is_err());
        assert!(extract_partial_patches(&distinct(12, 12), &spec).is_err());
    }

    #[test]
    fn augment_constant_gives_identical_images() {
        let img = Image::filled(5, 5, ValueRange::Unit, 0.7).unwrap();
        let out = augment_rot_flip(&img);
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|o| *o == img));
    }

    #[test]
    fn split_half_of_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (tr, te) = split_class(vec![1, 2], 0.5, &mut rng);
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    fn small_sources(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| Image::filled(8, 8, ValueRange::Signed, i as f32 / n as f32 - 0.5).unwrap())
            .collect()
    }

    #[test]
    fn assembly_counts_and_split() {
        let spec = PatchSpec::new(8).unwrap();
        let src = small_sources(10);
        let split = assemble_from_images(&src, &src, &src, &spec, 0.7, 3, true).unwrap();
        let (tr, te) = split.counts();
        assert_eq!((tr.full_leaf, te.full_leaf), (42, 18));
        assert_eq!((tr.partial_leaf, te.partial_leaf), (63, 27));
        assert_eq!((tr.non_leaf, te.non_leaf), (7, 3));
    }

    #[test]
    fn assembly_is_seeded() {
        let spec = PatchSpec::new(8).unwrap();
        let src = small_sources(4);
        let a = assemble_from_images(&src, &src, &src, &spec, 0.7, 11, true).unwrap();
        let b = assemble_from_images(&src, &src, &src, &spec, 0.7, 11, true).unwrap();
        let key = |s: &LabeledSplit| -> Vec<(LeafClass, Vec<f32>)> {
            s.train.iter().map(|x| (x.label, x.image.data().to_vec())).collect()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn assembly_requires_every_class() {
        let spec = PatchSpec::new(8).unwrap();
        let src = small_sources(2);
        let err = assemble_from_images(&src, &[], &src, &spec, 0.7, 0, true).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "partial_leaf_source"));
        assert!(assemble_from_images(&src, &src, &src, &spec, 1.0, 0, true).is_err());
    }

    #[test]
    fn imbalance_ratio_over_present_classes() {
        let c = ClassCounts {
            full_leaf: 60,
            partial_leaf: 90,
            non_leaf: 10,
        };
        assert!((c.imbalance_ratio() - 9.0).abs() < 1e-12);
    }
}
