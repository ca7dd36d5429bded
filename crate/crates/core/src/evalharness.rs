//! Downstream disease classifiers trained with and without generated data.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::{fit_classifier, predict, BackboneKind, FitConfig, FitReport, SmallCnn, SmallCnnConfig};
use crate::datakit::{list_subdirs, load_domain_dataset, DomainTag};
use crate::error::{Error, Result};
use crate::image::{Image, ValueRange};

/// Generated images per disease class used for augmentation by default.
pub const DEFAULT_AUGMENT_COUNT: usize = 717;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunTag {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "baseline+unmasked")]
    BaselineUnmasked,
    #[serde(rename = "baseline+leafgan")]
    BaselineLeafgan,
}

impl RunTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RunTag::Baseline => "baseline",
            RunTag::BaselineUnmasked => "baseline+unmasked",
            RunTag::BaselineLeafgan => "baseline+leafgan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(RunTag::Baseline),
            "baseline+unmasked" => Ok(RunTag::BaselineUnmasked),
            "baseline+leafgan" => Ok(RunTag::BaselineLeafgan),
            other => Err(Error::config(
                "run_tag",
                format!("`{other}` is not baseline, baseline+unmasked or baseline+leafgan"),
            )),
        }
    }
}

impl std::fmt::Display for RunTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub path: PathBuf,
    pub image: Image,
    pub class: String,
}

/// Images grouped by class, one subdirectory per class name.
///
/// Class vocabulary is the sorted list of subdirectory names.
pub fn load_labeled_dir(root: &Path, side: usize) -> Result<(Vec<String>, Vec<LabeledImage>)> {
    let dirs = list_subdirs(root)?;
    if dirs.is_empty() {
        return Err(Error::config("eval_root", format!("{} has no class subdirectories", root.display())));
    }
    let mut classes = Vec::new();
    let mut items = Vec::new();
    for dir in dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let ds = load_domain_dataset(&dir, DomainTag::Target, ValueRange::Unit, Some(side))?;
        for e in ds.entries {
            items.push(LabeledImage {
                path: e.path,
                image: e.image,
                class: name.clone(),
            });
        }
        classes.push(name);
    }
    Ok((classes, items))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub backbone: BackboneKind,
    pub width: usize,
    pub fit: FitConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::SmallCnn,
            width: 8,
            fit: FitConfig {
                flips: true,
                ..FitConfig::default()
            },
        }
    }
}

pub struct TrainedClassifier {
    pub net: SmallCnn,
    pub classes: Vec<String>,
    pub fit: FitReport,
    train_paths: HashSet<PathBuf>,
}

impl TrainedClassifier {
    pub fn saw_path(&self, path: &Path) -> bool {
        self.train_paths.contains(path)
    }
}

fn label_of(classes: &[String], class: &str) -> Option<usize> {
    classes.iter().position(|c| c == class)
}

/// Trains on the union of real and generated images with on-the-fly flips.
pub fn train_classifier(
    classes: &[String],
    train_set: &[LabeledImage],
    augmentation_sets: &[&[LabeledImage]],
    cfg: &EvalConfig,
) -> Result<TrainedClassifier> {
    if classes.len() < 2 {
        return Err(Error::Label(format!("need at least 2 classes, got {}", classes.len())));
    }
    let mut samples = Vec::with_capacity(train_set.len());
    for item in train_set {
        let idx = label_of(classes, &item.class)
            .ok_or_else(|| Error::Label(format!("training label `{}` is not in the class vocabulary", item.class)))?;
        samples.push((&item.image, idx));
    }
    for set in augmentation_sets {
        for item in set.iter() {
            let idx = label_of(classes, &item.class).ok_or_else(|| {
                Error::Label(format!(
                    "augmentation label `{}` is not in the class vocabulary {:?}",
                    item.class, classes
                ))
            })?;
            samples.push((&item.image, idx));
        }
    }
    let net = SmallCnn::new(
        SmallCnnConfig {
            num_classes: classes.len(),
            width: cfg.width,
            ..SmallCnnConfig::default()
        },
        cfg.fit.seed,
        DType::F32,
        &Device::Cpu,
    )?;
    let fit = fit_classifier(&net, &samples, &cfg.fit)?;
    let train_paths = train_set
        .iter()
        .chain(augmentation_sets.iter().flat_map(|s| s.iter()))
        .map(|i| i.path.clone())
        .collect();
    Ok(TrainedClassifier {
        net,
        classes: classes.to_vec(),
        fit,
        train_paths,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// Rows are true classes, columns predictions.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Percent correct for one true class, `None` when it has no samples.
    pub fn accuracy(&self, class: usize) -> Option<f64> {
        let n = self.row_sum(class);
        (n > 0).then(|| 100.0 * self.counts[class][class] as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub test_count: u64,
    /// Percent; `None` renders as n/a.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_tag: RunTag,
    pub per_class: Vec<ReportRow>,
    /// Unweighted mean of the available per-class accuracies, two decimals.
    pub average: Option<f64>,
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl EvalReport {
    pub fn from_rows(run_tag: RunTag, per_class: Vec<ReportRow>) -> Result<Self> {
        for r in &per_class {
            if let Some(a) = r.accuracy {
                if !(0.0..=100.0).contains(&a) {
                    return Err(Error::InvalidInput(format!("accuracy {a} of `{}` is outside [0, 100]", r.class)));
                }
            }
        }
        let present: Vec<f64> = per_class.iter().filter_map(|r| r.accuracy).collect();
        for r in per_class.iter().filter(|r| r.accuracy.is_none()) {
            warn!("class `{}` has no test samples; excluded from the average", r.class);
        }
        let average = (!present.is_empty()).then(|| round2(present.iter().sum::<f64>() / present.len() as f64));
        Ok(Self {
            run_tag,
            per_class,
            average,
        })
    }

    /// Builds a report from `(class, test count, accuracy %)` rows.
    pub fn from_accuracies(run_tag: RunTag, rows: &[(&str, u64, f64)]) -> Result<Self> {
        Self::from_rows(
            run_tag,
            rows.iter()
                .map(|&(class, test_count, acc)| ReportRow {
                    class: class.to_string(),
                    test_count,
                    accuracy: Some(acc),
                })
                .collect(),
        )
    }

    pub fn from_confusion(run_tag: RunTag, cm: &ConfusionMatrix) -> Result<Self> {
        Self::from_rows(
            run_tag,
            (0..cm.classes.len())
                .map(|i| ReportRow {
                    class: cm.classes[i].clone(),
                    test_count: cm.row_sum(i),
                    accuracy: cm.accuracy(i),
                })
                .collect(),
        )
    }

    pub fn classes(&self) -> Vec<&str> {
        self.per_class.iter().map(|r| r.class.as_str()).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::image::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Confusion matrix and report on a held-out set.
///
/// Fails when any test path was also used for training.
pub fn evaluate(clf: &TrainedClassifier, test_set: &[LabeledImage], run_tag: RunTag) -> Result<(ConfusionMatrix, EvalReport)> {
    if let Some(dup) = test_set.iter().find(|i| clf.saw_path(&i.path)) {
        return Err(Error::InvalidInput(format!("test image {} was used for training", dup.path.display())));
    }
    let truth = test_set
        .iter()
        .map(|i| {
            label_of(&clf.classes, &i.class)
                .ok_or_else(|| Error::Label(format!("test label `{}` is not in the class vocabulary", i.class)))
        })
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<&Image> = test_set.iter().map(|i| &i.image).collect();
    let preds = predict(&clf.net, &images, EVAL_BATCH, clf.net.dtype(), clf.net.device())?;
    let mut cm = ConfusionMatrix::new(clf.classes.clone());
    for (t, p) in truth.into_iter().zip(preds) {
        cm.add(t, p);
    }
    let report = EvalReport::from_confusion(run_tag, &cm)?;
    Ok((cm, report))
}

/// Evaluation with an arbitrary prediction function, e.g. a ground-truth lookup.
pub fn evaluate_with<F>(classes: &[String], test_set: &[LabeledImage], run_tag: RunTag, mut predict: F) -> Result<(ConfusionMatrix, EvalReport)>
where
    F: FnMut(&LabeledImage) -> usize,
{
    let mut cm = ConfusionMatrix::new(classes.to_vec());
    for item in test_set {
        let t = label_of(classes, &item.class)
            .ok_or_else(|| Error::Label(format!("test label `{}` is not in the class vocabulary", item.class)))?;
        let p = predict(item);
        if p >= classes.len() {
            return Err(Error::Label(format!("prediction {p} outside {} classes", classes.len())));
        }
        cm.add(t, p);
    }
    let report = EvalReport::from_confusion(run_tag, &cm)?;
    Ok((cm, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    /// `average[i] - average[0]`; `None` when either average is missing.
    pub deltas: Vec<Option<f64>>,
}

pub fn compare_runs(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 reports, got {}", reports.len())));
    }
    let vocab = reports[0].classes();
    for r in &reports[1..] {
        if r.classes() != vocab {
            return Err(Error::Label(format!(
                "class vocabulary {:?} of {} differs from {:?}",
                r.classes(),
                r.run_tag,
                vocab
            )));
        }
    }
    let base = reports[0].average;
    let deltas = reports
        .iter()
        .map(|r| match (r.average, base) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        })
        .collect();
    Ok(Comparison {
        reports: reports.to_vec(),
        deltas,
    })
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_delta(d: Option<f64>, digits: usize) -> String {
    d.map(|v| format!("{v:+.digits$}")).unwrap_or_else(|| "n/a".into())
}

impl Comparison {
    /// `class,#test,<run>...`, then average and delta rows at two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,#test");
        for r in &self.reports {
            out.push(',');
            out.push_str(r.run_tag.as_str());
        }
        out.push('\n');
        for (i, row) in self.reports[0].per_class.iter().enumerate() {
            let _ = write!(out, "{},{}", row.class, row.test_count);
            for r in &self.reports {
                let _ = write!(out, ",{}", fmt_acc(r.per_class[i].accuracy));
            }
            out.push('\n');
        }
        let total: u64 = self.reports[0].per_class.iter().map(|r| r.test_count).sum();
        let _ = write!(out, "Average,{total}");
        for r in &self.reports {
            let _ = write!(out, ",{}", r.average.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into()));
        }
        out.push_str("\nDelta,");
        for d in &self.deltas {
            let _ = write!(out, ",{}", fmt_delta(*d, 2));
        }
        out.push('\n');
        out
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut head = vec!["class".to_string(), "#test".to_string()];
        head.extend(self.reports.iter().map(|r| r.run_tag.to_string()));
        rows.push(head);
        for (i, row) in self.reports[0].per_class.iter().enumerate() {
            let mut line = vec![row.class.clone(), row.test_count.to_string()];
            line.extend(self.reports.iter().map(|r| fmt_acc(r.per_class[i].accuracy)));
            rows.push(line);
        }
        let total: u64 = self.reports[0].per_class.iter().map(|r| r.test_count).sum();
        let mut avg = vec!["Average".to_string(), total.to_string()];
        avg.extend(self.reports.iter().map(|r| fmt_acc(r.average)));
        rows.push(avg);
        let mut delta = vec!["Delta".to_string(), String::new()];
        delta.extend(self.deltas.iter().map(|d| fmt_delta(*d, 1)));
        rows.push(delta);

        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, cell)| if c == 0 { format!("{cell:<w$}", w = widths[c]) } else { format!("{cell:>w$}", w = widths[c]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(tag: RunTag, accs: &[f64]) -> EvalReport {
        let names = ["a", "b", "c", "d"];
        let rows: Vec<(&str, u64, f64)> = accs.iter().enumerate().map(|(i, &a)| (names[i], 10, a)).collect();
        EvalReport::from_accuracies(tag, &rows).unwrap()
    }

    #[test]
    fn unweighted_average() {
        let r = EvalReport::from_accuracies(RunTag::Baseline, &[("a", 1, 100.0), ("b", 99, 0.0)]).unwrap();
        assert_eq!(r.average, Some(50.0));
    }

    #[test]
    fn empty_class_is_excluded() {
        let r = EvalReport::from_rows(
            RunTag::Baseline,
            vec![
                ReportRow { class: "a".into(), test_count: 3, accuracy: Some(60.0) },
                ReportRow { class: "b".into(), test_count: 0, accuracy: None },
            ],
        )
        .unwrap();
        assert_eq!(r.average, Some(60.0));
    }

    #[test]
    fn rejects_out_of_range_accuracy() {
        assert!(EvalReport::from_accuracies(RunTag::Baseline, &[("a", 1, 100.5)]).is_err());
    }

    #[test]
    fn identical_reports_give_zero_deltas() {
        let r = report(RunTag::Baseline, &[50.0, 60.0]);
        let c = compare_runs(&[r.clone(), r]).unwrap();
        assert_eq!(c.deltas, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn swapping_two_reports_negates_delta() {
        let a = report(RunTag::Baseline, &[50.0, 60.0]);
        let b = report(RunTag::BaselineLeafgan, &[70.0, 65.0]);
        let ab = compare_runs(&[a.clone(), b.clone()]).unwrap().deltas[1].unwrap();
        let ba = compare_runs(&[b, a]).unwrap().deltas[1].unwrap();
        assert_eq!(ab, -ba);
    }

    #[test]
    fn mismatched_vocabulary_is_fatal() {
        let a = report(RunTag::Baseline, &[50.0, 60.0]);
        let b = report(RunTag::Baseline, &[50.0, 60.0, 70.0]);
        assert!(matches!(compare_runs(&[a, b]), Err(Error::Label(_))));
    }

    #[test]
    fn single_report_is_rejected() {
        assert!(compare_runs(&[report(RunTag::Baseline, &[1.0])]).is_err());
    }

    #[test]
    fn oracle_lookup_scores_full_marks() {
        let classes: Vec<String> = vec!["x".into(), "y".into()];
        let img = Image::filled(8, 8, ValueRange::Unit, 0.0).unwrap();
        let set: Vec<LabeledImage> = (0..6)
            .map(|i| LabeledImage {
                path: PathBuf::from(format!("{i}.png")),
                image: img.clone(),
                class: classes[i % 2].clone(),
            })
            .collect();
        let (cm, r) = evaluate_with(&classes, &set, RunTag::Baseline, |i| label_of(&classes, &i.class).unwrap()).unwrap();
        assert_eq!(cm.total(), 6);
        assert_eq!(cm.row_sum(0), 3);
        assert_eq!(r.average, Some(100.0));
    }

    #[test]
    fn tables_have_one_line_per_class_plus_summary() {
        let a = report(RunTag::Baseline, &[50.0, 60.0]);
        let b = report(RunTag::BaselineLeafgan, &[70.0, 65.0]);
        let c = compare_runs(&[a, b]).unwrap();
        assert_eq!(c.to_csv().lines().count(), 5);
        assert_eq!(c.to_text().lines().count(), 5);
        assert!(c.to_csv().starts_with("class,#test,baseline,baseline+leafgan\n"));
    }

    #[test]
    fn run_tags_round_trip() {
        for t in [RunTag::Baseline, RunTag::BaselineUnmasked, RunTag::BaselineLeafgan] {
            assert_eq!(RunTag::parse(t.as_str()).unwrap(), t);
        }
    }
}
