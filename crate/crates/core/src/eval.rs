//! Segmentation metrics and the cross-domain experiment harness.
//!
//! An experiment trains every requested model variant on the training frames
//! of the source datasets and scores it per point on the held-out source
//! frames and on every target dataset. Frames are split by index: the first
//! 80 % of each dataset are training frames, the rest are held out. Targets
//! are scored on their held-out frames only, so a target world never appears
//! in training even when domains share scene seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bev::BevProjectionConfig;
use crate::cloud::{ClassId, ClassVocabulary, PointCloud};
use crate::error::{Error, Result};
use crate::net::{predict, ModelConfig, ModelParams};
use crate::train::{train, LogRow, TrainConfig};
use crate::voxel::{unvoxelize_predictions, voxelize};

/// `K × K` counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::validation("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts one `(pred, gt)` pair per point. Points whose ground truth or
    /// prediction is `IGNORE` are skipped.
    pub fn accumulate(&mut self, pred: &[ClassId], gt: &[ClassId]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::validation(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g.is_ignore() || p.is_ignore() {
                continue;
            }
            if g.index() >= self.k || p.index() >= self.k {
                return Err(Error::validation(format!(
                    "class pair ({g}, {p}) outside 0..{}",
                    self.k
                )));
            }
            self.counts[g.index() * self.k + p.index()] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::validation("cannot merge matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Percentage IoU of class `c`; `None` when the class appears in neither
    /// ground truth nor prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
        let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
        let den = row + col - tp;
        (den > 0).then(|| 100.0 * tp as f64 / den as f64)
    }

    /// Unweighted mean of the defined per-class IoUs.
    pub fn miou(&self) -> Option<f64> {
        let defined: Vec<f64> = (0..self.k).filter_map(|c| self.iou(c)).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Per-point predictions for one scan.
pub fn predict_points(params: &ModelParams, cloud: &PointCloud, voxel_size: f64, bev: &BevProjectionConfig) -> Result<Vec<ClassId>> {
    let grid = voxelize(cloud, voxel_size)?;
    let cells = predict(params, &grid, bev)?;
    unvoxelize_predictions(&grid, &cells, cloud.len())
}

/// Scores `params` on every labeled scan, split over up to `workers` threads.
pub fn evaluate(
    params: &ModelParams,
    scans: &[PointCloud],
    voxel_size: f64,
    bev: &BevProjectionConfig,
    workers: usize,
) -> Result<ConfusionMatrix> {
    let k = params.config.num_classes;
    let workers = workers.clamp(1, scans.len().max(1));
    let chunk = scans.len().div_ceil(workers).max(1);
    let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|s| {
        let handles: Vec<_> = scans
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut cm = ConfusionMatrix::new(k);
                    for scan in part {
                        let Some(gt) = &scan.labels else { continue };
                        cm.accumulate(&predict_points(params, scan, voxel_size, bev)?, gt)?;
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut cm = ConfusionMatrix::new(k);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// 3D network with the auxiliary BEV branch.
    Lidog,
    /// 3D network alone.
    NoBev,
    /// Two 3D heads, softmax-averaged at inference.
    Double,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Lidog => "lidog",
            Variant::NoBev => "no_bev",
            Variant::Double => "double",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let (bev_head, double_head) = match self {
            Variant::Lidog => (true, false),
            Variant::NoBev => (false, false),
            Variant::Double => (false, true),
        };
        ModelConfig {
            bev_head,
            double_head,
            ..base.clone()
        }
    }
}

/// A named collection of labeled scans.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub name: String,
    pub scans: Vec<PointCloud>,
}

impl Domain {
    pub fn new(name: impl Into<String>, scans: Vec<PointCloud>) -> Self {
        Domain {
            name: name.into(),
            scans,
        }
    }

    /// Loads a dataset directory; the domain is named after the directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ds = crate::synth::load_domain(dir)?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| ds.manifest.spec.name.clone());
        Ok(Domain::new(name, ds.scans))
    }

    /// Number of training frames under a held-out fraction `val`.
    pub fn train_len(&self, val: f64) -> usize {
        let n = self.scans.len();
        n - ((n as f64 * val).round() as usize).min(n)
    }

    pub fn train_split(&self, val: f64) -> &[PointCloud] {
        &self.scans[..self.train_len(val)]
    }

    pub fn val_split(&self, val: f64) -> &[PointCloud] {
        &self.scans[self.train_len(val)..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub sources: Vec<PathBuf>,
    pub targets: Vec<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bev: BevProjectionConfig,
    pub variants: Vec<Variant>,
    /// Overrides both BEV half-extents, meters.
    pub bev_area: Option<f64>,
    /// Scales the BEV raster size (the command line accepts 0.5, 0.75 and 1.0).
    pub bev_resolution: f64,
    /// Fraction of every source dataset's frames, taken from the end, held out.
    pub val_fraction: f64,
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            sources: Vec::new(),
            targets: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            bev: BevProjectionConfig::default(),
            variants: vec![Variant::Lidog, Variant::NoBev],
            bev_area: None,
            bev_resolution: 1.0,
            val_fraction: 0.2,
            workers: 1,
        }
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::validation("an experiment needs at least one source dataset"));
        }
        for s in &self.sources {
            if let Some(t) = self.targets.iter().find(|t| same_path(s, t)) {
                return Err(Error::validation(format!(
                    "dataset {} is both a source and a target",
                    t.display()
                )));
            }
        }
        self.check_common()
    }

    fn check_common(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::validation("no model variants requested"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::validation("val_fraction must be in [0, 1)"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.bev_config()?;
        Ok(())
    }

    /// The projection after applying the area and resolution toggles.
    pub fn bev_config(&self) -> Result<BevProjectionConfig> {
        let mut bev = self.bev;
        if let Some(b) = self.bev_area {
            bev.bound_x = b;
            bev.bound_z = b;
        }
        bev.with_resolution(self.bev_resolution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub variant: String,
    pub split: String,
    pub class: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub split: String,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<ClassRow>,
    pub summary: Vec<SummaryRow>,
}

pub const SOURCE_SPLIT: &str = "source_val";

pub fn target_split(name: &str) -> String {
    format!("target:{name}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl Report {
    pub fn miou(&self, variant: Variant, split: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.variant == variant.name() && r.split == split)
            .and_then(|r| r.miou)
    }

    /// mIoU difference of `variant` over `no_bev` on `split`.
    pub fn delta(&self, variant: Variant, split: &str) -> Option<f64> {
        Some(self.miou(variant, split)? - self.miou(Variant::NoBev, split)?)
    }

    /// Per-class block `variant,split,class,iou`, a blank line, then the
    /// summary block `variant,split,miou`. Undefined IoUs are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,split,class,iou\n");
        for r in &self.classes {
            let _ = writeln!(s, "{},{},{},{}", r.variant, r.split, r.class, fmt_opt(r.iou));
        }
        s.push_str("\nvariant,split,miou\n");
        for r in &self.summary {
            let _ = writeln!(s, "{},{},{}", r.variant, r.split, fmt_opt(r.miou));
        }
        s
    }

    /// Fixed-width table of mIoU per variant and split with the change
    /// relative to `no_bev` where both are available.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:<28} {:>8} {:>8}\n", "variant", "split", "mIoU", "delta");
        for r in &self.summary {
            let delta = self
                .summary
                .iter()
                .find(|o| o.variant == Variant::NoBev.name() && o.split == r.split && r.variant != o.variant)
                .and_then(|o| Some(r.miou? - o.miou?))
                .map(|d| format!("{d:+.2}"))
                .unwrap_or_else(|| "-".into());
            let miou = r.miou.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:<10} {:<28} {:>8} {:>8}", r.variant, r.split, miou, delta);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub params: ModelParams,
    pub log: Vec<LogRow>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: Report,
    pub runs: Vec<VariantRun>,
}

/// Loads the datasets named by `spec` and runs the experiment.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let sources = spec.sources.iter().map(Domain::load).collect::<Result<Vec<_>>>()?;
    let targets = spec.targets.iter().map(Domain::load).collect::<Result<Vec<_>>>()?;
    run_experiment_on(spec, &sources, &targets)
}

/// Runs the experiment on in-memory domains; the path lists of `spec` are
/// not consulted. Every variant trains from the same seed on the same
/// frames in the same order. Sources are scored on their held-out frames,
/// targets on every frame, since no target frame is ever trained on.
pub fn run_experiment_on(spec: &ExperimentSpec, sources: &[Domain], targets: &[Domain]) -> Result<ExperimentOutput> {
    spec.check_common()?;
    if sources.is_empty() {
        return Err(Error::validation("an experiment needs at least one source dataset"));
    }
    let bev = spec.bev_config()?;
    let vf = spec.val_fraction;
    let train_sets: Vec<Vec<PointCloud>> = sources.iter().map(|d| d.train_split(vf).to_vec()).collect();
    let source_val: Vec<PointCloud> = sources.iter().flat_map(|d| d.val_split(vf).iter().cloned()).collect();
    let mut splits: Vec<(String, &[PointCloud])> = vec![(SOURCE_SPLIT.to_string(), &source_val)];
    for t in targets {
        splits.push((target_split(&t.name), &t.scans));
    }

    let vocab = ClassVocabulary::default();
    let class_name = |c: usize| {
        if c < vocab.len() {
            vocab.name(ClassId(c as u16)).to_string()
        } else {
            format!("class{c}")
        }
    };
    let mut report = Report::default();
    let mut runs = Vec::new();
    for &variant in &spec.variants {
        let model = variant.model_config(&spec.model);
        let out = train(&model, &train_sets, &spec.train, &bev)?;
        for (split, scans) in &splits {
            let cm = evaluate(&out.params, scans, spec.train.voxel_size, &bev, spec.workers)?;
            for c in 0..model.num_classes {
                report.classes.push(ClassRow {
                    variant: variant.name().into(),
                    split: split.clone(),
                    class: class_name(c),
                    iou: cm.iou(c),
                });
            }
            report.summary.push(SummaryRow {
                variant: variant.name().into(),
                split: split.clone(),
                miou: cm.miou(),
            });
        }
        runs.push(VariantRun {
            variant,
            params: out.params,
            log: out.log,
        });
    }
    Ok(ExperimentOutput { report, runs })
}
