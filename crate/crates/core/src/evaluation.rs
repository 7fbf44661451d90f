//! Dice overlap, per-case evaluation on reconstructed volumes and
//! standard-versus-mixed comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::sampling::{SliceRecord, SliceSource};
use crate::task::{RegionSpec, Task};
use crate::tensor::Tensor;

/// Dice of two binary maps; two empty maps agree perfectly (1.0).
pub fn dice_binary(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        p += usize::from(a);
        t += usize::from(b);
        inter += usize::from(a && b);
    }
    Ok(if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    })
}

/// Dice after binarizing both label maps by region membership.
pub fn dice(pred: &[u8], truth: &[u8], region: &RegionSpec) -> Result<f64> {
    dice_binary(&region.binarize(pred), &region.binarize(truth))
}

/// Anything that maps `[N, C, H, W]` images to label maps.
pub trait Segmenter {
    /// Label maps, row-major, with the spatial size given by `output_size`.
    fn segment(&self, images: &Tensor) -> Result<Vec<Vec<u8>>>;
    /// Output `(H', W')` for `(H, W)` inputs.
    fn output_size(&self, height: usize, width: usize) -> (usize, usize);
}

impl Segmenter for Model {
    fn segment(&self, images: &Tensor) -> Result<Vec<Vec<u8>>> {
        self.predict_mask(images)
    }

    fn output_size(&self, _height: usize, _width: usize) -> (usize, usize) {
        Model::output_size(self)
    }
}

/// Centre crop of a row-major `h x w` map to `oh x ow`.
pub fn center_crop<T: Copy>(map: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (top, left) = ((h - oh) / 2, (w - ow) / 2);
    (0..oh)
        .flat_map(|y| map[(top + y) * w + left..(top + y) * w + left + ow].iter().copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub volume_id: u32,
    /// One value per region, in report order.
    pub dice: Vec<f64>,
    pub empty_truth: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDice {
    pub fold_id: usize,
    pub cases: Vec<CaseDice>,
}

impl FoldDice {
    /// Unweighted mean over cases per region.
    pub fn means(&self, regions: usize) -> Vec<f64> {
        mean_columns(self.cases.iter().map(|c| c.dice.as_slice()), regions)
    }
}

fn mean_columns<'a>(rows: impl Iterator<Item = &'a [f64]>, cols: usize) -> Vec<f64> {
    let mut sum = vec![0.0; cols];
    let mut n = 0usize;
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        n += 1;
    }
    sum.iter()
        .map(|s| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub regions: Vec<String>,
    pub folds: Vec<FoldDice>,
}

impl DiceReport {
    pub fn new(regions: &[RegionSpec]) -> Self {
        DiceReport {
            regions: regions.iter().map(|r| r.name.clone()).collect(),
            folds: Vec::new(),
        }
    }

    pub fn fold_means(&self) -> Vec<Vec<f64>> {
        self.folds.iter().map(|f| f.means(self.regions.len())).collect()
    }

    /// Mean over every case of every fold.
    pub fn mean(&self) -> Vec<f64> {
        mean_columns(
            self.folds
                .iter()
                .flat_map(|f| f.cases.iter().map(|c| c.dice.as_slice())),
            self.regions.len(),
        )
    }

    pub fn empty_truth_counts(&self) -> Vec<usize> {
        (0..self.regions.len())
            .map(|r| {
                self.folds
                    .iter()
                    .flat_map(|f| &f.cases)
                    .filter(|c| c.empty_truth[r])
                    .count()
            })
            .collect()
    }

    pub fn has_nan(&self) -> bool {
        self.folds
            .iter()
            .flat_map(|f| &f.cases)
            .flat_map(|c| &c.dice)
            .any(|d| d.is_nan())
    }

    /// One row per case: `fold,volume_id,<region>...`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["fold".to_string(), "volume_id".to_string()];
        header.extend(self.regions.iter().cloned());
        w.write_record(&header)?;
        for f in &self.folds {
            for c in &f.cases {
                let mut row = vec![f.fold_id.to_string(), c.volume_id.to_string()];
                row.extend(c.dice.iter().map(|d| format!("{d:.6}")));
                w.write_record(&row)?;
            }
        }
        csv_string(w)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "fold");
        for r in &self.regions {
            let _ = write!(out, " {r:>16}");
        }
        out.push('\n');
        for (f, m) in self.folds.iter().zip(self.fold_means()) {
            let _ = write!(out, "{:<8}", f.fold_id);
            for v in m {
                let _ = write!(out, " {:>16.2}", 100.0 * v);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<8}", "mean");
        for v in self.mean() {
            let _ = write!(out, " {:>16.2}", 100.0 * v);
        }
        out.push('\n');
        let _ = write!(out, "{:<8}", "empty");
        for n in self.empty_truth_counts() {
            let _ = write!(out, " {n:>16}");
        }
        out.push('\n');
        out
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
    String::from_utf8(bytes).map_err(|_| Error::invalid("csv output is not UTF-8"))
}

/// Scores each test volume: slices are segmented in order of
/// `slice_index`, stacked, and compared with the (centre-cropped) truth.
pub fn evaluate_cases(
    segmenter: &dyn Segmenter,
    test_records: &[SliceRecord],
    source: &dyn SliceSource,
    task: Task,
    chunk: usize,
) -> Result<Vec<CaseDice>> {
    let regions = task.eval_regions();
    let mut volumes: BTreeMap<u32, Vec<&SliceRecord>> = BTreeMap::new();
    for r in test_records {
        volumes.entry(r.volume_id).or_default().push(r);
    }
    let mut cases = Vec::with_capacity(volumes.len());
    for (volume_id, mut recs) in volumes {
        recs.sort_by_key(|r| r.slice_index);
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for group in recs.chunks(chunk.max(1)) {
            let mut images = Vec::new();
            let mut dims = (0, 0, 0);
            for r in group {
                let data = source.load(r)?;
                let mask = data
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("test slice {} has no mask", r.data_path)))?;
                dims = (data.channels, data.height, data.width);
                let (oh, ow) = segmenter.output_size(data.height, data.width);
                if oh > data.height || ow > data.width {
                    return Err(Error::shape("segmenter output larger than its input"));
                }
                truth.extend(center_crop(&task.target_mask(mask), data.height, data.width, oh, ow));
                images.extend_from_slice(&data.image);
            }
            let t = Tensor::new(vec![group.len(), dims.0, dims.1, dims.2], images)?;
            for m in segmenter.segment(&t)? {
                pred.extend(m);
            }
        }
        if pred.len() != truth.len() {
            return Err(Error::shape(format!(
                "volume {volume_id}: {} predicted voxels for {} truth voxels",
                pred.len(),
                truth.len()
            )));
        }
        let mut dice_v = Vec::with_capacity(regions.len());
        let mut empty = Vec::with_capacity(regions.len());
        for region in &regions {
            dice_v.push(dice(&pred, &truth, region)?);
            empty.push(!truth.iter().any(|&l| region.contains(l)));
        }
        cases.push(CaseDice {
            volume_id,
            dice: dice_v,
            empty_truth: empty,
        });
    }
    Ok(cases)
}

pub fn evaluate_fold(
    segmenter: &dyn Segmenter,
    fold_id: usize,
    test_records: &[SliceRecord],
    source: &dyn SliceSource,
    task: Task,
) -> Result<DiceReport> {
    let mut report = DiceReport::new(&task.eval_regions());
    report.folds.push(FoldDice {
        fold_id,
        cases: evaluate_cases(segmenter, test_records, source, task, 16)?,
    });
    Ok(report)
}

/// Concatenates per-fold reports of one method.
pub fn merge_reports(reports: &[DiceReport]) -> Result<DiceReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to merge"))?;
    let mut out = DiceReport {
        regions: first.regions.clone(),
        folds: Vec::new(),
    };
    for r in reports {
        if r.regions != out.regions {
            return Err(Error::invalid("reports cover different regions"));
        }
        out.folds.extend(r.folds.iter().cloned());
    }
    out.folds.sort_by_key(|f| f.fold_id);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub standard: DiceReport,
    pub mixed: DiceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComparison {
    pub name: String,
    pub regions: Vec<String>,
    pub fold_ids: Vec<usize>,
    pub standard_folds: Vec<Vec<f64>>,
    pub mixed_folds: Vec<Vec<f64>>,
    /// `mixed - standard` per fold and region.
    pub fold_deltas: Vec<Vec<f64>>,
    pub standard_mean: Vec<f64>,
    pub mixed_mean: Vec<f64>,
    pub mean_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenarios: Vec<ScenarioComparison>,
}

fn compare_one(s: &Scenario) -> Result<ScenarioComparison> {
    let (a, b) = (&s.standard, &s.mixed);
    if a.regions != b.regions {
        return Err(Error::invalid(format!("{}: region lists differ", s.name)));
    }
    let ids_a: Vec<usize> = a.folds.iter().map(|f| f.fold_id).collect();
    let ids_b: Vec<usize> = b.folds.iter().map(|f| f.fold_id).collect();
    if ids_a != ids_b {
        return Err(Error::invalid(format!(
            "{}: fold structure differs ({ids_a:?} vs {ids_b:?})",
            s.name
        )));
    }
    let sub = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(m, s)| m - s).collect() };
    let (fa, fb) = (a.fold_means(), b.fold_means());
    let (ma, mb) = (a.mean(), b.mean());
    Ok(ScenarioComparison {
        name: s.name.clone(),
        regions: a.regions.clone(),
        fold_ids: ids_a,
        fold_deltas: fb.iter().zip(&fa).map(|(m, s)| sub(m, s)).collect(),
        standard_folds: fa,
        mixed_folds: fb,
        mean_delta: sub(&mb, &ma),
        standard_mean: ma,
        mixed_mean: mb,
    })
}

pub fn compare_scenarios(scenarios: &[Scenario]) -> Result<Comparison> {
    Ok(Comparison {
        scenarios: scenarios.iter().map(compare_one).collect::<Result<_>>()?,
    })
}

impl Comparison {
    /// Mean Dice (0-100) per scenario, one row per method, one column per region.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.scenarios {
            let _ = writeln!(out, "scenario: {}", s.name);
            let _ = write!(out, "{:<10}", "method");
            for r in &s.regions {
                let _ = write!(out, " {r:>16}");
            }
            out.push('\n');
            for (label, row) in [
                ("standard", &s.standard_mean),
                ("mixed", &s.mixed_mean),
                ("delta", &s.mean_delta),
            ] {
                let _ = write!(out, "{label:<10}");
                for v in row {
                    let _ = write!(out, " {:>16.2}", 100.0 * v);
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// `scenario,fold,region,standard,mixed,delta`; fold `mean` rows close each scenario.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scenario", "fold", "region", "standard", "mixed", "delta"])?;
        for s in &self.scenarios {
            let rows = s
                .fold_ids
                .iter()
                .map(|id| id.to_string())
                .zip(s.standard_folds.iter().zip(&s.mixed_folds).zip(&s.fold_deltas))
                .chain(std::iter::once((
                    "mean".to_string(),
                    ((&s.standard_mean, &s.mixed_mean), &s.mean_delta),
                )));
            for (fold, ((st, mx), de)) in rows {
                for (r, region) in s.regions.iter().enumerate() {
                    w.write_record([
                        s.name.clone(),
                        fold.clone(),
                        region.clone(),
                        format!("{:.6}", st[r]),
                        format!("{:.6}", mx[r]),
                        format!("{:.6}", de[r]),
                    ])?;
                }
            }
        }
        csv_string(w)
    }

    pub fn has_nan(&self) -> bool {
        self.scenarios
            .iter()
            .flat_map(|s| s.standard_mean.iter().chain(&s.mixed_mean))
            .any(|v| v.is_nan())
    }
}

pub fn save_report(path: &Path, report: &DiceReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<DiceReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
