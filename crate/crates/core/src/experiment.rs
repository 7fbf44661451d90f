//! In-memory standard-versus-mixed comparison over seeds and numbers of
//! fully annotated volumes.

use serde::{Deserialize, Serialize};

use crate::data::{plan_folds, test_records, training_records, Dataset, GeneratorConfig, DEFAULT_SCALE};
use crate::error::{Error, Result};
use crate::evaluation::{dice, evaluate_fold, DiceReport, Scenario, Segmenter};
use crate::network::Model;
use crate::sampling::{MemorySource, SliceRecord, SliceSource};
use crate::task::{RegionSpec, Task};
use crate::tensor::Tensor;
use crate::train::{Mode, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    /// Test volumes per fold.
    pub num_test: usize,
    /// Fully annotated training volumes per scenario; the remaining
    /// training volumes are weakly annotated.
    pub fa_counts: Vec<usize>,
    /// One fold permutation and training seed per entry.
    pub seeds: Vec<u64>,
    /// Template for both modes; `mode` and `seed` are overwritten.
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// 80 all-tumor volumes with strong per-case contrast variation, 16 test
    /// volumes, whole-tumor task, 300 iterations with step decay.
    pub fn desk(fa_counts: Vec<usize>, seeds: Vec<u64>) -> Self {
        let generator = GeneratorConfig {
            tumor_fraction: 1.0,
            noise_sigma: 0.15,
            contrast_jitter: 0.3,
            ..GeneratorConfig::toy(80, 7)
        };
        let mut train = TrainConfig::toy(Task::WholeTumor, Mode::Mixed, 0);
        train.iterations = 300;
        train.optimizer.decay_every = 100;
        train.checkpoint_every = 0;
        ExperimentConfig {
            generator,
            num_test: 16,
            fa_counts,
            seeds,
            train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub fa: usize,
    pub seed: u64,
    pub standard: DiceReport,
    pub mixed: DiceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    /// Mean over seeds of the first-region mean Dice, `(standard, mixed)`.
    pub fn means(&self, fa: usize) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.runs.iter().filter(|r| r.fa == fa).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.standard.mean()[0]).sum::<f64>() / n,
            rows.iter().map(|r| r.mixed.mean()[0]).sum::<f64>() / n,
        ))
    }

    /// `mixed - standard` of [`Self::means`].
    pub fn gap(&self, fa: usize) -> Option<f64> {
        self.means(fa).map(|(s, m)| m - s)
    }

    /// One comparison scenario per FA count, folds keyed by seed order.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut fas: Vec<usize> = self.runs.iter().map(|r| r.fa).collect();
        fas.dedup();
        fas.into_iter()
            .map(|fa| {
                let rows: Vec<_> = self.runs.iter().filter(|r| r.fa == fa).collect();
                let collect = |pick: fn(&RunResult) -> &DiceReport| {
                    let mut rep = pick(rows[0]).clone();
                    rep.folds.clear();
                    for (i, r) in rows.iter().enumerate() {
                        let mut f = pick(r).folds[0].clone();
                        f.fold_id = i + 1;
                        rep.folds.push(f);
                    }
                    rep
                };
                Scenario {
                    name: format!("FA={fa}"),
                    standard: collect(|r| &r.standard),
                    mixed: collect(|r| &r.mixed),
                }
            })
            .collect()
    }
}

/// Trains and evaluates one (FA count, seed) pair in one mode.
pub fn run_single(dataset: &Dataset, cfg: &ExperimentConfig, fa: usize, seed: u64, mode: Mode) -> Result<DiceReport> {
    let n = cfg.generator.num_volumes;
    let fold = plan_folds(n, cfg.num_test, fa, 1, Some(seed))?.remove(0);
    let source = MemorySource::new(dataset.slices.clone());
    let records = training_records(&dataset.records, &fold, mode == Mode::Mixed);
    let mut train = cfg.train.clone();
    train.mode = mode;
    train.seed = seed;
    let mut trainer = Trainer::new(train, records, &source)?;
    trainer.run()?;
    let model = trainer.into_model();
    evaluate_fold(
        &model,
        fold.fold_id,
        &test_records(&dataset.records, &fold),
        &source,
        cfg.train.task,
    )
}

pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.seeds.is_empty() || cfg.fa_counts.is_empty() {
        return Err(Error::config("experiment needs at least one seed and one FA count"));
    }
    let dataset = Dataset::generate(&cfg.generator, DEFAULT_SCALE)?;
    let mut runs = Vec::new();
    for &fa in &cfg.fa_counts {
        for &seed in &cfg.seeds {
            runs.push(RunResult {
                fa,
                seed,
                standard: run_single(&dataset, cfg, fa, seed, Mode::Standard)?,
                mixed: run_single(&dataset, cfg, fa, seed, Mode::Mixed)?,
            });
        }
    }
    Ok(ExperimentResult { runs })
}

/// Whole-tumor Dice pooled over all pixels of the given slices.
pub fn pooled_dice(model: &Model, records: &[SliceRecord], source: &dyn SliceSource, task: Task) -> Result<f64> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for group in records.chunks(16) {
        let mut images = Vec::new();
        let mut dims = (0, 0, 0);
        for r in group {
            let d = source.load(r)?;
            let mask = d
                .mask
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("{} has no mask", r.data_path)))?;
            let (oh, ow) = Segmenter::output_size(model, d.height, d.width);
            truth.extend(crate::evaluation::center_crop(
                &task.target_mask(mask),
                d.height,
                d.width,
                oh,
                ow,
            ));
            dims = (d.channels, d.height, d.width);
            images.extend_from_slice(&d.image);
        }
        let t = Tensor::new(vec![group.len(), dims.0, dims.1, dims.2], images)?;
        pred.extend(model.predict_mask(&t)?.into_iter().flatten());
    }
    let region = match task.region() {
        Some(r) => RegionSpec::new(&r.name, &[1]),
        None => RegionSpec::whole_tumor(),
    };
    dice(&pred, &truth, &region)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitOutcome {
    pub iterations: usize,
    pub dice: f64,
    pub reached: bool,
}

/// Trains on `records` and checks the pooled training Dice every
/// `check_every` iterations, stopping once it reaches `target`.
pub fn overfit(
    config: TrainConfig,
    records: Vec<SliceRecord>,
    source: &dyn SliceSource,
    target: f64,
    check_every: usize,
) -> Result<OverfitOutcome> {
    let task = config.task;
    let eval_records = records.clone();
    let mut trainer = Trainer::new(config, records, source)?;
    let mut last = OverfitOutcome {
        iterations: 0,
        dice: 0.0,
        reached: false,
    };
    let mut failure = None;
    trainer.run_until(|model, rec| {
        if rec.iteration % check_every.max(1) != 0 {
            return false;
        }
        match pooled_dice(model, &eval_records, source, task) {
            Ok(d) => {
                last = OverfitOutcome {
                    iterations: rec.iteration,
                    dice: d,
                    reached: d >= target,
                };
                last.reached
            }
            Err(e) => {
                failure = Some(e);
                true
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(last),
    }
}
