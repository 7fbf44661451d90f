//! Training loop for the standard (segmentation only, fully annotated
//! volumes) and mixed (joint loss, all three slice types) regimes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::center_crop;
use crate::losses::{
    append_loss_log, classification_loss, compute_pixel_weights, segmentation_loss, total_loss, LossConfig, LossRecord,
};
use crate::network::{Checkpoint, Model, ModelConfig};
use crate::optimizer::{mean_gradients, OptimizerConfig, OptimizerState};
use crate::sampling::{
    assemble_batch, Annotation, Batch, BatchComposition, DatasetIndex, Sampler, SliceRecord, SliceSource,
};
use crate::seed;
use crate::task::Task;
use crate::tensor::NormMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Segmentation loss only, fully annotated volumes only.
    Standard,
    /// Joint loss over fully annotated, negative and weak slices.
    Mixed,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "mixed" => Ok(Mode::Mixed),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub task: Task,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub composition: BatchComposition,
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = never).
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
}

impl TrainConfig {
    pub fn toy(task: Task, mode: Mode, seed: u64) -> Self {
        TrainConfig {
            mode,
            task,
            model: ModelConfig::toy(2, 32, task.num_classes()),
            loss: task.default_loss(),
            composition: BatchComposition::default(),
            optimizer: OptimizerConfig::default(),
            iterations: 200,
            seed,
            checkpoint_every: 100,
            keep_checkpoints: 3,
        }
    }

    /// Loss weight and composition actually used in this mode.
    pub fn effective(&self) -> (LossConfig, BatchComposition) {
        match self.mode {
            Mode::Mixed => (self.loss.clone(), self.composition),
            Mode::Standard => (
                LossConfig {
                    a: 1.0,
                    ..self.loss.clone()
                },
                BatchComposition {
                    n: 0,
                    ..self.composition
                },
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.composition.validate()?;
        self.optimizer.validate()?;
        if self.model.num_classes != self.task.num_classes() {
            return Err(Error::config(format!(
                "task needs {} classes, model has {}",
                self.task.num_classes(),
                self.model.num_classes
            )));
        }
        if self.loss.target_weights.len() != self.task.num_classes() {
            return Err(Error::config("one target weight per class required"));
        }
        if self.checkpoint_every > 0 && self.keep_checkpoints == 0 {
            return Err(Error::config("keep_checkpoints must be >= 1 when checkpointing"));
        }
        Ok(())
    }
}

pub struct Trainer<'a> {
    config: TrainConfig,
    loss: LossConfig,
    composition: BatchComposition,
    model: Model,
    optimizer: OptimizerState,
    index: DatasetIndex,
    sampler: Sampler,
    source: &'a dyn SliceSource,
    log: Vec<LossRecord>,
    out_dir: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Standard mode discards weak records before indexing, so weak data is
    /// never read.
    pub fn new(config: TrainConfig, records: Vec<SliceRecord>, source: &'a dyn SliceSource) -> Result<Self> {
        config.validate()?;
        let (loss, composition) = config.effective();
        let records = match config.mode {
            Mode::Mixed => records,
            Mode::Standard => records
                .into_iter()
                .filter(|r| r.annotation != Annotation::Weak)
                .collect(),
        };
        let index = DatasetIndex::new(records, config.task)?;
        let multiclass = config.task == Task::Multiclass;
        index.require(&composition, multiclass)?;
        let model = Model::build(config.model.clone(), seed::derive(config.seed, seed::INIT))?;
        let optimizer = OptimizerState::new(config.optimizer.clone(), model.params())?;
        let sampler = Sampler::new(composition, multiclass, seed::derive(config.seed, seed::SAMPLER))?;
        Ok(Trainer {
            config,
            loss,
            composition,
            model,
            optimizer,
            index,
            sampler,
            source,
            log: Vec::new(),
            out_dir: None,
            checkpoints: Vec::new(),
        })
    }

    /// Loss log and checkpoints go to `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(LOSS_LOG);
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn iteration(&self) -> usize {
        self.optimizer.iteration
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let plan = self.sampler.sample(&self.index)?;
        assemble_batch(&self.index, plan, self.source, self.composition)
    }

    /// Forward/backward on one batch: returns (loss_s, loss_c, total, grads).
    pub fn batch_gradients(&mut self, batch: &Batch) -> Result<(f64, f64, f64, Vec<Option<Vec<f64>>>)> {
        let mut pass = self.model.forward(&batch.images, NormMode::Train)?;
        let (oh, ow) = self.model.output_size();
        let (h, w) = (batch.images.shape()[2], batch.images.shape()[3]);
        let masks: Vec<Vec<u8>> = batch.masks.iter().map(|m| center_crop(m, h, w, oh, ow)).collect();
        let tape = &mut pass.tape;
        let sup = tape.narrow(pass.seg_logits, 0, 0, masks.len())?;
        let weights = compute_pixel_weights(&masks, &self.loss)?;
        let ls = segmentation_loss(tape, sup, &masks, &weights, &self.loss)?;
        let lc = classification_loss(tape, &pass.class_logits, &batch.labels)?;
        let total = total_loss(tape, ls, lc, self.loss.a)?;
        let values = [ls, lc, total].map(|v| tape.value(v).data()[0]);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}: {values:?}",
                self.optimizer.iteration + 1
            )));
        }
        tape.backward(total)?;
        Ok((values[0], values[1], values[2], pass.param_grads()))
    }

    /// One iteration: `B` batches, averaged gradient, one optimizer step.
    pub fn step(&mut self) -> Result<LossRecord> {
        let b = self.config.optimizer.batches_per_iteration;
        let mut grads = Vec::with_capacity(b);
        let mut sums = [0.0; 3];
        for _ in 0..b {
            let batch = self.next_batch()?;
            let (ls, lc, t, g) = self.batch_gradients(&batch)?;
            sums[0] += ls;
            sums[1] += lc;
            sums[2] += t;
            grads.push(g);
        }
        let sizes: Vec<usize> = self.model.params().iter().map(|p| p.numel()).collect();
        let mean = mean_gradients(&grads, &sizes)?;
        self.optimizer.step(self.model.params_mut(), &mean)?;
        let rec = LossRecord {
            iteration: self.optimizer.iteration,
            loss_s: sums[0] / b as f64,
            loss_c: sums[1] / b as f64,
            total: sums[2] / b as f64,
        };
        self.log.push(rec);
        if let Some(dir) = &self.out_dir {
            append_loss_log(&dir.join(LOSS_LOG), &[rec])?;
        }
        let every = self.config.checkpoint_every;
        if every > 0 && rec.iteration % every == 0 && self.out_dir.is_some() {
            self.rotate_checkpoint()?;
        }
        Ok(rec)
    }

    /// Runs until the configured iteration count.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(|_, _| false)
    }

    /// Runs until the configured count or until `stop` returns true.
    pub fn run_until(&mut self, mut stop: impl FnMut(&Model, &LossRecord) -> bool) -> Result<()> {
        while self.optimizer.iteration < self.config.iterations {
            let rec = self.step()?;
            if stop(&self.model, &rec) {
                break;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.tensors.extend(
            self.optimizer
                .to_tensors(self.model.param_names(), self.model.params())?,
        );
        Ok(ck)
    }

    fn rotate_checkpoint(&mut self) -> Result<()> {
        let dir = self.out_dir.clone().expect("output directory");
        let path = dir.join(format!("checkpoint_{:06}.msup", self.optimizer.iteration));
        self.checkpoint()?.save(&path)?;
        self.checkpoints.push(path);
        while self.checkpoints.len() > self.config.keep_checkpoints {
            let old = self.checkpoints.remove(0);
            std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    /// Writes the final model (with optimizer state) as `model.msup`.
    pub fn save_final(&self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::invalid("trainer has no output directory"))?;
        let path = dir.join(FINAL_CHECKPOINT);
        self.checkpoint()?.save(&path)?;
        Ok(path)
    }
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.msup";
