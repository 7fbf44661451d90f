//! Label conventions: tumor classes, evaluation regions and training tasks.
//!
//! Voxel classes are 0 (non-tumor), 1 (non-enhancing core), 2 (edema) and
//! 3 (enhancing core).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

pub const NUM_TUMOR_CLASSES: usize = 4;

/// A named group of voxel classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub classes: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: &str, classes: &[u8]) -> Self {
        RegionSpec {
            name: name.to_string(),
            classes: classes.to_vec(),
        }
    }

    pub fn whole_tumor() -> Self {
        Self::new("whole_tumor", &[1, 2, 3])
    }

    pub fn tumor_core() -> Self {
        Self::new("tumor_core", &[1, 3])
    }

    pub fn enhancing_core() -> Self {
        Self::new("enhancing_core", &[3])
    }

    /// Whole tumor, tumor core, enhancing core.
    pub fn standard() -> Vec<Self> {
        vec![Self::whole_tumor(), Self::tumor_core(), Self::enhancing_core()]
    }

    pub fn contains(&self, label: u8) -> bool {
        self.classes.contains(&label)
    }

    pub fn binarize(&self, labels: &[u8]) -> Vec<bool> {
        labels.iter().map(|&l| self.contains(l)).collect()
    }
}

/// What a model is trained to segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    WholeTumor,
    TumorCore,
    EnhancingCore,
    /// All four classes, one classification branch per tumor subclass.
    Multiclass,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "whole-tumor" => Ok(Task::WholeTumor),
            "tumor-core" => Ok(Task::TumorCore),
            "enhancing-core" => Ok(Task::EnhancingCore),
            "multiclass" => Ok(Task::Multiclass),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }

    pub fn region(self) -> Option<RegionSpec> {
        match self {
            Task::WholeTumor => Some(RegionSpec::whole_tumor()),
            Task::TumorCore => Some(RegionSpec::tumor_core()),
            Task::EnhancingCore => Some(RegionSpec::enhancing_core()),
            Task::Multiclass => None,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Multiclass => NUM_TUMOR_CLASSES,
            _ => 2,
        }
    }

    pub fn num_branches(self) -> usize {
        match self {
            Task::Multiclass => NUM_TUMOR_CLASSES - 1,
            _ => 1,
        }
    }

    /// Maps raw voxel classes to the task's label space.
    pub fn target_mask(self, mask: &[u8]) -> Vec<u8> {
        match self.region() {
            Some(r) => mask.iter().map(|&l| u8::from(r.contains(l))).collect(),
            None => mask.to_vec(),
        }
    }

    /// Per-branch presence labels from a raw voxel-class mask.
    pub fn labels_from_mask(self, mask: &[u8]) -> Vec<u8> {
        let mut present = [false; NUM_TUMOR_CLASSES - 1];
        for &l in mask {
            if (1..NUM_TUMOR_CLASSES as u8).contains(&l) {
                present[l as usize - 1] = true;
            }
        }
        self.labels_from_presence(&present)
    }

    /// Per-branch presence labels from per-subclass booleans (classes 1..=3).
    pub fn labels_from_presence(self, presence: &[bool]) -> Vec<u8> {
        match self.region() {
            Some(r) => vec![u8::from(
                r.classes
                    .iter()
                    .any(|&c| presence.get(c as usize - 1).copied().unwrap_or(false)),
            )],
            None => presence.iter().map(|&p| u8::from(p)).collect(),
        }
    }

    /// Regions scored for this task, expressed in the task's label space.
    pub fn eval_regions(self) -> Vec<RegionSpec> {
        match self.region() {
            Some(r) => vec![RegionSpec::new(&r.name, &[1])],
            None => RegionSpec::standard(),
        }
    }

    pub fn default_loss(self) -> LossConfig {
        match self {
            Task::Multiclass => LossConfig::multiclass(),
            _ => LossConfig::binary(),
        }
    }
}
