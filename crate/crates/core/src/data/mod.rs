//! Synthetic volumes, intensity normalization, slice extraction, on-disk
//! datasets and cross-validation folds.

mod folds;
mod generate;
mod normalize;
mod slices;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use folds::{fold_order, folds_to_json, load_folds, plan_folds, save_folds, FoldPlan};
pub use generate::{generate_volume, GeneratorConfig, Volume, FOUR_CHANNEL_PROFILES};
pub use normalize::{nonzero_median, normalize_channel, normalize_intensity, DEFAULT_SCALE};
pub use slices::{
    apply_role, decode_blob, encode_blob, extract_slices, presence_of, slice_path, Role, SliceData, BLOB_MAGIC,
    BLOB_VERSION,
};

use crate::error::{Error, Result};
use crate::sampling::{save_manifest, Annotation, SliceRecord};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const GENERATOR_FILE: &str = "generator.json";

/// Every slice of every volume, fully annotated, held in memory. Fold roles
/// are applied later, when a training set is selected.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub records: Vec<SliceRecord>,
    pub slices: HashMap<String, SliceData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub volumes: usize,
    pub tumor_volumes: usize,
    pub negative_volumes: usize,
    pub tumor_slices: usize,
    pub negative_slices: usize,
}

impl Dataset {
    pub fn generate(config: &GeneratorConfig, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut records = Vec::new();
        let mut slices = HashMap::new();
        for id in 0..config.num_volumes as u32 {
            let v = normalize_intensity(&generate_volume(config, id)?, scale)?;
            for (rec, data) in extract_slices(&v, Role::Fa) {
                slices.insert(rec.data_path.clone(), data);
                records.push(rec);
            }
        }
        Ok(Dataset {
            config: config.clone(),
            records,
            slices,
        })
    }

    pub fn summary(&self) -> DatasetSummary {
        let tumor_volumes = self.config.tumor_count();
        let tumor_slices = self.records.iter().filter(|r| r.annotation == Annotation::Full).count();
        DatasetSummary {
            volumes: self.config.num_volumes,
            tumor_volumes,
            negative_volumes: self.config.num_volumes - tumor_volumes,
            tumor_slices,
            negative_slices: self.records.len() - tumor_slices,
        }
    }

    /// Writes `manifest.jsonl`, `generator.json` and one blob per slice.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let slice_dir = dir.join("slices");
        std::fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;
        for rec in &self.records {
            let path = dir.join(&rec.data_path);
            let data = &self.slices[&rec.data_path];
            std::fs::write(&path, data.to_blob()?).map_err(|e| Error::io(&path, e))?;
        }
        save_manifest(&dir.join(MANIFEST_FILE), &self.records)?;
        let gen = dir.join(GENERATOR_FILE);
        let mut text = serde_json::to_string_pretty(&self.config)?;
        text.push('\n');
        std::fs::write(&gen, text).map_err(|e| Error::io(&gen, e))
    }
}

/// Records of the training volumes of a fold, relabelled by role.
pub fn training_records(records: &[SliceRecord], fold: &FoldPlan, include_wa: bool) -> Vec<SliceRecord> {
    records
        .iter()
        .filter_map(|r| match fold.role_of(r.volume_id)? {
            Role::Wa if !include_wa => None,
            role => apply_role(r, role),
        })
        .collect()
}

/// Records of the test volumes of a fold.
pub fn test_records(records: &[SliceRecord], fold: &FoldPlan) -> Vec<SliceRecord> {
    records.iter().filter(|r| fold.is_test(r.volume_id)).cloned().collect()
}
