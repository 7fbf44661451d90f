//! Slice loaders with per-annotation read counters.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Annotation, SliceRecord};
use crate::data::SliceData;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadCounts {
    pub full: usize,
    pub negative: usize,
    pub weak: usize,
}

#[derive(Debug, Default)]
struct Counters([AtomicUsize; 3]);

impl Counters {
    fn hit(&self, a: Annotation) {
        let i = match a {
            Annotation::Full => 0,
            Annotation::Negative => 1,
            Annotation::Weak => 2,
        };
        self.0[i].fetch_add(1, Ordering::Relaxed);
    }

    fn get(&self) -> ReadCounts {
        ReadCounts {
            full: self.0[0].load(Ordering::Relaxed),
            negative: self.0[1].load(Ordering::Relaxed),
            weak: self.0[2].load(Ordering::Relaxed),
        }
    }
}

pub trait SliceSource {
    /// Loads a slice. Weak records never expose a mask.
    fn load(&self, record: &SliceRecord) -> Result<SliceData>;

    /// Loads counted by the annotation of the requesting record.
    fn reads(&self) -> ReadCounts;
}

fn strip_weak(record: &SliceRecord, mut data: SliceData) -> SliceData {
    if record.annotation == Annotation::Weak {
        data.mask = None;
    }
    data
}

#[derive(Debug, Default)]
pub struct MemorySource {
    slices: HashMap<String, SliceData>,
    counters: Counters,
}

impl MemorySource {
    pub fn new(slices: HashMap<String, SliceData>) -> Self {
        MemorySource {
            slices,
            counters: Counters::default(),
        }
    }

    pub fn insert(&mut self, path: String, data: SliceData) {
        self.slices.insert(path, data);
    }
}

impl SliceSource for MemorySource {
    fn load(&self, record: &SliceRecord) -> Result<SliceData> {
        self.counters.hit(record.annotation);
        let data = self
            .slices
            .get(&record.data_path)
            .ok_or_else(|| Error::invalid(format!("no slice stored at {}", record.data_path)))?;
        Ok(strip_weak(record, data.clone()))
    }

    fn reads(&self) -> ReadCounts {
        self.counters.get()
    }
}

/// Reads blobs relative to a dataset directory.
#[derive(Debug)]
pub struct DiskSource {
    root: PathBuf,
    counters: Counters,
}

impl DiskSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskSource {
            root: root.into(),
            counters: Counters::default(),
        }
    }
}

impl SliceSource for DiskSource {
    fn load(&self, record: &SliceRecord) -> Result<SliceData> {
        self.counters.hit(record.annotation);
        let path = self.root.join(&record.data_path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(strip_weak(record, SliceData::from_blob(&bytes)?))
    }

    fn reads(&self) -> ReadCounts {
        self.counters.get()
    }
}
