//! Slice pools per annotation type and the k/m/n batch sampler.
//!
//! A batch holds `k` fully annotated tumor slices, `m` tumor-free slices and
//! `n` weakly annotated tumor slices, in that order, drawn uniformly with
//! replacement from their pools. In multiclass mode every tumor subclass
//! must appear in at least one positive slice of the batch.

mod record;
mod source;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use record::{load_manifest, read_manifest, save_manifest, write_manifest, Annotation, SliceRecord};
pub use source::{DiskSource, MemorySource, ReadCounts, SliceSource};

use crate::error::{Error, Result};
use crate::seed;
use crate::task::Task;
use crate::tensor::Tensor;

pub const SUBCLASS_NAMES: [&str; 3] = ["non-enhancing core", "edema", "enhancing core"];

/// Maximum full redraws before a multiclass batch is patched.
pub const MAX_REJECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub k: usize,
    pub m: usize,
    pub n: usize,
}

impl BatchComposition {
    pub fn new(k: usize, m: usize, n: usize) -> Result<Self> {
        let c = BatchComposition { k, m, n };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("batch composition needs k >= 1"));
        }
        Ok(())
    }

    pub fn supervised(&self) -> usize {
        self.k + self.m
    }

    pub fn total(&self) -> usize {
        self.k + self.m + self.n
    }
}

impl Default for BatchComposition {
    fn default() -> Self {
        BatchComposition { k: 4, m: 2, n: 4 }
    }
}

/// Immutable pools of record indices.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    records: Vec<SliceRecord>,
    task: Task,
    full: Vec<usize>,
    negative: Vec<usize>,
    weak: Vec<usize>,
    full_by_class: [Vec<usize>; 3],
    weak_by_class: [Vec<usize>; 3],
}

impl DatasetIndex {
    /// Slices that are tumor-free for `task` (including tumor slices whose
    /// classes lie outside the task's region) form the negative pool.
    pub fn new(records: Vec<SliceRecord>, task: Task) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::config("dataset index needs at least one record"));
        }
        let mut idx = DatasetIndex {
            task,
            full: Vec::new(),
            negative: Vec::new(),
            weak: Vec::new(),
            full_by_class: Default::default(),
            weak_by_class: Default::default(),
            records: Vec::new(),
        };
        for (i, r) in records.iter().enumerate() {
            r.check()?;
            let positive = task.labels_from_presence(&r.subclass_presence).iter().any(|&l| l == 1);
            let (pool, by_class) = match (r.annotation, positive) {
                (Annotation::Negative, _) | (_, false) => {
                    idx.negative.push(i);
                    continue;
                }
                (Annotation::Full, true) => (&mut idx.full, &mut idx.full_by_class),
                (Annotation::Weak, true) => (&mut idx.weak, &mut idx.weak_by_class),
            };
            pool.push(i);
            for (c, _) in r.subclass_presence.iter().enumerate().filter(|(_, &p)| p).take(3) {
                by_class[c].push(i);
            }
        }
        idx.records = records;
        Ok(idx)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn records(&self) -> &[SliceRecord] {
        &self.records
    }

    pub fn full(&self) -> &[usize] {
        &self.full
    }

    pub fn negative(&self) -> &[usize] {
        &self.negative
    }

    pub fn weak(&self) -> &[usize] {
        &self.weak
    }

    /// Positive fully annotated slices containing subclass `c` (0-based for classes 1..=3).
    pub fn full_with(&self, c: usize) -> &[usize] {
        &self.full_by_class[c]
    }

    pub fn weak_with(&self, c: usize) -> &[usize] {
        &self.weak_by_class[c]
    }

    /// Errors naming the first pool the composition would draw from in vain.
    pub fn require(&self, comp: &BatchComposition, multiclass: bool) -> Result<()> {
        comp.validate()?;
        if self.full.is_empty() {
            return Err(Error::EmptyPool("full".into()));
        }
        if comp.m > 0 && self.negative.is_empty() {
            return Err(Error::EmptyPool("negative".into()));
        }
        if comp.n > 0 && self.weak.is_empty() {
            return Err(Error::EmptyPool("weak".into()));
        }
        if multiclass {
            for c in 0..3 {
                let weak = comp.n > 0 && !self.weak_by_class[c].is_empty();
                if self.full_by_class[c].is_empty() && !weak {
                    return Err(Error::EmptyPool(format!("subclass {} ({})", c + 1, SUBCLASS_NAMES[c])));
                }
            }
        }
        Ok(())
    }
}

/// Record indices chosen for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub full: Vec<usize>,
    pub negative: Vec<usize>,
    pub weak: Vec<usize>,
    /// Whether multiclass patching was needed.
    pub patched: bool,
}

impl BatchPlan {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.full.iter().chain(&self.negative).chain(&self.weak).copied()
    }

    /// Subclasses (0-based) present in the batch per record metadata.
    pub fn subclasses(&self, index: &DatasetIndex) -> [bool; 3] {
        let mut p = [false; 3];
        for i in self.full.iter().chain(&self.weak) {
            for (c, &f) in index.records[*i].subclass_presence.iter().take(3).enumerate() {
                p[c] |= f;
            }
        }
        p
    }
}

/// Owns a private random stream; pools come from a shared [`DatasetIndex`].
#[derive(Debug, Clone)]
pub struct Sampler {
    comp: BatchComposition,
    multiclass: bool,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(comp: BatchComposition, multiclass: bool, seed: u64) -> Result<Self> {
        comp.validate()?;
        Ok(Sampler {
            comp,
            multiclass,
            rng: seed::rng(seed),
        })
    }

    pub fn composition(&self) -> BatchComposition {
        self.comp
    }

    fn draw(&mut self, pool: &[usize], count: usize) -> Vec<usize> {
        (0..count).map(|_| pool[self.rng.gen_range(0..pool.len())]).collect()
    }

    pub fn sample(&mut self, index: &DatasetIndex) -> Result<BatchPlan> {
        index.require(&self.comp, self.multiclass)?;
        let c = self.comp;
        let mut plan = BatchPlan {
            full: Vec::new(),
            negative: Vec::new(),
            weak: Vec::new(),
            patched: false,
        };
        for attempt in 0..MAX_REJECTIONS {
            plan.full = self.draw(&index.full, c.k);
            plan.negative = self.draw(&index.negative, c.m);
            plan.weak = self.draw(&index.weak, c.n);
            if !self.multiclass || plan.subclasses(index).iter().all(|&p| p) {
                return Ok(plan);
            }
            if attempt + 1 == MAX_REJECTIONS {
                break;
            }
        }
        self.patch(index, &mut plan)?;
        Ok(plan)
    }

    /// Overwrites positive slots from the back (weak slots first, then full
    /// slots) with slices of the rarest missing subclass until every
    /// subclass is present. Patched slots are never overwritten again.
    fn patch(&mut self, index: &DatasetIndex, plan: &mut BatchPlan) -> Result<()> {
        plan.patched = true;
        let mut slots: Vec<(bool, usize)> = (0..plan.weak.len()).rev().map(|i| (true, i)).collect();
        slots.extend((0..plan.full.len()).rev().map(|i| (false, i)));
        let mut slots = slots.into_iter();
        loop {
            let present = plan.subclasses(index);
            let Some(missing) = (0..3)
                .filter(|&c| !present[c])
                .min_by_key(|&c| (index.full_by_class[c].len() + index.weak_by_class[c].len(), c))
            else {
                return Ok(());
            };
            let slot = loop {
                match slots.next() {
                    Some((true, i)) if !index.weak_by_class[missing].is_empty() => break Some((true, i)),
                    Some((false, i)) if !index.full_by_class[missing].is_empty() => break Some((false, i)),
                    Some(_) => continue,
                    None => break None,
                }
            };
            let Some((weak, i)) = slot else {
                return Err(Error::EmptyPool(format!(
                    "subclass {} ({}) cannot be placed in the batch",
                    missing + 1,
                    SUBCLASS_NAMES[missing]
                )));
            };
            if weak {
                let pool = &index.weak_by_class[missing];
                plan.weak[i] = pool[self.rng.gen_range(0..pool.len())];
            } else {
                let pool = &index.full_by_class[missing];
                plan.full[i] = pool[self.rng.gen_range(0..pool.len())];
            }
        }
    }
}

/// Per-branch labels for a slice: recomputed from the mask when one is
/// given, otherwise taken from the stored flags.
pub fn derive_global_labels(record: &SliceRecord, mask: Option<&[u8]>, task: Task) -> Vec<u8> {
    match (record.annotation, mask) {
        (Annotation::Negative, _) => vec![0; task.num_branches()],
        (_, Some(m)) => task.labels_from_mask(m),
        (_, None) => task.labels_from_presence(&record.subclass_presence),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub composition: BatchComposition,
    /// `[k + m + n, C, H, W]`; supervised slices occupy `[0, k + m)`.
    pub images: Tensor,
    /// Task-space masks of the supervised slices.
    pub masks: Vec<Vec<u8>>,
    /// `labels[b][i]`: presence label of branch `b` for image `i`.
    pub labels: Vec<Vec<u8>>,
    pub plan: BatchPlan,
}

pub fn assemble_batch(
    index: &DatasetIndex,
    plan: BatchPlan,
    source: &dyn SliceSource,
    comp: BatchComposition,
) -> Result<Batch> {
    let task = index.task;
    let total = plan.full.len() + plan.negative.len() + plan.weak.len();
    let mut images = Vec::new();
    let mut dims = None;
    let mut masks = Vec::with_capacity(plan.full.len() + plan.negative.len());
    let mut labels = vec![Vec::with_capacity(total); task.num_branches()];
    let slots = plan
        .full
        .iter()
        .map(|&i| (i, Annotation::Full))
        .chain(plan.negative.iter().map(|&i| (i, Annotation::Negative)))
        .chain(plan.weak.iter().map(|&i| (i, Annotation::Weak)));
    for (i, slot) in slots {
        let rec = &index.records[i];
        let data = source.load(rec)?;
        let d = (data.channels, data.height, data.width);
        if *dims.get_or_insert(d) != d {
            return Err(Error::shape(format!(
                "slice {} is {d:?}, expected {:?}",
                rec.data_path,
                dims.unwrap()
            )));
        }
        if data.image.len() != d.0 * d.1 * d.2 {
            return Err(Error::shape(format!("slice {} has a truncated image", rec.data_path)));
        }
        images.extend_from_slice(&data.image);
        let plane = d.1 * d.2;
        let slice_labels = match slot {
            Annotation::Full => {
                let mask = data
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("full slice {} has no mask", rec.data_path)))?;
                masks.push(task.target_mask(mask));
                task.labels_from_mask(mask)
            }
            Annotation::Negative => {
                masks.push(vec![0; plane]);
                vec![0; task.num_branches()]
            }
            Annotation::Weak => derive_global_labels(rec, None, task),
        };
        for (b, l) in slice_labels.into_iter().enumerate() {
            labels[b].push(l);
        }
    }
    let (c, h, w) = dims.ok_or_else(|| Error::invalid("empty batch"))?;
    Ok(Batch {
        composition: comp,
        images: Tensor::new(vec![total, c, h, w], images)?,
        masks,
        labels,
        plan,
    })
}

/// Draws and loads one batch with a throwaway sampler seeded by `seed`.
pub fn sample_batch(
    index: &DatasetIndex,
    comp: BatchComposition,
    seed: u64,
    multiclass: bool,
    source: &dyn SliceSource,
) -> Result<Batch> {
    let plan = Sampler::new(comp, multiclass, seed)?.sample(index)?;
    assemble_batch(index, plan, source, comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SliceData;

    fn rec(id: u32, annotation: Annotation, presence: [bool; 3]) -> SliceRecord {
        SliceRecord {
            volume_id: id,
            slice_index: 0,
            data_path: format!("s{id}"),
            annotation,
            subclass_presence: presence.to_vec(),
        }
    }

    fn toy_records() -> Vec<SliceRecord> {
        let mut v = Vec::new();
        for i in 0..10 {
            v.push(rec(i, Annotation::Full, [i % 2 == 0, true, i == 3]));
        }
        for i in 10..15 {
            v.push(rec(i, Annotation::Negative, [false; 3]));
        }
        for i in 15..35 {
            v.push(rec(i, Annotation::Weak, [false, true, i % 5 == 0]));
        }
        v
    }

    #[test]
    fn pool_sizes() {
        let idx = DatasetIndex::new(toy_records(), Task::WholeTumor).unwrap();
        assert_eq!((idx.full().len(), idx.negative().len(), idx.weak().len()), (10, 5, 20));
        assert_eq!(idx.full_with(2), &[3]);
        assert_eq!(idx.weak_with(0).len(), 0);
    }

    #[test]
    fn edema_only_slice_is_in_edema_list_only() {
        let idx = DatasetIndex::new(vec![rec(0, Annotation::Full, [false, true, false])], Task::Multiclass).unwrap();
        assert_eq!(idx.full_with(1), &[0]);
        assert!(idx.full_with(0).is_empty() && idx.full_with(2).is_empty());
        // Not a tumor-core positive: lands in the negative pool for that task.
        let core = DatasetIndex::new(vec![rec(0, Annotation::Full, [false, true, false])], Task::TumorCore).unwrap();
        assert_eq!(core.negative(), &[0]);
    }

    #[test]
    fn missing_pools_are_named() {
        let recs: Vec<_> = toy_records()
            .into_iter()
            .filter(|r| r.annotation != Annotation::Negative)
            .collect();
        let idx = DatasetIndex::new(recs, Task::WholeTumor).unwrap();
        let err = idx.require(&BatchComposition::default(), false).unwrap_err();
        assert_eq!(err.to_string(), "negative pool empty");
        assert!(idx.require(&BatchComposition::new(4, 0, 4).unwrap(), false).is_ok());
        assert!(BatchComposition::new(0, 1, 1).is_err());
    }

    #[test]
    fn multiclass_patching_covers_rare_subclass() {
        // Class 1 only in one weak slice among many: rejection rarely succeeds.
        let mut recs = vec![rec(0, Annotation::Full, [false, true, true])];
        recs.push(rec(1, Annotation::Negative, [false; 3]));
        recs.push(rec(2, Annotation::Weak, [true, false, false]));
        for i in 3..400 {
            recs.push(rec(i, Annotation::Weak, [false, true, false]));
        }
        let idx = DatasetIndex::new(recs, Task::Multiclass).unwrap();
        let mut s = Sampler::new(BatchComposition::default(), true, 1).unwrap();
        let mut patched = 0;
        for _ in 0..200 {
            let p = s.sample(&idx).unwrap();
            assert!(p.subclasses(&idx).iter().all(|&x| x));
            patched += usize::from(p.patched);
        }
        assert!(patched > 0);
    }

    #[test]
    fn deterministic_plans() {
        let idx = DatasetIndex::new(toy_records(), Task::Multiclass).unwrap();
        let run = |seed| {
            let mut s = Sampler::new(BatchComposition::default(), true, seed).unwrap();
            (0..50).map(|_| s.sample(&idx).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn assembled_batch_layout() {
        let recs = toy_records();
        let mut src = MemorySource::default();
        for (i, r) in recs.iter().enumerate() {
            let mask = match r.annotation {
                Annotation::Full => {
                    let mut m = vec![0u8; 4];
                    m[0] = 2;
                    if r.subclass_presence[0] {
                        m[1] = 1;
                    }
                    if r.subclass_presence[2] {
                        m[2] = 3;
                    }
                    Some(m)
                }
                Annotation::Negative => Some(vec![0; 4]),
                Annotation::Weak => None,
            };
            src.insert(
                r.data_path.clone(),
                SliceData {
                    channels: 1,
                    height: 2,
                    width: 2,
                    image: vec![i as f64; 4],
                    mask,
                },
            );
        }
        let idx = DatasetIndex::new(recs, Task::Multiclass).unwrap();
        let b = sample_batch(&idx, BatchComposition::default(), 3, true, &src).unwrap();
        assert_eq!(b.images.shape(), &[10, 1, 2, 2]);
        assert_eq!(b.masks.len(), 6);
        assert_eq!(b.labels.len(), 3);
        assert!(b.labels.iter().all(|l| l.len() == 10));
        for i in 4..6 {
            assert!(b.masks[i].iter().all(|&l| l == 0));
            assert!(b.labels.iter().all(|l| l[i] == 0));
        }
        for (slot, &ri) in b.plan.full.iter().enumerate() {
            assert_eq!(b.labels[1][slot], 1);
            assert_eq!(b.images.data()[slot * 4], ri as f64);
        }
        let reads = src.reads();
        assert_eq!((reads.full, reads.negative, reads.weak), (4, 2, 4));
    }

    #[test]
    fn global_labels() {
        let r = rec(0, Annotation::Full, [true, true, true]);
        assert_eq!(
            derive_global_labels(&r, Some(&[0, 0, 2, 0]), Task::Multiclass),
            vec![0, 1, 0]
        );
        assert_eq!(derive_global_labels(&r, Some(&[0; 4]), Task::Multiclass), vec![0, 0, 0]);
        assert_eq!(derive_global_labels(&r, None, Task::WholeTumor), vec![1]);
        let n = rec(1, Annotation::Negative, [false; 3]);
        assert_eq!(derive_global_labels(&n, None, Task::Multiclass), vec![0, 0, 0]);
    }
}
