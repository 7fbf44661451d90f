//! Batch-weighted pixelwise segmentation loss, image-level classification
//! loss and their convex combination.
//!
//! Pixel weights are set from the composition of each batch: all pixels of
//! class `c` share a total weight `t_c`, so each gets `t_c / N_c` where
//! `N_c` counts class-`c` pixels across the supervised images. Classes
//! absent from the batch hand their budget to the present classes in
//! proportion to their targets, keeping the weights summing to one.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the segmentation loss; `1 - a` goes to classification.
    pub a: f64,
    /// Per-class total pixel weight `t_0 .. t_{K-1}`.
    pub target_weights: Vec<f64>,
    /// Additionally divide the segmentation loss by the image pixel count.
    #[serde(default)]
    pub strict_eq1: bool,
}

impl LossConfig {
    pub fn binary() -> Self {
        LossConfig {
            a: 0.7,
            target_weights: vec![0.7, 0.3],
            strict_eq1: false,
        }
    }

    pub fn multiclass() -> Self {
        LossConfig {
            a: 0.3,
            target_weights: vec![0.7, 0.1, 0.1, 0.1],
            strict_eq1: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::config(format!("a = {} outside [0, 1]", self.a)));
        }
        if self.target_weights.len() < 2 || self.target_weights.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::config("target weights must be >= 0 for at least 2 classes"));
        }
        let s: f64 = self.target_weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("target weights sum to {s}, expected 1")));
        }
        Ok(())
    }
}

/// Per-pixel loss weights for the supervised images of one batch, stored
/// image after image in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeights {
    pub weights: Vec<f64>,
    /// Batch-wide pixel count per class.
    pub class_counts: Vec<usize>,
    /// Targets after redistributing the budget of absent classes.
    pub effective_targets: Vec<f64>,
}

impl PixelWeights {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Sum of weights over the pixels labelled `class`.
    pub fn class_total(&self, masks: &[Vec<u8>], class: u8) -> f64 {
        masks
            .iter()
            .flatten()
            .zip(&self.weights)
            .filter(|(&l, _)| l == class)
            .map(|(_, w)| w)
            .sum()
    }
}

pub fn compute_pixel_weights(masks: &[Vec<u8>], config: &LossConfig) -> Result<PixelWeights> {
    let k = config.target_weights.len();
    if masks.iter().all(|m| m.is_empty()) {
        return Err(Error::invalid("pixel weights requested for an empty mask set"));
    }
    let mut counts = vec![0usize; k];
    for &l in masks.iter().flatten() {
        let slot = counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::invalid(format!("mask label {l} outside [0, {k})")))?;
        *slot += 1;
    }
    let present: f64 = counts
        .iter()
        .zip(&config.target_weights)
        .filter(|(&n, _)| n > 0)
        .map(|(_, &t)| t)
        .sum();
    if present <= 0.0 {
        return Err(Error::config("every class present in the batch has target weight 0"));
    }
    let effective: Vec<f64> = counts
        .iter()
        .zip(&config.target_weights)
        .map(|(&n, &t)| if n > 0 { t / present } else { 0.0 })
        .collect();
    let per_pixel: Vec<f64> = effective
        .iter()
        .zip(&counts)
        .map(|(&t, &n)| if n > 0 { t / n as f64 } else { 0.0 })
        .collect();
    Ok(PixelWeights {
        weights: masks.iter().flatten().map(|&l| per_pixel[l as usize]).collect(),
        class_counts: counts,
        effective_targets: effective,
    })
}

/// `-sum_i sum_(x,y) w * log p(label)` over `[S, K, H, W]` logits of the
/// `S` supervised images, softmax over the class axis.
pub fn segmentation_loss(
    tape: &mut Tape,
    seg_logits: Var,
    masks: &[Vec<u8>],
    weights: &PixelWeights,
    config: &LossConfig,
) -> Result<Var> {
    let shape = tape.shape(seg_logits).to_vec();
    if shape.len() != 4 || shape[0] != masks.len() {
        return Err(Error::shape(format!(
            "segmentation logits {shape:?} do not match {} masks",
            masks.len()
        )));
    }
    let pixels = shape[2] * shape[3];
    if masks.iter().any(|m| m.len() != pixels) {
        return Err(Error::shape(format!("every mask must have {pixels} pixels")));
    }
    let targets: Vec<usize> = masks.iter().flatten().map(|&l| l as usize).collect();
    let loss = tape.cross_entropy(seg_logits, 1, &targets, &weights.weights)?;
    if config.strict_eq1 {
        tape.scale(loss, 1.0 / pixels as f64)
    } else {
        Ok(loss)
    }
}

/// Mean cross-entropy per branch over all images, averaged over branches.
/// `labels[b][i]` is the 0/1 presence label of image `i` for branch `b`.
pub fn classification_loss(tape: &mut Tape, class_logits: &[Var], labels: &[Vec<u8>]) -> Result<Var> {
    if class_logits.is_empty() || class_logits.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} classification branches but {} label sets",
            class_logits.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&logits, branch_labels) in class_logits.iter().zip(labels) {
        if let Some(&bad) = branch_labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("image-level label {bad} is not 0 or 1")));
        }
        let targets: Vec<usize> = branch_labels.iter().map(|&l| l as usize).collect();
        let l = tape.cross_entropy_from_logits(logits, &targets)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("at least one branch");
    if class_logits.len() == 1 {
        Ok(total)
    } else {
        tape.scale(total, 1.0 / class_logits.len() as f64)
    }
}

/// `a * loss_s + (1 - a) * loss_c`
pub fn total_loss(tape: &mut Tape, loss_s: Var, loss_c: Var, a: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::invalid(format!("a = {a} outside [0, 1]")));
    }
    let s = tape.scale(loss_s, a)?;
    let c = tape.scale(loss_c, 1.0 - a)?;
    tape.add(s, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_s: f64,
    pub loss_c: f64,
    pub total: f64,
}

/// Writes `iteration,loss_s,loss_c,total` rows with a header line.
pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends rows to an existing log (header is written only for a new file).
pub fn append_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::f64::consts::LN_2;

    #[test]
    fn binary_weights_hand_values() {
        let mut mask = vec![0u8; 100];
        mask[..10].fill(1);
        let w = compute_pixel_weights(&[mask], &LossConfig::binary()).unwrap();
        assert!((w.weights[0] - 0.03).abs() < 1e-15);
        assert!((w.weights[50] - 0.7 / 90.0).abs() < 1e-15);
        assert!((w.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absent_tumor_renormalizes_to_background() {
        let masks = vec![vec![0u8; 30], vec![0u8; 20]];
        let w = compute_pixel_weights(&masks, &LossConfig::binary()).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 1.0 / 50.0).abs() < 1e-15));
        assert_eq!(w.effective_targets, vec![1.0, 0.0]);
    }

    #[test]
    fn multiclass_weights_hit_targets() {
        let masks = vec![vec![0, 0, 0, 1, 2, 2], vec![3, 0, 0, 0, 2, 1]];
        let w = compute_pixel_weights(&masks, &LossConfig::multiclass()).unwrap();
        for (c, t) in [0.7, 0.1, 0.1, 0.1].iter().enumerate() {
            assert!((w.class_total(&masks, c as u8) - t).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_errors() {
        assert!(compute_pixel_weights(&[], &LossConfig::binary()).is_err());
        assert!(compute_pixel_weights(&[vec![0, 2]], &LossConfig::binary()).is_err());
        let cfg = LossConfig {
            a: 0.5,
            target_weights: vec![0.0, 1.0],
            strict_eq1: false,
        };
        assert!(compute_pixel_weights(&[vec![0, 0]], &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        LossConfig::binary().validate().unwrap();
        LossConfig::multiclass().validate().unwrap();
        let mut c = LossConfig::binary();
        c.a = 1.5;
        assert!(c.validate().is_err());
        c = LossConfig::binary();
        c.target_weights = vec![0.5, 0.6];
        assert!(c.validate().is_err());
    }

    fn seg_loss_value(logits: Tensor, masks: Vec<Vec<u8>>, cfg: &LossConfig) -> f64 {
        let w = compute_pixel_weights(&masks, cfg).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(logits);
        let l = segmentation_loss(&mut tape, z, &masks, &w, cfg).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let masks = vec![vec![0, 1, 1, 0, 0, 0], vec![0, 0, 0, 0, 1, 0]];
        let v = seg_loss_value(Tensor::zeros(&[2, 2, 2, 3]).unwrap(), masks, &LossConfig::binary());
        assert!((v - LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let masks = vec![vec![0, 1, 1, 0]];
        let mut data = vec![0.0; 8];
        for (p, &l) in masks[0].iter().enumerate() {
            data[l as usize * 4 + p] = 60.0;
        }
        let v = seg_loss_value(
            Tensor::new(vec![1, 2, 2, 2], data).unwrap(),
            masks,
            &LossConfig::binary(),
        );
        assert!(v.abs() < 1e-20);
    }

    #[test]
    fn two_by_two_hand_computation() {
        // Pixel logits (background, tumor) and labels.
        let pix = [(1.0, -1.0, 0u8), (0.5, 0.5, 1), (-2.0, 1.0, 1), (0.0, 3.0, 0)];
        let mut data = vec![0.0; 8];
        for (p, &(z0, z1, _)) in pix.iter().enumerate() {
            data[p] = z0;
            data[4 + p] = z1;
        }
        let masks = vec![pix.iter().map(|p| p.2).collect::<Vec<_>>()];
        let got = seg_loss_value(
            Tensor::new(vec![1, 2, 2, 2], data).unwrap(),
            masks,
            &LossConfig::binary(),
        );
        // Two background pixels at 0.35 each, two tumor pixels at 0.15 each.
        let nll = |z0: f64, z1: f64, l: u8| {
            let lse = (z0.exp() + z1.exp()).ln();
            lse - if l == 0 { z0 } else { z1 }
        };
        let want: f64 = pix
            .iter()
            .map(|&(z0, z1, l)| if l == 0 { 0.35 } else { 0.15 } * nll(z0, z1, l))
            .sum();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn strict_mode_divides_by_pixels() {
        let masks = vec![vec![0, 1, 0, 0]];
        let mut cfg = LossConfig::binary();
        let plain = seg_loss_value(Tensor::zeros(&[1, 2, 2, 2]).unwrap(), masks.clone(), &cfg);
        cfg.strict_eq1 = true;
        let strict = seg_loss_value(Tensor::zeros(&[1, 2, 2, 2]).unwrap(), masks, &cfg);
        assert!((strict - plain / 4.0).abs() < 1e-15);
    }

    #[test]
    fn classification_loss_averages_branches() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[3, 2]).unwrap());
        let l = classification_loss(&mut tape, &[z], &[vec![0, 1, 1]]).unwrap();
        assert!((tape.value(l).item().unwrap() - LN_2).abs() < 1e-15);

        // Per-branch losses 0.2, 0.4, 0.6 for a single image with label 0:
        // choose logits (0, d) with ln(1 + e^d) = target.
        let branches: Vec<Var> = [0.2f64, 0.4, 0.6]
            .iter()
            .map(|&t| tape.leaf(Tensor::new(vec![1, 2], vec![0.0, (t.exp() - 1.0).ln()]).unwrap()))
            .collect();
        let labels = vec![vec![0u8]; 3];
        let l = classification_loss(&mut tape, &branches, &labels).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.4).abs() < 1e-12);

        assert!(classification_loss(&mut tape, &[z], &[vec![0, 2, 1]]).is_err());
        assert!(classification_loss(&mut tape, &[z], &[]).is_err());
    }

    #[test]
    fn total_loss_identities() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(2.0));
        let c = tape.leaf(Tensor::scalar(1.0));
        let t = total_loss(&mut tape, s, c, 0.7).unwrap();
        assert!((tape.value(t).item().unwrap() - 1.7).abs() < 1e-15);
        let t1 = total_loss(&mut tape, s, c, 1.0).unwrap();
        assert_eq!(tape.value(t1).item().unwrap().to_bits(), 2.0f64.to_bits());
        let t0 = total_loss(&mut tape, s, c, 0.0).unwrap();
        assert_eq!(tape.value(t0).item().unwrap().to_bits(), 1.0f64.to_bits());
        assert!(total_loss(&mut tape, s, c, -0.1).is_err());
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let recs = vec![
            LossRecord {
                iteration: 1,
                loss_s: 0.5,
                loss_c: 0.25,
                total: 0.425,
            },
            LossRecord {
                iteration: 2,
                loss_s: 0.1,
                loss_c: 0.2,
                total: 0.13,
            },
        ];
        append_loss_log(&path, &recs[..1]).unwrap();
        append_loss_log(&path, &recs[1..]).unwrap();
        assert_eq!(read_loss_log(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,loss_s,loss_c,total\n"));
    }
}
