//! Synthetic multi-channel brain volumes with nested tumor compartments.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One synthetic case. `voxels` is `[C, D, H, W]` row-major, `mask` is
/// `[D, H, W]` with classes 0..=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub volume_id: u32,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f64>,
    pub mask: Vec<u8>,
}

impl Volume {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.depth * self.plane();
        &self.voxels[c * n..(c + 1) * n]
    }

    pub fn has_tumor(&self) -> bool {
        self.mask.iter().any(|&l| l != 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_volumes: usize,
    /// Fraction of volumes that contain a tumor.
    pub tumor_fraction: f64,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Gaussian noise, relative to the healthy-tissue mean of each channel.
    pub noise_sigma: f64,
    /// Amplitude of the smooth healthy-tissue texture.
    pub texture: f64,
    /// Mean intensity per channel for classes 0..=3.
    pub profiles: Vec<[f64; 4]>,
    /// Per-volume relative jitter of the tumor class means.
    pub contrast_jitter: f64,
    /// Edema radius range in voxels (in-plane).
    pub tumor_radius: (f64, f64),
    /// Tumor half-extent range in slices.
    pub tumor_depth: (f64, f64),
    pub seed: u64,
}

/// Default per-channel profiles for classes (healthy, non-enhancing core,
/// edema, enhancing rim) on four channels resembling T1, contrast-enhanced
/// T1, T2 and FLAIR. The rim is bright only after contrast.
pub const FOUR_CHANNEL_PROFILES: [[f64; 4]; 4] = [
    [100.0, 80.0, 90.0, 85.0],
    [100.0, 80.0, 95.0, 175.0],
    [100.0, 150.0, 160.0, 140.0],
    [100.0, 140.0, 150.0, 135.0],
];

impl GeneratorConfig {
    /// Two-channel (contrast T1 and FLAIR analogues) 16x32x32 volumes.
    pub fn toy(num_volumes: usize, seed: u64) -> Self {
        GeneratorConfig {
            num_volumes,
            tumor_fraction: 0.8,
            channels: 2,
            depth: 16,
            height: 32,
            width: 32,
            noise_sigma: 0.08,
            texture: 0.1,
            profiles: vec![FOUR_CHANNEL_PROFILES[1], FOUR_CHANNEL_PROFILES[3]],
            contrast_jitter: 0.15,
            tumor_radius: (4.0, 8.0),
            tumor_depth: (3.0, 5.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_volumes == 0 {
            return Err(Error::config("num_volumes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tumor_fraction) {
            return Err(Error::config("tumor_fraction must lie in [0, 1]"));
        }
        if self.depth < 8 || self.height < 8 || self.width < 8 || self.channels == 0 {
            return Err(Error::config(format!(
                "degenerate dims {}x{}x{}x{} (need >= 8 per spatial axis)",
                self.channels, self.depth, self.height, self.width
            )));
        }
        if self.profiles.len() != self.channels {
            return Err(Error::config(format!(
                "{} intensity profiles for {} channels",
                self.profiles.len(),
                self.channels
            )));
        }
        if self.profiles.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::config("profile intensities must be positive"));
        }
        let (r0, r1) = self.tumor_radius;
        let (z0, z1) = self.tumor_depth;
        if !(r0 >= 2.0 && r1 >= r0 && z0 >= 1.0 && z1 >= z0) {
            return Err(Error::config("tumor radius/depth ranges invalid"));
        }
        if !(self.noise_sigma >= 0.0 && self.texture >= 0.0 && self.contrast_jitter >= 0.0) {
            return Err(Error::config("noise, texture and jitter must be >= 0"));
        }
        Ok(())
    }

    pub fn tumor_count(&self) -> usize {
        (self.tumor_fraction * self.num_volumes as f64).round() as usize
    }

    /// Volume ids that carry a tumor: the first `round(f * N)` entries of a
    /// seeded permutation, returned sorted.
    pub fn tumor_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.num_volumes as u32).collect();
        ids.shuffle(&mut seed::rng(seed::derive(self.seed, "tumor-assignment")));
        let mut t = ids[..self.tumor_count().min(ids.len())].to_vec();
        t.sort_unstable();
        t
    }
}

fn dilate(region: &[bool], d: usize, h: usize, w: usize) -> Vec<bool> {
    let mut out = region.to_vec();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !region[i] {
                    continue;
                }
                if z > 0 {
                    out[i - h * w] = true;
                }
                if z + 1 < d {
                    out[i + h * w] = true;
                }
                if y > 0 {
                    out[i - w] = true;
                }
                if y + 1 < h {
                    out[i + w] = true;
                }
                if x > 0 {
                    out[i - 1] = true;
                }
                if x + 1 < w {
                    out[i + 1] = true;
                }
            }
        }
    }
    out
}

/// Deterministic in `(config.seed, volume_id)`.
pub fn generate_volume(config: &GeneratorConfig, volume_id: u32) -> Result<Volume> {
    config.validate()?;
    if volume_id as usize >= config.num_volumes {
        return Err(Error::invalid(format!(
            "volume id {volume_id} outside 0..{}",
            config.num_volumes
        )));
    }
    let is_tumor = config.tumor_ids().binary_search(&volume_id).is_ok();
    let mut rng = seed::rng(seed::derive_indexed(config.seed, seed::DATA, u64::from(volume_id)));
    let (c, d, h, w) = (config.channels, config.depth, config.height, config.width);
    let n = d * h * w;

    // Brain ellipsoid, slightly jittered per case.
    let brain_c = [
        (d as f64 - 1.0) / 2.0 + rng.gen_range(-0.5..0.5),
        (h as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0),
        (w as f64 - 1.0) / 2.0 + rng.gen_range(-1.0..1.0),
    ];
    let brain_r = [
        d as f64 * rng.gen_range(0.55..0.65),
        h as f64 * rng.gen_range(0.40..0.46),
        w as f64 * rng.gen_range(0.38..0.44),
    ];
    let mut brain = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = ((z as f64 - brain_c[0]) / brain_r[0]).powi(2)
                    + ((y as f64 - brain_c[1]) / brain_r[1]).powi(2)
                    + ((x as f64 - brain_c[2]) / brain_r[2]).powi(2);
                brain[(z * h + y) * w + x] = q <= 1.0;
            }
        }
    }

    let mut mask = vec![0u8; n];
    if is_tumor {
        let re = rng.gen_range(config.tumor_radius.0..=config.tumor_radius.1);
        let ry = re * rng.gen_range(0.8..1.2);
        let rx = re * rng.gen_range(0.8..1.2);
        let rz = rng.gen_range(config.tumor_depth.0..=config.tumor_depth.1);
        let margin = |r: f64, len: usize| -> (f64, f64) {
            let lo = (r + 1.0).min((len as f64 - 1.0) / 2.0);
            (lo, (len as f64 - 1.0 - lo).max(lo))
        };
        let (zl, zh) = margin(rz, d);
        let (yl, yh) = margin(ry, h);
        let (xl, xh) = margin(rx, w);
        let cz = rng.gen_range(zl..=zh);
        // Pull the in-plane centre toward the brain centre so the tumor sits inside.
        let cy = (rng.gen_range(yl..=yh) + brain_c[1]) / 2.0;
        let cx = (rng.gen_range(xl..=xh) + brain_c[2]) / 2.0;
        let lobes = rng.gen_range(2..=4) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let core_frac = rng.gen_range(0.25..0.4);
        let rim_frac = core_frac + rng.gen_range(0.2..0.3);
        let mut dist = vec![f64::INFINITY; n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (dz, dy, dx) = ((z as f64 - cz) / rz, (y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    let bump = 1.0 + 0.12 * (lobes * dy.atan2(dx) + phase).sin();
                    dist[(z * h + y) * w + x] = (dz * dz + dy * dy + dx * dx).sqrt() * bump;
                }
            }
        }
        // Morphological dilation keeps every compartment shell at least one
        // voxel thick: core touches only rim, rim touches only core/edema.
        let core: Vec<bool> = dist.iter().map(|&r| r < core_frac).collect();
        let core = if core.iter().any(|&b| b) {
            core
        } else {
            let i = (cz.round() as usize * h + cy.round() as usize) * w + cx.round() as usize;
            let mut v = vec![false; n];
            v[i] = true;
            v
        };
        let rim: Vec<bool> = dilate(&core, d, h, w)
            .iter()
            .zip(&dist)
            .map(|(&dl, &r)| dl || r < rim_frac)
            .collect();
        let edema: Vec<bool> = dilate(&rim, d, h, w)
            .iter()
            .zip(&dist)
            .map(|(&dl, &r)| dl || r < 1.0)
            .collect();
        for i in 0..n {
            mask[i] = if core[i] {
                1
            } else if rim[i] {
                3
            } else if edema[i] {
                2
            } else {
                0
            };
            if mask[i] != 0 {
                brain[i] = true;
            }
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut voxels = vec![0.0; c * n];
    for ch in 0..c {
        let profile = config.profiles[ch];
        let gain = rng.gen_range(0.7..1.3);
        let mut means = profile;
        for m in means.iter_mut().skip(1) {
            *m *= 1.0 + config.contrast_jitter * rng.gen_range(-1.0..1.0);
        }
        let freq = [
            rng.gen_range(0.1..0.3),
            rng.gen_range(0.1..0.3),
            rng.gen_range(0.1..0.3),
        ];
        let ph = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        let sigma = config.noise_sigma * profile[0];
        let out = &mut voxels[ch * n..(ch + 1) * n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if !brain[i] {
                        continue;
                    }
                    let tex = ((freq[0] * z as f64 + ph[0]).sin()
                        + (freq[1] * y as f64 + ph[1]).sin()
                        + (freq[2] * x as f64 + ph[2]).sin())
                        / 3.0;
                    let base = means[mask[i] as usize] * (1.0 + config.texture * tex);
                    let v = gain * (base + sigma * normal.sample(&mut rng));
                    // Keep brain voxels strictly positive so zero means background.
                    out[i] = v.max(1e-3 * profile[0]);
                }
            }
        }
    }
    Ok(Volume {
        volume_id,
        channels: c,
        depth: d,
        height: h,
        width: w,
        voxels,
        mask,
    })
}
