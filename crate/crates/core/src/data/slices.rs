//! Axial slice extraction and the `MSVD` blob format.
//!
//! Blob layout, little-endian:
//!
//! ```text
//! magic     4 bytes "MSVD"
//! version   u32 (1)
//! rank      u32, then rank x u32 dims (C, H, W for a slice; C, D, H, W for a volume)
//! dtype     u8  (1 = f32)
//! payload   prod(dims) x f32
//! has_mask  u8  (0 or 1)
//! mask      prod(dims[1..]) x u8 labels, present when has_mask = 1
//! ```

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};
use crate::network::checkpoint::Reader;
use crate::sampling::{Annotation, SliceRecord};

pub const BLOB_MAGIC: &[u8; 4] = b"MSVD";
pub const BLOB_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// One axial slice: image `[C, H, W]` and optional label mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceData {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub mask: Option<Vec<u8>>,
}

impl SliceData {
    /// Per-class presence flags for classes 1..=3; `None` without a mask.
    pub fn presence(&self) -> Option<Vec<bool>> {
        self.mask.as_ref().map(|m| presence_of(m))
    }

    pub fn to_blob(&self) -> Result<Vec<u8>> {
        encode_blob(
            &[self.channels, self.height, self.width],
            &self.image,
            self.mask.as_deref(),
        )
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let (dims, image, mask) = decode_blob(bytes)?;
        if dims.len() != 3 {
            return Err(Error::format("slice blob", format!("rank {} instead of 3", dims.len())));
        }
        Ok(SliceData {
            channels: dims[0],
            height: dims[1],
            width: dims[2],
            image,
            mask,
        })
    }
}

pub fn presence_of(mask: &[u8]) -> Vec<bool> {
    let mut p = vec![false; 3];
    for &l in mask {
        if (1..=3).contains(&l) {
            p[l as usize - 1] = true;
        }
    }
    p
}

pub fn encode_blob(dims: &[usize], payload: &[f64], mask: Option<&[u8]>) -> Result<Vec<u8>> {
    let numel: usize = dims.iter().product();
    if payload.len() != numel {
        return Err(Error::shape(format!(
            "payload of {} values for dims {dims:?}",
            payload.len()
        )));
    }
    let spatial: usize = dims.iter().skip(1).product();
    if let Some(m) = mask {
        if m.len() != spatial {
            return Err(Error::shape(format!("mask of {} labels for dims {dims:?}", m.len())));
        }
    }
    let mut out = Vec::with_capacity(16 + 4 * numel + spatial);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format("blob", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for &v in payload {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match mask {
        Some(m) => {
            out.push(1);
            out.extend_from_slice(m);
        }
        None => out.push(0),
    }
    Ok(out)
}

pub fn decode_blob(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>, Option<Vec<u8>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != BLOB_MAGIC {
        return Err(Error::format("blob", "bad magic"));
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(Error::format("blob", format!("unsupported version {version}")));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format("blob", format!("implausible rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format("blob", format!("unknown dtype tag {dtype}")));
    }
    let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let numel = numel.ok_or_else(|| Error::format("blob", "size overflow"))?;
    let raw = r.take(
        numel
            .checked_mul(4)
            .ok_or_else(|| Error::format("blob", "size overflow"))?,
    )?;
    let payload = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let mask = match r.u8()? {
        0 => None,
        1 => Some(r.take(dims[1..].iter().product())?.to_vec()),
        f => return Err(Error::format("blob", format!("bad mask flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::format("blob", "trailing bytes"));
    }
    Ok((dims, payload, mask))
}

/// How a volume's slices enter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Tumor slices keep their mask.
    Fa,
    /// Tumor slices keep only slice-level labels.
    Wa,
    /// Only tumor-free slices are emitted.
    NegativeEligible,
}

pub fn slice_path(volume_id: u32, slice_index: usize) -> String {
    format!("slices/v{volume_id:04}_s{slice_index:03}.msvd")
}

/// One record per axial slice (fewer for `NegativeEligible`).
pub fn extract_slices(volume: &Volume, role: Role) -> Vec<(SliceRecord, SliceData)> {
    let (h, w, plane) = (volume.height, volume.width, volume.plane());
    let per_channel = volume.depth * plane;
    let mut out = Vec::with_capacity(volume.depth);
    for z in 0..volume.depth {
        let mask = volume.mask[z * plane..(z + 1) * plane].to_vec();
        let presence = presence_of(&mask);
        let tumor = presence.iter().any(|&p| p);
        let annotation = match (tumor, role) {
            (false, _) => Annotation::Negative,
            (true, Role::Fa) => Annotation::Full,
            (true, Role::Wa) => Annotation::Weak,
            (true, Role::NegativeEligible) => continue,
        };
        let mut image = Vec::with_capacity(volume.channels * plane);
        for c in 0..volume.channels {
            let start = c * per_channel + z * plane;
            image.extend_from_slice(&volume.voxels[start..start + plane]);
        }
        let keep_mask = role == Role::Fa || !tumor;
        out.push((
            SliceRecord {
                volume_id: volume.volume_id,
                slice_index: z as u32,
                data_path: slice_path(volume.volume_id, z),
                annotation,
                subclass_presence: presence,
            },
            SliceData {
                channels: volume.channels,
                height: h,
                width: w,
                image,
                mask: keep_mask.then_some(mask),
            },
        ));
    }
    out
}

/// Re-labels fully annotated records for a fold role. Weak records keep
/// their slice-level flags; the mask is dropped when the data is loaded.
pub fn apply_role(record: &SliceRecord, role: Role) -> Option<SliceRecord> {
    let mut r = record.clone();
    match (role, record.annotation) {
        (Role::Wa, Annotation::Full) => r.annotation = Annotation::Weak,
        (Role::NegativeEligible, a) if a != Annotation::Negative => return None,
        _ => {}
    }
    Some(r)
}
