use super::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_SCALE: f64 = 100.0;

/// Median of the non-zero entries; the two middle values are averaged for
/// an even count. `None` when every entry is zero.
pub fn nonzero_median(values: &[f64]) -> Option<f64> {
    let mut nz: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return None;
    }
    nz.sort_unstable_by(f64::total_cmp);
    let mid = nz.len() / 2;
    Some(if nz.len() % 2 == 1 {
        nz[mid]
    } else {
        (nz[mid - 1] + nz[mid]) / 2.0
    })
}

/// Scales one channel so that its non-zero median becomes `scale`.
pub fn normalize_channel(values: &mut [f64], scale: f64) -> Result<()> {
    let median = nonzero_median(values).ok_or_else(|| Error::invalid("cannot normalize an all-zero channel"))?;
    if !median.is_finite() || median == 0.0 {
        return Err(Error::Numeric(format!("non-zero median {median} is unusable")));
    }
    for v in values.iter_mut() {
        *v = *v / median * scale;
    }
    Ok(())
}

/// Per-channel `v / median(nonzero(v)) * scale`.
pub fn normalize_intensity(volume: &Volume, scale: f64) -> Result<Volume> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("scale constant {scale} must be positive")));
    }
    let mut out = volume.clone();
    let n = volume.depth * volume.plane();
    for (ch, chunk) in out.voxels.chunks_mut(n).enumerate() {
        normalize_channel(chunk, scale)
            .map_err(|e| Error::invalid(format!("volume {} channel {ch}: {e}", volume.volume_id)))?;
    }
    Ok(out)
}
