//! Static layer plan derived from a [`ModelConfig`], shared by model
//! construction and the shape/parameter report.

use std::fmt::Write as _;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Padding};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvPlan {
    pub name: String,
    pub spec: ConvSpec,
    pub batch_norm: bool,
    pub relu: bool,
    pub bias: bool,
    pub out: [usize; 3],
}

impl ConvPlan {
    pub fn params(&self) -> usize {
        let s = &self.spec;
        let mut n = s.out_channels * s.in_channels * s.kernel_h * s.kernel_w;
        if self.bias {
            n += s.out_channels;
        }
        if self.batch_norm {
            n += 2 * s.out_channels;
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FcPlan {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderPlan {
    pub up: [usize; 3],
    /// (top, left) offsets of the centre crop applied to the skip tensor.
    pub skip_offset: (usize, usize),
    pub concat: [usize; 3],
    pub convs: Vec<ConvPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BranchPlan {
    pub pool: [usize; 3],
    pub conv: ConvPlan,
    pub flat: usize,
    pub fcs: Vec<FcPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plan {
    pub encoder: Vec<Vec<ConvPlan>>,
    pub pools: Vec<[usize; 3]>,
    pub bottom: Vec<ConvPlan>,
    pub decoder: Vec<DecoderPlan>,
    pub head: ConvPlan,
    /// One entry per classification branch, identical up to naming.
    pub branches: Vec<BranchPlan>,
}

fn conv(
    name: String,
    input: [usize; 3],
    out_ch: usize,
    kernel: usize,
    padding: Padding,
    last: bool,
) -> Result<ConvPlan> {
    let spec = ConvSpec::square(input[0], out_ch, kernel, padding);
    let (h, w) = spec.output_size(input[1], input[2]).map_err(|_| {
        Error::config(format!(
            "{name}: {kernel}x{kernel} kernel does not fit {}x{}",
            input[1], input[2]
        ))
    })?;
    Ok(ConvPlan {
        name,
        spec,
        batch_norm: !last,
        relu: !last,
        bias: last,
        out: [out_ch, h, w],
    })
}

pub(crate) fn plan(config: &ModelConfig) -> Result<Plan> {
    let pad = config.padding_mode;
    let (h, w) = config.input_size;
    let mut shape = [config.input_channels, h, w];
    let mut encoder = Vec::new();
    let mut pools = Vec::new();
    let mut skips = Vec::new();
    for level in 0..config.depth {
        let mut convs = Vec::new();
        for i in 0..config.encoder_convs {
            let c = conv(
                format!("enc{level}.conv{i}"),
                shape,
                config.width(level),
                config.kernel_size,
                pad,
                false,
            )?;
            shape = c.out;
            convs.push(c);
        }
        skips.push(shape);
        if shape[1] < 2 || shape[2] < 2 {
            return Err(Error::config(format!(
                "enc{level}: {}x{} too small to pool",
                shape[1], shape[2]
            )));
        }
        shape = [shape[0], shape[1] / 2, shape[2] / 2];
        pools.push(shape);
        encoder.push(convs);
    }
    let mut bottom = Vec::new();
    for i in 0..config.encoder_convs {
        let c = conv(
            format!("bottom.conv{i}"),
            shape,
            config.width(config.depth),
            config.kernel_size,
            pad,
            false,
        )?;
        shape = c.out;
        bottom.push(c);
    }
    let mut decoder = Vec::new();
    for (step, &count) in config.decoder_convs.iter().enumerate() {
        let level = config.depth - 1 - step;
        let up = [shape[0], shape[1] * 2, shape[2] * 2];
        let skip = skips[level];
        if up[1] > skip[1] || up[2] > skip[2] {
            return Err(Error::config(format!(
                "dec{level}: upsampled {}x{} exceeds skip {}x{}",
                up[1], up[2], skip[1], skip[2]
            )));
        }
        let skip_offset = ((skip[1] - up[1]) / 2, (skip[2] - up[2]) / 2);
        shape = [skip[0] + up[0], up[1], up[2]];
        let concat = shape;
        let mut convs = Vec::new();
        for i in 0..count {
            let c = conv(
                format!("dec{level}.conv{i}"),
                shape,
                config.width(level),
                config.decoder_kernel_size,
                pad,
                false,
            )?;
            shape = c.out;
            convs.push(c);
        }
        decoder.push(DecoderPlan {
            up,
            skip_offset,
            concat,
            convs,
        });
    }
    let tap = shape;
    let head = conv("head".into(), tap, config.num_classes, 1, Padding::Same, true)?;

    let b = &config.branch;
    let mut branches = Vec::new();
    for bi in 0..config.num_branches {
        let (kh, kw) = b.pool_kernel;
        let (sh, sw) = b.pool_stride;
        if kh > tap[1] || kw > tap[2] || sh == 0 || sw == 0 || kh == 0 || kw == 0 {
            return Err(Error::config(format!(
                "branch pool {kh}x{kw}/{sh}x{sw} invalid for {}x{} maps",
                tap[1], tap[2]
            )));
        }
        let pool = [tap[0], (tap[1] - kh) / sh + 1, (tap[2] - kw) / sw + 1];
        let conv = conv(
            format!("branch{bi}.conv"),
            pool,
            b.branch_conv_out,
            3,
            Padding::Same,
            false,
        )?;
        let flat = conv.out.iter().product();
        let fcs = (1..=b.fc_widths.len())
            .map(|j| FcPlan {
                name: format!("branch{bi}.fc{j}"),
                inputs: b.fc_input(j, flat),
                outputs: b.fc_widths[j - 1],
                relu: j < b.fc_widths.len(),
            })
            .collect();
        branches.push(BranchPlan { pool, conv, flat, fcs });
    }
    Ok(Plan {
        encoder,
        pools,
        bottom,
        decoder,
        head,
        branches,
    })
}

/// One row of the layer report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    /// Per-image output shape.
    pub output: Vec<usize>,
    pub params: usize,
}

pub(crate) fn shape_trace(config: &ModelConfig) -> Result<Vec<LayerInfo>> {
    let p = plan(config)?;
    let mut rows = Vec::new();
    let conv_row = |c: &ConvPlan| LayerInfo {
        name: c.name.clone(),
        kind: "conv",
        output: c.out.to_vec(),
        params: c.params(),
    };
    for (level, convs) in p.encoder.iter().enumerate() {
        rows.extend(convs.iter().map(conv_row));
        rows.push(LayerInfo {
            name: format!("enc{level}.pool"),
            kind: "maxpool",
            output: p.pools[level].to_vec(),
            params: 0,
        });
    }
    rows.extend(p.bottom.iter().map(conv_row));
    for (step, d) in p.decoder.iter().enumerate() {
        let level = config.depth - 1 - step;
        rows.push(LayerInfo {
            name: format!("dec{level}.up"),
            kind: "upsample",
            output: d.up.to_vec(),
            params: 0,
        });
        rows.push(LayerInfo {
            name: format!("dec{level}.concat"),
            kind: "concat",
            output: d.concat.to_vec(),
            params: 0,
        });
        rows.extend(d.convs.iter().map(conv_row));
    }
    rows.push(conv_row(&p.head));
    for (bi, b) in p.branches.iter().enumerate() {
        rows.push(LayerInfo {
            name: format!("branch{bi}.pool"),
            kind: "meanpool",
            output: b.pool.to_vec(),
            params: 0,
        });
        rows.push(conv_row(&b.conv));
        for fc in &b.fcs {
            rows.push(LayerInfo {
                name: fc.name.clone(),
                kind: "fc",
                output: vec![fc.outputs],
                params: fc.inputs * fc.outputs + fc.outputs,
            });
        }
    }
    Ok(rows)
}

/// Text table of every layer's output shape and parameter count.
pub fn describe(config: &ModelConfig) -> Result<String> {
    let rows = shape_trace(config)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "input: {} x {} x {}  classes: {}  branches: {}  padding: {:?}",
        config.input_channels,
        config.input_size.0,
        config.input_size.1,
        config.num_classes,
        config.num_branches,
        config.padding_mode
    );
    let _ = writeln!(out, "{:<16} {:<9} {:>18} {:>12}", "layer", "kind", "output", "params");
    let mut total = 0;
    for r in &rows {
        let shape = r.output.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let _ = writeln!(out, "{:<16} {:<9} {:>18} {:>12}", r.name, r.kind, shape, r.params);
        total += r.params;
    }
    let _ = writeln!(out, "total parameters: {total}");
    Ok(out)
}

pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    Ok(shape_trace(config)?.iter().map(|r| r.params).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_parameter_count_matches_hand_sum() {
        let c = ModelConfig::toy(2, 32, 2);
        // conv: out*in*9 + 2*out (batch-norm affine); head adds a bias.
        let unet = (8 * 2 * 9 + 16)
            + (8 * 8 * 9 + 16)
            + (16 * 8 * 9 + 32)
            + (16 * 16 * 9 + 32)
            + (32 * 16 * 9 + 64)
            + (32 * 32 * 9 + 64)
            + (16 * 48 * 9 + 32)
            + (16 * 16 * 9 + 32)
            + (8 * 24 * 9 + 16)
            + (8 * 8 * 9 + 16)
            + (2 * 8 + 2);
        // 32x32 -> mean-pool 4/4 -> 8x8, conv 8->8, flatten 512.
        let branch = (8 * 8 * 9 + 16)
            + (512 * 32 + 32)
            + (32 * 16 + 16)
            + 3 * (16 * 16 + 16)
            + ((16 + 32) * 8 + 8)
            + (8 * 2 + 2);
        assert_eq!(unet, 29858);
        assert_eq!(parameter_count(&c).unwrap(), unet + branch);
    }

    #[test]
    fn branch_lists_seven_fc_rows() {
        let report = describe(&ModelConfig::toy(2, 32, 2)).unwrap();
        let fc_rows = report.lines().filter(|l| l.contains(" fc ")).count();
        assert_eq!(fc_rows, 7);
        let multi = describe(&ModelConfig::toy(4, 32, 4)).unwrap();
        assert_eq!(multi.lines().filter(|l| l.contains(" fc ")).count(), 21);
    }

    #[test]
    fn paper_scale_trace_reaches_tap_shape() {
        let c = ModelConfig::paper_scale(2);
        let p = plan(&c).unwrap();
        let tap = p.decoder.last().unwrap().convs.last().unwrap().out;
        assert_eq!(tap, [64, 101, 101]);
        assert_eq!(p.branches[0].pool, [64, 12, 12]);
        assert_eq!(p.branches[0].conv.out, [32, 12, 12]);
        assert_eq!(p.head.out, [2, 101, 101]);
    }

    #[test]
    fn same_padding_keeps_input_size() {
        for size in [16, 32, 48] {
            for depth in 1..=3 {
                let mut c = ModelConfig::toy(3, size, 2);
                c.depth = depth;
                c.decoder_convs = vec![1; depth];
                c.branch.pool_kernel = (2, 2);
                c.branch.pool_stride = (2, 2);
                let p = plan(&c).unwrap();
                assert_eq!(p.head.out, [2, size, size]);
            }
        }
    }
}
