use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::describe::{plan, ConvPlan, Plan};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, ConvSpec, NormMode, Tape, Tensor, Var};

#[derive(Debug, Clone)]
struct BnUnit {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct ConvUnit {
    spec: ConvSpec,
    weight: usize,
    bias: Option<usize>,
    bn: Option<BnUnit>,
    relu: bool,
}

#[derive(Debug, Clone)]
struct FcUnit {
    weight: usize,
    bias: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
struct BranchUnit {
    conv: ConvUnit,
    fcs: Vec<FcUnit>,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Vec<ConvUnit>>,
    bottom: Vec<ConvUnit>,
    decoder: Vec<Vec<ConvUnit>>,
    head: ConvUnit,
    branches: Vec<BranchUnit>,
}

/// Joint segmentation / image-level classification network: a U-Net with
/// one classification branch per target tapping its second-to-last layer.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    plan: Plan,
    layout: Layout,
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<BatchNormStats>,
    stat_names: Vec<String>,
}

/// Plain output values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[N, K, H', W']`
    pub seg_logits: Tensor,
    /// One `[N, 2]` tensor per classification branch.
    pub class_logits: Vec<Tensor>,
}

/// A recorded training-mode forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub seg_logits: Var,
    pub class_logits: Vec<Var>,
    param_vars: Vec<Var>,
}

impl ForwardPass {
    pub fn output(&self) -> ForwardOutput {
        ForwardOutput {
            seg_logits: self.tape.value(self.seg_logits).clone(),
            class_logits: self.class_logits.iter().map(|&v| self.tape.value(v).clone()).collect(),
        }
    }

    /// Gradient of every model parameter after `tape.backward`, in
    /// parameter order. `None` where no gradient reached the parameter.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.param_vars
            .iter()
            .map(|&v| self.tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    }
}

enum Stats<'a> {
    Train(&'a mut [BatchNormStats]),
    Infer(&'a [BatchNormStats]),
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<BatchNormStats>,
    stat_names: Vec<String>,
}

impl Builder {
    fn param(&mut self, name: String, shape: &[usize], fan_in: Option<usize>, fill: f64) -> Result<usize> {
        let t = match fan_in {
            Some(f) => {
                let bound = (6.0 / f as f64).sqrt();
                Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))?
            }
            None => Tensor::full(shape, fill)?,
        };
        self.params.push(t);
        self.names.push(name);
        Ok(self.params.len() - 1)
    }

    fn conv(&mut self, prefix: &str, c: &ConvPlan) -> Result<ConvUnit> {
        let s = c.spec;
        let fan_in = s.in_channels * s.kernel_h * s.kernel_w;
        let weight = self.param(
            format!("{prefix}{}.weight", c.name),
            &s.weight_shape(),
            Some(fan_in),
            0.0,
        )?;
        let bias = if c.bias {
            Some(self.param(format!("{prefix}{}.bias", c.name), &[s.out_channels], None, 0.0)?)
        } else {
            None
        };
        let bn = if c.batch_norm {
            let gamma = self.param(format!("{prefix}{}.gamma", c.name), &[s.out_channels], None, 1.0)?;
            let beta = self.param(format!("{prefix}{}.beta", c.name), &[s.out_channels], None, 0.0)?;
            self.stats.push(BatchNormStats::new(s.out_channels));
            self.stat_names.push(format!("{prefix}{}.bn", c.name));
            Some(BnUnit {
                gamma,
                beta,
                stats: self.stats.len() - 1,
            })
        } else {
            None
        };
        Ok(ConvUnit {
            spec: s,
            weight,
            bias,
            bn,
            relu: c.relu,
        })
    }
}

impl Model {
    /// Builds the network with fan-in scaled uniform weights drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = plan(&config)?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            names: Vec::new(),
            stats: Vec::new(),
            stat_names: Vec::new(),
        };
        let encoder = plan
            .encoder
            .iter()
            .map(|level| level.iter().map(|c| b.conv("", c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let bottom = plan.bottom.iter().map(|c| b.conv("", c)).collect::<Result<Vec<_>>>()?;
        let decoder = plan
            .decoder
            .iter()
            .map(|d| d.convs.iter().map(|c| b.conv("", c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let head = b.conv("", &plan.head)?;
        let mut branches = Vec::new();
        for bp in &plan.branches {
            let conv = b.conv("", &bp.conv)?;
            let mut fcs = Vec::new();
            for fc in &bp.fcs {
                let weight = b.param(
                    format!("{}.weight", fc.name),
                    &[fc.inputs, fc.outputs],
                    Some(fc.inputs),
                    0.0,
                )?;
                let bias = b.param(format!("{}.bias", fc.name), &[fc.outputs], None, 0.0)?;
                fcs.push(FcUnit {
                    weight,
                    bias,
                    relu: fc.relu,
                });
            }
            branches.push(BranchUnit { conv, fcs });
        }
        Ok(Model {
            config,
            plan,
            layout: Layout {
                encoder,
                bottom,
                decoder,
                head,
                branches,
            },
            params: b.params,
            names: b.names,
            stats: b.stats,
            stat_names: b.stat_names,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_branches(&self) -> usize {
        self.layout.branches.len()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn bn_stats(&self) -> &[BatchNormStats] {
        &self.stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BatchNormStats] {
        &mut self.stats
    }

    pub fn bn_names(&self) -> &[String] {
        &self.stat_names
    }

    /// Output spatial size of the segmentation head.
    pub fn output_size(&self) -> (usize, usize) {
        (self.plan.head.out[1], self.plan.head.out[2])
    }

    /// Layer-by-layer shape and parameter report.
    pub fn describe(&self) -> Result<String> {
        super::describe::describe(&self.config)
    }

    /// Forward pass recording a tape. `Train` normalizes with batch
    /// statistics and updates the running averages.
    pub fn forward(&mut self, images: &Tensor, mode: NormMode) -> Result<ForwardPass> {
        let mut tape = Tape::new().with_precision(self.config.precision);
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(true)))
            .collect();
        let stats = match mode {
            NormMode::Train => Stats::Train(&mut self.stats),
            NormMode::Infer => Stats::Infer(&self.stats),
        };
        let (seg, cls) = run(
            &self.config,
            &self.plan,
            &self.layout,
            &mut tape,
            &param_vars,
            stats,
            images,
        )?;
        Ok(ForwardPass {
            tape,
            seg_logits: seg,
            class_logits: cls,
            param_vars,
        })
    }

    /// Inference with running statistics; records nothing.
    pub fn infer(&self, images: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::inference().with_precision(self.config.precision);
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let (seg, cls) = run(
            &self.config,
            &self.plan,
            &self.layout,
            &mut tape,
            &param_vars,
            Stats::Infer(&self.stats),
            images,
        )?;
        Ok(ForwardOutput {
            seg_logits: tape.value(seg).clone(),
            class_logits: cls.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Runs the network on caller-owned parameter vars (one per
    /// [`Model::params`] entry). `Train` uses batch statistics but leaves the
    /// model's running averages untouched.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        images: &Tensor,
        mode: NormMode,
    ) -> Result<(Var, Vec<Var>)> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameter vars for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let mut scratch = self.stats.clone();
        let stats = match mode {
            NormMode::Train => Stats::Train(&mut scratch),
            NormMode::Infer => Stats::Infer(&self.stats),
        };
        run(&self.config, &self.plan, &self.layout, tape, params, stats, images)
    }

    /// Per-pixel argmax label maps (row-major `H' x W'`) for `[N,C,H,W]` images.
    pub fn predict_mask(&self, images: &Tensor) -> Result<Vec<Vec<u8>>> {
        argmax_labels(&self.infer(images)?.seg_logits)
    }

    /// Replaces parameters and running statistics by name; every name must match.
    pub(crate) fn load_state(
        &mut self,
        tensors: &[(String, Tensor)],
        stats: &[(String, BatchNormStats)],
    ) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.params.iter_mut()) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t.clone();
        }
        for (name, slot) in self.stat_names.iter().zip(self.stats.iter_mut()) {
            let (_, s) = stats
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing statistics {name}")))?;
            if s.channels() != slot.channels() {
                return Err(Error::format(
                    "checkpoint",
                    format!("statistics {name} channel mismatch"),
                ));
            }
            *slot = s.clone();
        }
        Ok(())
    }
}

fn apply_conv(
    tape: &mut Tape,
    pv: &[Var],
    x: Var,
    u: &ConvUnit,
    stats: &mut Stats<'_>,
    config: &ModelConfig,
) -> Result<Var> {
    let mut y = tape.conv2d(x, pv[u.weight], u.bias.map(|b| pv[b]), u.spec)?;
    if let Some(bn) = &u.bn {
        let (g, b) = (pv[bn.gamma], pv[bn.beta]);
        y = match stats {
            Stats::Train(s) => tape.batch_norm(y, g, b, &mut s[bn.stats], NormMode::Train, config.batch_norm)?,
            Stats::Infer(s) => {
                let mut frozen = s[bn.stats].clone();
                tape.batch_norm(y, g, b, &mut frozen, NormMode::Infer, config.batch_norm)?
            }
        };
    }
    if u.relu {
        y = tape.relu(y)?;
    }
    Ok(y)
}

fn run(
    config: &ModelConfig,
    plan: &Plan,
    layout: &Layout,
    tape: &mut Tape,
    pv: &[Var],
    mut stats: Stats<'_>,
    images: &Tensor,
) -> Result<(Var, Vec<Var>)> {
    let s = images.shape();
    let (h, w) = config.input_size;
    if s.len() != 4 || s[1] != config.input_channels || s[2] != h || s[3] != w {
        return Err(Error::shape(format!(
            "model expects [N, {}, {h}, {w}] images, got {s:?}",
            config.input_channels
        )));
    }
    let n = s[0];
    let mut x = tape.constant(images.clone());
    let mut skips = Vec::with_capacity(layout.encoder.len());
    for level in &layout.encoder {
        for u in level {
            x = apply_conv(tape, pv, x, u, &mut stats, config)?;
        }
        skips.push(x);
        x = tape.max_pool2d(x, (2, 2), (2, 2))?;
    }
    for u in &layout.bottom {
        x = apply_conv(tape, pv, x, u, &mut stats, config)?;
    }
    for ((units, dp), skip) in layout.decoder.iter().zip(&plan.decoder).zip(skips.iter().rev()) {
        x = tape.upsample_nearest(x, 2)?;
        let mut sk = *skip;
        if tape.shape(sk)[2..] != dp.up[1..] {
            let (top, left) = dp.skip_offset;
            sk = tape.narrow(sk, 2, top, dp.up[1])?;
            sk = tape.narrow(sk, 3, left, dp.up[2])?;
        }
        x = tape.concat(sk, x, 1)?;
        for u in units {
            x = apply_conv(tape, pv, x, u, &mut stats, config)?;
        }
    }
    let tap = x;
    let seg = apply_conv(tape, pv, tap, &layout.head, &mut stats, config)?;

    let b = &config.branch;
    let mut class_logits = Vec::with_capacity(layout.branches.len());
    for (unit, bp) in layout.branches.iter().zip(&plan.branches) {
        let mut y = tape.mean_pool2d(tap, b.pool_kernel, b.pool_stride)?;
        y = apply_conv(tape, pv, y, &unit.conv, &mut stats, config)?;
        y = tape.reshape(y, &[n, bp.flat])?;
        let mut outs: Vec<Var> = Vec::with_capacity(unit.fcs.len());
        for (j, fc) in unit.fcs.iter().enumerate() {
            // Layer j (0-based) reads the concatenation of the two skip
            // endpoints when it follows `skip_to`.
            let input = if j == b.skip_to {
                tape.concat(outs[b.skip_to - 1], outs[b.skip_from - 1], 1)?
            } else {
                y
            };
            y = tape.linear(input, pv[fc.weight], pv[fc.bias])?;
            if fc.relu {
                y = tape.relu(y)?;
            }
            outs.push(y);
        }
        class_logits.push(y);
    }
    Ok((seg, class_logits))
}

/// Row-major argmax over axis 1 of `[N, K, H, W]` logits; ties go to the
/// lower class index.
pub fn argmax_labels(seg_logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let s = seg_logits.shape();
    if s.len() != 4 || s[1] > u8::MAX as usize + 1 {
        return Err(Error::shape(format!("expected [N,K,H,W] logits, got {s:?}")));
    }
    let (n, k, p) = (s[0], s[1], s[2] * s[3]);
    let x = seg_logits.data();
    Ok((0..n)
        .map(|i| {
            (0..p)
                .map(|j| {
                    let mut best = 0;
                    for c in 1..k {
                        if x[(i * k + c) * p + j] > x[(i * k + best) * p + j] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}
