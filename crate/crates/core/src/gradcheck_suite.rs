//! Finite-difference checks for every differentiable tape operation and
//! for the full joint loss of a tiny model.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{classification_loss, compute_pixel_weights, segmentation_loss, total_loss, LossConfig};
use crate::network::{BranchConfig, Model, ModelConfig};
use crate::seed;
use crate::tensor::{
    grad_check, BatchNormConfig, BatchNormStats, ConvSpec, GradCheckReport, NormMode, Padding, Precision, Tape, Tensor,
    Var,
};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type CheckFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCheckCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: CheckFn,
}

impl GradCheckCase {
    pub fn new(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        GradCheckCase {
            name: name.to_string(),
            inputs,
            f: Box::new(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("valid shape")
}

/// Reduces a tensor output to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn projected(
    name: &str,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> GradCheckCase {
    let w = random(out_shape, rng);
    GradCheckCase::new(name, inputs, move |t, v| {
        let y = op(t, v)?;
        project(t, y, &w)
    })
}

/// One case per primitive operation.
pub fn primitive_cases(seed_value: u64) -> Vec<GradCheckCase> {
    let mut rng = seed::rng(seed::derive(seed_value, "gradcheck"));
    let r = &mut rng;
    let mut cases = Vec::new();

    let same = ConvSpec::square(2, 3, 3, Padding::Same);
    cases.push(projected(
        "conv2d",
        vec![random(&[2, 2, 5, 5], r), random(&[3, 2, 3, 3], r), random(&[3], r)],
        &[2, 3, 5, 5],
        r,
        move |t, v| t.conv2d(v[0], v[1], Some(v[2]), same),
    ));
    let strided = ConvSpec {
        stride_h: 2,
        stride_w: 2,
        ..ConvSpec::square(2, 2, 2, Padding::Valid)
    };
    cases.push(projected(
        "conv2d_valid_stride2",
        vec![random(&[1, 2, 6, 6], r), random(&[2, 2, 2, 2], r)],
        &[1, 2, 3, 3],
        r,
        move |t, v| t.conv2d(v[0], v[1], None, strided),
    ));
    cases.push(projected(
        "mean_pool2d",
        vec![random(&[2, 2, 6, 6], r)],
        &[2, 2, 3, 3],
        r,
        |t, v| t.mean_pool2d(v[0], (2, 2), (2, 2)),
    ));
    cases.push(projected(
        "max_pool2d",
        vec![random(&[2, 2, 4, 4], r)],
        &[2, 2, 2, 2],
        r,
        |t, v| t.max_pool2d(v[0], (2, 2), (2, 2)),
    ));
    cases.push(projected(
        "upsample_nearest",
        vec![random(&[1, 2, 3, 3], r)],
        &[1, 2, 6, 6],
        r,
        |t, v| t.upsample_nearest(v[0], 2),
    ));
    cases.push(projected(
        "batch_norm_train",
        vec![random(&[3, 2, 3, 3], r), random(&[2], r), random(&[2], r)],
        &[3, 2, 3, 3],
        r,
        |t, v| {
            let mut stats = BatchNormStats::new(2);
            t.batch_norm(
                v[0],
                v[1],
                v[2],
                &mut stats,
                NormMode::Train,
                BatchNormConfig::default(),
            )
        },
    ));
    let running = BatchNormStats {
        mean: vec![0.1, -0.2],
        var: vec![0.8, 1.3],
    };
    cases.push(projected(
        "batch_norm_infer",
        vec![random(&[2, 2, 3, 3], r), random(&[2], r), random(&[2], r)],
        &[2, 2, 3, 3],
        r,
        move |t, v| {
            let mut stats = running.clone();
            t.batch_norm(
                v[0],
                v[1],
                v[2],
                &mut stats,
                NormMode::Infer,
                BatchNormConfig::default(),
            )
        },
    ));
    cases.push(projected(
        "linear",
        vec![random(&[3, 4], r), random(&[4, 2], r), random(&[2], r)],
        &[3, 2],
        r,
        |t, v| t.linear(v[0], v[1], v[2]),
    ));
    cases.push(projected("relu", vec![random(&[3, 5], r)], &[3, 5], r, |t, v| {
        t.relu(v[0])
    }));
    cases.push(projected(
        "softmax",
        vec![random(&[2, 3, 2, 2], r)],
        &[2, 3, 2, 2],
        r,
        |t, v| t.softmax(v[0], 1),
    ));
    let targets: Vec<usize> = (0..2 * 2 * 2).map(|_| r.gen_range(0..3)).collect();
    let weights: Vec<f64> = (0..8).map(|_| r.gen_range(0.05..1.0)).collect();
    cases.push(GradCheckCase::new(
        "cross_entropy_weighted",
        vec![random(&[2, 3, 2, 2], r)],
        move |t, v| t.cross_entropy(v[0], 1, &targets, &weights),
    ));
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..2)).collect();
    cases.push(GradCheckCase::new(
        "cross_entropy_from_logits",
        vec![random(&[4, 2], r)],
        move |t, v| t.cross_entropy_from_logits(v[0], &labels),
    ));
    cases.push(projected(
        "concat",
        vec![random(&[2, 1, 3], r), random(&[2, 2, 3], r)],
        &[2, 3, 3],
        r,
        |t, v| t.concat(v[0], v[1], 1),
    ));
    cases.push(projected(
        "narrow",
        vec![random(&[2, 4, 3], r)],
        &[2, 2, 3],
        r,
        |t, v| t.narrow(v[0], 1, 1, 2),
    ));
    cases.push(projected("reshape", vec![random(&[2, 3, 2], r)], &[4, 3], r, |t, v| {
        t.reshape(v[0], &[4, 3])
    }));
    cases.push(projected(
        "add",
        vec![random(&[2, 3], r), random(&[2, 3], r)],
        &[2, 3],
        r,
        |t, v| t.add(v[0], v[1]),
    ));
    cases.push(projected(
        "mul",
        vec![random(&[2, 3], r), random(&[2, 3], r)],
        &[2, 3],
        r,
        |t, v| t.mul(v[0], v[1]),
    ));
    cases.push(projected("scale", vec![random(&[5], r)], &[5], r, |t, v| {
        t.scale(v[0], -1.7)
    }));
    cases.push(GradCheckCase::new("sum", vec![random(&[2, 3], r)], |t, v| t.sum(v[0])));
    cases
}

/// Tiny joint model: depth 1, width 2, 8x8 inputs, small branch.
pub fn tiny_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        input_channels: 2,
        input_size: (8, 8),
        depth: 1,
        base_width: 2,
        num_classes,
        padding_mode: Padding::Same,
        kernel_size: 3,
        decoder_kernel_size: 3,
        encoder_convs: 1,
        decoder_convs: vec![1],
        branch: BranchConfig {
            pool_kernel: (2, 2),
            pool_stride: (2, 2),
            branch_conv_out: 2,
            fc_widths: vec![4, 3, 3, 3, 3, 3, 2],
            skip_from: 1,
            skip_to: 5,
        },
        num_branches: ModelConfig::branches_for(num_classes),
        batch_norm: BatchNormConfig::default(),
        precision: Precision::F64,
    }
}

/// `a * Loss_s + (1 - a) * Loss_c` of a tiny model on a random batch of
/// two full, one negative and one weak slice, differentiated with respect
/// to every model parameter.
pub fn composite_case(num_classes: usize, seed_value: u64) -> Result<GradCheckCase> {
    let mut rng = seed::rng(seed::derive_indexed(
        seed_value,
        "gradcheck-composite",
        num_classes as u64,
    ));
    let config = tiny_model_config(num_classes);
    let model = Model::build(config, rng.gen())?;
    let loss = if num_classes == 2 {
        LossConfig::binary()
    } else {
        LossConfig::multiclass()
    };
    let images = random(&[4, 2, 8, 8], &mut rng);
    let mut masks: Vec<Vec<u8>> = (0..2)
        .map(|_| (0..64).map(|_| rng.gen_range(0..num_classes as u8)).collect())
        .collect();
    masks.push(vec![0; 64]);
    let branches = ModelConfig::branches_for(num_classes);
    let labels: Vec<Vec<u8>> = (0..branches).map(|_| vec![1, rng.gen_range(0..2), 0, 1]).collect();
    let weights = compute_pixel_weights(&masks, &loss)?;
    // Zero-initialised biases put dead ReLU rows exactly on the kink, so
    // the check runs at a point with every bias moved off zero.
    let inputs: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| {
            if p.shape().len() == 1 {
                Tensor::from_fn(p.shape(), |i| p.data()[i] + rng.gen_range(0.05..0.25)).expect("same shape")
            } else {
                p.clone()
            }
        })
        .collect();
    let name = if num_classes == 2 {
        "composite_loss_binary"
    } else {
        "composite_loss_multiclass"
    };
    Ok(GradCheckCase::new(name, inputs, move |t, v| {
        let (seg, cls) = model.forward_on(t, v, &images, NormMode::Train)?;
        let sup = t.narrow(seg, 0, 0, masks.len())?;
        let ls = segmentation_loss(t, sup, &masks, &weights, &loss)?;
        let lc = classification_loss(t, &cls, &labels)?;
        total_loss(t, ls, lc, loss.a)
    }))
}

pub fn run_cases(cases: &[GradCheckCase], epsilon: f64, tolerance: f64) -> Vec<SuiteEntry> {
    cases
        .iter()
        .map(|c| SuiteEntry {
            name: c.name.clone(),
            report: grad_check(&c.f, &c.inputs, epsilon, tolerance),
        })
        .collect()
}

/// Every primitive case followed by the binary and multiclass composites.
pub fn run_suite(seed_value: u64, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut cases = primitive_cases(seed_value);
    cases.push(composite_case(2, seed_value)?);
    cases.push(composite_case(4, seed_value)?);
    Ok(run_cases(&cases, DEFAULT_EPSILON, tolerance))
}

pub fn render(entries: &[SuiteEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let r = &e.report;
        let _ = write!(
            out,
            "{:<4} {:<28} max_rel_error={:.3e} checked={}",
            if r.pass { "PASS" } else { "FAIL" },
            e.name,
            r.max_rel_error,
            r.checked
        );
        if let Some(err) = &r.error {
            let _ = write!(out, " error={err}");
        } else if let (false, Some((i, j, a, n))) = (r.pass, r.worst) {
            let _ = write!(out, " worst=input {i} elem {j} analytic {a:.6e} numeric {n:.6e}");
        }
        out.push('\n');
    }
    let passed = entries.iter().filter(|e| e.report.pass).count();
    let _ = writeln!(out, "{passed}/{} checks passed", entries.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_config_is_small() {
        let m = Model::build(tiny_model_config(2), 0).unwrap();
        assert!(m.num_parameters() < 1000);
    }

    #[test]
    fn primitive_cases_pass() {
        let entries = run_cases(&primitive_cases(3), DEFAULT_EPSILON, DEFAULT_TOLERANCE);
        for e in &entries {
            assert!(e.report.pass, "{}: {:?}", e.name, e.report);
        }
    }
}
