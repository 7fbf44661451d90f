//! Spatial kernels: convolution via im2col + GEMM, pooling and upsampling.
//!
//! All kernels work on flat row-major buffers laid out as `[planes, H, W]`
//! (for pooling) or `[N, C, H, W]` (for convolution) and are wrapped by the
//! differentiable ops in [`super::Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output spatial size is `ceil(input / stride)`; zero padding split
    /// evenly with the extra row/column at the bottom/right.
    Same,
    /// No padding: `floor((input - kernel) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Square kernel, unit stride.
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, padding: Padding) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: 1,
            stride_w: 1,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_channels,
            self.kernel_h,
            self.kernel_w,
            self.stride_h,
            self.stride_w,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("conv dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_len(h, self.kernel_h, self.stride_h, self.padding)?,
            out_len(w, self.kernel_w, self.stride_w, self.padding)?,
        ))
    }

    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        self.validate()?;
        let (ho, wo) = self.output_size(h, w)?;
        let (pt, pl) = match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => (
                pad_before(h, ho, self.kernel_h, self.stride_h),
                pad_before(w, wo, self.kernel_w, self.stride_w),
            ),
        };
        Ok(Geometry {
            c: self.in_channels,
            h,
            w,
            kh: self.kernel_h,
            kw: self.kernel_w,
            sh: self.stride_h,
            sw: self.stride_w,
            pt,
            pl,
            ho,
            wo,
        })
    }
}

fn out_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Same => Ok(input.div_ceil(stride)),
        Padding::Valid => {
            if kernel > input {
                Err(Error::shape(format!(
                    "kernel {kernel} larger than input {input} with valid padding"
                )))
            } else {
                Ok((input - kernel) / stride + 1)
            }
        }
    }
}

fn pad_before(input: usize, output: usize, kernel: usize, stride: usize) -> usize {
    let needed = (output - 1) * stride + kernel;
    needed.saturating_sub(input) / 2
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    pl: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position `o` along one axis at kernel offset `k`.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < len).then_some(pos)
    }
}

fn im2col(img: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match Geometry::source(oy, ki, g.sh, g.pt, g.h) {
                        None => line.fill(0.0),
                        Some(y) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match Geometry::source(ox, kj, g.sw, g.pl, g.w) {
                                    Some(x) => plane[y * g.w + x],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &Geometry, img: &mut [f64]) {
    let p = g.cols();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(y) = Geometry::source(oy, ki, g.sh, g.pt, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(x) = Geometry::source(ox, kj, g.sw, g.pl, g.w) {
                            plane[y * g.w + x] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size m×k and `op(b)` k×n.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct ConvOutput {
    pub data: Vec<f64>,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<ConvOutput> {
    let g = spec.geometry(h, w)?;
    let (r, p, o) = (g.rows(), g.cols(), spec.out_channels);
    let mut out = vec![0.0; n * o * p];
    let mut cols = vec![0.0; r * p];
    let in_stride = g.c * h * w;
    for i in 0..n {
        im2col(&input[i * in_stride..(i + 1) * in_stride], &g, &mut cols);
        let dst = &mut out[i * o * p..(i + 1) * o * p];
        gemm(o, r, p, weight, false, &cols, false, 0.0, dst);
        if let Some(b) = bias {
            for (oc, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    }
    Ok(ConvOutput {
        data: out,
        ho: g.ho,
        wo: g.wo,
    })
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    spec: &ConvSpec,
    grad_out: &[f64],
    want: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = spec.geometry(h, w)?;
    let (r, p, o) = (g.rows(), g.cols(), spec.out_channels);
    let in_stride = g.c * h * w;
    let mut d_input = want.0.then(|| vec![0.0; n * in_stride]);
    let mut d_weight = want.1.then(|| vec![0.0; o * r]);
    let mut d_bias = want.2.then(|| vec![0.0; o]);
    let mut cols = vec![0.0; r * p];
    for i in 0..n {
        let dout = &grad_out[i * o * p..(i + 1) * o * p];
        if let Some(db) = d_bias.as_mut() {
            for (oc, row) in dout.chunks(p).enumerate() {
                db[oc] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            im2col(&input[i * in_stride..(i + 1) * in_stride], &g, &mut cols);
            gemm(o, p, r, dout, false, &cols, true, 1.0, dw);
        }
        if let Some(di) = d_input.as_mut() {
            gemm(r, o, p, weight, true, dout, false, 0.0, &mut cols);
            col2im_add(&cols, &g, &mut di[i * in_stride..(i + 1) * in_stride]);
        }
    }
    Ok(ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

/// Window geometry for pooling with the valid (drop incomplete windows) rule.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeometry {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeometry {
    pub fn new(h: usize, w: usize, kernel: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::invalid("pool kernel and stride must be >= 1"));
        }
        if kh > h || kw > w {
            return Err(Error::shape(format!("pool kernel {kh}x{kw} larger than input {h}x{w}")));
        }
        Ok(PoolGeometry {
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ho: (h - kh) / sh + 1,
            wo: (w - kw) / sw + 1,
        })
    }
}

pub(crate) fn mean_pool_forward(input: &[f64], planes: usize, g: &PoolGeometry) -> Vec<f64> {
    let area = (g.kh * g.kw) as f64;
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    for plane in input.chunks(g.h * g.w).take(planes) {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut s = 0.0;
                for ky in 0..g.kh {
                    let row = (oy * g.sh + ky) * g.w + ox * g.sw;
                    s += plane[row..row + g.kw].iter().sum::<f64>();
                }
                out.push(s / area);
            }
        }
    }
    out
}

pub(crate) fn mean_pool_backward(grad_out: &[f64], planes: usize, g: &PoolGeometry) -> Vec<f64> {
    let area = (g.kh * g.kw) as f64;
    let mut d = vec![0.0; planes * g.h * g.w];
    for (pi, plane) in d.chunks_mut(g.h * g.w).enumerate() {
        let go = &grad_out[pi * g.ho * g.wo..(pi + 1) * g.ho * g.wo];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let v = go[oy * g.wo + ox] / area;
                for ky in 0..g.kh {
                    let row = (oy * g.sh + ky) * g.w + ox * g.sw;
                    plane[row..row + g.kw].iter_mut().for_each(|x| *x += v);
                }
            }
        }
    }
    d
}

/// Window maxima plus the flat input index of the first (row-major) maximum.
pub(crate) fn max_pool_forward(input: &[f64], planes: usize, g: &PoolGeometry) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(planes * g.ho * g.wo);
    for pi in 0..planes {
        let base = pi * g.h * g.w;
        let plane = &input[base..base + g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let idx = (oy * g.sh + ky) * g.w + ox * g.sw + kx;
                        if plane[idx] > best || best_idx == usize::MAX {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(base + best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_nearest(input: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for plane in input.chunks(h * w).take(planes) {
        for y in 0..ho {
            let src = &plane[(y / f) * w..(y / f + 1) * w];
            for x in 0..wo {
                out.push(src[x / f]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut d = vec![0.0; planes * h * w];
    for (pi, plane) in d.chunks_mut(h * w).enumerate() {
        let go = &grad_out[pi * ho * wo..(pi + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                plane[(y / f) * w + x / f] += go[y * wo + x];
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as an oracle for the im2col path.
    fn naive_conv(
        input: &[f64],
        n: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        bias: &[f64],
        s: &ConvSpec,
    ) -> (Vec<f64>, usize, usize) {
        let (ho, wo) = s.output_size(h, w).unwrap();
        let g = s.geometry(h, w).unwrap();
        let mut out = vec![0.0; n * s.out_channels * ho * wo];
        for i in 0..n {
            for oc in 0..s.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[oc];
                        for ic in 0..s.in_channels {
                            for ky in 0..s.kernel_h {
                                for kx in 0..s.kernel_w {
                                    let y = (oy * s.stride_h + ky) as isize - g.pt as isize;
                                    let x = (ox * s.stride_w + kx) as isize - g.pl as isize;
                                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                        continue;
                                    }
                                    let iv = input[((i * s.in_channels + ic) * h + y as usize) * w + x as usize];
                                    let wv = weight[((oc * s.in_channels + ic) * s.kernel_h + ky) * s.kernel_w + kx];
                                    acc += iv * wv;
                                }
                            }
                        }
                        out[((i * s.out_channels + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let cases = [
            (ConvSpec::square(2, 3, 3, Padding::Same), 5, 6),
            (ConvSpec::square(1, 2, 2, Padding::Same), 4, 5),
            (ConvSpec::square(3, 1, 3, Padding::Valid), 5, 5),
            (
                ConvSpec {
                    stride_h: 2,
                    stride_w: 3,
                    ..ConvSpec::square(2, 2, 3, Padding::Same)
                },
                7,
                8,
            ),
        ];
        for (spec, h, w) in cases {
            let n = 2;
            let input: Vec<f64> = (0..n * spec.in_channels * h * w)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
                .collect();
            let weight: Vec<f64> = (0..spec.weight_shape().iter().product::<usize>())
                .map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2)
                .collect();
            let bias: Vec<f64> = (0..spec.out_channels).map(|i| i as f64 * 0.1).collect();
            let got = conv2d_forward(&input, n, h, w, &weight, Some(&bias), &spec).unwrap();
            let (want, ho, wo) = naive_conv(&input, n, h, w, &weight, &bias, &spec);
            assert_eq!((got.ho, got.wo), (ho, wo));
            for (a, b) in got.data.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {spec:?}");
            }
        }
    }

    #[test]
    fn same_padding_output_sizes() {
        for k in 1..=5 {
            let s = ConvSpec::square(1, 1, k, Padding::Same);
            assert_eq!(s.output_size(13, 8).unwrap(), (13, 8));
        }
        let strided = ConvSpec {
            stride_h: 2,
            stride_w: 3,
            ..ConvSpec::square(1, 1, 3, Padding::Same)
        };
        assert_eq!(strided.output_size(7, 10).unwrap(), (4, 4));
        let valid = ConvSpec {
            stride_h: 2,
            stride_w: 2,
            ..ConvSpec::square(1, 1, 3, Padding::Valid)
        };
        assert_eq!(valid.output_size(9, 10).unwrap(), (4, 4));
        assert!(ConvSpec::square(1, 1, 5, Padding::Valid).output_size(4, 9).is_err());
    }

    #[test]
    fn pool_geometry_drops_incomplete_windows() {
        let g = PoolGeometry::new(101, 101, (8, 8), (8, 8)).unwrap();
        assert_eq!((g.ho, g.wo), (12, 12));
        assert!(PoolGeometry::new(3, 3, (4, 2), (1, 1)).is_err());
        assert!(PoolGeometry::new(3, 3, (0, 2), (1, 1)).is_err());
    }
}
