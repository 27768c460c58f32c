//! Value-level kernels shared by the tape's forward and backward passes.

use super::{AutodiffError, Tensor};

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    /// Hadamard product.
    Mul,
    Sigmoid,
    Tanh,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output shape of a binary op. Equal shapes, or one side a scalar.
pub(crate) fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>, AutodiffError> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_with(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = if a.len() == b.len() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.is_scalar() {
        let x = a.item();
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let y = b.item();
        a.data().iter().map(|&x| f(x, y)).collect()
    };
    Tensor::new(shape, data).expect("shape checked")
}

/// Applies an elementwise operation. Unary kinds ignore `b`; binary kinds require it.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor, AutodiffError> {
    match (op.is_binary(), b) {
        (true, None) => Err(AutodiffError::MissingOperand(op.name())),
        (true, Some(b)) => {
            let shape = binary_shape(op.name(), a, b)?;
            Ok(match op {
                ElementwiseOp::Add => zip_with(a, b, shape, |x, y| x + y),
                ElementwiseOp::Sub => zip_with(a, b, shape, |x, y| x - y),
                _ => zip_with(a, b, shape, |x, y| x * y),
            })
        }
        (false, _) => Ok(match op {
            ElementwiseOp::Sigmoid => a.map(sigmoid),
            _ => a.map(f64::tanh),
        }),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<ConvDims, AutodiffError> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, kcin, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(AutodiffError::EvenKernel { kh, kw });
    }
    if kcin != cin {
        return Err(AutodiffError::ChannelMismatch {
            input: cin,
            kernel: kcin,
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d bias",
                left: b.shape().to_vec(),
                right: vec![cout],
            });
        }
    }
    Ok(ConvDims {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
    })
}

/// Input rows/columns that kernel tap `d` reads for output positions `0..n`,
/// under "same" zero padding: returns the valid output range.
#[inline]
fn valid_range(n: usize, d: usize, half: usize) -> (usize, usize) {
    // input index = out + d - half must lie in [0, n)
    let lo = half.saturating_sub(d);
    let hi = (n + half).saturating_sub(d).min(n);
    (lo, hi)
}

/// Stride-1 2-D convolution with "same" zero padding.
///
/// `input` is `[H, W, Cin]`, `kernel` is `[kh, kw, Cin, Cout]`, `bias` is `[Cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, AutodiffError> {
    let d = conv_dims(input, kernel, bias)?;
    let mut out = vec![0.0; d.h * d.w * d.cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(d.cout) {
            px.copy_from_slice(b.data());
        }
    }
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { conv2d_forward_avx2(&d, input.data(), kernel.data(), &mut out) };
        return Tensor::new(vec![d.h, d.w, d.cout], out);
    }
    conv2d_forward(&d, input.data(), kernel.data(), &mut out);
    Tensor::new(vec![d.h, d.w, d.cout], out)
}

// Wider vectors only; no FMA, so every lane performs the same rounded
// multiply and add as the portable path and results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv2d_forward_avx2(d: &ConvDims, x: &[f64], k: &[f64], out: &mut [f64]) {
    conv2d_forward(d, x, k, out)
}

#[inline(always)]
fn conv2d_forward(d: &ConvDims, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (hh, hw) = (d.kh / 2, d.kw / 2);
    for dh in 0..d.kh {
        let (r0, r1) = valid_range(d.h, dh, hh);
        for dw in 0..d.kw {
            let (c0, c1) = valid_range(d.w, dw, hw);
            let tap = &k[(dh * d.kw + dw) * d.cin * d.cout..(dh * d.kw + dw + 1) * d.cin * d.cout];
            for r in r0..r1 {
                let ir = r + dh - hh;
                for c in c0..c1 {
                    let ic = c + dw - hw;
                    let xin = &x[(ir * d.w + ic) * d.cin..(ir * d.w + ic + 1) * d.cin];
                    let o = &mut out[(r * d.w + c) * d.cout..(r * d.w + c + 1) * d.cout];
                    for (&xv, row) in xin.iter().zip(tap.chunks_exact(d.cout)) {
                        if xv == 0.0 {
                            continue;
                        }
                        for (ov, &kv) in o.iter_mut().zip(row) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent partial sums.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias, given the
/// output gradient.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), AutodiffError> {
    let d = conv_dims(input, kernel, None)?;
    if grad_out.shape() != [d.h, d.w, d.cout] {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d backward",
            left: grad_out.shape().to_vec(),
            right: vec![d.h, d.w, d.cout],
        });
    }
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; d.cout];
    for px in g.chunks_exact(d.cout) {
        for (b, &v) in gb.iter_mut().zip(px) {
            *b += v;
        }
    }
    #[cfg(target_arch = "x86_64")]
    let done = if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { conv2d_backward_avx2(&d, x, k, g, &mut gx, &mut gk) };
        true
    } else {
        false
    };
    #[cfg(not(target_arch = "x86_64"))]
    let done = false;
    if !done {
        conv2d_backward_impl(&d, x, k, g, &mut gx, &mut gk);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![d.cout], gb)?,
    ))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv2d_backward_avx2(d: &ConvDims, x: &[f64], k: &[f64], g: &[f64], gx: &mut [f64], gk: &mut [f64]) {
    conv2d_backward_impl(d, x, k, g, gx, gk)
}

#[inline(always)]
fn conv2d_backward_impl(d: &ConvDims, x: &[f64], k: &[f64], g: &[f64], gx: &mut [f64], gk: &mut [f64]) {
    let (hh, hw) = (d.kh / 2, d.kw / 2);
    let tap_len = d.cin * d.cout;
    for dh in 0..d.kh {
        let (r0, r1) = valid_range(d.h, dh, hh);
        for dw in 0..d.kw {
            let (c0, c1) = valid_range(d.w, dw, hw);
            let t0 = (dh * d.kw + dw) * tap_len;
            let tap = &k[t0..t0 + tap_len];
            let gtap = &mut gk[t0..t0 + tap_len];
            for r in r0..r1 {
                let ir = r + dh - hh;
                for c in c0..c1 {
                    let ic = c + dw - hw;
                    let gpx = &g[(r * d.w + c) * d.cout..(r * d.w + c + 1) * d.cout];
                    let xo = (ir * d.w + ic) * d.cin;
                    let rows = tap.chunks_exact(d.cout).zip(gtap.chunks_exact_mut(d.cout));
                    let px = gx[xo..xo + d.cin].iter_mut().zip(&x[xo..xo + d.cin]);
                    for ((row, grow), (gxv, &xv)) in rows.zip(px) {
                        *gxv += dot(row, gpx);
                        if xv != 0.0 {
                            for (gkv, &gv) in grow.iter_mut().zip(gpx) {
                                *gkv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let z = Tensor::zeros(&[2, 3]);
        let s = elementwise(ElementwiseOp::Sigmoid, &z, None).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let z = Tensor::zeros(&[4]);
        let t = elementwise(ElementwiseOp::Tanh, &z, None).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hadamard_hand_case() {
        let a = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        let b = Tensor::from_slice(&[4.0, 5.0, 6.0]);
        let c = elementwise(ElementwiseOp::Mul, &a, Some(&b)).unwrap();
        assert_eq!(c.data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn scalar_broadcasts_over_tensor() {
        let a = Tensor::scalar(2.0);
        let b = Tensor::from_slice(&[1.0, -1.0]);
        let c = elementwise(ElementwiseOp::Sub, &a, Some(&b)).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0]);
        assert_eq!(c.shape(), &[2]);
    }

    #[test]
    fn binary_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        match elementwise(ElementwiseOp::Add, &a, Some(&b)) {
            Err(AutodiffError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_without_operand_rejected() {
        let a = Tensor::zeros(&[2]);
        assert!(elementwise(ElementwiseOp::Mul, &a, None).is_err());
    }

    /// Direct transcription of the padded convolution sum, used as an oracle.
    fn conv_reference(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, _, cout) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        let mut out = Tensor::zeros(&[h, w, cout]);
        for r in 0..h {
            for c in 0..w {
                for co in 0..cout {
                    let mut acc = bias.data()[co];
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let ir = r as isize + dh as isize - (kh / 2) as isize;
                            let ic = c as isize + dw as isize - (kw / 2) as isize;
                            if ir < 0 || ic < 0 || ir >= h as isize || ic >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += input.get(&[ir as usize, ic as usize, ci]) * kernel.get(&[dh, dw, ci, co]);
                            }
                        }
                    }
                    out.set(&[r, c, co], acc);
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_returns_input() {
        let x = ramp(&[3, 4, 3], 0.3);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.set(&[0, 0, c, c], 1.0);
        }
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[3]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_zero_output() {
        let x = ramp(&[4, 4, 2], 1.0);
        let y = conv2d(&x, &Tensor::zeros(&[3, 3, 2, 5]), Some(&Tensor::zeros(&[5]))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_center_is_sum_of_all_nine() {
        let x = Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::filled(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[1]))).unwrap();
        assert_eq!(y.get(&[1, 1, 0]), 45.0);
        // corner sees a 2x2 block: 1+2+4+5
        assert_eq!(y.get(&[0, 0, 0]), 12.0);
    }

    #[test]
    fn conv_matches_reference_sum() {
        let x = ramp(&[5, 4, 3], 0.1);
        let k = ramp(&[3, 5, 3, 2], 0.05);
        let b = Tensor::from_slice(&[0.5, -0.25]);
        let fast = conv2d(&x, &k, Some(&b)).unwrap();
        let slow = conv_reference(&x, &k, &b);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernel() {
        let x = Tensor::zeros(&[3, 3, 2]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[3, 3, 3, 1]), None),
            Err(AutodiffError::ChannelMismatch { input: 2, kernel: 3 })
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[2, 2, 2, 1]), None),
            Err(AutodiffError::EvenKernel { .. })
        ));
    }
}
