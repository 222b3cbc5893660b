//! The differentiable op set.
//!
//! Each op validates its inputs, computes its value eagerly, and records its
//! operands so the backward pass can replay the chain rule. Activations use
//! the `x >= 0` branch at exactly zero, so zero pre-activations still carry
//! unit slope; max pooling breaks ties toward the first occurrence in
//! row-major order.

use super::gemm::{col2im, im2col, ConvGeom};
use super::{Scalar, Tensor, TensorError};

/// Operation that produced a tensor; operands keep the graph alive.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Tensor<T>,
        argmax: Vec<usize>,
    },
    Prelu {
        input: Tensor<T>,
        slope: Tensor<T>,
    },
    Relu {
        input: Tensor<T>,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    MseLoss {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    PowerNormalize {
        input: Tensor<T>,
        scale: f64,
        sum_sq: f64,
    },
    AddConst {
        input: Tensor<T>,
    },
    NarrowChannels {
        input: Tensor<T>,
        start: usize,
        len: usize,
    },
    ConcatChannels {
        inputs: Vec<Tensor<T>>,
    },
    DotConst {
        input: Tensor<T>,
        coeffs: Vec<T>,
    },
}

fn dims4(shape: &[usize], op: &'static str, what: &str) -> Result<(usize, usize, usize, usize), TensorError> {
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{what} must be 4-D (N,C,H,W), got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn check_kernel(kh: usize, kw: usize, op: &'static str) -> Result<(), TensorError> {
    if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("kernel must have odd positive extent, got {kh}x{kw}"),
        });
    }
    Ok(())
}

/// 2-D convolution of `input [N,Cin,H,W]` with `weight [Cout,Cin,kh,kw]` and
/// `bias [Cout]`; output spatial extent is `(H + 2*padding - kh)/stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv2d";
    let in_shape = input.shape();
    let w_shape = weight.shape();
    let (n, c_in, h, w) = dims4(&in_shape, OP, "input")?;
    let (c_out, wc_in, kh, kw) = dims4(&w_shape, OP, "weight")?;
    if c_in != wc_in {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("input has {c_in} channels (shape {in_shape:?}) but weight expects {wc_in} (shape {w_shape:?})"),
        });
    }
    check_kernel(kh, kw, OP)?;
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: "stride must be positive".into(),
        });
    }
    if bias.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
        });
    }
    let out_h = ConvGeom::conv_out(h, kh, stride, padding).ok_or_else(|| TensorError::InvalidArgument {
        op: OP,
        detail: format!("no kernel placement fits: input {h}x{w}, kernel {kh}x{kw}, padding {padding}"),
    })?;
    let out_w = ConvGeom::conv_out(w, kw, stride, padding).ok_or_else(|| TensorError::InvalidArgument {
        op: OP,
        detail: format!("no kernel placement fits: input {h}x{w}, kernel {kh}x{kw}, padding {padding}"),
    })?;

    let geom = ConvGeom {
        channels: c_in,
        in_h: h,
        in_w: w,
        kh,
        kw,
        stride,
        padding,
        out_h,
        out_w,
    };
    let k = geom.rows();
    let p = geom.cols();
    let x = input.data_ref();
    let wdat = weight.data_ref();
    let bdat = bias.data_ref();
    let mut out = vec![T::zero(); n * c_out * p];
    let mut col = vec![T::zero(); k * p];
    for i in 0..n {
        im2col(&x[i * c_in * h * w..(i + 1) * c_in * h * w], &geom, &mut col);
        let y = &mut out[i * c_out * p..(i + 1) * c_out * p];
        T::gemm(
            c_out, k, p,
            T::one(), &wdat, k as isize, 1,
            &col, p as isize, 1,
            T::zero(), y, p as isize, 1,
        );
        for m in 0..c_out {
            let b = bdat[m];
            for v in &mut y[m * p..(m + 1) * p] {
                *v += b;
            }
        }
    }
    drop(x);
    drop(wdat);
    drop(bdat);
    let requires = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
    Ok(Tensor::new_result(
        vec![n, c_out, out_h, out_w],
        out,
        requires,
        Op::Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            stride,
            padding,
        },
    ))
}

/// Transposed 2-D convolution of `input [N,Cin,H,W]` with
/// `weight [Cin,Cout,kh,kw]`; output spatial extent is
/// `(H-1)*stride - 2*padding + kh + output_padding`. Forward is the adjoint
/// of [`conv2d`] with respect to its input.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv_transpose2d";
    let in_shape = input.shape();
    let w_shape = weight.shape();
    let (n, c_in, h, w) = dims4(&in_shape, OP, "input")?;
    let (wc_in, c_out, kh, kw) = dims4(&w_shape, OP, "weight")?;
    if c_in != wc_in {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("input has {c_in} channels (shape {in_shape:?}) but weight expects {wc_in} (shape {w_shape:?})"),
        });
    }
    check_kernel(kh, kw, OP)?;
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: "stride must be positive".into(),
        });
    }
    if output_padding >= stride {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: format!("output_padding {output_padding} must be smaller than stride {stride}"),
        });
    }
    if bias.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
        });
    }
    let out_extent = |e: usize, ker: usize| -> Option<usize> {
        let grown = (e - 1) * stride + ker + output_padding;
        (grown > 2 * padding).then(|| grown - 2 * padding)
    };
    let out_h = out_extent(h, kh).ok_or_else(|| TensorError::InvalidArgument {
        op: OP,
        detail: format!("parameters yield non-positive output height for input {h}x{w}"),
    })?;
    let out_w = out_extent(w, kw).ok_or_else(|| TensorError::InvalidArgument {
        op: OP,
        detail: format!("parameters yield non-positive output width for input {h}x{w}"),
    })?;

    // Geometry of the adjoint convolution: conv(out) -> in.
    let geom = ConvGeom {
        channels: c_out,
        in_h: out_h,
        in_w: out_w,
        kh,
        kw,
        stride,
        padding,
        out_h: h,
        out_w: w,
    };
    debug_assert_eq!(ConvGeom::conv_out(out_h, kh, stride, padding), Some(h));
    let k2 = geom.rows();
    let p_in = h * w;
    let x = input.data_ref();
    let wdat = weight.data_ref();
    let bdat = bias.data_ref();
    let mut out = vec![T::zero(); n * c_out * out_h * out_w];
    let mut col = vec![T::zero(); k2 * p_in];
    for i in 0..n {
        let x_i = &x[i * c_in * p_in..(i + 1) * c_in * p_in];
        // col = W^T (k2 x Cin) * x_i (Cin x P); weight is row-major [Cin, k2].
        T::gemm(
            k2, c_in, p_in,
            T::one(), &wdat, 1, k2 as isize,
            x_i, p_in as isize, 1,
            T::zero(), &mut col, p_in as isize, 1,
        );
        let y = &mut out[i * c_out * out_h * out_w..(i + 1) * c_out * out_h * out_w];
        col2im(&col, &geom, y);
        for m in 0..c_out {
            let b = bdat[m];
            for v in &mut y[m * out_h * out_w..(m + 1) * out_h * out_w] {
                *v += b;
            }
        }
    }
    drop(x);
    drop(wdat);
    drop(bdat);
    let requires = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
    Ok(Tensor::new_result(
        vec![n, c_out, out_h, out_w],
        out,
        requires,
        Op::ConvTranspose2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            stride,
            padding,
        },
    ))
}

/// 2x2 max pooling with stride 2; requires even spatial extents. Backward
/// routes gradient to the argmax only (first occurrence on ties).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "maxpool2d";
    let shape = input.shape();
    let (n, c, h, w) = dims4(&shape, OP, "input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: format!("spatial extent {h}x{w} must be even"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data_ref();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for img in 0..n * c {
        let base = img * h * w;
        let obase = img * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out[obase + oy * ow + ox] = best;
                argmax[obase + oy * ow + ox] = best_idx;
            }
        }
    }
    drop(x);
    let requires = input.requires_grad();
    Ok(Tensor::new_result(
        vec![n, c, oh, ow],
        out,
        requires,
        Op::MaxPool2d {
            input: input.clone(),
            argmax,
        },
    ))
}

/// Parametric ReLU: `x` for `x >= 0`, `slope * x` otherwise. `slope` is a
/// single-element tensor and receives gradient.
pub fn prelu<T: Scalar>(input: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if slope.numel() != 1 {
        return Err(TensorError::InvalidArgument {
            op: "prelu",
            detail: format!("slope must be a scalar parameter, got shape {:?}", slope.shape()),
        });
    }
    let a = slope.item();
    let x = input.data_ref();
    let out: Vec<T> = x.iter().map(|&v| if v >= T::zero() { v } else { a * v }).collect();
    drop(x);
    let requires = input.requires_grad() || slope.requires_grad();
    Ok(Tensor::new_result(
        input.shape(),
        out,
        requires,
        Op::Prelu {
            input: input.clone(),
            slope: slope.clone(),
        },
    ))
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let x = input.data_ref();
    let out: Vec<T> = x.iter().map(|&v| if v >= T::zero() { v } else { T::zero() }).collect();
    drop(x);
    let requires = input.requires_grad();
    Tensor::new_result(input.shape(), out, requires, Op::Relu { input: input.clone() })
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let (xa, xb) = (a.data_ref(), b.data_ref());
    let out: Vec<T> = xa.iter().zip(xb.iter()).map(|(&u, &v)| u * v).collect();
    drop(xa);
    drop(xb);
    let requires = a.requires_grad() || b.requires_grad();
    Ok(Tensor::new_result(
        a.shape(),
        out,
        requires,
        Op::Mul { a: a.clone(), b: b.clone() },
    ))
}

/// Mean squared error over all elements, as a `[1]`-shaped tensor.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let (xa, xb) = (pred.data_ref(), target.data_ref());
    let mut acc = 0.0f64;
    for (&u, &v) in xa.iter().zip(xb.iter()) {
        let d = (u - v).as_f64();
        acc += d * d;
    }
    let m = xa.len() as f64;
    drop(xa);
    drop(xb);
    let requires = pred.requires_grad() || target.requires_grad();
    Ok(Tensor::new_result(
        vec![1],
        vec![T::cast(acc / m)],
        requires,
        Op::MseLoss {
            a: pred.clone(),
            b: target.clone(),
        },
    ))
}

/// Scales a tensor so its average power is exactly one:
/// `y = x * sqrt(M / sum(x^2))` with `M` the element count. Gradient flows
/// through the scaling. All-zero input has no defined scale and is rejected.
pub fn power_normalize<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let x = input.data_ref();
    let sum_sq: f64 = x.iter().map(|&v| v.as_f64() * v.as_f64()).sum();
    if sum_sq == 0.0 {
        return Err(TensorError::AllZeroInput);
    }
    let m = x.len() as f64;
    let scale = (m / sum_sq).sqrt();
    let out: Vec<T> = x.iter().map(|&v| T::cast(v.as_f64() * scale)).collect();
    drop(x);
    let requires = input.requires_grad();
    Ok(Tensor::new_result(
        input.shape(),
        out,
        requires,
        Op::PowerNormalize {
            input: input.clone(),
            scale,
            sum_sq,
        },
    ))
}

/// Adds a constant offset (e.g. a channel noise draw). The offset is treated
/// as data, not as a graph input, so the backward pass is the identity.
pub(crate) fn add_constant<T: Scalar>(input: &Tensor<T>, offset: &[T]) -> Result<Tensor<T>, TensorError> {
    let x = input.data_ref();
    if x.len() != offset.len() {
        return Err(TensorError::ShapeMismatch {
            op: "add_constant",
            detail: format!("input has {} elements, offset {}", x.len(), offset.len()),
        });
    }
    let out: Vec<T> = x.iter().zip(offset).map(|(&u, &v)| u + v).collect();
    drop(x);
    let requires = input.requires_grad();
    Ok(Tensor::new_result(
        input.shape(),
        out,
        requires,
        Op::AddConst { input: input.clone() },
    ))
}

/// Selects a contiguous channel range `[start, start+len)` of an NCHW tensor.
pub fn narrow_channels<T: Scalar>(
    input: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "narrow_channels";
    let shape = input.shape();
    let (n, c, h, w) = dims4(&shape, OP, "input")?;
    if len == 0 || start + len > c {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: format!("range {start}..{} out of {c} channels", start + len),
        });
    }
    let hw = h * w;
    let x = input.data_ref();
    let mut out = vec![T::zero(); n * len * hw];
    for i in 0..n {
        let src = &x[(i * c + start) * hw..(i * c + start + len) * hw];
        out[i * len * hw..(i + 1) * len * hw].copy_from_slice(src);
    }
    drop(x);
    let requires = input.requires_grad();
    Ok(Tensor::new_result(
        vec![n, len, h, w],
        out,
        requires,
        Op::NarrowChannels {
            input: input.clone(),
            start,
            len,
        },
    ))
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "concat_channels";
    if inputs.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: "at least one input required".into(),
        });
    }
    let first = inputs[0].shape();
    let (n, _, h, w) = dims4(&first, OP, "input")?;
    let mut c_total = 0;
    for t in inputs {
        let (tn, tc, th, tw) = dims4(&t.shape(), OP, "input")?;
        if tn != n || th != h || tw != w {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("{:?} vs {:?}", t.shape(), first),
            });
        }
        c_total += tc;
    }
    let hw = h * w;
    let mut out = vec![T::zero(); n * c_total * hw];
    for i in 0..n {
        let mut c_off = 0;
        for t in inputs {
            let tc = t.shape()[1];
            let x = t.data_ref();
            out[(i * c_total + c_off) * hw..(i * c_total + c_off + tc) * hw]
                .copy_from_slice(&x[i * tc * hw..(i + 1) * tc * hw]);
            c_off += tc;
        }
    }
    let requires = inputs.iter().any(|t| t.requires_grad());
    Ok(Tensor::new_result(
        vec![n, c_total, h, w],
        out,
        requires,
        Op::ConcatChannels {
            inputs: inputs.to_vec(),
        },
    ))
}

/// Fixed linear functional `sum(coeffs * x)` as a `[1]`-shaped tensor; the
/// standard probe for vector-valued gradient checks.
pub fn dot<T: Scalar>(input: &Tensor<T>, coeffs: &[T]) -> Result<Tensor<T>, TensorError> {
    let x = input.data_ref();
    if x.len() != coeffs.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dot",
            detail: format!("input has {} elements, coeffs {}", x.len(), coeffs.len()),
        });
    }
    let acc: f64 = x.iter().zip(coeffs).map(|(&u, &c)| u.as_f64() * c.as_f64()).sum();
    drop(x);
    let requires = input.requires_grad();
    Ok(Tensor::new_result(
        vec![1],
        vec![T::cast(acc)],
        requires,
        Op::DotConst {
            input: input.clone(),
            coeffs: coeffs.to_vec(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct 6-loop convolution, the independent oracle for conv2d values.
    fn naive_conv2d(
        x: &[f32],
        (n, c_in, h, w): (usize, usize, usize, usize),
        wt: &[f32],
        (c_out, kh, kw): (usize, usize, usize),
        bias: &[f32],
        stride: usize,
        padding: usize,
    ) -> (Vec<f32>, (usize, usize)) {
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0f32; n * c_out * oh * ow];
        for i in 0..n {
            for m in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[m];
                        for c in 0..c_in {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - padding as isize;
                                    let ix = (ox * stride + kj) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let xi = ((i * c_in + c) * h + iy as usize) * w + ix as usize;
                                        let wi = ((m * c_in + c) * kh + ki) * kw + kj;
                                        acc += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                        out[((i * c_out + m) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, (oh, ow))
    }

    /// Adjoint of the naive convolution, the oracle for conv_transpose2d.
    fn naive_conv_transpose2d(
        x: &[f32],
        (n, c_in, h, w): (usize, usize, usize, usize),
        wt: &[f32],
        (c_out, kh, kw): (usize, usize, usize),
        bias: &[f32],
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> (Vec<f32>, (usize, usize)) {
        let oh = (h - 1) * stride + kh + output_padding - 2 * padding;
        let ow = (w - 1) * stride + kw + output_padding - 2 * padding;
        let mut out = vec![0.0f32; n * c_out * oh * ow];
        for i in 0..n {
            for c in 0..c_in {
                for iy in 0..h {
                    for ix in 0..w {
                        let v = x[((i * c_in + c) * h + iy) * w + ix];
                        for m in 0..c_out {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let oy = (iy * stride + ki) as isize - padding as isize;
                                    let ox = (ix * stride + kj) as isize - padding as isize;
                                    if oy >= 0 && oy < oh as isize && ox >= 0 && ox < ow as isize {
                                        let oi = ((i * c_out + m) * oh + oy as usize) * ow + ox as usize;
                                        let wi = ((c * c_out + m) * kh + ki) * kw + kj;
                                        out[oi] += v * wt[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for m in 0..c_out {
                for v in &mut out[(i * c_out + m) * oh * ow..(i * c_out + m + 1) * oh * ow] {
                    *v += bias[m];
                }
            }
        }
        (out, (oh, ow))
    }

    fn t4(shape: [usize; 4], data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(&shape, data).unwrap()
    }

    #[test]
    fn conv2d_all_ones_matches_hand_value() {
        // 3x3 ones input, 3x3 ones kernel, padding 1: border sums 4/6, center 9.
        let x = t4([1, 1, 3, 3], vec![1.0; 9]);
        let w = t4([1, 1, 3, 3], vec![1.0; 9]);
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        let expected = vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.to_vec(), expected);
        let (oracle, dims) = naive_conv2d(&[1.0; 9], (1, 1, 3, 3), &[1.0; 9], (1, 3, 3), &[0.0], 1, 1);
        assert_eq!(dims, (3, 3));
        assert_eq!(oracle, expected);
    }

    #[test]
    fn conv2d_zero_weights_annihilate() {
        let mut rng = Rng::from_seed(1);
        let x = Tensor::<f32>::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::zeros(&[4]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 6, 6]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_identity_kernel_preserves_ramp() {
        let ramp: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = t4([1, 1, 4, 4], ramp.clone());
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        let w = t4([1, 1, 3, 3], k);
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.to_vec(), ramp);
    }

    #[test]
    fn conv2d_matches_naive_oracle_on_random_cases() {
        let mut rng = Rng::from_seed(17);
        for _ in 0..10 {
            let (n, c_in, c_out) = (1 + rng.uniform_usize(0, 2), 1 + rng.uniform_usize(0, 3), 1 + rng.uniform_usize(0, 3));
            let (h, w) = (3 + rng.uniform_usize(0, 4), 3 + rng.uniform_usize(0, 4));
            let stride = 1 + rng.uniform_usize(0, 2);
            let padding = rng.uniform_usize(0, 2);
            let x: Vec<f32> = (0..n * c_in * h * w).map(|_| rng.normal() as f32).collect();
            let wt: Vec<f32> = (0..c_out * c_in * 9).map(|_| rng.normal() as f32).collect();
            let bias: Vec<f32> = (0..c_out).map(|_| rng.normal() as f32).collect();
            let y = conv2d(
                &t4([n, c_in, h, w], x.clone()),
                &t4([c_out, c_in, 3, 3], wt.clone()),
                &Tensor::from_vec(&[c_out], bias.clone()).unwrap(),
                stride,
                padding,
            )
            .unwrap();
            let (oracle, _) = naive_conv2d(&x, (n, c_in, h, w), &wt, (c_out, 3, 3), &bias, stride, padding);
            let got = y.to_vec();
            assert_eq!(got.len(), oracle.len());
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-4, "conv2d deviates from oracle: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_naming_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 4, 3, 3]);
        let b = Tensor::<f32>::zeros(&[2]);
        let err = conv2d(&x, &w, &b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_rejects_zero_stride() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        assert!(conv2d(&x, &w, &b, 0, 1).is_err());
    }

    #[test]
    fn conv_transpose2d_single_pixel_example() {
        // One input value 5 spreads into a 2x2 patch of 5s with a ones kernel.
        let x = t4([1, 1, 1, 1], vec![5.0]);
        let w = t4([1, 1, 3, 3], vec![1.0; 9]);
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = conv_transpose2d(&x, &w, &b, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![5.0; 4]);
        let (oracle, dims) =
            naive_conv_transpose2d(&[5.0], (1, 1, 1, 1), &[1.0; 9], (1, 3, 3), &[0.0], 2, 1, 1);
        assert_eq!(dims, (2, 2));
        assert_eq!(oracle, vec![5.0; 4]);
    }

    #[test]
    fn conv_transpose2d_zero_input_gives_zero_output() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let w = {
            let mut rng = Rng::from_seed(2);
            Tensor::<f32>::randn(&[2, 3, 3, 3], 1.0, &mut rng)
        };
        let b = Tensor::<f32>::zeros(&[3]);
        let y = conv_transpose2d(&x, &w, &b, 2, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 6, 6]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_transpose2d_matches_adjoint_oracle_on_random_cases() {
        let mut rng = Rng::from_seed(31);
        for _ in 0..10 {
            let (n, c_in, c_out) = (1 + rng.uniform_usize(0, 2), 1 + rng.uniform_usize(0, 3), 1 + rng.uniform_usize(0, 3));
            let (h, w) = (2 + rng.uniform_usize(0, 4), 2 + rng.uniform_usize(0, 4));
            let (stride, padding, output_padding) = if rng.uniform() < 0.5 { (2, 1, 1) } else { (1, 1, 0) };
            let x: Vec<f32> = (0..n * c_in * h * w).map(|_| rng.normal() as f32).collect();
            let wt: Vec<f32> = (0..c_in * c_out * 9).map(|_| rng.normal() as f32).collect();
            let bias: Vec<f32> = (0..c_out).map(|_| rng.normal() as f32).collect();
            let y = conv_transpose2d(
                &t4([n, c_in, h, w], x.clone()),
                &t4([c_in, c_out, 3, 3], wt.clone()),
                &Tensor::from_vec(&[c_out], bias.clone()).unwrap(),
                stride,
                padding,
                output_padding,
            )
            .unwrap();
            let (oracle, _) = naive_conv_transpose2d(
                &x, (n, c_in, h, w), &wt, (c_out, 3, 3), &bias, stride, padding, output_padding,
            );
            for (a, b) in y.to_vec().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-4, "conv_transpose2d deviates from oracle: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_then_transpose_restores_spatial_extent() {
        // The codec's doubling settings round-trip an 8x8 map.
        let mut rng = Rng::from_seed(3);
        let x = Tensor::<f32>::randn(&[1, 4, 8, 8], 1.0, &mut rng);
        let w_down = Tensor::<f32>::randn(&[6, 4, 3, 3], 0.1, &mut rng);
        let b_down = Tensor::<f32>::zeros(&[6]);
        let down = conv2d(&x, &w_down, &b_down, 2, 1).unwrap();
        assert_eq!(down.shape(), vec![1, 6, 4, 4]);
        let w_up = Tensor::<f32>::randn(&[6, 4, 3, 3], 0.1, &mut rng);
        let b_up = Tensor::<f32>::zeros(&[4]);
        let up = conv_transpose2d(&down, &w_up, &b_up, 2, 1, 1).unwrap();
        assert_eq!(up.shape(), vec![1, 4, 8, 8]);
    }

    #[test]
    fn conv_transpose2d_rejects_degenerate_output() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        // padding so large the output would vanish
        assert!(conv_transpose2d(&x, &w, &b, 1, 2, 0).is_err());
    }

    #[test]
    fn maxpool2d_single_window() {
        let x = t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
    }

    #[test]
    fn maxpool2d_constant_routes_grad_to_first_occurrence() {
        let x = t4([1, 1, 2, 2], vec![7.0; 4]).with_requires_grad(true);
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.to_vec(), vec![7.0]);
        let loss = dot(&y, &[1.0]).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool2d_halves_large_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 224, 224]);
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 112, 112]);
    }

    #[test]
    fn maxpool2d_rejects_odd_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2d(&x).is_err());
    }

    #[test]
    fn prelu_matches_definition() {
        let x = Tensor::from_vec(&[3], vec![-2.0f32, 0.0, 1.5]).unwrap();
        let slope = Tensor::scalar(0.25f32);
        let y = prelu(&x, &slope).unwrap();
        assert_eq!(y.to_vec(), vec![-0.5, 0.0, 1.5]);
    }

    #[test]
    fn prelu_with_zero_slope_is_relu() {
        let mut rng = Rng::from_seed(4);
        let x = Tensor::<f32>::randn(&[32], 1.0, &mut rng);
        let y1 = prelu(&x, &Tensor::scalar(0.0f32)).unwrap();
        let y2 = relu(&x);
        assert_eq!(y1.to_vec(), y2.to_vec());
    }

    #[test]
    fn relu_examples_and_idempotence() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).to_vec(), vec![0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(&[3], vec![-1.0f32, -5.0, -0.1]).unwrap();
        assert!(relu(&neg).to_vec().iter().all(|&v| v == 0.0));
        let mut rng = Rng::from_seed(5);
        let r = Tensor::<f32>::randn(&[64], 1.0, &mut rng);
        assert_eq!(relu(&relu(&r)).to_vec(), relu(&r).to_vec());
    }

    #[test]
    fn mse_loss_examples() {
        let a = Tensor::from_vec(&[2], vec![0.0f32, 1.0]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap().item(), 0.0);

        let p = Tensor::filled(&[10], 0.6f32);
        let t = Tensor::filled(&[10], 0.5f32);
        let v = mse_loss(&p, &t).unwrap().item();
        assert!((v - 0.01).abs() < 1e-6);

        let b = Tensor::from_vec(&[2], vec![1.0f32, 0.0]).unwrap();
        assert_eq!(mse_loss(&a, &b).unwrap().item(), 1.0);

        let bad = Tensor::<f32>::zeros(&[3]);
        assert!(mse_loss(&a, &bad).is_err());
    }

    #[test]
    fn power_normalize_examples() {
        // sum(x^2) = 4M -> scale 1/2
        let x = Tensor::filled(&[8], 2.0f32);
        let y = power_normalize(&x).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 1.0).abs() < 1e-6));

        // already unit power -> unchanged
        let u = Tensor::from_vec(&[2], vec![1.0f32, -1.0]).unwrap();
        let yu = power_normalize(&u).unwrap();
        assert_eq!(yu.to_vec(), vec![1.0, -1.0]);

        // random inputs -> unit mean power
        let mut rng = Rng::from_seed(6);
        for _ in 0..10 {
            let x = Tensor::<f32>::randn(&[128], 3.0, &mut rng);
            let y = power_normalize(&x).unwrap();
            let p: f64 = y.to_vec().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / 128.0;
            assert!((p - 1.0).abs() < 1e-6, "mean power {p}");
        }

        assert!(matches!(
            power_normalize(&Tensor::<f32>::zeros(&[4])),
            Err(TensorError::AllZeroInput)
        ));
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let mut rng = Rng::from_seed(7);
        let x = Tensor::<f32>::randn(&[2, 5, 3, 3], 1.0, &mut rng);
        let a = narrow_channels(&x, 0, 2).unwrap();
        let b = narrow_channels(&x, 2, 3).unwrap();
        let y = concat_channels(&[a, b]).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(narrow_channels(&x, 4, 2).is_err());
    }
}
