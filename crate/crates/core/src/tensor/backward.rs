//! Reverse-mode accumulation: topological ordering and per-op VJPs.

use std::collections::HashSet;

use super::gemm::{col2im, im2col, ConvGeom};
use super::ops::Op;
use super::{Scalar, Tensor, TensorError};

pub(crate) fn run_backward<T: Scalar>(loss: &Tensor<T>) -> Result<(), TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss { numel: loss.numel() });
    }
    if !loss.requires_grad() {
        return Err(TensorError::NoGradPath);
    }
    let order = topo_order(loss);
    // Only leaves retain gradient across calls; interior nodes start each
    // pass fresh so repeated backward on one graph accumulates exactly.
    for t in &order {
        let mut node = t.borrow_node_mut();
        if !matches!(node.op, Op::Leaf) {
            node.grad = None;
        }
    }
    loss.accumulate_grad(&[T::one()]);
    for t in order.iter().rev() {
        let grad = match t.borrow_node().grad.as_ref() {
            Some(g) => g.clone(),
            None => continue,
        };
        apply_vjp(t, &grad);
    }
    Ok(())
}

/// Differentiable operands of a node (those that require grad).
fn parents<T: Scalar>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    let node = t.borrow_node();
    let all: Vec<Tensor<T>> = match &node.op {
        Op::Leaf => vec![],
        Op::Conv2d { input, weight, bias, .. }
        | Op::ConvTranspose2d { input, weight, bias, .. } => {
            vec![input.clone(), weight.clone(), bias.clone()]
        }
        Op::MaxPool2d { input, .. }
        | Op::Relu { input }
        | Op::PowerNormalize { input, .. }
        | Op::AddConst { input }
        | Op::NarrowChannels { input, .. }
        | Op::DotConst { input, .. } => vec![input.clone()],
        Op::Prelu { input, slope } => vec![input.clone(), slope.clone()],
        Op::Mul { a, b } | Op::MseLoss { a, b } => vec![a.clone(), b.clone()],
        Op::ConcatChannels { inputs } => inputs.clone(),
    };
    all.into_iter().filter(|p| p.requires_grad()).collect()
}

/// Post-order over the ancestors of `root` that require grad; parents appear
/// before the nodes they feed.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr_id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in parents(&t) {
            if !visited.contains(&p.ptr_id()) {
                stack.push((p, false));
            }
        }
    }
    order
}

fn apply_vjp<T: Scalar>(t: &Tensor<T>, grad: &[T]) {
    // Contributions are computed under immutable borrows, then accumulated
    // after all borrows are released (an operand may appear twice, e.g.
    // mul(x, x)).
    let mut contributions: Vec<(Tensor<T>, Vec<T>)> = Vec::new();
    {
        let node = t.borrow_node();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let (dx, dw, db) = conv2d_vjp(grad, &node.shape, input, weight, *stride, *padding);
                if let Some(dx) = dx {
                    contributions.push((input.clone(), dx));
                }
                if let Some(dw) = dw {
                    contributions.push((weight.clone(), dw));
                }
                if bias.requires_grad() {
                    contributions.push((bias.clone(), db));
                }
            }
            Op::ConvTranspose2d { input, weight, bias, stride, padding, .. } => {
                let (dx, dw, db) =
                    conv_transpose2d_vjp(grad, &node.shape, input, weight, *stride, *padding);
                if let Some(dx) = dx {
                    contributions.push((input.clone(), dx));
                }
                if let Some(dw) = dw {
                    contributions.push((weight.clone(), dw));
                }
                if bias.requires_grad() {
                    contributions.push((bias.clone(), db));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if input.requires_grad() {
                    let mut dx = vec![T::zero(); input.numel()];
                    for (g, &idx) in grad.iter().zip(argmax) {
                        dx[idx] += *g;
                    }
                    contributions.push((input.clone(), dx));
                }
            }
            Op::Prelu { input, slope } => {
                let x = input.data_ref();
                let a = slope.item();
                if input.requires_grad() {
                    let dx: Vec<T> = x
                        .iter()
                        .zip(grad)
                        .map(|(&v, &g)| if v >= T::zero() { g } else { a * g })
                        .collect();
                    contributions.push((input.clone(), dx));
                }
                if slope.requires_grad() {
                    let mut da = 0.0f64;
                    for (&v, &g) in x.iter().zip(grad) {
                        if v < T::zero() {
                            da += (g * v).as_f64();
                        }
                    }
                    contributions.push((slope.clone(), vec![T::cast(da)]));
                }
            }
            Op::Relu { input } => {
                if input.requires_grad() {
                    let x = input.data_ref();
                    let dx: Vec<T> = x
                        .iter()
                        .zip(grad)
                        .map(|(&v, &g)| if v >= T::zero() { g } else { T::zero() })
                        .collect();
                    contributions.push((input.clone(), dx));
                }
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    let xb = b.data_ref();
                    let da: Vec<T> = xb.iter().zip(grad).map(|(&v, &g)| v * g).collect();
                    contributions.push((a.clone(), da));
                }
                if b.requires_grad() {
                    let xa = a.data_ref();
                    let db: Vec<T> = xa.iter().zip(grad).map(|(&v, &g)| v * g).collect();
                    contributions.push((b.clone(), db));
                }
            }
            Op::MseLoss { a, b } => {
                let g0 = grad[0];
                let xa = a.data_ref();
                let xb = b.data_ref();
                let scale = T::cast(2.0 / xa.len() as f64) * g0;
                if a.requires_grad() {
                    let da: Vec<T> = xa.iter().zip(xb.iter()).map(|(&u, &v)| scale * (u - v)).collect();
                    contributions.push((a.clone(), da));
                }
                if b.requires_grad() {
                    let db: Vec<T> = xa.iter().zip(xb.iter()).map(|(&u, &v)| -(scale * (u - v))).collect();
                    contributions.push((b.clone(), db));
                }
            }
            Op::PowerNormalize { input, scale, sum_sq } => {
                if input.requires_grad() {
                    let x = input.data_ref();
                    let dot: f64 = x.iter().zip(grad).map(|(&v, &g)| v.as_f64() * g.as_f64()).sum();
                    let ratio = dot / sum_sq;
                    let dx: Vec<T> = x
                        .iter()
                        .zip(grad)
                        .map(|(&v, &g)| T::cast(scale * (g.as_f64() - v.as_f64() * ratio)))
                        .collect();
                    contributions.push((input.clone(), dx));
                }
            }
            Op::AddConst { input } => {
                if input.requires_grad() {
                    contributions.push((input.clone(), grad.to_vec()));
                }
            }
            Op::NarrowChannels { input, start, len } => {
                if input.requires_grad() {
                    let shape = input.shape();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let hw = h * w;
                    let mut dx = vec![T::zero(); n * c * hw];
                    for i in 0..n {
                        let dst = &mut dx[(i * c + start) * hw..(i * c + start + len) * hw];
                        let src = &grad[i * len * hw..(i + 1) * len * hw];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    contributions.push((input.clone(), dx));
                }
            }
            Op::ConcatChannels { inputs } => {
                let (n, c_total, h, w) = {
                    let s = &node.shape;
                    (s[0], s[1], s[2], s[3])
                };
                let hw = h * w;
                let mut c_off = 0;
                for inp in inputs {
                    let tc = inp.shape()[1];
                    if inp.requires_grad() {
                        let mut dx = vec![T::zero(); n * tc * hw];
                        for i in 0..n {
                            dx[i * tc * hw..(i + 1) * tc * hw].copy_from_slice(
                                &grad[(i * c_total + c_off) * hw..(i * c_total + c_off + tc) * hw],
                            );
                        }
                        contributions.push((inp.clone(), dx));
                    }
                    c_off += tc;
                }
            }
            Op::DotConst { input, coeffs } => {
                if input.requires_grad() {
                    let g0 = grad[0];
                    let dx: Vec<T> = coeffs.iter().map(|&c| c * g0).collect();
                    contributions.push((input.clone(), dx));
                }
            }
        }
    }
    for (target, delta) in contributions {
        target.accumulate_grad(&delta);
    }
}

type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Vec<T>);

fn conv2d_vjp<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> ConvGrads<T> {
    let in_shape = input.shape();
    let w_shape = weight.shape();
    let (n, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (c_out, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (out_h, out_w) = (out_shape[2], out_shape[3]);
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

    let want_dx = input.requires_grad();
    let want_dw = weight.requires_grad();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); wdat.len()]);
    let mut col = vec![T::zero(); k * p];
    for i in 0..n {
        let dy = &grad[i * c_out * p..(i + 1) * c_out * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[i * c_in * h * w..(i + 1) * c_in * h * w], &geom, &mut col);
            // dW (M x K) += dY (M x P) * col^T (P x K)
            T::gemm(
                c_out, p, k,
                T::one(), dy, p as isize, 1,
                &col, 1, p as isize,
                T::one(), dw, k as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (K x P) = W^T (K x M) * dY (M x P)
            T::gemm(
                k, c_out, p,
                T::one(), &wdat, 1, k as isize,
                dy, p as isize, 1,
                T::zero(), &mut col, p as isize, 1,
            );
            col2im(&col, &geom, &mut dx[i * c_in * h * w..(i + 1) * c_in * h * w]);
        }
    }
    let db = {
        let mut db = vec![T::zero(); c_out];
        for i in 0..n {
            for m in 0..c_out {
                let mut acc = T::zero();
                for &g in &grad[(i * c_out + m) * p..(i * c_out + m + 1) * p] {
                    acc += g;
                }
                db[m] += acc;
            }
        }
        db
    };
    (dx, dw, db)
}

fn conv_transpose2d_vjp<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> ConvGrads<T> {
    let in_shape = input.shape();
    let w_shape = weight.shape();
    let (n, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (c_out, kh, kw) = (w_shape[1], w_shape[2], w_shape[3]);
    let (out_h, out_w) = (out_shape[2], out_shape[3]);
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
    let k2 = geom.rows();
    let p_in = h * w;
    let x = input.data_ref();
    let wdat = weight.data_ref();

    let want_dx = input.requires_grad();
    let want_dw = weight.requires_grad();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); wdat.len()]);
    let mut colg = vec![T::zero(); k2 * p_in];
    for i in 0..n {
        let dy = &grad[i * c_out * out_h * out_w..(i + 1) * c_out * out_h * out_w];
        im2col(dy, &geom, &mut colg);
        if let Some(dx) = dx.as_mut() {
            // dX (Cin x P) = W (Cin x K2) * colg (K2 x P)
            T::gemm(
                c_in, k2, p_in,
                T::one(), &wdat, k2 as isize, 1,
                &colg, p_in as isize, 1,
                T::zero(), &mut dx[i * c_in * p_in..(i + 1) * c_in * p_in], p_in as isize, 1,
            );
        }
        if let Some(dw) = dw.as_mut() {
            // dW (Cin x K2) += X (Cin x P) * colg^T (P x K2)
            T::gemm(
                c_in, p_in, k2,
                T::one(), &x[i * c_in * p_in..(i + 1) * c_in * p_in], p_in as isize, 1,
                &colg, 1, p_in as isize,
                T::one(), dw, k2 as isize, 1,
            );
        }
    }
    let db = {
        let hw = out_h * out_w;
        let mut db = vec![T::zero(); c_out];
        for i in 0..n {
            for m in 0..c_out {
                let mut acc = T::zero();
                for &g in &grad[(i * c_out + m) * hw..(i * c_out + m + 1) * hw] {
                    acc += g;
                }
                db[m] += acc;
            }
        }
        db
    };
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::super::{ops, Tensor, TensorError};

    #[test]
    fn chain_rule_by_hand() {
        // loss = mse(w*x, y), w=1, x=2, y=0 -> dL/dw = 2*(w*x - y)*x = 8
        let w = Tensor::scalar(1.0f64).with_requires_grad(true);
        let x = Tensor::scalar(2.0f64);
        let y = Tensor::scalar(0.0f64);
        let loss = ops::mse_loss(&ops::mul(&w, &x).unwrap(), &y).unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![8.0]);
        assert!(x.grad().is_none());
    }

    #[test]
    fn frozen_input_receives_no_grad() {
        let w = Tensor::scalar(1.0f32).with_requires_grad(true);
        let frozen = Tensor::scalar(3.0f32); // requires_grad = false
        let loss = ops::mse_loss(&ops::mul(&w, &frozen).unwrap(), &Tensor::scalar(0.0f32)).unwrap();
        loss.backward().unwrap();
        assert!(frozen.grad().is_none());
        assert!(w.grad().is_some());
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let w = Tensor::scalar(1.0f64).with_requires_grad(true);
        let x = Tensor::scalar(2.0f64);
        let loss = ops::mse_loss(&ops::mul(&w, &x).unwrap(), &Tensor::scalar(0.0f64)).unwrap();
        loss.backward().unwrap();
        let first = w.grad().unwrap()[0];
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap()[0], 2.0 * first);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap().with_requires_grad(true);
        let y = ops::relu(&x);
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_rejects_constant_graph() {
        let x = Tensor::scalar(1.0f32);
        let loss = ops::mse_loss(&x, &Tensor::scalar(0.0f32)).unwrap();
        assert!(matches!(loss.backward(), Err(TensorError::NoGradPath)));
    }

    #[test]
    fn shared_operand_gets_both_contributions() {
        // loss = mse(x*x, 0) at x=3: d/dx (x^4) = 4 x^3 = 108
        let x = Tensor::scalar(3.0f64).with_requires_grad(true);
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::mse_loss(&sq, &Tensor::scalar(0.0f64)).unwrap();
        loss.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 108.0).abs() < 1e-9);
    }
}
