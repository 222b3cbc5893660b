//! GEMM dispatch and im2col/col2im kernels shared by the convolution ops.
//!
//! Convolutions are lowered to matrix multiplies: `im2col` unrolls kernel
//! windows into a `[C*kh*kw, out_h*out_w]` column matrix, `col2im` is its
//! adjoint (scatter-add). The same pair serves the forward and backward
//! passes of both convolution directions.

use super::Scalar;

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        // Safety: callers pass slices sized for the (m,k)/(k,n)/(m,n) extents
        // under the given strides (contiguous row-major or a transposed view
        // of such a buffer).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        // Safety: as above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Spatial geometry of one convolution: `conv(in) -> out` with a square-ish
/// kernel, shared stride and symmetric zero padding.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output spatial extent of a convolution, `None` if no kernel placement fits.
    pub fn conv_out(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = extent + 2 * padding;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls one sample `x: [channels, in_h, in_w]` into `col: [rows, cols]`,
/// row-major, rows indexed by `(c, ki, kj)` and columns by output position.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(x.len(), g.channels * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.rows() * g.cols());
    let cols = g.cols();
    for c in 0..g.channels {
        let x_c = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out_row = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut out_row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let x_row = &x_c[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            x_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col: [rows, cols]` back into
/// `x: [channels, in_h, in_w]`. `x` is accumulated into, not overwritten.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    debug_assert_eq!(x.len(), g.channels * g.in_h * g.in_w);
    debug_assert_eq!(col.len(), g.rows() * g.cols());
    let cols = g.cols();
    for c in 0..g.channels {
        let x_c = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &src_row[oy * g.out_w..(oy + 1) * g.out_w];
                    let x_row = &mut x_c[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            x_row[ix as usize] += s;
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
    fn gemm_small_matmul() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = ConvGeom {
            channels: 2,
            in_h: 5,
            in_w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 1,
            out_h: ConvGeom::conv_out(5, 3, 2, 1).unwrap(),
            out_w: ConvGeom::conv_out(4, 3, 2, 1).unwrap(),
        };
        let mut rng = crate::rng::Rng::from_seed(11);
        let x: Vec<f64> = (0..g.channels * g.in_h * g.in_w).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|_| rng.normal()).collect();

        let mut col = vec![0.0; g.rows() * g.cols()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }
}
