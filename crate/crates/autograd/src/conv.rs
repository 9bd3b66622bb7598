//! Strided 2-D convolution kernels (im2col + GEMM).
//!
//! The three kernels are the partial derivatives of one trilinear form
//! `T(x, w, y) = <conv(x, w), y>`, so each one's gradients are expressed with
//! the other two. A transposed convolution is [`conv2d_bwd_data`] of the
//! convolution running in the opposite direction.

use rayon::prelude::*;

use crate::Float;

/// Samples handled per GEMM call. Fixed so results do not depend on the
/// number of worker threads.
const CHUNK: usize = 16;

/// Geometry of a square-kernel convolution from `in_*` to `out_*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        assert!(
            in_h + 2 * padding >= kernel && in_w + 2 * padding >= kernel,
            "kernel larger than padded input"
        );
        ConvGeom {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.out_channels, self.out_h, self.out_w]
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_size(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn out_size(&self) -> usize {
        self.out_channels * self.out_pixels()
    }
}

/// Unfold `ns` samples into a `col_rows x (ns * P)` matrix.
fn im2col<T: Float>(g: &ConvGeom, x: &[T], ns: usize, col: &mut [T]) {
    let p = g.out_pixels();
    let width = ns * p;
    let k = g.kernel;
    for s in 0..ns {
        let xs = &x[s * g.in_size()..(s + 1) * g.in_size()];
        for c in 0..g.in_channels {
            let plane = &xs[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * width + s * p..row * width + (s + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if iy < 0 || iy >= g.in_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            *v = if ix < 0 || ix >= g.in_w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `ns` zeroed samples.
fn col2im<T: Float>(g: &ConvGeom, col: &[T], ns: usize, x: &mut [T]) {
    let p = g.out_pixels();
    let width = ns * p;
    let k = g.kernel;
    for s in 0..ns {
        let xs = &mut x[s * g.in_size()..(s + 1) * g.in_size()];
        for c in 0..g.in_channels {
            let plane = &mut xs[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * width + s * p..row * width + (s + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[ns, C, P]` sample-major block to a `C x (ns * P)` matrix.
fn gather_channels<T: Float>(src: &[T], ns: usize, channels: usize, p: usize, dst: &mut [T]) {
    let width = ns * p;
    for s in 0..ns {
        for c in 0..channels {
            dst[c * width + s * p..c * width + (s + 1) * p]
                .copy_from_slice(&src[(s * channels + c) * p..(s * channels + c + 1) * p]);
        }
    }
}

fn scatter_channels<T: Float>(src: &[T], ns: usize, channels: usize, p: usize, dst: &mut [T]) {
    let width = ns * p;
    for s in 0..ns {
        for c in 0..channels {
            dst[(s * channels + c) * p..(s * channels + c + 1) * p]
                .copy_from_slice(&src[c * width + s * p..c * width + (s + 1) * p]);
        }
    }
}

/// `y[n, co] = sum_ci w[co, ci] * x[n, ci]` (cross-correlation), no bias.
pub fn conv2d<T: Float>(g: &ConvGeom, batch: usize, x: &[T], w: &[T]) -> Vec<T> {
    assert_eq!(x.len(), batch * g.in_size(), "conv2d input length");
    assert_eq!(w.len(), g.out_channels * g.col_rows(), "conv2d weight length");
    let mut y = vec![T::zero(); batch * g.out_size()];
    if batch == 0 {
        return y;
    }
    let p = g.out_pixels();
    y.par_chunks_mut(CHUNK * g.out_size())
        .zip(x.par_chunks(CHUNK * g.in_size()))
        .for_each(|(yc, xc)| {
            let ns = xc.len() / g.in_size();
            let mut col = vec![T::zero(); g.col_rows() * ns * p];
            im2col(g, xc, ns, &mut col);
            let mut out = vec![T::zero(); g.out_channels * ns * p];
            T::gemm(
                false,
                false,
                g.out_channels,
                ns * p,
                g.col_rows(),
                T::one(),
                w,
                &col,
                T::zero(),
                &mut out,
            );
            scatter_channels(&out, ns, g.out_channels, p, yc);
        });
    y
}

/// Gradient of [`conv2d`] with respect to its input; also the forward pass of
/// a transposed convolution from `out_*` back to `in_*`.
pub fn conv2d_bwd_data<T: Float>(g: &ConvGeom, batch: usize, gy: &[T], w: &[T]) -> Vec<T> {
    assert_eq!(gy.len(), batch * g.out_size(), "conv2d_bwd_data grad length");
    assert_eq!(w.len(), g.out_channels * g.col_rows(), "conv2d_bwd_data weight length");
    let mut gx = vec![T::zero(); batch * g.in_size()];
    if batch == 0 {
        return gx;
    }
    let p = g.out_pixels();
    gx.par_chunks_mut(CHUNK * g.in_size())
        .zip(gy.par_chunks(CHUNK * g.out_size()))
        .for_each(|(xc, yc)| {
            let ns = yc.len() / g.out_size();
            let mut gmat = vec![T::zero(); g.out_channels * ns * p];
            gather_channels(yc, ns, g.out_channels, p, &mut gmat);
            let mut col = vec![T::zero(); g.col_rows() * ns * p];
            T::gemm(
                true,
                false,
                g.col_rows(),
                ns * p,
                g.out_channels,
                T::one(),
                w,
                &gmat,
                T::zero(),
                &mut col,
            );
            col2im(g, &col, ns, xc);
        });
    gx
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_bwd_filter<T: Float>(g: &ConvGeom, batch: usize, x: &[T], gy: &[T]) -> Vec<T> {
    assert_eq!(x.len(), batch * g.in_size(), "conv2d_bwd_filter input length");
    assert_eq!(gy.len(), batch * g.out_size(), "conv2d_bwd_filter grad length");
    let wlen = g.out_channels * g.col_rows();
    let p = g.out_pixels();
    let partials: Vec<Vec<T>> = x
        .par_chunks(CHUNK * g.in_size())
        .zip(gy.par_chunks(CHUNK * g.out_size()))
        .map(|(xc, yc)| {
            let ns = xc.len() / g.in_size();
            let mut col = vec![T::zero(); g.col_rows() * ns * p];
            im2col(g, xc, ns, &mut col);
            let mut gmat = vec![T::zero(); g.out_channels * ns * p];
            gather_channels(yc, ns, g.out_channels, p, &mut gmat);
            let mut gw = vec![T::zero(); wlen];
            T::gemm(
                false,
                true,
                g.out_channels,
                g.col_rows(),
                ns * p,
                T::one(),
                &gmat,
                &col,
                T::zero(),
                &mut gw,
            );
            gw
        })
        .collect();
    let mut gw = vec![T::zero(); wlen];
    for part in partials {
        for (a, b) in gw.iter_mut().zip(part) {
            *a += b;
        }
    }
    gw
}
