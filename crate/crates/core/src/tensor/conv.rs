//! 2-D cross-correlation via im2col + GEMM.

use super::tape::{GradBuffers, Op};
use super::{expect_eq, expect_rank, window_output_size, Result, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1 stride-1 unpadded convolution reads the input as its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(
    xd: &[usize],
    wd: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Geometry)> {
    expect_rank("conv2d", xd, 4)?;
    expect_rank("conv2d weight", wd, 4)?;
    expect_eq("conv2d", "input channels", wd[1], xd[1])?;
    let oh = window_output_size("conv2d", "height", xd[2], wd[2], stride, padding)?;
    let ow = window_output_size("conv2d", "width", xd[3], wd[3], stride, padding)?;
    Ok((
        xd[0],
        wd[0],
        Geometry {
            cin: xd[1],
            h: xd[2],
            w: xd[3],
            kh: wd[2],
            kw: wd[3],
            oh,
            ow,
            stride,
            padding,
        },
    ))
}

impl<T: Scalar> Tape<T> {
    /// Zero-padded cross-correlation of `N x Cin x H x W` with
    /// `Cout x Cin x kh x kw` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cout, g) = geometry(self.dims(input), self.dims(weight), stride, padding)?;
        if let Some(b) = bias {
            expect_rank("conv2d bias", self.dims(b), 1)?;
            expect_eq("conv2d", "bias length", cout, self.dims(b)[0])?;
        }
        let x = self.data(input);
        let w = self.data(weight);
        let (k, p) = (g.rows(), g.cols());
        let in_plane = g.cin * g.h * g.w;
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for s in 0..n {
            let xs = &x[s * in_plane..(s + 1) * in_plane];
            let colv: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let os = &mut out[s * cout * p..(s + 1) * cout * p];
            if let Some(b) = bias {
                let bd = self.data(b);
                for (co, row) in os.chunks_mut(p).enumerate() {
                    row.fill(bd[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(cout, k, p, T::one(), w, (k as isize, 1), colv, (p as isize, 1), beta, os, (p as isize, 1));
        }
        let value = Tensor::from_vec(&[n, cout, g.oh, g.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    (input, weight, bias): (Var, Var, Option<Var>),
    stride: usize,
    padding: usize,
    out_dims: &[usize],
    dy: &[T],
    bufs: &mut GradBuffers<'_, T>,
) {
    let (n, cout, g) = geometry(x.dims(), w.dims(), stride, padding).expect("validated in forward");
    debug_assert_eq!(out_dims, &[n, cout, g.oh, g.ow]);
    let (k, p) = (g.rows(), g.cols());
    let in_plane = g.cin * g.h * g.w;

    if let Some(b) = bias {
        if let Some(db) = bufs.get(b) {
            for (co, dbv) in db.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for s in 0..n {
                    acc += dy[(s * cout + co) * p..][..p].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                *dbv += T::from_f64_lossy(acc);
            }
        }
    }

    let want_w = bufs.wants(weight);
    let want_x = bufs.wants(input);
    if !want_w && !want_x {
        return;
    }
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = vec![T::zero(); k * p];
    for s in 0..n {
        let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
        let dys = &dy[s * cout * p..(s + 1) * cout * p];
        if want_w {
            let colv: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let dw = bufs.get(weight).expect("weight wants grad");
            // dW += dY (cout x p) * cols^T (p x k)
            T::gemm(cout, p, k, T::one(), dys, (p as isize, 1), colv, (1, p as isize), T::one(), dw, (k as isize, 1));
        }
        if want_x {
            // dcols = W^T (k x cout) * dY (cout x p)
            T::gemm(k, cout, p, T::one(), w.data(), (1, k as isize), dys, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
            let dx = bufs.get(input).expect("input wants grad");
            let dxs = &mut dx[s * in_plane..(s + 1) * in_plane];
            if g.is_pointwise() {
                for (d, c) in dxs.iter_mut().zip(&dcols) {
                    *d += *c;
                }
            } else {
                col2im_add(&dcols, &g, dxs);
            }
        }
    }
}
