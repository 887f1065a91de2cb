use super::tape::{GradBuffers, Op};
use super::{expect_rank, window_output_size, Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

fn spatial(op: &'static str, dims: &[usize]) -> Result<(usize, usize, usize)> {
    expect_rank(op, dims, 4)?;
    Ok((dims[0] * dims[1], dims[2], dims[3]))
}

impl<T: Scalar> Tape<T> {
    /// Max pooling with `-inf` padding. Ties resolve to the first element in
    /// row-major window order, and only that element receives gradient.
    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let (planes, h, w) = spatial("maxpool2d", &dims)?;
        let oh = window_output_size("maxpool2d", "height", h, kernel, stride, padding)?;
        let ow = window_output_size("maxpool2d", "width", w, kernel, stride, padding)?;
        if padding >= kernel {
            return Err(TensorError::Invalid {
                op: "maxpool2d",
                reason: format!("padding {padding} must be smaller than kernel {kernel}"),
            });
        }
        let x = self.data(input);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_ix = usize::MAX;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let flat = base + iy as usize * w + ix as usize;
                            if best_ix == usize::MAX || x[flat] > best {
                                best = x[flat];
                                best_ix = flat;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_ix);
                }
            }
        }
        let value = Tensor::from_vec(&[dims[0], dims[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }))
    }

    /// Mean over `kernel x kernel` windows; the divisor is always `kernel^2`.
    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let (planes, h, w) = spatial("avgpool2d", &dims)?;
        let oh = window_output_size("avgpool2d", "height", h, kernel, stride, 0)?;
        let ow = window_output_size("avgpool2d", "width", w, kernel, stride, 0)?;
        let x = self.data(input);
        let inv = 1.0 / (kernel * kernel) as f64;
        let mut out = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let plane = &x[pl * h * w..(pl + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ki in 0..kernel {
                        let row = &plane[(oy * stride + ki) * w + ox * stride..][..kernel];
                        acc += row.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    out.push(T::from_f64_lossy(acc * inv));
                }
            }
        }
        let value = Tensor::from_vec(&[dims[0], dims[1], oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2d { input, kernel, stride }))
    }

    /// Zero padding of both spatial axes.
    pub fn pad2d(&mut self, input: Var, padding: usize) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let (planes, h, w) = spatial("pad2d", &dims)?;
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        let x = self.data(input);
        let mut out = vec![T::zero(); planes * ph * pw];
        for pl in 0..planes {
            for y in 0..h {
                let src = &x[(pl * h + y) * w..][..w];
                out[(pl * ph + y + padding) * pw + padding..][..w].copy_from_slice(src);
            }
        }
        let value = Tensor::from_vec(&[dims[0], dims[1], ph, pw], out)?;
        Ok(self.push(value, Op::Pad2d { input, padding }))
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let (planes, h, w) = spatial("global_avg_pool", &dims)?;
        let area = h * w;
        let x = self.data(input);
        let out = (0..planes)
            .map(|pl| {
                let s: f64 = x[pl * area..(pl + 1) * area].iter().map(|v| v.as_f64()).sum();
                T::from_f64_lossy(s / area as f64)
            })
            .collect();
        let value = Tensor::from_vec(&[dims[0], dims[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }))
    }
}

pub(super) fn maxpool_backward<T: Scalar>(input: Var, argmax: &[usize], dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    if let Some(dx) = bufs.get(input) {
        for (&ix, &g) in argmax.iter().zip(dy) {
            dx[ix] += g;
        }
    }
}

pub(super) fn avgpool_backward<T: Scalar>(
    in_dims: &[usize],
    input: Var,
    kernel: usize,
    stride: usize,
    out_dims: &[usize],
    dy: &[T],
    bufs: &mut GradBuffers<'_, T>,
) {
    let Some(dx) = bufs.get(input) else { return };
    let (h, w) = (in_dims[2], in_dims[3]);
    let (oh, ow) = (out_dims[2], out_dims[3]);
    let inv = T::from_f64_lossy(1.0 / (kernel * kernel) as f64);
    for pl in 0..in_dims[0] * in_dims[1] {
        let plane = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(pl * oh + oy) * ow + ox] * inv;
                for ki in 0..kernel {
                    for v in &mut plane[(oy * stride + ki) * w + ox * stride..][..kernel] {
                        *v += g;
                    }
                }
            }
        }
    }
}

pub(super) fn pad_backward<T: Scalar>(
    in_dims: &[usize],
    input: Var,
    padding: usize,
    dy: &[T],
    bufs: &mut GradBuffers<'_, T>,
) {
    let Some(dx) = bufs.get(input) else { return };
    let (h, w) = (in_dims[2], in_dims[3]);
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    for pl in 0..in_dims[0] * in_dims[1] {
        for y in 0..h {
            let src = &dy[(pl * ph + y + padding) * pw + padding..][..w];
            for (d, s) in dx[(pl * h + y) * w..][..w].iter_mut().zip(src) {
                *d += *s;
            }
        }
    }
}

pub(super) fn global_avg_backward<T: Scalar>(in_dims: &[usize], input: Var, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    let Some(dx) = bufs.get(input) else { return };
    let area = in_dims[2] * in_dims[3];
    let inv = T::from_f64_lossy(1.0 / area as f64);
    for (pl, &g) in dy.iter().enumerate() {
        for v in &mut dx[pl * area..(pl + 1) * area] {
            *v += g * inv;
        }
    }
}
