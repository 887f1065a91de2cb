use super::tape::{GradBuffers, Op};
use super::{expect_eq, expect_rank, numel, Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

impl<T: Scalar> Tape<T> {
    /// Affine map `x W^T + b` for `x: N x F`, `W: O x F`, `b: O`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let wd = self.dims(weight).to_vec();
        expect_rank("linear", &xd, 2)?;
        expect_rank("linear weight", &wd, 2)?;
        expect_eq("linear", "features", wd[1], xd[1])?;
        let (n, f, o) = (xd[0], xd[1], wd[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            expect_rank("linear bias", self.dims(b), 1)?;
            expect_eq("linear", "bias length", o, self.dims(b)[0])?;
            let bd = self.data(b);
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.data(input),
            (f as isize, 1),
            self.data(weight),
            (1, f as isize),
            beta,
            &mut out,
            (o as isize, 1),
        );
        let value = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    /// Batched product `a b` (`B x M x K` by `B x K x N`) or, with
    /// `transpose_b`, `a b^T` (`b: B x N x K`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        expect_rank("bmm", &ad, 3)?;
        expect_rank("bmm rhs", &bd, 3)?;
        expect_eq("bmm", "batch", ad[0], bd[0])?;
        let (batch, m, k) = (ad[0], ad[1], ad[2]);
        let (kb, n) = if transpose_b { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
        expect_eq("bmm", "inner dimension", k, kb)?;
        let b_strides = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        for s in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.data(a)[s * m * k..(s + 1) * m * k],
                (k as isize, 1),
                &self.data(b)[s * k * n..(s + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[s * m * n..(s + 1) * m * n],
                (n as isize, 1),
            );
        }
        let value = Tensor::from_vec(&[batch, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, transpose_b }))
    }

    /// `N x C x H x W -> N x (H W) x C`.
    pub fn to_tokens(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input).to_vec();
        expect_rank("to_tokens", &d, 4)?;
        let (n, c, l) = (d[0], d[1], d[2] * d[3]);
        let x = self.data(input);
        let mut out = vec![T::zero(); n * l * c];
        for s in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    out[(s * l + t) * c + ch] = x[(s * c + ch) * l + t];
                }
            }
        }
        let value = Tensor::from_vec(&[n, l, c], out)?;
        Ok(self.push(value, Op::ToTokens { input }))
    }

    /// `N x (H W) x C -> N x C x H x W`.
    pub fn from_tokens(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let d = self.dims(input).to_vec();
        expect_rank("from_tokens", &d, 3)?;
        expect_eq("from_tokens", "token count", h * w, d[1])?;
        let (n, l, c) = (d[0], d[1], d[2]);
        let x = self.data(input);
        let mut out = vec![T::zero(); n * l * c];
        for s in 0..n {
            for t in 0..l {
                for ch in 0..c {
                    out[(s * c + ch) * l + t] = x[(s * l + t) * c + ch];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::FromTokens { input }))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let have = self.value(input).numel();
        if numel(dims) != have {
            return Err(TensorError::DataLength {
                dims: dims.to_vec(),
                len: have,
            });
        }
        let value = self.value(input).reshape(dims)?;
        Ok(self.push(value, Op::Reshape { input }))
    }

    /// Concatenates `N x F_i` feature matrices along the feature axis, in order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let n = self.dims(inputs[0]).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let d = self.dims(v);
            expect_rank("concat", d, 2)?;
            expect_eq("concat", "batch", n, d[0])?;
            widths.push(d[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for s in 0..n {
            for (&v, &f) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[s * f..(s + 1) * f]);
            }
        }
        let value = Tensor::from_vec(&[n, total], out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }))
    }
}

pub(super) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    (input, weight, bias): (Var, Var, Option<Var>),
    dy: &[T],
    bufs: &mut GradBuffers<'_, T>,
) {
    let (n, f, o) = (x.dims()[0], x.dims()[1], w.dims()[0]);
    if let Some(dx) = bufs.get(input) {
        // dX = dY (n x o) * W (o x f)
        T::gemm(n, o, f, T::one(), dy, (o as isize, 1), w.data(), (f as isize, 1), T::one(), dx, (f as isize, 1));
    }
    if let Some(dw) = bufs.get(weight) {
        // dW = dY^T (o x n) * X (n x f)
        T::gemm(o, n, f, T::one(), dy, (1, o as isize), x.data(), (f as isize, 1), T::one(), dw, (f as isize, 1));
    }
    if let Some(b) = bias {
        if let Some(db) = bufs.get(b) {
            for (j, d) in db.iter_mut().enumerate() {
                let acc: f64 = (0..n).map(|s| dy[s * o + j].as_f64()).sum();
                *d += T::from_f64_lossy(acc);
            }
        }
    }
}

pub(super) fn bmm_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    av: Var,
    bv: Var,
    transpose_b: bool,
    dc: &[T],
    bufs: &mut GradBuffers<'_, T>,
) {
    let (batch, m, k) = (a.dims()[0], a.dims()[1], a.dims()[2]);
    let n = if transpose_b { b.dims()[1] } else { b.dims()[2] };
    let (is, ks) = (k as isize, n as isize);
    if let Some(da) = bufs.get(av) {
        for s in 0..batch {
            let bs = &b.data()[s * k * n..(s + 1) * k * n];
            let dcs = &dc[s * m * n..(s + 1) * m * n];
            let das = &mut da[s * m * k..(s + 1) * m * k];
            // dA = dC (m x n) * op(B)^T (n x k)
            let b_strides = if transpose_b { (is, 1) } else { (1, ks) };
            T::gemm(m, n, k, T::one(), dcs, (ks, 1), bs, b_strides, T::one(), das, (is, 1));
        }
    }
    if let Some(db) = bufs.get(bv) {
        for s in 0..batch {
            let as_ = &a.data()[s * m * k..(s + 1) * m * k];
            let dcs = &dc[s * m * n..(s + 1) * m * n];
            let dbs = &mut db[s * k * n..(s + 1) * k * n];
            if transpose_b {
                // B is n x k: dB = dC^T (n x m) * A (m x k)
                T::gemm(n, m, k, T::one(), dcs, (1, ks), as_, (is, 1), T::one(), dbs, (is, 1));
            } else {
                // B is k x n: dB = A^T (k x m) * dC (m x n)
                T::gemm(k, m, n, T::one(), as_, (1, is), dcs, (ks, 1), T::one(), dbs, (ks, 1));
            }
        }
    }
}

pub(super) fn to_tokens_backward<T: Scalar>(in_dims: &[usize], input: Var, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    let Some(dx) = bufs.get(input) else { return };
    let (n, c, l) = (in_dims[0], in_dims[1], in_dims[2] * in_dims[3]);
    for s in 0..n {
        for ch in 0..c {
            for t in 0..l {
                dx[(s * c + ch) * l + t] += dy[(s * l + t) * c + ch];
            }
        }
    }
}

pub(super) fn from_tokens_backward<T: Scalar>(in_dims: &[usize], input: Var, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    let Some(dx) = bufs.get(input) else { return };
    let (n, l, c) = (in_dims[0], in_dims[1], in_dims[2]);
    for s in 0..n {
        for t in 0..l {
            for ch in 0..c {
                dx[(s * l + t) * c + ch] += dy[(s * c + ch) * l + t];
            }
        }
    }
}

pub(super) fn concat_backward<T: Scalar>(inputs: &[Var], dims: &[&[usize]], dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    let n = dims[0][0];
    let total: usize = dims.iter().map(|d| d[1]).sum();
    let mut offset = 0;
    for (&v, d) in inputs.iter().zip(dims) {
        let f = d[1];
        if let Some(dx) = bufs.get(v) {
            for s in 0..n {
                for (dst, src) in dx[s * f..(s + 1) * f].iter_mut().zip(&dy[s * total + offset..][..f]) {
                    *dst += *src;
                }
            }
        }
        offset += f;
    }
}
