use super::tape::{GradBuffers, Op};
use super::{expect_eq, Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

fn same_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    expect_eq(op, "rank", a.len(), b.len())?;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        expect_eq(op, &format!("axis {i}"), x, y)?;
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let value = Tensor::from_vec(v.dims(), data).expect("same dims");
        self.push(value, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("add", self.dims(a), self.dims(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.dims(a), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("sub", self.dims(a), self.dims(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let value = Tensor::from_vec(self.dims(a), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let v = self.value(input);
        let value = Tensor::from_vec(v.dims(), v.data().iter().map(|&x| x * factor).collect()).expect("same dims");
        self.push(value, Op::Scale { input, factor })
    }

    /// Softmax over the last axis, computed in `f64` with max subtraction.
    pub fn softmax_lastdim(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let last = *v.dims().last().expect("tensors have rank >= 1");
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(last) {
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, x| acc.max(x.as_f64()));
            let e: Vec<f64> = row.iter().map(|x| (x.as_f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|x| T::from_f64_lossy(x / z)));
        }
        let value = Tensor::from_vec(v.dims(), out).expect("same dims");
        self.push(value, Op::Softmax { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.data(input).iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let d = self.data(input);
        let s: f64 = d.iter().map(|v| v.as_f64()).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Mean { input })
    }

    /// `sum(x * weights)` for a constant weight vector; a random projection
    /// to a scalar used by the gradient checks.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        expect_eq("weighted_sum", "length", self.value(input).numel(), weights.len())?;
        let s: f64 = self
            .data(input)
            .iter()
            .zip(&weights)
            .map(|(x, w)| x.as_f64() * w.as_f64())
            .sum();
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::WeightedSum { input, weights }))
    }

    /// Picks one element by flat index as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let n = self.value(input).numel();
        if index >= n {
            return Err(TensorError::Invalid {
                op: "select",
                reason: format!("index {index} out of range for {n} elements"),
            });
        }
        let v = self.data(input)[index];
        Ok(self.push(Tensor::scalar(v), Op::Select { input, index }))
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_dims("l1_loss", self.dims(target), self.dims(pred))?;
        let n = self.value(pred).numel() as f64;
        let s: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, t)| (p.as_f64() - t.as_f64()).abs())
            .sum();
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s / n)), Op::L1Loss { pred, target }))
    }
}

pub(super) fn relu_backward<T: Scalar>(x: &Tensor<T>, input: Var, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    if let Some(dx) = bufs.get(input) {
        for ((d, &xv), &g) in dx.iter_mut().zip(x.data()).zip(dy) {
            if xv > T::zero() {
                *d += g;
            }
        }
    }
}

pub(super) fn add_backward<T: Scalar>(a: Var, b: Var, sign_b: T, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    if let Some(da) = bufs.get(a) {
        for (d, &g) in da.iter_mut().zip(dy) {
            *d += g;
        }
    }
    if let Some(db) = bufs.get(b) {
        for (d, &g) in db.iter_mut().zip(dy) {
            *d += sign_b * g;
        }
    }
}

pub(super) fn passthrough_backward<T: Scalar>(input: Var, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    scale_backward(input, T::one(), dy, bufs)
}

pub(super) fn scale_backward<T: Scalar>(input: Var, factor: T, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    if let Some(dx) = bufs.get(input) {
        for (d, &g) in dx.iter_mut().zip(dy) {
            *d += factor * g;
        }
    }
}

pub(super) fn softmax_backward<T: Scalar>(y: &Tensor<T>, input: Var, dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    let Some(dx) = bufs.get(input) else { return };
    let last = *y.dims().last().unwrap();
    for ((yr, gr), dr) in y.data().chunks(last).zip(dy.chunks(last)).zip(dx.chunks_mut(last)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += T::from_f64_lossy(yv.as_f64() * (gv.as_f64() - dot));
        }
    }
}

pub(super) fn fill_backward<T: Scalar>(input: Var, value: T, _dy: &[T], bufs: &mut GradBuffers<'_, T>) {
    if let Some(dx) = bufs.get(input) {
        for d in dx.iter_mut() {
            *d += value;
        }
    }
}

pub(super) fn weighted_sum_backward<T: Scalar>(input: Var, weights: &[T], g: T, bufs: &mut GradBuffers<'_, T>) {
    if let Some(dx) = bufs.get(input) {
        for (d, &w) in dx.iter_mut().zip(weights) {
            *d += g * w;
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(super) fn l1_backward<T: Scalar>(
    p: &Tensor<T>,
    t: &Tensor<T>,
    pred: Var,
    target: Var,
    g: T,
    bufs: &mut GradBuffers<'_, T>,
) {
    let scale = g / T::from_usize(p.numel()).unwrap();
    if let Some(dp) = bufs.get(pred) {
        for ((d, &a), &b) in dp.iter_mut().zip(p.data()).zip(t.data()) {
            *d += scale * sign(a - b);
        }
    }
    if let Some(dt) = bufs.get(target) {
        for ((d, &a), &b) in dt.iter_mut().zip(p.data()).zip(t.data()) {
            *d -= scale * sign(a - b);
        }
    }
}
