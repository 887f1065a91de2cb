use super::tape::{GradBuffers, Op};
use super::{expect_eq, Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// `(N, C, spatial)` view of an `N x C` or `N x C x H x W` tensor.
fn layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match dims.len() {
        2 => Ok((dims[0], dims[1], 1)),
        4 => Ok((dims[0], dims[1], dims[2] * dims[3])),
        _ => Err(TensorError::Rank {
            op: "batchnorm2d",
            expected: 4,
            dims: dims.to_vec(),
        }),
    }
}

impl<T: Scalar> Tape<T> {
    /// Per-channel batch normalization. In train mode the running mean and
    /// unbiased running variance are updated in place with momentum
    /// [`BN_MOMENTUM`].
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: BatchNormMode,
    ) -> Result<Var> {
        let dims = self.dims(input).to_vec();
        let (n, c, area) = layout(&dims)?;
        for (name, v) in [("gamma length", gamma), ("beta length", beta)] {
            expect_eq("batchnorm2d", name, c, self.value(v).numel())?;
        }
        expect_eq("batchnorm2d", "running mean length", c, running_mean.len())?;
        expect_eq("batchnorm2d", "running var length", c, running_var.len())?;
        let count = n * area;
        let train = mode == BatchNormMode::Train;
        if train && count < 2 {
            return Err(TensorError::Invalid {
                op: "batchnorm2d",
                reason: format!("train mode needs at least 2 values per channel, got {count} (degenerate variance)"),
            });
        }

        let x = self.data(input);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![0.0f64; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for s_ in 0..n {
                    for v in &x[(s_ * c + ch) * area..][..area] {
                        let v = v.as_f64();
                        s += v;
                        s2 += v * v;
                    }
                }
                let mean = s / count as f64;
                let var = (s2 / count as f64 - mean * mean).max(0.0);
                let unbiased = var * count as f64 / (count - 1) as f64;
                let rm = running_mean[ch].as_f64();
                let rv = running_var[ch].as_f64();
                running_mean[ch] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean);
                running_var[ch] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * unbiased);
                (mean, var)
            } else {
                (running_mean[ch].as_f64(), running_var[ch].as_f64())
            };
            let is = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std[ch] = is;
            let (gv, bv) = (g[ch].as_f64(), b[ch].as_f64());
            for s_ in 0..n {
                let base = (s_ * c + ch) * area;
                for i in base..base + area {
                    let h = (x[i].as_f64() - mean) * is;
                    xhat[i] = T::from_f64_lossy(h);
                    out[i] = T::from_f64_lossy(gv * h + bv);
                }
            }
        }
        let value = Tensor::from_vec(&dims, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batchnorm_backward<T: Scalar>(
    in_dims: &[usize],
    gamma_t: &Tensor<T>,
    (input, gamma, beta): (Var, Var, Var),
    xhat: &[T],
    inv_std: &[f64],
    train: bool,
    dy: &[T],
    bufs: &mut GradBuffers<'_, T>,
) {
    let (n, c, area) = layout(in_dims).expect("validated in forward");
    let count = (n * area) as f64;
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * area;
            for i in base..base + area {
                sum_dy += dy[i].as_f64();
                sum_dy_xhat += dy[i].as_f64() * xhat[i].as_f64();
            }
        }
        if let Some(dg) = bufs.get(gamma) {
            dg[ch] += T::from_f64_lossy(sum_dy_xhat);
        }
        if let Some(db) = bufs.get(beta) {
            db[ch] += T::from_f64_lossy(sum_dy);
        }
        let gv = gamma_t.data()[ch].as_f64();
        let is = inv_std[ch];
        if let Some(dx) = bufs.get(input) {
            for s in 0..n {
                let base = (s * c + ch) * area;
                for i in base..base + area {
                    let d = if train {
                        gv * is / count * (count * dy[i].as_f64() - sum_dy - xhat[i].as_f64() * sum_dy_xhat)
                    } else {
                        gv * is * dy[i].as_f64()
                    };
                    dx[i] += T::from_f64_lossy(d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
        let y = tape.batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in tape.data(y).iter().zip(tape.data(x)) {
            assert!((a - b * scale).abs() < 1e-12);
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(rm, vec![0.0; 3]);
    }

    #[test]
    fn train_mode_normalizes_and_updates_running_stats() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::uniform(&[4, 2, 3, 3], 1.0, 5.0, &mut rng));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = tape.batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Train).unwrap();
        let yv = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| (0..9).map(move |i| (s, i)))
                .map(|(s, i)| yv.data()[(s * 2 + ch) * 9 + i])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(rm.iter().all(|&m| m > 0.1 && m < 0.5));
    }

    #[test]
    fn single_value_per_channel_rejected_in_train() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let err = tape.batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Train).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
        assert!(tape.batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Eval).is_ok());
    }
}
