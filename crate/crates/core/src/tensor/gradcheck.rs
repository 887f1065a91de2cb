//! Central finite-difference gradient checks.
//!
//! Checks run on `f64` tapes: the operator under test is evaluated at
//! `x +/- h` per coordinate and compared against the reverse-mode gradient
//! of a random projection `sum(w * op(x))` of its output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor of the relative error, so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Random inputs in `[-1, 1)` for the given dims, deterministic in `seed`.
pub fn random_inputs(dims: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dims.iter().map(|d| Tensor::uniform(d, -1.0, 1.0, &mut rng)).collect()
}

/// Reassigns values so they are pairwise at least `gap` apart while keeping
/// their order, moving every input away from max-pool ties.
pub fn separate_values(t: &mut Tensor<f64>, gap: f64) {
    let mut order: Vec<usize> = (0..t.numel()).collect();
    let data = t.data_mut();
    order.sort_by(|&a, &b| data[a].total_cmp(&data[b]).then(a.cmp(&b)));
    let base = data[order[0]];
    let mut prev = f64::NEG_INFINITY;
    for &ix in &order {
        let v = data[ix].max(base).max(prev + gap);
        data[ix] = v;
        prev = v;
    }
}

/// Pushes values within `gap` of `point` out to `point +/- gap` (kinks of
/// relu and of the L1 loss).
pub fn keep_away_from(t: &mut Tensor<f64>, point: f64, gap: f64) {
    for v in t.data_mut() {
        if (*v - point).abs() < gap {
            *v = if *v >= point { point + gap } else { point - gap };
        }
    }
}

fn projected_loss<F>(tape: &mut Tape<f64>, vars: &[Var], op: &F, weights: &mut Option<Vec<f64>>, seed: u64) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out = op(tape, vars)?;
    let n = tape.value(out).numel();
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    });
    if w.len() != n {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            reason: "output size changed between evaluations".into(),
        });
    }
    tape.weighted_sum(out, w.clone())
}

/// Compares reverse-mode gradients of `op` with central differences on
/// every coordinate of every input. Deterministic given the inputs and seed.
pub fn finite_diff_check_inputs<F>(inputs: Vec<Tensor<f64>>, seed: u64, step: f64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = projected_loss(&mut tape, &vars, &op, &mut weights, seed)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor<f64>], weights: &mut Option<Vec<f64>>| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let l = projected_loss(&mut t, &vs, &op, weights, seed)?;
        Ok(t.data(l)[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work = inputs;
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work, &mut weights)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work, &mut weights)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// [`finite_diff_check_inputs`] on random inputs of the given dims.
pub fn finite_diff_check<F>(input_dims: &[&[usize]], seed: u64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_inputs(random_inputs(input_dims, seed), seed, FD_STEP, op)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_scale() {
        assert!(relative_error(1.0, 2.0) > 0.4);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn linear_gradients_match() {
        let r = finite_diff_check(&[&[2, 3], &[4, 3], &[4]], 11, |t, v| t.linear(v[0], v[1], Some(v[2]))).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(r.coordinates, 6 + 12 + 4);
    }

    #[test]
    fn separated_values_keep_order() {
        let mut t = Tensor::from_vec(&[4], vec![0.5, 0.5, -1.0, 0.50001]).unwrap();
        separate_values(&mut t, 0.01);
        let d = t.data();
        assert!(d[2] < d[0] && d[0] < d[1] && d[1] < d[3]);
        assert!((d[1] - d[0]) >= 0.01 - 1e-12);
    }

    #[test]
    fn deterministic_for_seed() {
        let f = |t: &mut Tape<f64>, v: &[Var]| Ok(t.softmax_lastdim(v[0]));
        let a = finite_diff_check(&[&[3, 5]], 5, f).unwrap();
        let b = finite_diff_check(&[&[3, 5]], 5, f).unwrap();
        assert_eq!(a, b);
    }
}
