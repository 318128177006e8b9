//! Finite-difference verification of tape gradients, plus a registry of
//! randomized check cases covering every differentiable op exactly once.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BinaryKind, BnStats, ReduceKind, Tape, Tensor, UnaryKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_GRAD_EPS: f64 = 1e-5;

/// A differentiable scalar-valued function of several tensors: rebuilds
/// its graph from scratch on every call. Must be a pure function of the
/// inputs for finite differences to be meaningful.
pub type ScalarFn<'a, T> = dyn Fn(&mut Tape<T>, &[Tensor<T>]) -> Result<Tensor<T>> + 'a;

/// Compares the tape gradient of `f` against central finite differences
/// at every coordinate of every input. Returns the maximum relative error,
/// where the relative error denominator is max(1, |analytic|, |numeric|).
pub fn grad_check<T: Scalar>(f: &ScalarFn<'_, T>, inputs: &[Tensor<T>], eps: f64) -> Result<f64> {
    grad_check_impl(f, inputs, eps, None, 1.0)
}

/// Like `grad_check`, but verifies at most `max_coords` randomly chosen
/// coordinates per input (seeded), for functions too large to sweep fully.
///
/// Large piecewise-smooth programs (max gates, neighbor selection) have
/// coordinates where the probe straddles a kink and central differences
/// are meaningless. Such coordinates are detected by comparing the two
/// one-sided difference quotients against each other and skipped: a kink
/// makes them disagree with each other, while a wrong backward rule
/// leaves them agreeing with each other and disagreeing with the tape.
/// Skipping therefore cannot mask a corrupted gradient.
pub fn grad_check_sampled<T: Scalar>(
    f: &ScalarFn<'_, T>,
    inputs: &[Tensor<T>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    grad_check_impl(f, inputs, eps, Some((max_coords, seed)), 1.0)
}

/// Internal variant with a multiplicative skew applied to the analytic
/// gradient before comparison. skew = 1.0 is the honest check; any other
/// value simulates a corrupted backward rule so harness tests can prove
/// the checker catches one.
pub(crate) fn grad_check_skewed<T: Scalar>(
    f: &ScalarFn<'_, T>,
    inputs: &[Tensor<T>],
    eps: f64,
    skew: f64,
) -> Result<f64> {
    grad_check_impl(f, inputs, eps, None, skew)
}

/// One-sided slopes flag a coordinate as kink-straddling when they differ
/// by more than this, relative to the gradient scale. Surviving
/// coordinates have a central-difference error bounded by half this jump,
/// so the filter never admits a probe that could fail for smoothness
/// reasons alone.
const KINK_SLOPE_TOL: f64 = 1e-3;

fn grad_check_impl<T: Scalar>(
    f: &ScalarFn<'_, T>,
    inputs: &[Tensor<T>],
    eps: f64,
    sampling: Option<(usize, u64)>,
    skew: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::contract("grad_check", "eps must be positive"));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Tensor<T>> = inputs.iter().map(|t| tape.var(t)).collect();
    let y = f(&mut tape, &vars)?;
    if y.numel() != 1 {
        return Err(Error::contract("grad_check", format!("f must produce a scalar, got shape {:?}", y.shape())));
    }
    let grads = tape.backward(&y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            grads
                .get(v)
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; v.numel()])
        })
        .collect();

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    // The unperturbed value anchors the one-sided slopes of the kink
    // filter; only the sampled path pays for it.
    let f0 = if sampling.is_some() { Some(eval_scalar(f, inputs)?) } else { None };
    let mut max_err = 0.0f64;
    let mut checked_any = false;
    for (i, input) in inputs.iter().enumerate() {
        // Sample extra candidates so kink-straddling coordinates can be
        // replaced instead of shrinking the check.
        let (candidates, budget): (Vec<usize>, usize) = match (&mut rng, sampling) {
            (Some(rng), Some((cap, _))) if input.numel() > cap => {
                let wide = (cap.saturating_mul(8)).min(input.numel());
                let mut v = rand::seq::index::sample(rng, input.numel(), wide).into_vec();
                v.sort_unstable();
                (v, cap)
            }
            _ => {
                let n = input.numel();
                ((0..n).collect(), n)
            }
        };
        let mut checked = 0usize;
        for j in candidates {
            if checked == budget {
                break;
            }
            let base = input.data()[j];
            let plus = perturbed(inputs, i, j, base + T::from_f64(eps))?;
            let minus = perturbed(inputs, i, j, base - T::from_f64(eps))?;
            let fp = eval_scalar(f, &plus)?;
            let fm = eval_scalar(f, &minus)?;
            // Use the actually representable step, not the nominal eps.
            let xp = plus[i].data()[j].to_f64();
            let xm = minus[i].data()[j].to_f64();
            let h = (xp - xm) / 2.0;
            if h == 0.0 {
                return Err(Error::contract("grad_check", "perturbation underflowed to zero"));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i][j] * skew;
            let scale = 1.0f64.max(a.abs()).max(numeric.abs());
            if let Some(f0) = f0 {
                let x0 = base.to_f64();
                if xp == x0 || x0 == xm {
                    continue;
                }
                let left = (f0 - fm) / (x0 - xm);
                let right = (fp - f0) / (xp - x0);
                if (right - left).abs() > KINK_SLOPE_TOL * scale {
                    continue;
                }
            }
            checked += 1;
            checked_any = true;
            let err = (a - numeric).abs() / scale;
            if err > max_err {
                max_err = err;
            }
        }
    }
    if sampling.is_some() && !checked_any {
        return Err(Error::domain("grad_check", "every sampled coordinate straddles a kink"));
    }
    Ok(max_err)
}

fn perturbed<T: Scalar>(inputs: &[Tensor<T>], which: usize, coord: usize, value: T) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        if i == which {
            let mut data = t.data().to_vec();
            data[coord] = value;
            out.push(Tensor::from_vec(t.shape().to_vec(), data)?);
        } else {
            out.push(t.clone());
        }
    }
    Ok(out)
}

fn eval_scalar<T: Scalar>(f: &ScalarFn<'_, T>, inputs: &[Tensor<T>]) -> Result<f64> {
    let mut tape = Tape::disabled();
    let vars: Vec<Tensor<T>> = inputs.iter().map(|t| tape.var(t)).collect();
    let y = f(&mut tape, &vars)?;
    Ok(y.item()?.to_f64())
}

// ---- randomized per-op check registry ----

/// One randomized check instance: inputs plus the scalar graph to check.
pub struct CheckCase {
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<ScalarFn<'static, f64>>,
}

/// A differentiable op together with its random case generator.
pub struct OpCheck {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> CheckCase,
}

/// Every differentiable op, listed exactly once. Drives both the
/// command-line gradient check and the acceptance sweep.
pub fn op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "add", build: |r| binary_case(r, BinaryKind::Add) },
        OpCheck { name: "sub", build: |r| binary_case(r, BinaryKind::Sub) },
        OpCheck { name: "mul", build: |r| binary_case(r, BinaryKind::Mul) },
        OpCheck { name: "div", build: |r| binary_case(r, BinaryKind::Div) },
        OpCheck { name: "negate", build: |r| unary_case(r, UnaryKind::Negate) },
        OpCheck { name: "exp", build: |r| unary_case(r, UnaryKind::Exp) },
        OpCheck { name: "log", build: |r| unary_case(r, UnaryKind::Log) },
        OpCheck { name: "sqrt", build: |r| unary_case(r, UnaryKind::Sqrt) },
        OpCheck { name: "relu", build: |r| unary_case(r, UnaryKind::Relu) },
        OpCheck { name: "gelu", build: |r| unary_case(r, UnaryKind::Gelu) },
        OpCheck { name: "matmul", build: matmul_case },
        OpCheck { name: "conv2d", build: conv2d_case },
        OpCheck { name: "reduce_sum", build: |r| reduce_case(r, ReduceKind::Sum) },
        OpCheck { name: "reduce_mean", build: |r| reduce_case(r, ReduceKind::Mean) },
        OpCheck { name: "reduce_max", build: |r| reduce_case(r, ReduceKind::Max) },
        OpCheck { name: "batch_norm_train", build: |r| bn_case(r, true) },
        OpCheck { name: "batch_norm_eval", build: |r| bn_case(r, false) },
        OpCheck { name: "gather_rows", build: gather_case },
        OpCheck { name: "concat", build: concat_case },
        OpCheck { name: "narrow", build: narrow_case },
        OpCheck { name: "reshape", build: reshape_case },
        OpCheck { name: "permute", build: permute_case },
        OpCheck { name: "caps_predict", build: caps_predict_case },
    ]
}

/// Runs `instances` random cases of one op check and returns the maximum
/// relative error observed.
pub fn run_op_check(check: &OpCheck, instances: usize, seed: u64) -> Result<f64> {
    run_op_check_skewed(check, instances, seed, 1.0)
}

/// Test-fixture variant: `skew` corrupts the analytic gradient (see
/// `grad_check_skewed`). Used to prove the harness catches a bad rule.
pub fn run_op_check_skewed(check: &OpCheck, instances: usize, seed: u64, skew: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(check.name.as_bytes()));
    let mut max_err = 0.0f64;
    for _ in 0..instances {
        let case = (check.build)(&mut rng);
        let err = grad_check_skewed(case.f.as_ref(), &case.inputs, DEFAULT_GRAD_EPS, skew)?;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn rand_shape(rng: &mut ChaCha8Rng, max_rank: usize) -> Vec<usize> {
    let rank = rng.gen_range(1..=max_rank);
    (0..rank).map(|_| rng.gen_range(1..=6)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Weighted sum root: sum(y * w) with w a random constant, so gradients
/// are not uniformly 1.
fn weighted_root(rng: &mut ChaCha8Rng, y_shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(y_shape.to_vec(), -1.0, 1.0, rng)
}

fn binary_case(rng: &mut ChaCha8Rng, kind: BinaryKind) -> CheckCase {
    let a_shape = rand_shape(rng, 3);
    // b: either the same shape or a broadcastable trailing suffix with
    // some extents collapsed to 1.
    let b_shape: Vec<usize> = if rng.gen_bool(0.5) {
        a_shape.clone()
    } else {
        let start = rng.gen_range(0..a_shape.len());
        a_shape[start..]
            .iter()
            .map(|&e| if rng.gen_bool(0.4) { 1 } else { e })
            .collect()
    };
    let a = rand_tensor(rng, a_shape.clone(), -2.0, 2.0);
    let b = if matches!(kind, BinaryKind::Div) {
        // Keep the divisor away from zero.
        let mag = rand_tensor(rng, b_shape, 0.5, 2.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        mag.map(|v| v * sign)
    } else {
        rand_tensor(rng, b_shape, -2.0, 2.0)
    };
    let w = weighted_root(rng, a.shape());
    CheckCase {
        inputs: vec![a, b],
        f: Box::new(move |tape, xs| {
            let y = tape.apply_binary(kind, &xs[0], &xs[1])?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn unary_case(rng: &mut ChaCha8Rng, kind: UnaryKind) -> CheckCase {
    let shape = rand_shape(rng, 3);
    let x = match kind {
        // Positive domain, away from the origin.
        UnaryKind::Log | UnaryKind::Sqrt => rand_tensor(rng, shape, 0.2, 3.0),
        // Keep clear of the kink at zero.
        UnaryKind::Relu => {
            let t = rand_tensor(rng, shape.clone(), 0.1, 2.0);
            let signs: Vec<f64> = (0..t.numel()).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            Tensor::from_vec(shape, t.data().iter().zip(&signs).map(|(&v, &s)| v * s).collect()).unwrap()
        }
        _ => rand_tensor(rng, shape, -2.0, 2.0),
    };
    let w = weighted_root(rng, x.shape());
    CheckCase {
        inputs: vec![x],
        f: Box::new(move |tape, xs| {
            let y = tape.apply_unary(kind, &xs[0])?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn matmul_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
    let a = rand_tensor(rng, vec![m, k], -2.0, 2.0);
    let b = rand_tensor(rng, vec![k, n], -2.0, 2.0);
    let w = weighted_root(rng, &[m, n]);
    CheckCase {
        inputs: vec![a, b],
        f: Box::new(move |tape, xs| {
            let y = tape.matmul(&xs[0], &xs[1])?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let (b, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let (h, wd) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=1);
    let kh = rng.gen_range(1..=(h + 2 * padding).min(3));
    let kw = rng.gen_range(1..=(wd + 2 * padding).min(3));
    let x = rand_tensor(rng, vec![b, c, h, wd], -1.0, 1.0);
    let k = rand_tensor(rng, vec![o, c, kh, kw], -1.0, 1.0);
    let bias = rand_tensor(rng, vec![o], -0.5, 0.5);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let w = weighted_root(rng, &[b, o, oh, ow]);
    CheckCase {
        inputs: vec![x, k, bias],
        f: Box::new(move |tape, xs| {
            let y = tape.conv2d(&xs[0], &xs[1], Some(&xs[2]), stride, padding)?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn reduce_case(rng: &mut ChaCha8Rng, kind: ReduceKind) -> CheckCase {
    let shape = rand_shape(rng, 3);
    let rank = shape.len();
    let mut axes: Vec<usize> = (0..rank).filter(|_| rng.gen_bool(0.5)).collect();
    if axes.is_empty() {
        axes.push(rng.gen_range(0..rank));
    }
    let x = if matches!(kind, ReduceKind::Max) {
        // Well separated values so the winner is stable under the
        // finite-difference perturbation.
        let numel: usize = shape.iter().product();
        let mut values: Vec<f64> = (0..numel).map(|i| i as f64 * 0.25 + rng.gen_range(0.0..0.05)).collect();
        use rand::seq::SliceRandom;
        values.shuffle(rng);
        Tensor::from_vec(shape.clone(), values).unwrap()
    } else {
        rand_tensor(rng, shape.clone(), -2.0, 2.0)
    };
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(d, _)| !axes.contains(d)).map(|(_, &e)| e).collect();
    let w = weighted_root(rng, &out_shape);
    CheckCase {
        inputs: vec![x],
        f: Box::new(move |tape, xs| {
            let y = tape.reduce(kind, &xs[0], &axes)?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn bn_case(rng: &mut ChaCha8Rng, train: bool) -> CheckCase {
    let rows = rng.gen_range(2..=6);
    let cols = rng.gen_range(1..=4);
    let x = rand_tensor(rng, vec![rows, cols], -2.0, 2.0);
    let gamma = rand_tensor(rng, vec![cols], 0.5, 1.5);
    let beta = rand_tensor(rng, vec![cols], -0.5, 0.5);
    let running_mean: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let running_var: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.5..2.0)).collect();
    let w = weighted_root(rng, &[rows, cols]);
    CheckCase {
        inputs: vec![x, gamma, beta],
        f: Box::new(move |tape, xs| {
            let stats = if train {
                BnStats::Batch
            } else {
                BnStats::Running { mean: &running_mean, var: &running_var }
            };
            let (y, _) = tape.batch_norm_rows(&xs[0], &xs[1], &xs[2], stats, 1e-5)?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn gather_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let rows = rng.gen_range(2..=6);
    let cols = rng.gen_range(1..=4);
    let x = rand_tensor(rng, vec![rows, cols], -2.0, 2.0);
    let len = rng.gen_range(1..=6);
    let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..rows)).collect();
    let w = weighted_root(rng, &[len, cols]);
    CheckCase {
        inputs: vec![x],
        f: Box::new(move |tape, xs| {
            let y = tape.gather_rows(&xs[0], &idx)?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn concat_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let rank = rng.gen_range(1..=3);
    let axis = rng.gen_range(0..rank);
    let base: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
    let parts = rng.gen_range(2..=3);
    let mut inputs = Vec::new();
    let mut total = 0;
    for _ in 0..parts {
        let mut s = base.clone();
        s[axis] = rng.gen_range(1..=3);
        total += s[axis];
        inputs.push(rand_tensor(rng, s, -2.0, 2.0));
    }
    let mut out_shape = base;
    out_shape[axis] = total;
    let w = weighted_root(rng, &out_shape);
    CheckCase {
        inputs,
        f: Box::new(move |tape, xs| {
            let refs: Vec<&Tensor<f64>> = xs.iter().collect();
            let y = tape.concat(&refs, axis)?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn narrow_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let shape = rand_shape(rng, 3);
    let axis = rng.gen_range(0..shape.len());
    let extent = shape[axis];
    let len = rng.gen_range(1..=extent);
    let start = rng.gen_range(0..=extent - len);
    let x = rand_tensor(rng, shape.clone(), -2.0, 2.0);
    let mut out_shape = shape;
    out_shape[axis] = len;
    let w = weighted_root(rng, &out_shape);
    CheckCase {
        inputs: vec![x],
        f: Box::new(move |tape, xs| {
            let y = tape.narrow(&xs[0], axis, start, len)?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn reshape_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let shape = rand_shape(rng, 3);
    let numel: usize = shape.iter().product();
    let x = rand_tensor(rng, shape, -2.0, 2.0);
    let w = weighted_root(rng, &[numel]);
    CheckCase {
        inputs: vec![x],
        f: Box::new(move |tape, xs| {
            let y = tape.reshape(&xs[0], vec![xs[0].numel()])?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn permute_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let shape: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=4)).collect();
    let mut axes: Vec<usize> = vec![0, 1, 2];
    use rand::seq::SliceRandom;
    axes.shuffle(rng);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let x = rand_tensor(rng, shape, -2.0, 2.0);
    let w = weighted_root(rng, &out_shape);
    CheckCase {
        inputs: vec![x],
        f: Box::new(move |tape, xs| {
            let y = tape.permute(&xs[0], &axes)?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

fn caps_predict_case(rng: &mut ChaCha8Rng) -> CheckCase {
    let b = rng.gen_range(1..=2);
    let s = rng.gen_range(1..=2);
    let m = s * rng.gen_range(1..=2);
    let p = rng.gen_range(2..=4);
    let c = rng.gen_range(1..=3);
    let d = rng.gen_range(1..=3);
    let u = rand_tensor(rng, vec![b, m, p], -1.0, 1.0);
    let wt = rand_tensor(rng, vec![s, c, p, d], -1.0, 1.0);
    let w = weighted_root(rng, &[b, m, c, d]);
    CheckCase {
        inputs: vec![u, wt],
        f: Box::new(move |tape, xs| {
            let y = tape.caps_predict(&xs[0], &xs[1])?;
            let wy = tape.mul(&y, &w)?;
            tape.sum_all(&wy)
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_verified() {
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let f: Box<ScalarFn<'static, f64>> = Box::new(|tape, xs| {
            let y = tape.mul(&xs[0], &xs[0])?;
            tape.sum_all(&y)
        });
        let err = grad_check(f.as_ref(), &[x], DEFAULT_GRAD_EPS).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn default_eps_is_1e_minus_5() {
        assert_eq!(DEFAULT_GRAD_EPS, 1e-5);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let checks = op_checks();
        let matmul = checks.iter().find(|c| c.name == "matmul").unwrap();
        let err = run_op_check_skewed(matmul, 3, 1234, 1.001).unwrap();
        assert!(err > 1e-4, "skewed gradient must breach the threshold, got {err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let f: Box<ScalarFn<'static, f64>> = Box::new(|tape, xs| tape.add(&xs[0], &xs[0]));
        assert!(grad_check(f.as_ref(), &[x], DEFAULT_GRAD_EPS).is_err());
    }

    #[test]
    fn registry_lists_every_op_once() {
        let checks = op_checks();
        let mut names: Vec<&str> = checks.iter().map(|c| c.name).collect();
        let n = names.len();
        names.dedup();
        assert_eq!(n, names.len());
        assert_eq!(n, 23);
    }

    #[test]
    fn sampled_check_handles_large_inputs() {
        let x = Tensor::from_fn(vec![40], |i| (i as f64) * 0.1 - 2.0);
        let f: Box<ScalarFn<'static, f64>> = Box::new(|tape, xs| {
            let y = tape.gelu(&xs[0])?;
            tape.sum_all(&y)
        });
        let err = grad_check_sampled(f.as_ref(), &[x], DEFAULT_GRAD_EPS, 8, 99).unwrap();
        assert!(err < 1e-7, "err = {err}");
    }
}
