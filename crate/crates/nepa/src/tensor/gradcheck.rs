//! Central finite-difference checking of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` and returns the max relative
/// error over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    finite_diff_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`finite_diff_check`]: every input is a leaf and is
/// perturbed coordinate by coordinate.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        if out.numel() != 1 {
            return Err(Error::shape("finite_diff_check", out.shape(), &[1]));
        }
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value {v}")));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.value().item().is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut inputs = xs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in 0..xs[slot].numel() {
            let orig = xs[slot].data()[i];
            inputs[slot].data_mut()[i] = orig + h;
            let plus = eval(&inputs)?;
            inputs[slot].data_mut()[i] = orig - h;
            let minus = eval(&inputs)?;
            inputs[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of one named gradient check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

/// Contracts a tensor-valued output with fixed random weights so that every
/// output coordinate contributes a distinct amount to the scalar.
fn contract<'t>(y: Var<'t, f64>, w_seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(w_seed);
    let w = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let w = y.tape().constant(w);
    Ok(y.mul(w)?.sum())
}

type PrimitiveFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct Primitive {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    f: PrimitiveFn,
}

fn rope_tables(seq: usize, half: usize) -> (Tensor<f64>, Tensor<f64>) {
    let angle = |i: usize| {
        let (t, j) = (i / half, i % half);
        t as f64 * 10000f64.powf(-2.0 * j as f64 / (2 * half) as f64)
    };
    (
        Tensor::from_fn([seq, half], |i| angle(i).cos()),
        Tensor::from_fn([seq, half], |i| angle(i).sin()),
    )
}

fn primitives() -> Vec<Primitive> {
    vec![
        Primitive { name: "add", shapes: &[&[3, 4], &[3, 4]], f: |_, v| contract(v[0].add(v[1])?, 1) },
        Primitive { name: "sub", shapes: &[&[3, 4], &[3, 4]], f: |_, v| contract(v[0].sub(v[1])?, 2) },
        Primitive { name: "mul", shapes: &[&[3, 4], &[3, 4]], f: |_, v| contract(v[0].mul(v[1])?, 3) },
        Primitive { name: "add_broadcast", shapes: &[&[2, 3, 4], &[4]], f: |_, v| contract(v[0].add_broadcast(v[1])?, 4) },
        Primitive { name: "mul_broadcast", shapes: &[&[2, 3, 4], &[3, 4]], f: |_, v| contract(v[0].mul_broadcast(v[1])?, 5) },
        Primitive { name: "scale", shapes: &[&[5]], f: |_, v| contract(v[0].scale(-1.7), 6) },
        Primitive { name: "offset", shapes: &[&[5]], f: |_, v| contract(v[0].offset(0.3), 7) },
        Primitive { name: "matmul", shapes: &[&[3, 4], &[4, 2]], f: |_, v| contract(v[0].matmul(v[1])?, 8) },
        Primitive { name: "matmul_batched", shapes: &[&[2, 3, 4], &[2, 4, 2]], f: |_, v| contract(v[0].matmul(v[1])?, 9) },
        Primitive { name: "matmul_shared_rhs", shapes: &[&[2, 3, 4], &[4, 5]], f: |_, v| contract(v[0].matmul(v[1])?, 10) },
        Primitive { name: "permute", shapes: &[&[2, 3, 4]], f: |_, v| contract(v[0].permute(&[2, 0, 1])?, 11) },
        Primitive { name: "transpose", shapes: &[&[2, 3, 4]], f: |_, v| contract(v[0].transpose()?, 12) },
        Primitive { name: "reshape", shapes: &[&[2, 6]], f: |_, v| contract(v[0].reshape(&[3, 4])?, 13) },
        Primitive { name: "slice", shapes: &[&[3, 5]], f: |_, v| contract(v[0].slice(1, 1..4)?, 14) },
        Primitive { name: "concat", shapes: &[&[2, 3], &[2, 2]], f: |t, v| contract(t.concat(&[v[0], v[1]], 1)?, 15) },
        Primitive { name: "sum", shapes: &[&[3, 2]], f: |_, v| Ok(v[0].sum().scale(0.7)) },
        Primitive { name: "mean", shapes: &[&[3, 2]], f: |_, v| Ok(v[0].mean().scale(1.3)) },
        Primitive { name: "sum_axis", shapes: &[&[2, 3, 4]], f: |_, v| contract(v[0].sum_axis(1)?, 16) },
        Primitive { name: "mean_axis", shapes: &[&[2, 3, 4]], f: |_, v| contract(v[0].mean_axis(2)?, 17) },
        Primitive { name: "gelu", shapes: &[&[8]], f: |_, v| contract(v[0].gelu(), 18) },
        Primitive { name: "silu", shapes: &[&[8]], f: |_, v| contract(v[0].silu(), 19) },
        Primitive { name: "softmax", shapes: &[&[3, 5]], f: |_, v| contract(v[0].softmax()?, 20) },
        Primitive { name: "log_softmax", shapes: &[&[3, 5]], f: |_, v| contract(v[0].log_softmax()?, 21) },
        Primitive { name: "layernorm", shapes: &[&[2, 5]], f: |_, v| contract(v[0].layer_norm(None, None, 1e-6)?, 22) },
        Primitive { name: "layernorm_affine", shapes: &[&[2, 5], &[5], &[5]], f: |_, v| contract(v[0].layer_norm(Some(v[1]), Some(v[2]), 1e-6)?, 23) },
        Primitive { name: "l2_normalize", shapes: &[&[2, 5]], f: |_, v| contract(v[0].l2_normalize(1e-12), 24) },
        Primitive { name: "stop_gradient", shapes: &[&[4], &[4]], f: |_, v| Ok(v[0].stop_gradient().stop_gradient().mul(v[1])?.sum()) },
        Primitive { name: "gather", shapes: &[&[4, 3]], f: |_, v| contract(v[0].gather(&[3, 0, 3, 1])?, 25) },
        Primitive {
            name: "rope",
            shapes: &[&[2, 3, 4]],
            f: |_, v| {
                let (c, s) = rope_tables(3, 2);
                contract(v[0].rope(&c, &s)?, 26)
            },
        },
        Primitive {
            name: "cross_entropy",
            shapes: &[&[3, 4]],
            f: |t, v| {
                let target = Tensor::from_f64([3, 4], &[0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25])?;
                Ok(v[0].log_softmax()?.mul(t.constant(target))?.sum().neg())
            },
        },
    ]
}

/// Checks every tape primitive at inputs drawn from `seed`.
///
/// `stop_gradient` is checked with respect to its second operand only; its
/// first operand is excluded from finite differencing because the barrier
/// deliberately disagrees with the numerical derivative there.
pub fn primitive_checks(seed: u64, h: f64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in primitives() {
        let xs: Vec<Tensor<f64>> = p
            .shapes
            .iter()
            .map(|s| Tensor::<f64>::uniform(s.to_vec(), -1.5, 1.5, &mut rng))
            .collect();
        let err = if p.name == "stop_gradient" {
            let fixed = xs[0].clone();
            let f = p.f;
            finite_diff_check(
                move |tape, y| {
                    let x = tape.leaf(fixed.clone());
                    f(tape, &[x, y])
                },
                &xs[1],
                h,
            )?
        } else {
            finite_diff_check_many(p.f, &xs, h)?
        };
        out.push(CheckResult {
            name: p.name.to_string(),
            max_rel_error: err,
        });
    }
    Ok(out)
}

/// Largest error in `results`.
pub fn worst<'a>(results: impl IntoIterator<Item = &'a CheckResult>) -> f64 {
    results
        .into_iter()
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max)
}

/// Casts any element type to `f64` for checking.
pub fn to_f64<E: Element>(t: &Tensor<E>) -> Tensor<f64> {
    t.cast()
}
