//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever evaluates forward values on fresh tapes with
//! constant inputs, so it shares no code with the backward rules it checks.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{AttentionMask, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative-error floor: differences are measured against
/// `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn eval_loss<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let v = tape.try_value(loss)?;
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares `backward` against central differences of step `h` for every
/// element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval_loss(&probe, &build)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval_loss(&probe, &build)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, checked })
}

/// Reduces an arbitrary-shape output to a scalar through a fixed projection,
/// `sum(out * weights)`, so every output element contributes distinctly.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A scalar-valued graph over `inputs`, for [`check_gradients`].
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: BuildFn,
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("sized")
}

/// One case per primitive, each through a fixed random projection.
pub fn primitive_cases(rng: &mut impl Rng) -> Vec<GradCase> {
    let mut proj = |shape: &[usize]| random_tensor(&mut *rng, shape);
    let mask = Arc::new(AttentionMask::from_fn(3, 3, |i, j| j <= i || j == 2));
    let p33 = proj(&[6, 4]);
    let p34 = proj(&[3, 4]);
    let p35 = proj(&[3, 5]);
    let p36 = proj(&[3, 6]);
    let p66 = proj(&[6, 3]);
    let p12 = proj(&[12, 2]);
    let p62 = proj(&[6, 2]);
    let p24 = proj(&[2, 4]);
    let cases: Vec<(&'static str, Vec<Tensor>, BuildFn)> = vec![
        ("matmul", vec![proj(&[3, 2]), proj(&[2, 4])], Box::new(move |t: &mut Tape, x: &[Var]| {
            let y = t.matmul(x[0], x[1])?;
            project(t, y, &p34)
        })),
        ("add_bias", vec![proj(&[3, 4]), proj(&[4])], Box::new({
            let p = proj(&[3, 4]);
            move |t: &mut Tape, x: &[Var]| {
                let y = t.add_bias(x[0], x[1])?;
                project(t, y, &p)
            }
        })),
        ("mul_row", vec![proj(&[3, 4]), proj(&[4])], Box::new({
            let p = proj(&[3, 4]);
            move |t: &mut Tape, x: &[Var]| {
                let y = t.mul_row(x[0], x[1])?;
                project(t, y, &p)
            }
        })),
        ("add_sub_mul", vec![proj(&[3, 5]), proj(&[3, 5])], Box::new(move |t: &mut Tape, x: &[Var]| {
            let a = t.add(x[0], x[1])?;
            let s = t.sub(a, x[1])?;
            let m = t.mul(s, x[1])?;
            let m = t.scale(m, -1.7)?;
            project(t, m, &p35)
        })),
        ("silu", vec![proj(&[3, 4])], Box::new({
            let p = proj(&[3, 4]);
            move |t: &mut Tape, x: &[Var]| {
                let y = t.silu(x[0])?;
                project(t, y, &p)
            }
        })),
        ("layer_norm", vec![proj(&[3, 6])], Box::new(move |t: &mut Tape, x: &[Var]| {
            let y = t.layer_norm(x[0])?;
            project(t, y, &p36)
        })),
        ("mse", vec![proj(&[3, 4]), proj(&[3, 4])], Box::new(|t: &mut Tape, x: &[Var]| t.mse(x[0], x[1]))),
        ("weighted_mse", vec![proj(&[3, 4]), proj(&[3, 4])], Box::new(|t: &mut Tape, x: &[Var]| {
            t.weighted_mse(x[0], x[1], Some(vec![0.5, 2.0, 1.25]))
        })),
        ("concat_cols", vec![proj(&[3, 2]), proj(&[3, 4])], Box::new({
            let p = proj(&[3, 6]);
            move |t: &mut Tape, x: &[Var]| {
                let y = t.concat_cols(x[0], x[1])?;
                project(t, y, &p)
            }
        })),
        ("interleave_rows", vec![proj(&[4, 3]), proj(&[2, 3])], Box::new(move |t: &mut Tape, x: &[Var]| {
            let y = t.interleave_rows(x[0], x[1], 2)?;
            project(t, y, &p66)
        })),
        ("slice_group_rows", vec![proj(&[9, 4])], Box::new(move |t: &mut Tape, x: &[Var]| {
            let y = t.slice_group_rows(x[0], 3, 1, 2)?;
            project(t, y, &p33)
        })),
        ("tile_repeat_rows", vec![proj(&[3, 2])], Box::new(move |t: &mut Tape, x: &[Var]| {
            let a = t.tile_rows(x[0], 2)?;
            let b = t.repeat_rows(a, 2)?;
            let p = project(t, b, &p12)?;
            let c = t.slice_rows(x[0], 1, 2)?;
            let c = t.tile_rows(c, 3)?;
            let q = project(t, c, &p62)?;
            t.add(p, q)
        })),
        ("masked_softmax", vec![proj(&[6, 3])], Box::new({
            let mask = mask.clone();
            let p = proj(&[6, 3]);
            move |t: &mut Tape, x: &[Var]| {
                let y = t.masked_softmax(x[0], mask.clone())?;
                project(t, y, &p)
            }
        })),
        ("attention", vec![proj(&[6, 4]), proj(&[6, 4]), proj(&[6, 4])], Box::new({
            let mask = mask.clone();
            let p = proj(&[6, 4]);
            move |t: &mut Tape, x: &[Var]| {
                let y = t.attention(x[0], x[1], x[2], mask.clone(), 2)?;
                project(t, y, &p)
            }
        })),
        ("shared_qkv_attention", vec![proj(&[2, 4])], Box::new({
            let p = proj(&[2, 4]);
            move |t: &mut Tape, x: &[Var]| {
                let m = Arc::new(AttentionMask::all(2, 2));
                let y = t.attention(x[0], x[0], x[0], m, 1)?;
                project(t, y, &p)
            }
        })),
        ("sum", vec![proj(&[2, 4])], Box::new(move |t: &mut Tape, x: &[Var]| {
            let y = t.mul(x[0], x[0])?;
            let s = t.sum(y)?;
            let z = project(t, x[0], &p24)?;
            t.add(s, z)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| GradCase { name, inputs, build })
        .collect()
}
