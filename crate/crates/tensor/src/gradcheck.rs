//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default step for central differences in 64-bit arithmetic.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// Largest relative error over all checked entries.
    pub max_relative_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Evaluates `f` on fresh leaves built from `inputs`.
fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut worst = (0, 0);
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = evaluate(&work, &f)?;
            work[i].data_mut()[j] = orig - h;
            let minus = evaluate(&work, &f)?;
            work[i].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i][j], n);
            if err > max_err {
                max_err = err;
                worst = (i, j);
            }
            checked += 1;
            col.push(n);
        }
        numeric.push(col);
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_relative_error: max_err,
        worst,
        checked,
    })
}

/// Deterministic inputs in `[lo, hi)` without a random number dependency.
fn fill(shape: Vec<usize>, salt: usize, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let u = ((i * 7919 + salt * 104_729) as f64 * 0.618_033_988_749_895).fract();
            lo + (hi - lo) * u
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Sums `v` against fixed non-uniform weights so every output element gets
/// a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Gradient-checks one small case per entry of
/// [`REGISTERED_OPS`](crate::REGISTERED_OPS), returned in the same order.
pub fn registered_op_suite(h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let a34 = fill(vec![3, 4], 1, -1.0, 1.0);
    let b34 = fill(vec![3, 4], 2, -1.0, 1.0);
    let b42 = fill(vec![4, 2], 3, -1.0, 1.0);
    let b54 = fill(vec![5, 4], 4, -1.0, 1.0);
    let row4 = fill(vec![4], 5, -1.0, 1.0);
    let col3 = fill(vec![3], 6, -1.0, 1.0);
    let pos34 = fill(vec![3, 4], 7, 0.2, 1.5);
    let t234 = fill(vec![2, 3, 4], 8, -1.0, 1.0);
    let table = fill(vec![5, 3], 9, -1.0, 1.0);
    let beta = fill(vec![4], 10, -1.0, 1.0);

    type Case<'a> = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>);
    let cases: Vec<Case<'_>> = vec![
        ("matmul", vec![a34.clone(), b42], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        ("matmul_nt", vec![a34.clone(), b54.clone()], Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        ("transpose", vec![a34.clone()], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y)
        })),
        ("add", vec![a34.clone(), b34.clone()], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        })),
        ("sub", vec![a34.clone(), b34.clone()], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        })),
        ("mul", vec![a34.clone(), b34.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        ("add_row", vec![a34.clone(), row4.clone()], Box::new(|t, v| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        })),
        ("mul_col", vec![a34.clone(), col3], Box::new(|t, v| {
            let y = t.mul_col(v[0], v[1])?;
            weighted_sum(t, y)
        })),
        ("affine", vec![a34.clone()], Box::new(|t, v| {
            let y = t.affine(v[0], -2.5, 0.3)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        })),
        ("one_minus", vec![a34.clone()], Box::new(|t, v| {
            let y = t.one_minus(v[0])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        })),
        ("sigmoid", vec![a34.clone()], Box::new(|t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y)
        })),
        ("gelu", vec![a34.clone()], Box::new(|t, v| {
            let y = t.gelu(v[0])?;
            weighted_sum(t, y)
        })),
        ("exp", vec![a34.clone()], Box::new(|t, v| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y)
        })),
        ("log_floor", vec![pos34], Box::new(|t, v| {
            let y = t.log_floor(v[0], 1e-12)?;
            weighted_sum(t, y)
        })),
        ("layer_norm", vec![a34.clone(), row4, beta], Box::new(|t, v| {
            let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            weighted_sum(t, y)
        })),
        ("concat", vec![a34.clone(), b54, b34], Box::new(|t, v| {
            let rows = t.concat(&[v[0], v[1]], 0)?;
            let cols = t.concat(&[v[0], v[2]], 1)?;
            let a = weighted_sum(t, rows)?;
            let b = weighted_sum(t, cols)?;
            let y = t.mul(a, b)?;
            t.sum(y)
        })),
        ("slice", vec![t234.clone()], Box::new(|t, v| {
            let y = t.slice(v[0], 2, 1, 2)?;
            weighted_sum(t, y)
        })),
        ("reshape", vec![t234.clone()], Box::new(|t, v| {
            let y = t.reshape(v[0], vec![6, 4])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y)
        })),
        ("sum", vec![a34.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })),
        ("mean", vec![a34.clone()], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        })),
        ("max_over_axis", vec![t234.clone()], Box::new(|t, v| {
            let y = t.max_over_axis(v[0], 1)?;
            weighted_sum(t, y)
        })),
        ("softmax", vec![t234], Box::new(|t, v| {
            let full = t.softmax(v[0], 2)?;
            let mask: Vec<bool> = (0..24).map(|i| i % 5 != 1).collect();
            let masked = t.softmax_masked(v[0], 1, Some(&mask))?;
            let a = weighted_sum(t, full)?;
            let b = weighted_sum(t, masked)?;
            t.add(a, b)
        })),
        ("cross_entropy", vec![a34], Box::new(|t, v| t.cross_entropy(v[0], &[3, 0, 1]))),
        ("gather_rows", vec![table.clone()], Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            weighted_sum(t, y)
        })),
        ("gather", vec![table], Box::new(|t, v| {
            let y = t.gather(v[0], &[14, 0, 3, 3, 7, 1], vec![2, 3])?;
            weighted_sum(t, y)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_gradients(&inputs, f, h)?)))
        .collect()
}
