//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it checks.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-4;

/// Worst-case comparison over every checked coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of a scalar function of `inputs` with central
/// differences of step `step`.
///
/// `f` must build a scalar on the tape from the supplied input variables and
/// must be deterministic.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar output".into()));
        }
        Ok(v[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords: 0,
    };
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec());
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.coords += 1;
        }
    }
    Ok(report)
}

fn random(shape: Vec<usize>, rng: &mut crate::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Entries with magnitude in [0.05, 1) so kinks stay outside the stencil.
fn random_off_zero(shape: Vec<usize>, rng: &mut crate::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Runs the per-op gradient checks and returns the worst relative error.
pub fn kernel_op_suite(seed: u64) -> Result<f64> {
    let mut r = crate::Rng::seed_from_u64(1000 + seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut record = |rep: GradCheck| worst = worst.max(rep.max_rel_err);
    let w35 = random(vec![3, 5], &mut r);
    let weigh = move |tape: &mut Tape, x: Var| -> Result<Var> {
        // random linear functional of a [3, 5] output
        let w = tape.constant(vec![3, 5], w35.data().to_vec())?;
        let p = tape.mul(x, w)?;
        let s = tape.sum_rows(p);
        tape.mean(s)
    };

    let a = random(vec![3, 4], &mut r);
    let b = random(vec![4, 5], &mut r);
    record(check(&[a.clone(), b.clone()], h, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        weigh(t, m)
    })?);

    let lin_b = random(vec![5], &mut r);
    record(check(&[a.clone(), b.clone(), lin_b], h, |t, v| {
        let m = t.linear(v[0], v[1], v[2])?;
        weigh(t, m)
    })?);

    let bt = random(vec![5, 4], &mut r);
    record(check(&[a, bt], h, |t, v| {
        let m = t.matmul_nt(v[0], v[1])?;
        weigh(t, m)
    })?);

    let x = random(vec![3, 5], &mut r);
    let y = random(vec![3, 5], &mut r);
    let row = random(vec![5], &mut r);
    for op in 0..3 {
        record(check(&[x.clone(), y.clone()], h, |t, v| {
            let o = match op {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weigh(t, o)
        })?);
        record(check(&[x.clone(), row.clone()], h, |t, v| {
            let o = match op {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weigh(t, o)
        })?);
    }

    record(check(&[x.clone()], h, |t, v| {
        let s = t.scale(v[0], -1.7);
        let s = t.add_scalar(s, 0.3);
        weigh(t, s)
    })?);
    record(check(&[x.clone()], h, |t, v| {
        let s = t.sigmoid(v[0]);
        weigh(t, s)
    })?);
    record(check(&[x.clone()], h, |t, v| {
        let s = t.log_sigmoid(v[0]);
        weigh(t, s)
    })?);
    record(check(&[x.clone()], h, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let pos = t.add_scalar(sq, 0.5);
        let l = t.log(pos)?;
        weigh(t, l)
    })?);
    let xr = random_off_zero(vec![3, 5], &mut r);
    record(check(&[xr], h, |t, v| {
        let s = t.relu(v[0]);
        weigh(t, s)
    })?);
    record(check(&[x.clone()], h, |t, v| {
        let s = t.softmax(v[0], 0.7)?;
        weigh(t, s)
    })?);
    record(check(&[x.clone()], h, |t, v| {
        let s = t.l2_normalize(v[0]);
        weigh(t, s)
    })?);
    let gain = random(vec![5], &mut r);
    let bias = random(vec![5], &mut r);
    record(check(&[x.clone(), gain, bias], h, |t, v| {
        let s = t.layer_norm(v[0], v[1], v[2])?;
        weigh(t, s)
    })?);
    let table = random(vec![4, 5], &mut r);
    record(check(&[table], h, |t, v| {
        let s = t.gather(v[0], &[3, 0, 3])?;
        weigh(t, s)
    })?);
    let top = random(vec![1, 5], &mut r);
    let bottom = random(vec![2, 5], &mut r);
    record(check(&[top, bottom], h, |t, v| {
        let s = t.concat_rows(&[v[0], v[1]])?;
        weigh(t, s)
    })?);
    record(check(&[x.clone()], h, |t, v| {
        let s = t.leave_one_out_mean(v[0])?;
        weigh(t, s)
    })?);
    record(check(&[x.clone()], h, |t, v| {
        let s = t.pick(v[0], &[4, 0, 2])?;
        let sq = t.mul(s, s)?;
        t.mean(sq)
    })?);
    let drop_seed = r.random::<u64>();
    record(check(&[x.clone()], h, |t, v| {
        let mut dr = crate::Rng::seed_from_u64(drop_seed);
        let s = t.dropout(v[0], 0.3, &mut dr)?;
        weigh(t, s)
    })?);

    let q = random(vec![6, 4], &mut r);
    let k = random(vec![6, 4], &mut r);
    let vv = random(vec![6, 4], &mut r);
    let wa = random(vec![6, 4], &mut r);
    let mask = [true, false, true, true, true, true];
    record(check(&[q, k, vv], h, |t, v| {
        let o = t.attention(v[0], v[1], v[2], &mask, 2, 3, 2)?;
        let w = t.constant(vec![6, 4], wa.data().to_vec())?;
        let p = t.mul(o, w)?;
        let s = t.sum_rows(p);
        t.mean(s)
    })?);
    Ok(worst)
}
