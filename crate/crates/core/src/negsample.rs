//! Batch-wise negative prototypes: every target's negative is the mean of
//! the other targets' embeddings in the same batch.

use alloc::vec;

use crate::error::{Error, Result};
use crate::kernel::{Tape, Var};

/// Negative prototypes for one batch.
#[derive(Debug, Clone, Copy)]
pub struct NegativePrototypeBatch {
    /// `[N, h]`; zero rows when `valid` is false.
    pub prototypes: Var,
    /// False for a batch of one target, which has no negatives.
    pub valid: bool,
}

/// Row `i` of the result is `(Σ_{j≠i} e_j) / (N − 1)`.
///
/// Gradients flow back into `targets`. A single-row batch yields a zero
/// prototype that is flagged invalid.
pub fn negative_prototypes(tape: &mut Tape, targets: Var) -> Result<NegativePrototypeBatch> {
    let shape = tape.shape(targets).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "negative_prototypes",
            left: shape,
            right: vec![2],
        });
    }
    match shape[0] {
        0 => Err(Error::Empty("negative prototypes of an empty batch")),
        1 => {
            let zeros = tape.constant(shape.clone(), vec![0.0; shape[1]])?;
            Ok(NegativePrototypeBatch {
                prototypes: zeros,
                valid: false,
            })
        }
        _ => Ok(NegativePrototypeBatch {
            prototypes: tape.leave_one_out_mean(targets)?,
            valid: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Tensor;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn run(rows: &[&[f64]]) -> (Vec<f64>, bool) {
        let mut tape = Tape::new();
        let t = tape.leaf(&Tensor::from_rows(rows).unwrap());
        let p = negative_prototypes(&mut tape, t).unwrap();
        (tape.value(p.prototypes).to_vec(), p.valid)
    }

    #[test]
    fn three_targets() {
        let (p, valid) = run(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(valid);
        assert_eq!(p, vec![0.5, 1.0, 1.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn two_targets_swap() {
        let (p, _) = run(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(p, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn single_target_is_invalid_zero() {
        let (p, valid) = run(&[&[1.0, 2.0]]);
        assert!(!valid);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn gradients_reach_other_targets_only() {
        let mut tape = Tape::new();
        let t = tape.param(&Tensor::from_rows(&[&[1.0], &[2.0], &[4.0]]).unwrap());
        let p = negative_prototypes(&mut tape, t).unwrap();
        let row0 = tape.pick(p.prototypes, &[0, 0, 0]).unwrap();
        let w = tape.constant(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let sel = tape.mul(row0, w).unwrap();
        let loss = tape.mean(sel).unwrap();
        let g = tape.backward(loss).unwrap();
        // prototype 0 = (e1 + e2)/2, loss = prototype0 / 3
        let grad = g.get(t).unwrap();
        assert_eq!(grad[0], 0.0);
        assert!((grad[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!((grad[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mean_identity_and_permutation(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..8),
            rot in 0usize..8,
        ) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let (p, _) = run(&refs);
            for c in 0..3 {
                let sp: f64 = p.chunks(3).map(|r| r[c]).sum();
                let se: f64 = rows.iter().map(|r| r[c]).sum();
                prop_assert!((sp - se).abs() <= 1e-9 * (1.0 + se.abs()));
            }
            let n = rows.len();
            let k = rot % n;
            let rotated: Vec<&[f64]> = (0..n).map(|i| refs[(i + k) % n]).collect();
            let (pr, _) = run(&rotated);
            for i in 0..n {
                let a = &pr[i * 3..i * 3 + 3];
                let b = &p[((i + k) % n) * 3..((i + k) % n) * 3 + 3];
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }
}
