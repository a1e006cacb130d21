//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
///
/// `f` must build a scalar output from the given leaf. Returns the maximum
/// over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// Errors if `epsilon` is outside `(0, 1e-3]`, if `f` is not scalar-valued,
/// or if the loss is non-finite at any perturbed point (the offending
/// coordinate is named).
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::Config(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(t.clone());
        let y = f(&tape, &x)?;
        if y.shape() != Vec::<usize>::new() {
            return Err(Error::Config(format!(
                "grad_check needs a scalar-valued function, got output shape {:?}",
                y.shape()
            )));
        }
        Ok(y.value().item())
    };

    // Analytic gradient once, at the unperturbed point.
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, &x)?;
    if y.shape() != Vec::<usize>::new() {
        return Err(Error::Config(format!(
            "grad_check needs a scalar-valued function, got output shape {:?}",
            y.shape()
        )));
    }
    let grads = y.backward(&Tensor::scalar(1.0))?;
    let analytic = grads.or_zeros(&x);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss non-finite when perturbing coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let err = grad_check(
            |_, x| Ok(x.mul(x)?.sum_all()),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn epsilon_domain_is_validated() {
        let f = |_: &Tape, x: &Var| Ok(x.sum_all());
        assert!(grad_check(f, &Tensor::scalar(1.0), 0.0).is_err());
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-2).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_coordinate() {
        // log of a negative coordinate goes NaN under perturbation.
        let point = Tensor::new(vec![2], vec![1.0, 5e-6]).unwrap();
        let err = grad_check(|_, x| Ok(x.log().sum_all()), &point, 1e-5).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "got {err}");
    }

    /// Every public primitive, checked at 100 random points each.
    #[test]
    fn primitives_pass_fd_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Readout weights make the scalar loss sensitive to every element.
        let readout = |tape: &Tape, v: &Var, seed: u64| -> Result<Var> {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let w = tape.constant(Tensor::uniform(&v.shape(), -1.0, 1.0, &mut r));
            v.mul(&w)?.sum_all().into_ok()
        };
        trait IntoOk: Sized {
            fn into_ok(self) -> Result<Self> {
                Ok(self)
            }
        }
        impl IntoOk for Var {}

        type Case = (&'static str, Box<dyn Fn(&Tape, &Var) -> Result<Var>>, Box<dyn Fn(&mut ChaCha8Rng) -> Tensor>);
        // Points are kept away from relu/max kinks and log/sqrt singularities
        // so the finite-difference stencil stays on one smooth branch.
        let away_from_zero = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            Tensor::from_fn(shape, |_| {
                let mag = rng.gen_range(0.05..1.5);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
        };
        let cases: Vec<Case> = vec![
            (
                "add",
                Box::new(move |t, x| {
                    let mut r = ChaCha8Rng::seed_from_u64(7);
                    let o = t.constant(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r));
                    readout(t, &x.add(&o)?, 1)
                }),
                Box::new(|r| Tensor::uniform(&[2, 3], -2.0, 2.0, r)),
            ),
            (
                "mul",
                Box::new(move |t, x| {
                    let mut r = ChaCha8Rng::seed_from_u64(8);
                    let o = t.constant(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r));
                    readout(t, &x.mul(&o)?, 2)
                }),
                Box::new(|r| Tensor::uniform(&[2, 3], -2.0, 2.0, r)),
            ),
            (
                "matmul",
                Box::new(move |t, x| {
                    let mut r = ChaCha8Rng::seed_from_u64(9);
                    let o = t.constant(Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r));
                    readout(t, &x.matmul(&o)?, 3)
                }),
                Box::new(|r| Tensor::uniform(&[3, 4], -2.0, 2.0, r)),
            ),
            (
                "conv2d",
                Box::new(move |t, x| {
                    let mut r = ChaCha8Rng::seed_from_u64(10);
                    let k = t.constant(Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r));
                    readout(t, &x.conv2d(&k, 2, 1)?, 4)
                }),
                Box::new(|r| Tensor::uniform(&[2, 6, 6], -2.0, 2.0, r)),
            ),
            (
                "conv2d_kernel",
                Box::new(move |t, k| {
                    let mut r = ChaCha8Rng::seed_from_u64(11);
                    let x = t.constant(Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut r));
                    readout(t, &x.conv2d(k, 1, 1)?, 5)
                }),
                Box::new(|r| Tensor::uniform(&[3, 2, 3, 3], -2.0, 2.0, r)),
            ),
            (
                "relu",
                Box::new(move |t, x| readout(t, &x.relu(), 6)),
                Box::new(move |r| away_from_zero(r, &[2, 5])),
            ),
            (
                "sigmoid",
                Box::new(move |t, x| readout(t, &x.sigmoid(), 7)),
                Box::new(|r| Tensor::uniform(&[2, 5], -3.0, 3.0, r)),
            ),
            (
                "exp",
                Box::new(move |t, x| readout(t, &x.exp(), 8)),
                Box::new(|r| Tensor::uniform(&[2, 5], -2.0, 2.0, r)),
            ),
            (
                "log",
                Box::new(move |t, x| readout(t, &x.log(), 9)),
                Box::new(|r| Tensor::uniform(&[2, 5], 0.1, 3.0, r)),
            ),
            (
                "mean",
                Box::new(move |t, x| readout(t, &x.mean_axis(1)?, 10)),
                Box::new(|r| Tensor::uniform(&[3, 4], -2.0, 2.0, r)),
            ),
            (
                "max",
                Box::new(move |t, x| readout(t, &x.max_axis(0)?, 11)),
                // Spread values apart so the argmax is stable under the stencil.
                Box::new(|r| {
                    let mut vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
                    for i in (1..vals.len()).rev() {
                        vals.swap(i, r.gen_range(0..=i));
                    }
                    Tensor::new(vec![3, 4], vals).unwrap()
                }),
            ),
            (
                "concat",
                Box::new(move |t, x| {
                    let mut r = ChaCha8Rng::seed_from_u64(12);
                    let o = t.constant(Tensor::uniform(&[2, 2], -1.0, 1.0, &mut r));
                    readout(t, &Var::concat(&[x.clone(), o], 1)?, 12)
                }),
                Box::new(|r| Tensor::uniform(&[2, 3], -2.0, 2.0, r)),
            ),
            (
                "permute",
                Box::new(move |t, x| readout(t, &x.permute(&[1, 2, 0])?, 13)),
                Box::new(|r| Tensor::uniform(&[2, 3, 2], -2.0, 2.0, r)),
            ),
            (
                "bilinear_upsample",
                Box::new(move |t, x| readout(t, &x.upsample_bilinear(7, 9)?, 14)),
                Box::new(|r| Tensor::uniform(&[3, 4], -2.0, 2.0, r)),
            ),
            (
                "l2_normalize",
                Box::new(move |t, x| readout(t, &x.l2_normalize(), 15)),
                Box::new(move |r| away_from_zero(r, &[6])),
            ),
        ];

        for (name, f, sample) in &cases {
            for trial in 0..100 {
                let point = sample(&mut rng);
                let err = grad_check(f.as_ref(), &point, 1e-5)
                    .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
                assert!(err < 1e-6, "{name} trial {trial}: fd error {err}");
            }
        }
    }
}
