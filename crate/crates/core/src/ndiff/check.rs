//! Finite-difference verification of tape gradients.

use super::tape::{Tape, Value};
use super::tensor::Tensor;

/// Compares the tape's analytic gradient of a scalar-valued function against
/// central finite differences and returns the worst relative error,
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` over all input
/// coordinates.
///
/// `f` rebuilds the same graph on every call; it may bind additional constant
/// leaves internally.
pub fn grad_check<F>(mut f: F, input: &Tensor<f64>, h: f64) -> f64
where
    F: FnMut(&mut Tape<f64>, Value) -> Value,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let loss = f(&mut tape, x);
    assert_eq!(tape.value(loss).len(), 1, "grad_check target must be scalar");
    tape.backward(loss).expect("backward");
    let analytic = tape
        .grad(x)
        .expect("input must receive a gradient")
        .clone();

    let eval = |f: &mut F, t: Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(t, false);
        let loss = f(&mut tape, x);
        tape.scalar_value(loss)
    };

    let mut max_rel = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&mut f, plus) - eval(&mut f, minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::tape::PadMode;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn rand_tensor(shape: Vec<usize>, seed: u64, scale: f64, offset: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) * scale + offset)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        // With strictly positive inputs, mean(|2x - 0|) = mean(2x) is linear
        // and central differences are exact up to rounding.
        let input = rand_tensor(vec![6], 5, 1.0, 0.5);
        let err = grad_check(
            |tape, x| {
                let two = tape.scale(x, 2.0);
                let t = tape.leaf(Tensor::zeros(vec![6]), false);
                tape.l1_loss(two, t).unwrap()
            },
            &input,
            1e-4,
        );
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn conv_relu_l1_composite() {
        let x = rand_tensor(vec![2, 7, 7], 11, 1.0, -0.5);
        let w = rand_tensor(vec![3, 2, 3, 3], 12, 0.6, -0.3);
        let b = rand_tensor(vec![3], 13, 0.2, -0.1);
        let t = rand_tensor(vec![3, 7, 7], 14, 1.0, 0.0);
        let err = grad_check(
            |tape, xv| {
                let wv = tape.leaf(w.clone(), false);
                let bv = tape.leaf(b.clone(), false);
                let c = tape.conv2d(xv, wv, bv, 1, 1, PadMode::Zero).unwrap();
                let r = tape.relu(c);
                let tv = tape.leaf(t.clone(), false);
                tape.l1_loss(r, tv).unwrap()
            },
            &x,
            1e-4,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = rand_tensor(vec![5], 21, 1.0, 0.0);
        let err = grad_check(
            |tape, xv| {
                let zero = tape.scale(xv, 0.0);
                let t = tape.leaf(Tensor::zeros(vec![5]), false);
                tape.l1_loss(zero, t).unwrap()
            },
            &x,
            1e-4,
        );
        assert_eq!(err, 0.0);
    }
}
