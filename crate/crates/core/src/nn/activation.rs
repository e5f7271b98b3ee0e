use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

struct PreluBackward;

impl<T: Scalar> Backward<T> for PreluBackward {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, alpha, dy) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad.data());
        let s = x.shape();
        let plane = s.plane();
        let xd = x.data();
        let dx = ctx.needs_grad[0].then(|| {
            let scale = if cfg!(feature = "inject-grad-bug") { T::lit(2.0) } else { T::one() };
            let mut dx = Tensor::zeros(s);
            for (i, d) in dx.data_mut().iter_mut().enumerate() {
                let c = (i / plane) % s.c;
                *d = scale * if xd[i] >= T::zero() { dy[i] } else { alpha[c] * dy[i] };
            }
            dx
        });
        let dalpha = ctx.needs_grad[1].then(|| {
            let mut da = Tensor::zeros(Shape::new(1, s.c, 1, 1));
            let dad = da.data_mut();
            for (i, &v) in xd.iter().enumerate() {
                if v < T::zero() {
                    dad[(i / plane) % s.c] += v * dy[i];
                }
            }
            da
        });
        vec![dx, dalpha]
    }
}

/// `y = x` for `x ≥ 0`, `alpha_c · x` otherwise; `alpha` has shape `(1, C, 1, 1)`.
pub fn prelu<T: Scalar>(tape: &mut Tape<T>, x: Var, alpha: Var) -> Result<Var> {
    let s = tape.shape(x);
    if tape.shape(alpha) != Shape::new(1, s.c, 1, 1) {
        return Err(Error::shape(format!("prelu alpha {} does not match {} channels", tape.shape(alpha), s.c)));
    }
    let plane = s.plane();
    let a = tape.value(alpha).data();
    let mut out = tape.value(x).clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if *v < T::zero() {
            *v *= a[(i / plane) % s.c];
        }
    }
    tape.record(out, &[x, alpha], PreluBackward)
}

struct SigmoidBackward;

impl<T: Scalar> Backward<T> for SigmoidBackward {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let y = ctx.output.data();
        let mut dx = ctx.grad.clone();
        for (d, &yv) in dx.data_mut().iter_mut().zip(y) {
            *d *= yv * (T::one() - yv);
        }
        vec![Some(dx)]
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let out = tape.value(x).map(sigmoid_scalar);
    tape.record(out, &[x], SigmoidBackward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{mul, sum};
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};

    fn random(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
    }

    fn prelu_value(x: Tensor<f64>, alpha: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x), tape.constant(alpha));
        let y = prelu(&mut tape, xv, av).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn prelu_positive_half_line_is_identity() {
        let x = random([1, 3, 4, 4], 1, 0.0, 2.0);
        assert_eq!(prelu_value(x.clone(), random([1, 3, 1, 1], 2, -1.0, 1.0)), x);
    }

    #[test]
    fn prelu_direct_formula() {
        let y = prelu_value(Tensor::full([1, 1, 1, 1], -2.0), Tensor::full([1, 1, 1, 1], 0.25));
        assert_eq!(y.data(), &[-0.5]);
    }

    #[test]
    fn prelu_alpha_shape_checked() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 2, 2]));
        let a = tape.constant(Tensor::zeros([1, 2, 1, 1]));
        assert!(prelu(&mut tape, x, a).is_err());
    }

    #[cfg(not(feature = "inject-grad-bug"))]
    #[test]
    fn prelu_gradients() {
        // Keep inputs away from the kink at zero.
        let x = random([2, 3, 4, 4], 3, 0.1, 1.0);
        let sign = random([2, 3, 4, 4], 4, -1.0, 1.0);
        let x = Tensor::from_vec(x.shape(), x.data().iter().zip(sign.data()).map(|(&m, &s)| m * s.signum()).collect()).unwrap();
        let alpha = random([1, 3, 1, 1], 5, 0.1, 0.5);
        let (a1, x1) = (alpha.clone(), x.clone());
        let r = finite_diff_check(
            move |t, xv| {
                let av = t.constant(a1.clone());
                let y = prelu(t, xv, av)?;
                let y2 = mul(t, y, y)?;
                sum(t, y2)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r);

        // d/dalpha sum(prelu(x)) = sum of negative inputs per channel
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let av = tape.leaf(alpha.clone(), true);
        let y = prelu(&mut tape, xv, av).unwrap();
        let s = sum(&mut tape, y).unwrap();
        let g = tape.backward(s).unwrap();
        for c in 0..3 {
            let neg: f64 = (0..2).flat_map(|n| x.sample(n)[c * 16..(c + 1) * 16].to_vec()).filter(|&v| v < 0.0).sum();
            assert!((g.get(av).unwrap().data()[c] - neg).abs() < 1e-12);
        }
        let r = finite_diff_check(
            move |t, av| {
                let xv = t.constant(x1.clone());
                let y = prelu(t, xv, av)?;
                sum(t, y)
            },
            &alpha,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        for &x in &[0.3f64, 2.0, 17.0, 35.0, 800.0] {
            assert!((sigmoid_scalar(-x) - (1.0 - sigmoid_scalar(x))).abs() < 1e-7);
        }
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert!(sigmoid_scalar(800.0f32).is_finite());
    }

    #[test]
    fn sigmoid_gradient() {
        let x = random([1, 2, 3, 3], 6, -4.0, 4.0);
        let r = finite_diff_check(
            |t, xv| {
                let y = sigmoid(t, xv)?;
                sum(t, y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r);
    }
}
