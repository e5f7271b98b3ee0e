use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Non-learnable half of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: Tensor::zeros([1, channels, 1, 1]), var: Tensor::ones([1, channels, 1, 1]) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { momentum: DEFAULT_MOMENTUM, eps: DEFAULT_EPS }
    }
}

struct BatchNormBackward<T> {
    /// Per-channel mean and inverse standard deviation used in the forward pass.
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Whether mean/inv_std came from the batch (gradient flows through them).
    batch_stats: bool,
}

impl<T: Scalar> Backward<T> for BatchNormBackward<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, gamma, dy) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.grad.data());
        let s = x.shape();
        let (plane, xd) = (s.plane(), x.data());
        let m = T::lit((s.n * plane) as f64);
        let mut dgamma = vec![T::zero(); s.c];
        let mut dbeta = vec![T::zero(); s.c];
        for c in 0..s.c {
            let (mu, is) = (self.mean[c], self.inv_std[c]);
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    dbeta[c] += dy[i];
                    dgamma[c] += dy[i] * (xd[i] - mu) * is;
                }
            }
        }
        let dx = ctx.needs_grad[0].then(|| {
            let mut dx = Tensor::zeros(s);
            let dxd = dx.data_mut();
            for c in 0..s.c {
                let (mu, is, g) = (self.mean[c], self.inv_std[c], gamma[c]);
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for i in base..base + plane {
                        dxd[i] = if self.batch_stats {
                            let xhat = (xd[i] - mu) * is;
                            g * is * (dy[i] - dbeta[c] / m - xhat * dgamma[c] / m)
                        } else {
                            g * is * dy[i]
                        };
                    }
                }
            }
            dx
        });
        let cshape = Shape::new(1, s.c, 1, 1);
        vec![
            dx,
            ctx.needs_grad[1].then(|| Tensor::from_vec(cshape, dgamma).unwrap()),
            ctx.needs_grad[2].then(|| Tensor::from_vec(cshape, dbeta).unwrap()),
        ]
    }
}

/// Per-channel batch normalization.
///
/// `gamma` and `beta` have shape `(1, C, 1, 1)`. In train mode the output is
/// normalized with the biased batch variance over `(n, h, w)` and the updated
/// running statistics (momentum update, unbiased variance) are returned; in
/// eval mode `stats` is used as-is and `None` is returned.
pub fn batchnorm2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats<T>,
    mode: NormMode,
    cfg: BatchNormConfig,
) -> Result<(Var, Option<RunningStats<T>>)> {
    let s = tape.shape(x);
    let cshape = Shape::new(1, s.c, 1, 1);
    for (what, t) in [("gamma", tape.shape(gamma)), ("beta", tape.shape(beta)), ("running mean", stats.mean.shape()), ("running var", stats.var.shape())] {
        if t != cshape {
            return Err(Error::shape(format!("batchnorm {} has shape {}, expected {}", what, t, cshape)));
        }
    }
    let plane = s.plane();
    let count = s.n * plane;
    let eps = T::lit(cfg.eps);
    let xd = tape.value(x).data();

    let (mean, inv_std, updated) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::invalid(format!(
                    "batchnorm in train mode needs at least 2 values per channel, got {} for input {}",
                    count, s
                )));
            }
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    acc += xd[base..base + plane].iter().copied().sum::<T>();
                }
                let mu = acc / T::lit(count as f64);
                let mut sq = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    sq += xd[base..base + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                mean[c] = mu;
                var[c] = sq / T::lit(count as f64);
            }
            let mom = T::lit(cfg.momentum);
            let unbias = T::lit(count as f64 / (count - 1) as f64);
            let new_mean: Vec<T> =
                stats.mean.data().iter().zip(&mean).map(|(&r, &b)| (T::one() - mom) * r + mom * b).collect();
            let new_var: Vec<T> =
                stats.var.data().iter().zip(&var).map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias).collect();
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let updated = RunningStats {
                mean: Tensor::from_vec(cshape, new_mean)?,
                var: Tensor::from_vec(cshape, new_var)?,
            };
            (mean, inv_std, Some(updated))
        }
        NormMode::Eval => {
            if let Some(v) = stats.var.data().iter().find(|&&v| v <= T::zero()) {
                return Err(Error::invalid(format!("batchnorm running variance must be positive, found {}", v)));
            }
            let inv_std: Vec<T> = stats.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (stats.mean.data().to_vec(), inv_std, None)
        }
    };

    let (g, b) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut out = Tensor::zeros(s);
    {
        let od = out.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                let (mu, is) = (mean[c], inv_std[c]);
                for i in base..base + plane {
                    od[i] = g[c] * (xd[i] - mu) * is + b[c];
                }
            }
        }
    }
    let rule = BatchNormBackward { mean, inv_std, batch_stats: mode == NormMode::Train };
    let y = tape.record(out, &[x, gamma, beta], rule)?;
    Ok((y, updated))
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

    fn run(x: &Tensor<f64>, mode: NormMode, stats: &RunningStats<f64>) -> (Tensor<f64>, Option<RunningStats<f64>>) {
        let mut tape = Tape::new();
        let c = x.shape().c;
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones([1, c, 1, 1]));
        let b = tape.constant(Tensor::zeros([1, c, 1, 1]));
        let (y, up) = batchnorm2d(&mut tape, xv, g, b, stats, mode, BatchNormConfig::default()).unwrap();
        (tape.value(y).clone(), up)
    }

    #[test]
    fn train_mode_normalizes() {
        let x = random([2, 3, 4, 4], 1, -3.0, 5.0);
        let (y, up) = run(&x, NormMode::Train, &RunningStats::new(3));
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.sample(n)[c * 16..(c + 1) * 16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "{}", var);
        }
        let up = up.unwrap();
        assert!(up.var.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn eval_mode_default_stats_is_near_identity() {
        let x = random([1, 2, 3, 3], 2, -1.0, 1.0);
        let (y, up) = run(&x, NormMode::Eval, &RunningStats::new(2));
        assert!(up.is_none());
        let k = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-15);
        }
    }

    #[test]
    fn running_update_uses_momentum_and_unbiased_variance() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (_, up) = run(&x, NormMode::Train, &RunningStats::new(1));
        let up = up.unwrap();
        assert!((up.mean.data()[0] - 0.2).abs() < 1e-15);
        // batch var (unbiased) = 2
        assert!((up.var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let x = Tensor::<f64>::ones([1, 1, 1, 1]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let st = RunningStats::new(1);
        assert!(batchnorm2d(&mut tape, xv, g, b, &st, NormMode::Train, Default::default()).is_err());
        let bad = RunningStats { mean: Tensor::zeros([1, 1, 1, 1]), var: Tensor::zeros([1, 1, 1, 1]) };
        assert!(batchnorm2d(&mut tape, xv, g, b, &bad, NormMode::Eval, Default::default()).is_err());
    }

    #[test]
    fn gradients_through_batch_statistics() {
        let x = random([2, 3, 4, 4], 3, -1.0, 1.0);
        let gamma = random([1, 3, 1, 1], 4, 0.5, 1.5);
        let beta = random([1, 3, 1, 1], 5, -0.5, 0.5);
        let probe = random([2, 3, 4, 4], 6, -1.0, 1.0);
        for mode in [NormMode::Train, NormMode::Eval] {
            let stats = RunningStats { mean: random([1, 3, 1, 1], 7, -0.2, 0.2), var: random([1, 3, 1, 1], 8, 0.5, 2.0) };
            let loss = |which: usize| {
                let (x, gamma, beta, probe, stats) = (x.clone(), gamma.clone(), beta.clone(), probe.clone(), stats.clone());
                move |t: &mut Tape<f64>, v: Var| {
                    let mut ins = [x.clone(), gamma.clone(), beta.clone()].map(|a| t.constant(a));
                    ins[which] = v;
                    let (y, _) = batchnorm2d(t, ins[0], ins[1], ins[2], &stats, mode, Default::default())?;
                    let p = t.constant(probe.clone());
                    let m = mul(t, y, p)?;
                    sum(t, m)
                }
            };
            for (which, at) in [(0, &x), (1, &gamma), (2, &beta)] {
                let r = finite_diff_check(loss(which), at, 1e-6).unwrap();
                assert!(r.passed, "{:?} input {}: {:?}", mode, which, r);
            }
        }
    }
}
