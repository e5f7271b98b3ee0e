//! Focal and soft-Dice losses on raw logits, fused with softmax so each
//! records a single node with an analytic backward rule.

use crate::autodiff::{add, scale, Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub focal_gamma: f64,
    /// Per-class focal weights; `None` means 1 for every class.
    pub focal_alpha: Option<Vec<f64>>,
    pub dice_eps: f64,
    /// Weight of each auxiliary head's loss.
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { focal_gamma: 2.0, focal_alpha: None, dice_eps: 1e-5, aux_weight: 0.4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::invalid("focal_gamma must be finite and >= 0"));
        }
        if !(self.dice_eps > 0.0 && self.dice_eps.is_finite()) {
            return Err(Error::invalid("dice_eps must be positive"));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::invalid("aux_weight must be finite and >= 0"));
        }
        if let Some(a) = &self.focal_alpha {
            if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("focal_alpha values must be positive"));
            }
        }
        Ok(())
    }

    fn alpha(&self, classes: usize) -> Result<Vec<f64>> {
        match &self.focal_alpha {
            None => Ok(vec![1.0; classes]),
            Some(a) if a.len() == classes => Ok(a.clone()),
            Some(a) => Err(Error::invalid(format!("focal_alpha has {} entries for {} classes", a.len(), classes))),
        }
    }
}

fn check_labels(logits: Shape, labels: &LabelMap) -> Result<()> {
    if (logits.n, logits.h, logits.w) != (labels.n, labels.h, labels.w) {
        return Err(Error::shape(format!(
            "logits {} do not match labels {}x{}x{}",
            logits, labels.n, labels.h, labels.w
        )));
    }
    labels.check_range(logits.c)
}

/// Channel softmax, plus per-pixel log-probability of the labelled class.
fn softmax<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> (Vec<T>, Vec<T>) {
    let s = logits.shape();
    let (plane, k) = (s.plane(), s.c);
    let z = logits.data();
    let mut p = vec![T::zero(); z.len()];
    let mut log_py = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        for i in 0..plane {
            let at = |c: usize| (n * k + c) * plane + i;
            let m = (0..k).map(|c| z[at(c)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..k {
                let e = (z[at(c)] - m).exp();
                p[at(c)] = e;
                total += e;
            }
            for c in 0..k {
                p[at(c)] /= total;
            }
            let y = labels.data()[n * plane + i] as usize;
            log_py[n * plane + i] = z[at(y)] - m - total.ln();
        }
    }
    (p, log_py)
}

struct SoftmaxLossBackward<T> {
    /// d loss / d logits, to be scaled by the incoming scalar gradient.
    dlogits: Tensor<T>,
    name: &'static str,
}

impl<T: Scalar> Backward<T> for SoftmaxLossBackward<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.data()[0];
        vec![Some(self.dlogits.map(|v| v * g))]
    }
}

/// Mean over pixels of `−α_y (1 − p_y)^γ log p_y`, with `p` the channel
/// softmax of `logits` (shape `(n, K, h, w)`).
pub fn focal_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let s = tape.shape(logits);
    check_labels(s, labels)?;
    let alpha: Vec<T> = cfg.alpha(s.c)?.into_iter().map(T::lit).collect();
    let gamma = T::lit(cfg.focal_gamma);
    let (p, log_py) = softmax(tape.value(logits), labels);
    let (plane, k) = (s.plane(), s.c);
    let count = T::lit((s.n * plane) as f64);
    let mut total = T::zero();
    let mut dz = vec![T::zero(); p.len()];
    for n in 0..s.n {
        for i in 0..plane {
            let at = |c: usize| (n * k + c) * plane + i;
            let y = labels.data()[n * plane + i] as usize;
            let q = p[at(y)];
            let lq = log_py[n * plane + i];
            // 1 − p_y summed from the other classes keeps precision near q = 1.
            let rest: T = (0..k).filter(|&c| c != y).map(|c| p[at(c)]).sum();
            let a = alpha[y];
            let (loss, coef) = if cfg.focal_gamma == 0.0 {
                (-a * lq, -a)
            } else if rest == T::zero() {
                (T::zero(), T::zero())
            } else {
                let w = rest.powf(gamma);
                let dw = gamma * rest.powf(gamma - T::one());
                (-a * w * lq, -a * (w - dw * q * lq))
            };
            total += loss;
            // d/dz_c of the pixel loss is coef·(δ_cy − p_c).
            for c in 0..k {
                let delta = if c == y { T::one() } else { T::zero() };
                dz[at(c)] = coef * (delta - p[at(c)]) / count;
            }
        }
    }
    let value = Tensor::scalar(total / count);
    let dlogits = Tensor::from_vec(s, dz)?;
    tape.record(value, &[logits], SoftmaxLossBackward { dlogits, name: "focal_loss" })
}

/// `1 − mean_k D_k` with `D_k = (2 Σ p_k g_k + ε) / (Σ p_k + Σ g_k + ε)`,
/// sums taken over the whole batch, averaged over classes that occur in
/// `labels`.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let s = tape.shape(logits);
    check_labels(s, labels)?;
    let (p, _) = softmax(tape.value(logits), labels);
    let (plane, k) = (s.plane(), s.c);
    let eps = T::lit(cfg.dice_eps);
    let mut inter = vec![T::zero(); k];
    let mut mass = vec![T::zero(); k];
    let mut truth = vec![0usize; k];
    for n in 0..s.n {
        for c in 0..k {
            let row = &p[(n * k + c) * plane..][..plane];
            mass[c] += row.iter().copied().sum::<T>();
        }
        for i in 0..plane {
            let y = labels.data()[n * plane + i] as usize;
            truth[y] += 1;
            inter[y] += p[(n * k + y) * plane + i];
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| truth[c] > 0).collect();
    let mut dz = vec![T::zero(); p.len()];
    if present.is_empty() {
        let dlogits = Tensor::from_vec(s, dz)?;
        return tape.record(Tensor::scalar(T::zero()), &[logits], SoftmaxLossBackward { dlogits, name: "dice_loss" });
    }
    let m = T::lit(present.len() as f64);
    let two = T::lit(2.0);
    let mut dice_sum = T::zero();
    // dL/dp_c(i) = −(2 g_c(i) S_c − (2 I_c + ε)) / (|C| S_c²) for present c.
    let mut grad_hit = vec![T::zero(); k];
    let mut grad_miss = vec![T::zero(); k];
    for &c in &present {
        let denom = mass[c] + T::lit(truth[c] as f64) + eps;
        let num = two * inter[c] + eps;
        dice_sum += num / denom;
        grad_miss[c] = num / (denom * denom) / m;
        grad_hit[c] = grad_miss[c] - two / denom / m;
    }
    for n in 0..s.n {
        for i in 0..plane {
            let at = |c: usize| (n * k + c) * plane + i;
            let y = labels.data()[n * plane + i] as usize;
            let a = |c: usize| if c == y { grad_hit[c] } else { grad_miss[c] };
            let dot: T = (0..k).map(|c| p[at(c)] * a(c)).sum();
            for c in 0..k {
                dz[at(c)] = p[at(c)] * (a(c) - dot);
            }
        }
    }
    let value = Tensor::scalar(T::one() - dice_sum / m);
    let dlogits = Tensor::from_vec(s, dz)?;
    tape.record(value, &[logits], SoftmaxLossBackward { dlogits, name: "dice_loss" })
}

/// Focal plus Dice on one set of logits.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let f = focal_loss(tape, logits, labels, cfg)?;
    let d = dice_loss(tape, logits, labels, cfg)?;
    add(tape, f, d)
}

/// Main-head loss plus `aux_weight` times each auxiliary head's loss. With
/// no auxiliary logits this is the main term alone.
pub fn hybrid_loss<T: Scalar>(tape: &mut Tape<T>, main: Var, aux: &[Var], labels: &LabelMap, cfg: &LossConfig) -> Result<Var> {
    let mut total = segmentation_loss(tape, main, labels, cfg)?;
    if cfg.aux_weight == 0.0 {
        return Ok(total);
    }
    for &a in aux {
        let l = segmentation_loss(tape, a, labels, cfg)?;
        let l = scale(tape, l, cfg.aux_weight)?;
        total = add(tape, total, l)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};

    fn random_case(n: usize, k: usize, h: usize, w: usize, seed: u64) -> (Tensor<f64>, LabelMap) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn([n, k, h, w], |_, _, _, _| rng.random_range(-3.0..3.0));
        let labels = (0..n * h * w).map(|_| rng.random_range(0..k as u8)).collect();
        (logits, LabelMap::new(n, h, w, labels).unwrap())
    }

    fn eval(f: fn(&mut Tape<f64>, Var, &LabelMap, &LossConfig) -> Result<Var>, z: &Tensor<f64>, l: &LabelMap, cfg: &LossConfig) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let out = f(&mut tape, v, l, cfg).unwrap();
        tape.value(out).data()[0]
    }

    #[test]
    fn focal_single_pixel_value() {
        let z = Tensor::zeros([1, 2, 1, 1]);
        let l = LabelMap::new(1, 1, 1, vec![1]).unwrap();
        let v = eval(focal_loss, &z, &l, &LossConfig::default());
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12, "{}", v);
        assert!((v - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let (z, l) = random_case(2, 3, 5, 4, 1);
        let cfg = LossConfig { focal_gamma: 0.0, ..Default::default() };
        let v = eval(focal_loss, &z, &l, &cfg);
        // Cross-entropy computed directly from the definition.
        let s = z.shape();
        let mut ce = 0.0;
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let denom: f64 = (0..s.c).map(|c| z.at(n, c, y, x).exp()).sum();
                    let t = l.at(n, y, x) as usize;
                    ce -= (z.at(n, t, y, x).exp() / denom).ln();
                }
            }
        }
        ce /= (s.n * s.h * s.w) as f64;
        assert!((v - ce).abs() < 1e-7, "{} vs {}", v, ce);
    }

    #[test]
    fn perfect_prediction() {
        let l = LabelMap::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        let z = Tensor::from_fn([1, 3, 2, 2], |_, c, y, x| if l.at(0, y, x) as usize == c { 40.0 } else { -40.0 });
        let cfg = LossConfig::default();
        assert!(eval(focal_loss, &z, &l, &cfg) < 1e-30);
        assert!(eval(dice_loss, &z, &l, &cfg) < 1e-5);
        assert!(eval(segmentation_loss, &z, &l, &cfg) < 1e-4);
    }

    #[test]
    fn dice_constant_prediction() {
        let z = Tensor::zeros([1, 2, 4, 4]);
        let l = LabelMap::filled(1, 4, 4, 1);
        let cfg = LossConfig { dice_eps: 1e-12, ..Default::default() };
        let v = eval(dice_loss, &z, &l, &cfg);
        assert!((v - 1.0 / 3.0).abs() < 1e-9, "{}", v);
    }

    #[test]
    fn absent_class_is_skipped() {
        let (z, _) = random_case(1, 3, 4, 4, 2);
        let l = LabelMap::filled(1, 4, 4, 0);
        let v = eval(dice_loss, &z, &l, &LossConfig::default());
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }

    #[test]
    fn label_errors() {
        let z = Tensor::<f64>::zeros([1, 3, 2, 2]);
        let bad = LabelMap::new(1, 2, 2, vec![0, 3, 0, 0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(z);
        assert!(matches!(focal_loss(&mut tape, v, &bad, &LossConfig::default()), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(dice_loss(&mut tape, v, &bad, &LossConfig::default()), Err(Error::LabelOutOfRange { .. })));
        let wrong = LabelMap::filled(1, 3, 2, 0);
        assert!(matches!(focal_loss(&mut tape, v, &wrong, &LossConfig::default()), Err(Error::Shape(_))));
        let cfg = LossConfig { focal_alpha: Some(vec![1.0, 1.0]), ..Default::default() };
        assert!(focal_loss(&mut tape, v, &LabelMap::filled(1, 2, 2, 0), &cfg).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, gamma) in [(3, 2.0), (4, 0.0), (5, 0.5), (6, 3.0)] {
            let (z, l) = random_case(2, 3, 4, 5, seed);
            let cfg = LossConfig {
                focal_gamma: gamma,
                focal_alpha: Some(vec![0.5, 1.0, 2.0]),
                ..Default::default()
            };
            for f in [focal_loss, dice_loss, segmentation_loss] {
                let l2 = l.clone();
                let c2 = cfg.clone();
                let r = finite_diff_check(move |t, v| f(t, v, &l2, &c2), &z, 1e-4).unwrap();
                assert!(r.passed, "gamma {}: {:?}", gamma, r);
            }
        }
    }

    #[test]
    fn hybrid_composition() {
        let (z, l) = random_case(1, 3, 4, 4, 7);
        let (a1, _) = random_case(1, 3, 4, 4, 8);
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let (zv, av) = (tape.constant(z.clone()), tape.constant(a1.clone()));
        let main_only = hybrid_loss(&mut tape, zv, &[], &l, &cfg).unwrap();
        let f = focal_loss(&mut tape, zv, &l, &cfg).unwrap();
        let d = dice_loss(&mut tape, zv, &l, &cfg).unwrap();
        let expect = tape.value(f).data()[0] + tape.value(d).data()[0];
        assert_eq!(tape.value(main_only).data()[0], expect);
        let with_aux = hybrid_loss(&mut tape, zv, &[av], &l, &cfg).unwrap();
        let aux = segmentation_loss(&mut tape, av, &l, &cfg).unwrap();
        let want = expect + 0.4 * tape.value(aux).data()[0];
        assert!((tape.value(with_aux).data()[0] - want).abs() < 1e-12);
        let silent = LossConfig { aux_weight: 0.0, ..cfg };
        let zeroed = hybrid_loss(&mut tape, zv, &[av], &l, &silent).unwrap();
        assert_eq!(tape.value(zeroed).data()[0], expect);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { focal_gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { dice_eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { focal_alpha: Some(vec![1.0, 0.0]), ..Default::default() }.validate().is_err());
    }
}
