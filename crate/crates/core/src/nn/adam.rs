use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::NnError;

/// Learning-rate grid searched for every model.
pub const LR_GRID: [f64; 3] = [1e-4, 3e-4, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    /// Steps dropped because a gradient was non-finite.
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            skipped: 0,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<StepOutcome, NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NnError::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    if !(cfg.lr >= 0.0) {
        return Err(NnError::InvalidHyper(format!("learning rate {}", cfg.lr)));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("non-finite gradient at adam step {}; update skipped", state.t + 1);
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            pd[i] = pd[i] - step;
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(lr: f64, g: &[f64]) -> Vec<f64> {
        let mut p = vec![Tensor::<f64>::matrix(1, g.len(), vec![0.0; g.len()])];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        adam_step(&mut p, &[Tensor::matrix(1, g.len(), g.to_vec())], &mut st, &cfg).unwrap();
        p[0].data().to_vec()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::matrix(1, 2, vec![1.5, -2.0])];
        let mut st = AdamState::new(&p);
        let out = adam_step(&mut p, &[Tensor::zeros(vec![1, 2])], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::Applied);
        assert_eq!(p[0].data(), &[1.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-3;
        let p = one_step(lr, &[0.3, -4.0, 1e-2]);
        for (got, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((got - sign * lr).abs() < lr * 1e-5, "{got}");
        }
    }

    #[test]
    fn first_update_scales_with_lr() {
        let g = [0.7, -0.2, 3.0];
        let a = one_step(1e-4, &g);
        let b = one_step(3e-4, &g);
        for (x, y) in a.iter().zip(&b) {
            assert!((y / x - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_betas() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![Tensor::<f64>::matrix(1, 1, vec![1.0])];
        let mut st = AdamState::new(&p);
        let mut g = Tensor::<f64>::matrix(1, 1, vec![0.0]);
        g.data_mut()[0] = f64::NAN;
        let out = adam_step(&mut p, &[g], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!((st.t, st.skipped, p[0].item()), (0, 1, 1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(vec![1, 2])];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(vec![2, 1])], &mut st, &AdamConfig::default()).is_err());
    }
}
