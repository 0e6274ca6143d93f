use super::{Real, Tensor};
use crate::error::{Error, Result};

/// First/second moment estimates for bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
    {
        return Err(Error::ShapeMismatch(
            "optimizer state does not match parameters".into(),
        ));
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 / (1.0 - state.beta1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - state.beta2.powi(t)));
    let (lr, eps) = (T::of(state.lr), T::of(state.eps));
    let one = T::one();

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv * c1;
            let vhat = *vv * c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(1e-3);
        for _ in 0..5 {
            adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let lr = 1e-4;
        let mut params = vec![Tensor::<f64>::zeros(&[4])];
        let mut state = AdamState::new(lr);
        adam_step(&mut params, &[Tensor::full(&[4], 1.0)], &mut state).unwrap();
        // bias correction at t=1 gives mhat = vhat = 1
        let expected = -lr / (1.0 + 1e-8);
        for &p in params[0].data() {
            assert!((p - expected).abs() < 1e-15);
        }
    }

    /// Plain scalar Adam, written independently of the tensor code.
    fn scalar_adam_trace(theta0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        (1..=steps)
            .map(|t| {
                let g = 2.0 * theta;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mhat = m / (1.0 - b1.powi(t as i32));
                let vhat = v / (1.0 - b2.powi(t as i32));
                theta -= lr * mhat / (vhat.sqrt() + eps);
                theta
            })
            .collect()
    }

    #[test]
    fn quadratic_matches_scalar_simulation() {
        let oracle = scalar_adam_trace(1.0, 0.1, 50);
        let mut theta = vec![Tensor::<f64>::scalar(1.0)];
        let mut state = AdamState::new(0.1);
        for expected in &oracle {
            let g = Tensor::scalar(2.0 * theta[0].item());
            adam_step(&mut theta, &[g], &mut state).unwrap();
            assert!((theta[0].item() - expected).abs() < 1e-12);
        }
        // Momentum carries theta across zero at step 12; up to there the
        // magnitude shrinks every step.
        let mut last = 1.0f64;
        for th in &oracle[..11] {
            assert!(th.abs() < last);
            last = th.abs();
        }
        assert!(oracle[11] < 0.0);
        assert!(oracle[49].abs() < 0.1);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut state = AdamState::new(1e-3);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state).is_err());
        assert!(adam_step(&mut params, &[], &mut state).is_err());
    }
}
