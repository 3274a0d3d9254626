//! Ranger: RAdam inner steps wrapped in Lookahead.
//!
//! The fast weights follow RAdam; every `lookahead_k` inner steps the slow
//! weights move a fraction `alpha` toward them and the fast weights are reset
//! onto the slow ones. No weight decay, no clipping, no gradient
//! centralization.

use crate::error::{Error, Result};
use crate::neural::{ModelParams, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
}

impl Default for RangerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
        }
    }
}

impl RangerConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Step scale of RAdam at step `t`: `Some(r_t)` once the variance of the
/// adaptive rate is tractable (`rho_t > 4`), `None` before that.
pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powf(t as f64);
    let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
    (rho_t > 4.0)
        .then(|| (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
}

/// Optimizer state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptState {
    pub config: RangerConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub slow: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptState {
    /// Zero moments; slow weights copy `params`.
    pub fn new(config: RangerConfig, params: &[Tensor<impl Real>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            slow: params
                .iter()
                .map(|p| p.data().iter().map(|x| x.as_f64()).collect())
                .collect(),
            t: 0,
        }
    }

    /// State over the trainable tensors of a model, in storage order.
    pub fn for_model<T: Real>(config: RangerConfig, model: &ModelParams<T>) -> Self {
        let params: Vec<Tensor<T>> = model
            .tensors
            .iter()
            .filter(|t| t.role.trainable())
            .map(|t| t.tensor.clone())
            .collect();
        Self::new(config, &params)
    }
}

/// One RAdam update of every tensor.
pub fn radam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut OptState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.len() != state.m[i].len() {
            return Err(Error::Shape(format!(
                "tensor {i}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of tensor {i} at element {j} is {}",
                g.data()[j]
            )));
        }
    }
    let cfg = state.config;
    state.t += 1;
    let t = state.t;
    let bias1 = 1.0 - cfg.beta1.powf(t as f64);
    let bias2 = 1.0 - cfg.beta2.powf(t as f64);
    let rect = rectification(cfg.beta2, t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bias1;
            let step = match rect {
                Some(r) => cfg.lr * r * m_hat / ((v[j] / bias2).sqrt() + cfg.eps),
                None => cfg.lr * m_hat,
            };
            *w = T::cast(w.as_f64() - step);
        }
    }
    Ok(())
}

/// Lookahead interpolation, active only when `t` is a multiple of `k`.
pub fn lookahead_sync<T: Real>(params: &mut [&mut Tensor<T>], state: &mut OptState) {
    let cfg = state.config;
    if cfg.lookahead_k == 0 || state.t % cfg.lookahead_k != 0 {
        return;
    }
    for (p, slow) in params.iter_mut().zip(state.slow.iter_mut()) {
        for (w, s) in p.data_mut().iter_mut().zip(slow.iter_mut()) {
            *s += cfg.lookahead_alpha * (w.as_f64() - *s);
            *w = T::cast(*s);
        }
    }
}

/// Full Ranger step; verifies that no parameter became non-finite.
pub fn ranger_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut OptState) -> Result<()> {
    radam_step(params, grads, state)?;
    lookahead_sync(params, state);
    for (i, p) in params.iter().enumerate() {
        if !p.all_finite() {
            return Err(Error::NonFinite(format!("parameter tensor {i} after step {}", state.t)));
        }
    }
    Ok(())
}

/// Ranger step over the trainable tensors of a model. `grads` is aligned
/// with `model.tensors`.
pub fn ranger_step_model<T: Real>(model: &mut ModelParams<T>, grads: &[Tensor<T>], state: &mut OptState) -> Result<()> {
    let (mut ps, mut gs) = (Vec::new(), Vec::new());
    for (entry, g) in model.tensors.iter_mut().zip(grads) {
        if entry.role.trainable() {
            ps.push(&mut entry.tensor);
            gs.push(g);
        }
    }
    ranger_step(&mut ps, &gs, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn first_step_is_unrectified() {
        let rho_inf: f64 = 2.0 / (1.0 - 0.999) - 1.0;
        assert!((rho_inf - 1999.0).abs() < 1e-9);
        assert_eq!(rectification(0.999, 1), None);
        assert!(rectification(0.999, 6).is_some());
        assert_eq!(rectification(0.999, 3), None);
        assert!(rectification(0.999, 5).is_some());
    }

    #[test]
    fn one_step_hand_value() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = OptState::new(
            RangerConfig {
                lr: 0.1,
                ..Default::default()
            },
            std::slice::from_ref(&p),
        );
        radam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn rectified_branch_matches_formula() {
        let mut p = scalar(1.0);
        let g = scalar(0.5);
        let cfg = RangerConfig {
            lr: 0.01,
            lookahead_k: 0,
            ..Default::default()
        };
        let mut st = OptState::new(cfg, std::slice::from_ref(&p));
        let mut expect = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=10u64 {
            radam_step(&mut [&mut p], &[&g], &mut st).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * 0.5;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * 0.25;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            expect -= match rectification(cfg.beta2, t) {
                Some(r) => cfg.lr * r * mh / ((v / (1.0 - cfg.beta2.powi(t as i32))).sqrt() + cfg.eps),
                None => cfg.lr * mh,
            };
            assert!((p.data()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lookahead_interpolates_at_sync() {
        let mut p = scalar(1.0);
        let mut st = OptState::new(
            RangerConfig {
                lookahead_k: 1,
                ..Default::default()
            },
            &[scalar(0.0)],
        );
        st.t = 1;
        lookahead_sync(&mut [&mut p], &mut st);
        assert_eq!(p.data()[0], 0.5);
        assert_eq!(st.slow[0][0], 0.5);

        let mut q = scalar(3.0);
        let mut snap = OptState::new(
            RangerConfig {
                lookahead_k: 2,
                lookahead_alpha: 1.0,
                ..Default::default()
            },
            &[scalar(-1.0)],
        );
        snap.t = 1;
        lookahead_sync(&mut [&mut q], &mut snap);
        assert_eq!((q.data()[0], snap.slow[0][0]), (3.0, -1.0));
        snap.t = 2;
        lookahead_sync(&mut [&mut q], &mut snap);
        assert_eq!((q.data()[0], snap.slow[0][0]), (3.0, 3.0));
    }

    #[test]
    fn zero_gradients_are_identity() {
        let mut p = Tensor::new(vec![3], vec![0.3, -1.2, 7.0]).unwrap();
        let orig = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = OptState::new(RangerConfig::default(), std::slice::from_ref(&p));
        for _ in 0..20 {
            ranger_step(&mut [&mut p], &[&g], &mut st).unwrap();
            assert_eq!(p, orig);
        }
        assert!(st.m[0].iter().chain(&st.v[0]).all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar(0.0);
        let g = scalar(f64::NAN);
        let mut st = OptState::new(RangerConfig::default(), std::slice::from_ref(&p));
        assert!(matches!(
            radam_step(&mut [&mut p], &[&g], &mut st),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(st.t, 0);
        assert_eq!(p.data()[0], 0.0);
    }
}
