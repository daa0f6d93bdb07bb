//! First-order optimizers over flat parameter vectors.
//!
//! Both optimizers operate on a parameter slice and a gradient slice of the
//! same length; structured parameters (encoder layers, head tensors) are
//! flattened by the caller in a fixed order and loaded back after each step.
//! This keeps the update rules independent of model shape and makes parameter
//! checksums trivial.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam exponential-decay rate for the first moment.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam exponential-decay rate for the second moment.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator offset.
pub const ADAM_EPS: f64 = 1e-8;

/// Which update rule an [`OptimizerState`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    /// Adam with bias correction and L2 regularization folded into the
    /// gradient before the moment updates.
    Adam,
    /// SGD with classical momentum: `v ← μ·v + grad`, `param ← param − η·v`.
    /// `μ = 0` reduces to vanilla SGD.
    SgdMomentum,
}

/// Hyper-parameters for one optimizer instance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig<S: Real = f64> {
    pub kind: OptimKind,
    /// Learning rate η. Zero is allowed and leaves parameters unchanged.
    pub lr: S,
    /// L2 coefficient applied as `grad += weight_decay · param` before any
    /// moment accumulation.
    pub weight_decay: S,
    /// Momentum μ for [`OptimKind::SgdMomentum`]; ignored by Adam.
    pub momentum: S,
}

impl<S: Real> Default for OptimConfig<S> {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            lr: S::of(1e-3),
            weight_decay: S::of(1e-6),
            momentum: S::zero(),
        }
    }
}

impl<S: Real> OptimConfig<S> {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: S| v.as_f64().is_finite();
        if !ok(self.lr) || self.lr < S::zero() {
            return Err(Error::InvalidArg("learning rate must be finite and >= 0".into()));
        }
        if !ok(self.weight_decay) || self.weight_decay < S::zero() {
            return Err(Error::InvalidArg("weight decay must be finite and >= 0".into()));
        }
        if !ok(self.momentum) || self.momentum < S::zero() || self.momentum.as_f64() >= 1.0 {
            return Err(Error::InvalidArg("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mutable optimizer state tied to one flat parameter vector.
///
/// `m`/`v` hold the Adam moment estimates; SGD-momentum stores its velocity
/// in `m` and leaves `v` empty. `step_count` drives Adam bias correction.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Real = f64> {
    config: OptimConfig<S>,
    step_count: u64,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Real> OptimizerState<S> {
    /// Fresh state for `param_count` parameters.
    pub fn new(config: OptimConfig<S>, param_count: usize) -> Result<Self> {
        config.validate()?;
        let v_len = match config.kind {
            OptimKind::Adam => param_count,
            OptimKind::SgdMomentum => 0,
        };
        Ok(OptimizerState {
            config,
            step_count: 0,
            m: vec![S::zero(); param_count],
            v: vec![S::zero(); v_len],
        })
    }

    pub fn config(&self) -> &OptimConfig<S> {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }

    /// Number of steps taken since creation or the last [`reset`](Self::reset).
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Clears moments and the step counter, as if freshly constructed.
    pub fn reset(&mut self) {
        self.step_count = 0;
        for x in &mut self.m {
            *x = S::zero();
        }
        for x in &mut self.v {
            *x = S::zero();
        }
    }

    /// One update with the configured weight decay.
    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<()> {
        let wd = self.config.weight_decay;
        self.step_with_weight_decay(params, grads, wd)
    }

    /// One update with an explicit weight-decay coefficient, overriding the
    /// configured one. Used where a schedule regularizes the same parameters
    /// through a different term and must not decay them twice.
    pub fn step_with_weight_decay(&mut self, params: &mut [S], grads: &[S], weight_decay: S) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state holds {} parameters, step got {}",
                self.param_count(),
                params.len()
            )));
        }
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} gradient entries, got {}",
                params.len(),
                grads.len()
            )));
        }
        for &g in grads {
            if !g.as_f64().is_finite() {
                return Err(Error::NonFiniteGradient);
            }
        }
        self.step_count += 1;
        let lr = self.config.lr;
        match self.config.kind {
            OptimKind::Adam => {
                let b1 = S::of(ADAM_BETA1);
                let b2 = S::of(ADAM_BETA2);
                let eps = S::of(ADAM_EPS);
                let one = S::one();
                // Bias corrections 1 − β^t computed once per step.
                let c1 = one - S::of(ADAM_BETA1.powi(self.step_count as i32));
                let c2 = one - S::of(ADAM_BETA2.powi(self.step_count as i32));
                for i in 0..params.len() {
                    let g = grads[i] + weight_decay * params[i];
                    self.m[i] = b1 * self.m[i] + (one - b1) * g;
                    self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimKind::SgdMomentum => {
                let mu = self.config.momentum;
                for i in 0..params.len() {
                    let g = grads[i] + weight_decay * params[i];
                    self.m[i] = mu * self.m[i] + g;
                    params[i] = params[i] - lr * self.m[i];
                }
            }
        }
        Ok(())
    }
}

/// FNV-1a hash over the bit patterns of a parameter vector.
///
/// Bit-exact: two vectors hash equal iff every entry is bit-identical, which
/// is what frozen-parameter guarantees are stated in terms of.
pub fn param_checksum<S: Real>(params: &[S]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &p in params {
        for byte in p.as_f64().to_bits().to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn adam(lr: f64, wd: f64) -> OptimConfig {
        OptimConfig {
            kind: OptimKind::Adam,
            lr,
            weight_decay: wd,
            momentum: 0.0,
        }
    }

    fn sgd(lr: f64, momentum: f64) -> OptimConfig {
        OptimConfig {
            kind: OptimKind::SgdMomentum,
            lr,
            weight_decay: 0.0,
            momentum,
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = OptimizerState::new(adam(1e-3, 0.0), 4).unwrap();
        let mut params = vec![0.5, -1.25, 3.0, 0.0];
        let before = params.clone();
        state.step(&mut params, &[0.0; 4]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // With uniform gradient 1 and no decay, m̂ = v̂ = 1 after the first
        // step, so every parameter moves by −η/(1 + ε) ≈ −η.
        let lr = 1e-3;
        let mut state = OptimizerState::new(adam(lr, 0.0), 3).unwrap();
        let mut params = vec![0.2, -0.7, 1.5];
        let before = params.clone();
        state.step(&mut params, &[1.0; 3]).unwrap();
        for (p, b) in params.iter().zip(&before) {
            let delta = p - b;
            assert!(
                (delta + lr).abs() < lr * 1e-6,
                "expected move of -{lr}, got {delta}"
            );
        }
    }

    #[test]
    fn sgd_zero_momentum_is_vanilla_gradient_descent() {
        let mut state = OptimizerState::new(sgd(0.1, 0.0), 2).unwrap();
        let mut params = vec![1.0, -2.0];
        state.step(&mut params, &[0.5, -1.0]).unwrap();
        assert_eq!(params, vec![1.0 - 0.1 * 0.5, -2.0 + 0.1]);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        // Constant gradient g: first step −ηg, second −η(1 + μ)g.
        let (lr, mu, g) = (0.1, 0.9, 2.0);
        let mut state = OptimizerState::new(sgd(lr, mu), 1).unwrap();
        let mut params = vec![0.0];
        state.step(&mut params, &[g]).unwrap();
        assert!((params[0] + lr * g).abs() < 1e-15);
        state.step(&mut params, &[g]).unwrap();
        assert!((params[0] + lr * g + lr * (1.0 + mu) * g).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let mut state = OptimizerState::new(adam(1e-2, 0.1), 1).unwrap();
        let mut params = vec![2.0];
        state.step(&mut params, &[0.0]).unwrap();
        assert!(params[0] < 2.0 && params[0] > 0.0);
    }

    #[test]
    fn explicit_weight_decay_override_suppresses_config_decay() {
        let config = adam(1e-2, 0.5);
        let mut with_decay = OptimizerState::new(config, 1).unwrap();
        let mut no_decay = OptimizerState::new(config, 1).unwrap();
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        with_decay.step(&mut a, &[0.0]).unwrap();
        no_decay.step_with_weight_decay(&mut b, &[0.0], 0.0).unwrap();
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        for config in [adam(0.0, 1e-2), sgd(0.0, 0.9)] {
            let mut state = OptimizerState::new(config, 3).unwrap();
            let mut params = vec![0.3, -0.6, 2.0];
            let before = params.clone();
            for _ in 0..5 {
                state.step(&mut params, &[1.0, -2.0, 0.5]).unwrap();
            }
            assert_eq!(params, before);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_any_update() {
        let mut state = OptimizerState::new(adam(1e-3, 0.0), 2).unwrap();
        let mut params = vec![1.0, 2.0];
        let err = state.step(&mut params, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient));
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut state = OptimizerState::new(adam(1e-3, 0.0), 3).unwrap();
        let mut params = vec![0.0; 2];
        assert!(state.step(&mut params, &[0.0; 2]).is_err());
        let mut params = vec![0.0; 3];
        assert!(state.step(&mut params, &[0.0; 2]).is_err());
    }

    #[test]
    fn reset_restores_fresh_state() {
        let mut state = OptimizerState::new(adam(1e-3, 0.0), 2).unwrap();
        let mut params = vec![1.0, -1.0];
        state.step(&mut params, &[0.3, 0.7]).unwrap();
        state.reset();
        assert_eq!(state.step_count(), 0);

        let mut fresh = OptimizerState::new(adam(1e-3, 0.0), 2).unwrap();
        let mut a = vec![0.5, 0.5];
        let mut b = vec![0.5, 0.5];
        state.step(&mut a, &[1.0, -1.0]).unwrap();
        fresh.step(&mut b, &[1.0, -1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(OptimizerState::new(adam(-1.0, 0.0), 1).is_err());
        assert!(OptimizerState::new(adam(1e-3, -0.1), 1).is_err());
        assert!(OptimizerState::new(sgd(1e-3, 1.0), 1).is_err());
        assert!(OptimizerState::new(sgd(1e-3, -0.5), 1).is_err());
        assert!(OptimizerState::<f64>::new(
            OptimConfig {
                kind: OptimKind::Adam,
                lr: f64::NAN,
                weight_decay: 0.0,
                momentum: 0.0
            },
            1
        )
        .is_err());
    }

    #[test]
    fn checksum_detects_any_bit_change() {
        let params = vec![1.0_f64, -0.5, 3.25];
        let base = param_checksum(&params);
        assert_eq!(base, param_checksum(&params.clone()));
        let mut tweaked = params.clone();
        tweaked[1] = -0.5 + f64::EPSILON;
        assert_ne!(base, param_checksum(&tweaked));
        // 0.0 and -0.0 compare equal but differ in bits; the checksum is
        // bit-exact on purpose.
        assert_ne!(param_checksum(&[0.0_f64]), param_checksum(&[-0.0_f64]));
    }

    proptest! {
        #[test]
        fn steps_keep_params_finite(
            seed in 0u64..1000,
            kind in prop::sample::select(vec![OptimKind::Adam, OptimKind::SgdMomentum]),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..8);
            let config = OptimConfig {
                kind,
                lr: rng.gen_range(0.0..0.1),
                weight_decay: rng.gen_range(0.0..0.01),
                momentum: rng.gen_range(0.0..0.99),
            };
            let mut state = OptimizerState::new(config, n).unwrap();
            let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for _ in 0..10 {
                let grads: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                state.step(&mut params, &grads).unwrap();
            }
            prop_assert!(params.iter().all(|p| p.is_finite()));
        }
    }
}
