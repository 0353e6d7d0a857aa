//! AdamW with decoupled weight decay and bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::nn::mlp::ParamSet;

/// Moment estimates and hyperparameters for one parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerState {
    /// Defaults: beta1 0.9, beta2 0.95, weight decay 1e-6, eps 1e-8.
    pub fn new(param_count: usize, lr: f64) -> Self {
        OptimizerState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-6,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Frozen slices are skipped entirely: values and moment
/// estimates for those entries are bit-unchanged. A non-finite gradient
/// entry rejects the whole step before anything is mutated.
pub fn adamw_step(opt: &mut OptimizerState, params: &mut ParamSet, grads: &[f64]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::DimensionMismatch {
            what: "gradients",
            expected: params.len(),
            got: grads.len(),
        });
    }
    if opt.m.len() != params.len() {
        return Err(CoreError::DimensionMismatch {
            what: "optimizer moments",
            expected: params.len(),
            got: opt.m.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(CoreError::NonFinite {
            what: "gradients",
            index,
        });
    }

    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - math::pow(opt.beta1, t as f64);
    let bc2 = 1.0 - math::pow(opt.beta2, t as f64);

    let frozen = params.frozen_flags().to_vec();
    let slices: Vec<(usize, usize)> = params
        .layout()
        .slices()
        .iter()
        .map(|s| (s.offset, s.len))
        .collect();
    let values = params.values_mut();
    for (slice_idx, (offset, len)) in slices.iter().enumerate() {
        if frozen[slice_idx] {
            continue;
        }
        for i in *offset..offset + len {
            let g = grads[i];
            opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
            opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
            let m_hat = opt.m[i] / bc1;
            let v_hat = opt.v[i] / bc2;
            values[i] -= opt.lr * (m_hat / (math::sqrt(v_hat) + opt.eps)
                + opt.weight_decay * values[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::{MlpSpec, ParamSet};
    use crate::rng::Rng;

    fn small_params(seed: u64) -> ParamSet {
        let spec = MlpSpec::with_hidden(2, &[3], 1).unwrap();
        let mut rng = Rng::new(seed);
        ParamSet::new(spec.layout(), spec.init_params(&mut rng)).unwrap()
    }

    #[test]
    fn zero_grads_zero_decay_is_identity() {
        let mut params = small_params(1);
        let before = params.values().to_vec();
        let mut opt = OptimizerState::new(params.len(), 1e-3);
        opt.weight_decay = 0.0;
        let grads = vec![0.0; params.len()];
        for _ in 0..5 {
            adamw_step(&mut opt, &mut params, &grads).unwrap();
        }
        assert_eq!(params.values(), &before[..]);
    }

    #[test]
    fn zero_grads_with_decay_scales_params() {
        let mut params = small_params(2);
        let before = params.values().to_vec();
        let lr = 0.01;
        let lambda = 0.1;
        let mut opt = OptimizerState::new(params.len(), lr);
        opt.weight_decay = lambda;
        let grads = vec![0.0; params.len()];
        adamw_step(&mut opt, &mut params, &grads).unwrap();
        for (after, want) in params.values().iter().zip(before.iter()) {
            assert!((after - want * (1.0 - lr * lambda)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        // Single scalar parameter, constant gradient; the expected value is
        // recomputed here with the textbook recursion.
        let mut layout = crate::nn::mlp::ParamLayout::new();
        layout.push("p".into(), 1);
        let mut params = ParamSet::new(layout, vec![1.0]).unwrap();
        let (lr, b1, b2, eps, g) = (0.1, 0.9, 0.95, 1e-8, 0.5);
        let mut opt = OptimizerState::new(1, lr);
        opt.weight_decay = 0.0;

        let (mut m, mut v, mut p) = (0.0, 0.0, 1.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - libm::pow(b1, t as f64));
            let v_hat = v / (1.0 - libm::pow(b2, t as f64));
            p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            adamw_step(&mut opt, &mut params, &[g]).unwrap();
            assert!(
                (params.values()[0] - p).abs() < 1e-15,
                "step {t}: {} vs {p}",
                params.values()[0]
            );
        }
    }

    #[test]
    fn non_finite_grads_reject_without_mutation() {
        let mut params = small_params(3);
        let before = params.values().to_vec();
        let mut opt = OptimizerState::new(params.len(), 1e-3);
        let mut grads = vec![0.1; params.len()];
        grads[4] = f64::NAN;
        let err = adamw_step(&mut opt, &mut params, &grads).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { index: 4, .. }));
        assert_eq!(params.values(), &before[..]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn frozen_slices_bit_identical_under_updates() {
        let mut params = small_params(4);
        params.set_frozen("w0", true).unwrap();
        let frozen_before: Vec<u64> = params
            .slice_values("w0")
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let other_before = params.slice_values("b0").unwrap().to_vec();
        let mut opt = OptimizerState::new(params.len(), 1e-2);
        let grads = vec![0.3; params.len()];
        for _ in 0..25 {
            adamw_step(&mut opt, &mut params, &grads).unwrap();
        }
        let frozen_after: Vec<u64> = params
            .slice_values("w0")
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(frozen_before, frozen_after);
        assert_ne!(other_before, params.slice_values("b0").unwrap().to_vec());
    }
}
