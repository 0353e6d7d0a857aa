//! Running exponential moving average of a parameter set.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::nn::mlp::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    shadow: Vec<f64>,
    decay: f64,
}

impl EmaState {
    /// Shadow starts as a copy of the current parameters.
    pub fn new(params: &ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(CoreError::OutOfRange {
                what: "ema decay",
                value: decay,
            });
        }
        Ok(EmaState {
            shadow: params.values().to_vec(),
            decay,
        })
    }

    pub fn shadow(&self) -> &[f64] {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }
}

/// shadow <- decay * shadow + (1 - decay) * params
pub fn ema_update(ema: &mut EmaState, params: &ParamSet) -> Result<()> {
    if ema.shadow.len() != params.len() {
        return Err(CoreError::DimensionMismatch {
            what: "ema shadow",
            expected: params.len(),
            got: ema.shadow.len(),
        });
    }
    let d = ema.decay;
    for (s, &p) in ema.shadow.iter_mut().zip(params.values()) {
        *s = d * *s + (1.0 - d) * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::ParamLayout;

    fn scalar_params(v: f64) -> ParamSet {
        let mut layout = ParamLayout::new();
        layout.push("p".into(), 1);
        let mut p = ParamSet::zeros(layout);
        p.values_mut()[0] = v;
        p
    }

    #[test]
    fn decay_zero_copies_params() {
        let shadow_src = scalar_params(1.0);
        let mut ema = EmaState::new(&shadow_src, 0.0).unwrap();
        let params = scalar_params(0.25);
        ema_update(&mut ema, &params).unwrap();
        assert_eq!(ema.shadow(), &[0.25]);
    }

    #[test]
    fn decay_one_keeps_shadow() {
        let shadow_src = scalar_params(1.0);
        let mut ema = EmaState::new(&shadow_src, 1.0).unwrap();
        let params = scalar_params(-7.0);
        ema_update(&mut ema, &params).unwrap();
        assert_eq!(ema.shadow(), &[1.0]);
    }

    #[test]
    fn decay_09_closed_form() {
        let shadow_src = scalar_params(1.0);
        let mut ema = EmaState::new(&shadow_src, 0.9).unwrap();
        let params = scalar_params(0.0);
        ema_update(&mut ema, &params).unwrap();
        assert!((ema.shadow()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_decay_out_of_range() {
        let p = scalar_params(0.0);
        assert!(EmaState::new(&p, 1.5).is_err());
        assert!(EmaState::new(&p, -0.1).is_err());
    }
}
