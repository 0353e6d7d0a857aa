//! Scalar math routed through `libm` so the crate stays `no_std` and every
//! transcendental is bit-reproducible across platforms.

pub use libm::{cos, exp, fabs, floor, log, log10, pow, sin, sqrt, tanh};

pub const PI: f64 = core::f64::consts::PI;
pub const LN_2PI: f64 = 1.837877066409345483560659472811235279723;

/// Natural log with the argument floored at `min` to keep ratios finite.
pub fn ln_floored(x: f64, min: f64) -> f64 {
    log(if x < min { min } else { x })
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Euclidean norm of a vector.
pub fn norm(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}

/// Dot product; caller guarantees equal lengths.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Root-mean-square of a signal. Zero for an empty slice.
pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    sqrt(v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64)
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}
