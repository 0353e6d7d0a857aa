//! Guided velocity fields as pure algebra over oracle evaluations.
//!
//! Every formula here is an affine combination of velocity evaluations whose
//! coefficients sum to one. The oracle abstraction keeps the algebra
//! independent of model internals, so the same functions can be driven by a
//! trained model pair or by closed-form test fields.

use alloc::vec::Vec;

use crate::cond::{
    adapted_velocity, AdapterModel, AudioCondition, Condition, ConceptId, SceneId, TextCond,
    VelocityModel,
};
use crate::error::{CoreError, Result};

/// Guidance variant plus its weights, as selected for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceSpec {
    /// Single-weight classifier-free guidance.
    Cfg { w1: f64 },
    /// Separate weights for the scene lift and the text lift.
    TwoCond { w1: f64, w2: f64 },
    /// Condition lift `alpha` plus negation push `beta` away from the
    /// audio-conditioned flow.
    Nag { alpha: f64, beta: f64 },
    /// The un-simplified four-term form.
    NagFull { w1p: f64, w2p: f64, w3p: f64 },
    /// Extrapolate away from the unconditional flow conditioned on the
    /// blended negative concepts.
    NegPrompt {
        w1: f64,
        negative_concepts: Vec<ConceptId>,
    },
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = |w: f64, what: &'static str| {
            if w.is_finite() {
                Ok(())
            } else {
                Err(CoreError::OutOfRange { what, value: w })
            }
        };
        match self {
            GuidanceSpec::Cfg { w1 } => finite(*w1, "w1"),
            GuidanceSpec::TwoCond { w1, w2 } => {
                finite(*w1, "w1")?;
                finite(*w2, "w2")
            }
            GuidanceSpec::Nag { alpha, beta } => {
                finite(*alpha, "alpha")?;
                finite(*beta, "beta")
            }
            GuidanceSpec::NagFull { w1p, w2p, w3p } => {
                finite(*w1p, "w1'")?;
                finite(*w2p, "w2'")?;
                finite(*w3p, "w3'")
            }
            GuidanceSpec::NegPrompt {
                w1,
                negative_concepts,
            } => {
                finite(*w1, "w1")?;
                if negative_concepts.is_empty() {
                    return Err(CoreError::EmptyInput {
                        what: "negative concept list",
                    });
                }
                Ok(())
            }
        }
    }
}

/// Velocity evaluations a guidance formula may request.
pub trait VelocityOracle {
    /// Dimension of the latents this oracle operates on.
    fn data_dim(&self) -> usize;

    /// u(x_t, t, V-or-null, C-or-null), with blended text for the
    /// negative-prompting baseline.
    fn velocity(
        &self,
        x_t: &[f64],
        t: f64,
        scene: Option<SceneId>,
        text: &TextCond,
    ) -> Result<Vec<f64>>;

    /// u(x_t, t, V, null, x_cond). Defaults to "no adapter available".
    fn adapted(
        &self,
        _x_t: &[f64],
        _t: f64,
        _scene: Option<SceneId>,
        _audio: &AudioCondition,
    ) -> Result<Vec<f64>> {
        Err(CoreError::AdapterUnavailable)
    }
}

/// A trained base model, optionally paired with its adapter.
pub struct ModelOracle<'a> {
    pub base: &'a VelocityModel,
    pub adapter: Option<&'a AdapterModel>,
}

impl<'a> ModelOracle<'a> {
    pub fn base_only(base: &'a VelocityModel) -> Self {
        ModelOracle {
            base,
            adapter: None,
        }
    }

    pub fn with_adapter(base: &'a VelocityModel, adapter: &'a AdapterModel) -> Self {
        ModelOracle {
            base,
            adapter: Some(adapter),
        }
    }
}

impl VelocityOracle for ModelOracle<'_> {
    fn data_dim(&self) -> usize {
        self.base.config().data_dim
    }

    fn velocity(
        &self,
        x_t: &[f64],
        t: f64,
        scene: Option<SceneId>,
        text: &TextCond,
    ) -> Result<Vec<f64>> {
        self.base.velocity_text(x_t, t, scene, text)
    }

    fn adapted(
        &self,
        x_t: &[f64],
        t: f64,
        scene: Option<SceneId>,
        audio: &AudioCondition,
    ) -> Result<Vec<f64>> {
        let adapter = self.adapter.ok_or(CoreError::AdapterUnavailable)?;
        adapted_velocity(
            self.base,
            adapter,
            x_t,
            t,
            &Condition::new(scene, None),
            audio,
        )
    }
}

fn axpy(out: &mut [f64], w: f64, a: &[f64], b: &[f64]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o += w * (x - y);
    }
}

/// u(null,null) + w1 (u(V,C) - u(null,null))
pub fn guide_cfg<O: VelocityOracle + ?Sized>(
    oracle: &O,
    x_t: &[f64],
    t: f64,
    scene: Option<SceneId>,
    text: Option<ConceptId>,
    w1: f64,
) -> Result<Vec<f64>> {
    GuidanceSpec::Cfg { w1 }.validate()?;
    let u_null = oracle.velocity(x_t, t, None, &TextCond::Null)?;
    let u_vc = oracle.velocity(x_t, t, scene, &text.into())?;
    let mut out = u_null.clone();
    axpy(&mut out, w1, &u_vc, &u_null);
    Ok(out)
}

/// u(null,null) + w1 (u(V,null) - u(null,null)) + w2 (u(V,C) - u(V,null))
pub fn guide_two_cond<O: VelocityOracle + ?Sized>(
    oracle: &O,
    x_t: &[f64],
    t: f64,
    scene: Option<SceneId>,
    text: Option<ConceptId>,
    w1: f64,
    w2: f64,
) -> Result<Vec<f64>> {
    GuidanceSpec::TwoCond { w1, w2 }.validate()?;
    let u_null = oracle.velocity(x_t, t, None, &TextCond::Null)?;
    let u_v = oracle.velocity(x_t, t, scene, &TextCond::Null)?;
    let u_vc = oracle.velocity(x_t, t, scene, &text.into())?;
    let mut out = u_null.clone();
    axpy(&mut out, w1, &u_v, &u_null);
    axpy(&mut out, w2, &u_vc, &u_v);
    Ok(out)
}

/// u(null,null) + alpha (u(V,C2) - u(null,null))
///              + beta  (u(V,C2) - u_adapted(V,null,x_cond))
pub fn guide_nag<O: VelocityOracle + ?Sized>(
    oracle: &O,
    x_t: &[f64],
    t: f64,
    scene: Option<SceneId>,
    text: Option<ConceptId>,
    audio: &AudioCondition,
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    GuidanceSpec::Nag { alpha, beta }.validate()?;
    let u_null = oracle.velocity(x_t, t, None, &TextCond::Null)?;
    let u_vc = oracle.velocity(x_t, t, scene, &text.into())?;
    let u_neg = oracle.adapted(x_t, t, scene, audio)?;
    let mut out = u_null.clone();
    axpy(&mut out, alpha, &u_vc, &u_null);
    axpy(&mut out, beta, &u_vc, &u_neg);
    Ok(out)
}

/// The four-term form:
/// u(null,null) + w1' (u(V,null) - u(null,null))
///              + w2' (u(V,C2) - u(V,null))
///              + w3' (u(V,null) - u_adapted(V,null,x_cond))
///
/// Setting w1' = alpha, w2' = alpha + beta, w3' = beta cancels u(V,null)
/// and recovers [`guide_nag`].
pub fn guide_nag_full<O: VelocityOracle + ?Sized>(
    oracle: &O,
    x_t: &[f64],
    t: f64,
    scene: Option<SceneId>,
    text: Option<ConceptId>,
    audio: &AudioCondition,
    w1p: f64,
    w2p: f64,
    w3p: f64,
) -> Result<Vec<f64>> {
    GuidanceSpec::NagFull { w1p, w2p, w3p }.validate()?;
    let u_null = oracle.velocity(x_t, t, None, &TextCond::Null)?;
    let u_v = oracle.velocity(x_t, t, scene, &TextCond::Null)?;
    let u_vc = oracle.velocity(x_t, t, scene, &text.into())?;
    let u_neg = oracle.adapted(x_t, t, scene, audio)?;
    let mut out = u_null.clone();
    axpy(&mut out, w1p, &u_v, &u_null);
    axpy(&mut out, w2p, &u_vc, &u_v);
    axpy(&mut out, w3p, &u_v, &u_neg);
    Ok(out)
}

/// u(null,null) + w1 (u(V,C_k) - u(null, C_neg)) where C_neg blends the
/// other captions' concepts.
pub fn guide_neg_prompt<O: VelocityOracle + ?Sized>(
    oracle: &O,
    x_t: &[f64],
    t: f64,
    scene: Option<SceneId>,
    text: Option<ConceptId>,
    negative_concepts: &[ConceptId],
    w1: f64,
) -> Result<Vec<f64>> {
    GuidanceSpec::NegPrompt {
        w1,
        negative_concepts: negative_concepts.to_vec(),
    }
    .validate()?;
    let u_null = oracle.velocity(x_t, t, None, &TextCond::Null)?;
    let u_vc = oracle.velocity(x_t, t, scene, &text.into())?;
    let u_neg = oracle.velocity(x_t, t, None, &TextCond::Blend(negative_concepts.to_vec()))?;
    let mut out = u_null.clone();
    axpy(&mut out, w1, &u_vc, &u_neg);
    Ok(out)
}
