//! Condition encoding and the conditional velocity models.
//!
//! A [`VelocityModel`] predicts the flow velocity from the current state, a
//! fixed sinusoidal time embedding, a scene embedding, and a text-concept
//! embedding. The null condition is a learned base embedding; each concrete
//! id adds a learned delta on top of it, so an id whose delta was never
//! trained is indistinguishable from the null condition.
//!
//! An [`AdapterModel`] is a trainable side branch that injects per-block
//! features (through zero-initialized projections) into the base network's
//! hidden features, adding an audio condition without touching the base
//! parameters.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::nn::mlp::{
    backward_raw, forward_raw, forward_raw_with_injection, Activation, ActivationCache, MlpSpec,
    ParamLayout, ParamSet,
};
use crate::rng::Rng;

/// Fixed sinusoidal time features fed to both the base model and the
/// adapter branch.
pub const TIME_FEATURES: usize = 7;

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let w = 2.0 * math::PI * t;
    [
        t,
        math::sin(w),
        math::cos(w),
        math::sin(2.0 * w),
        math::cos(2.0 * w),
        math::sin(4.0 * w),
        math::cos(4.0 * w),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConceptId(pub usize);

/// The (V, C) pair; `None` is the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Condition {
    pub scene: Option<SceneId>,
    pub text: Option<ConceptId>,
}

impl Condition {
    pub const NULL: Condition = Condition {
        scene: None,
        text: None,
    };

    pub fn new(scene: Option<SceneId>, text: Option<ConceptId>) -> Self {
        Condition { scene, text }
    }
}

/// Text conditioning as seen by the guidance formulas. `Blend` is the mean
/// of several concept embeddings (used by the negative-prompting baseline).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextCond {
    Null,
    Concept(ConceptId),
    Blend(Vec<ConceptId>),
}

impl From<Option<ConceptId>> for TextCond {
    fn from(c: Option<ConceptId>) -> Self {
        match c {
            None => TextCond::Null,
            Some(id) => TextCond::Concept(id),
        }
    }
}

/// How an audio condition enters sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioRole {
    /// The condition is material to steer *away* from.
    Negation,
}

/// A concrete audio latent used as a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioCondition {
    pub latent: Vec<f64>,
    pub role: AudioRole,
}

impl AudioCondition {
    pub fn negation(latent: Vec<f64>) -> Self {
        AudioCondition {
            latent,
            role: AudioRole::Negation,
        }
    }
}

/// Shape of a conditional velocity model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub n_scenes: usize,
    pub n_concepts: usize,
    pub scene_embed_dim: usize,
    pub text_embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn new(data_dim: usize, n_scenes: usize, n_concepts: usize) -> Self {
        ModelConfig {
            data_dim,
            n_scenes,
            n_concepts,
            scene_embed_dim: 8,
            text_embed_dim: 8,
            hidden: vec![48, 48],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + TIME_FEATURES + self.scene_embed_dim + self.text_embed_dim
    }
}

/// Conditional velocity network: params hold the embedding tables followed
/// by the MLP layers, all in one flat set.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    config: ModelConfig,
    mlp_spec: MlpSpec,
    params: ParamSet,
    scene_null_off: usize,
    scene_delta_off: usize,
    text_null_off: usize,
    text_delta_off: usize,
    mlp_off: usize,
}

/// Cache of one conditional forward pass, for the exact backward pass.
#[derive(Debug, Clone)]
pub struct ModelCache {
    mlp_cache: ActivationCache,
    cond: Condition,
}

impl VelocityModel {
    /// MLP weights from the seeded generator; embeddings start at zero so
    /// untrained ids coincide with the null embedding.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mlp_spec = MlpSpec::with_hidden(config.input_dim(), &config.hidden, config.data_dim)?;
        let mut layout = ParamLayout::new();
        let scene_null_off = layout.push("scene_null".into(), config.scene_embed_dim);
        let scene_delta_off = layout.push(
            "scene_delta".into(),
            config.n_scenes * config.scene_embed_dim,
        );
        let text_null_off = layout.push("text_null".into(), config.text_embed_dim);
        let text_delta_off = layout.push(
            "text_delta".into(),
            config.n_concepts * config.text_embed_dim,
        );
        let mlp_off = layout.extend_prefixed("mlp.", &mlp_spec.layout());
        let mut values = vec![0.0; layout.total_len()];
        values[mlp_off..].copy_from_slice(&mlp_spec.init_params(rng));
        let params = ParamSet::new(layout, values)?;
        Ok(VelocityModel {
            config,
            mlp_spec,
            params,
            scene_null_off,
            scene_delta_off,
            text_null_off,
            text_delta_off,
            mlp_off,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mlp_spec(&self) -> &MlpSpec {
        &self.mlp_spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameter values (e.g. with an EMA shadow).
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(CoreError::DimensionMismatch {
                what: "model parameters",
                expected: self.params.len(),
                got: values.len(),
            });
        }
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Validates ids against the vocabulary and returns the condition.
    pub fn encode_condition(
        &self,
        scene: Option<usize>,
        concept: Option<usize>,
    ) -> Result<Condition> {
        if let Some(s) = scene {
            if s >= self.config.n_scenes {
                return Err(CoreError::UnknownId {
                    what: "scene",
                    id: s,
                    vocab: self.config.n_scenes,
                });
            }
        }
        if let Some(c) = concept {
            if c >= self.config.n_concepts {
                return Err(CoreError::UnknownId {
                    what: "concept",
                    id: c,
                    vocab: self.config.n_concepts,
                });
            }
        }
        Ok(Condition::new(scene.map(SceneId), concept.map(ConceptId)))
    }

    /// Effective scene embedding: null base plus the id's delta.
    pub fn scene_embedding(&self, scene: Option<SceneId>) -> Vec<f64> {
        let dim = self.config.scene_embed_dim;
        let vals = self.params.values();
        let mut e = vals[self.scene_null_off..self.scene_null_off + dim].to_vec();
        if let Some(SceneId(id)) = scene {
            let off = self.scene_delta_off + id * dim;
            for (ei, &d) in e.iter_mut().zip(&vals[off..off + dim]) {
                *ei += d;
            }
        }
        e
    }

    /// Effective text embedding; `Blend` averages the member embeddings.
    pub fn text_embedding(&self, text: &TextCond) -> Result<Vec<f64>> {
        let dim = self.config.text_embed_dim;
        let vals = self.params.values();
        let mut e = vals[self.text_null_off..self.text_null_off + dim].to_vec();
        match text {
            TextCond::Null => {}
            TextCond::Concept(ConceptId(id)) => {
                if *id >= self.config.n_concepts {
                    return Err(CoreError::UnknownId {
                        what: "concept",
                        id: *id,
                        vocab: self.config.n_concepts,
                    });
                }
                let off = self.text_delta_off + id * dim;
                for (ei, &d) in e.iter_mut().zip(&vals[off..off + dim]) {
                    *ei += d;
                }
            }
            TextCond::Blend(ids) => {
                if ids.is_empty() {
                    return Err(CoreError::EmptyInput {
                        what: "text blend concept list",
                    });
                }
                let w = 1.0 / ids.len() as f64;
                for ConceptId(id) in ids {
                    if *id >= self.config.n_concepts {
                        return Err(CoreError::UnknownId {
                            what: "concept",
                            id: *id,
                            vocab: self.config.n_concepts,
                        });
                    }
                    let off = self.text_delta_off + id * dim;
                    for (ei, &d) in e.iter_mut().zip(&vals[off..off + dim]) {
                        *ei += w * d;
                    }
                }
            }
        }
        Ok(e)
    }

    fn assemble_input(&self, x_t: &[f64], t: f64, scene: &[f64], text: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.config.input_dim());
        input.extend_from_slice(x_t);
        input.extend_from_slice(&time_features(t));
        input.extend_from_slice(scene);
        input.extend_from_slice(text);
        input
    }

    fn mlp_params(&self) -> &[f64] {
        &self.params.values()[self.mlp_off..]
    }

    /// u(x_t, t, V, C); one deterministic forward pass.
    pub fn velocity(&self, x_t: &[f64], t: f64, cond: &Condition) -> Result<Vec<f64>> {
        self.velocity_text(x_t, t, cond.scene, &cond.text.into())
    }

    /// Velocity with general text conditioning.
    pub fn velocity_text(
        &self,
        x_t: &[f64],
        t: f64,
        scene: Option<SceneId>,
        text: &TextCond,
    ) -> Result<Vec<f64>> {
        if x_t.len() != self.config.data_dim {
            return Err(CoreError::DimensionMismatch {
                what: "velocity input",
                expected: self.config.data_dim,
                got: x_t.len(),
            });
        }
        if let Some(SceneId(id)) = scene {
            if id >= self.config.n_scenes {
                return Err(CoreError::UnknownId {
                    what: "scene",
                    id,
                    vocab: self.config.n_scenes,
                });
            }
        }
        let scene_e = self.scene_embedding(scene);
        let text_e = self.text_embedding(text)?;
        let input = self.assemble_input(x_t, t, &scene_e, &text_e);
        let cache = forward_raw(&self.mlp_spec, self.mlp_params(), &input);
        let out = cache.output();
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "velocity output",
                index,
            });
        }
        Ok(out.to_vec())
    }

    /// Forward pass keeping the cache needed for [`Self::backward_into`].
    pub fn velocity_cached(
        &self,
        x_t: &[f64],
        t: f64,
        cond: &Condition,
    ) -> Result<(Vec<f64>, ModelCache)> {
        if x_t.len() != self.config.data_dim {
            return Err(CoreError::DimensionMismatch {
                what: "velocity input",
                expected: self.config.data_dim,
                got: x_t.len(),
            });
        }
        let scene_e = self.scene_embedding(cond.scene);
        let text_e = self.text_embedding(&cond.text.into())?;
        let input = self.assemble_input(x_t, t, &scene_e, &text_e);
        let cache = forward_raw(&self.mlp_spec, self.mlp_params(), &input);
        let out = cache.output().to_vec();
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "velocity output",
                index,
            });
        }
        Ok((
            out,
            ModelCache {
                mlp_cache: cache,
                cond: *cond,
            },
        ))
    }

    /// Accumulates dL/dtheta into `grads` (same length as the parameter
    /// set), routing input gradients to the embedding slices.
    pub fn backward_into(
        &self,
        cache: &ModelCache,
        out_grad: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(CoreError::DimensionMismatch {
                what: "gradient buffer",
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let input_grad = backward_raw(
            &self.mlp_spec,
            self.mlp_params(),
            &cache.mlp_cache,
            out_grad,
            &[],
            Some(&mut grads[self.mlp_off..]),
            None,
        );
        // Input layout: [x_t, time, scene, text]; x_t and time are not
        // parameters.
        let s0 = self.config.data_dim + TIME_FEATURES;
        let sdim = self.config.scene_embed_dim;
        let tdim = self.config.text_embed_dim;
        let scene_grad = &input_grad[s0..s0 + sdim];
        let text_grad = &input_grad[s0 + sdim..s0 + sdim + tdim];
        for (i, g) in scene_grad.iter().enumerate() {
            grads[self.scene_null_off + i] += g;
        }
        if let Some(SceneId(id)) = cache.cond.scene {
            let off = self.scene_delta_off + id * sdim;
            for (i, g) in scene_grad.iter().enumerate() {
                grads[off + i] += g;
            }
        }
        for (i, g) in text_grad.iter().enumerate() {
            grads[self.text_null_off + i] += g;
        }
        if let Some(ConceptId(id)) = cache.cond.text {
            let off = self.text_delta_off + id * tdim;
            for (i, g) in text_grad.iter().enumerate() {
                grads[off + i] += g;
            }
        }
        Ok(())
    }
}

/// Shape of the adapter branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterConfig {
    pub audio_dim: usize,
    /// Branch block widths; block `l` feeds base hidden layer `l`. Must not
    /// exceed the base's hidden depth.
    pub hidden: Vec<usize>,
}

impl AdapterConfig {
    /// Branch depth and widths mirror the base's hidden layers.
    pub fn matching(base: &ModelConfig) -> Self {
        AdapterConfig {
            audio_dim: base.data_dim,
            hidden: base.hidden.clone(),
        }
    }
}

/// ControlNet-style side branch: an MLP over (audio latent, time features)
/// whose per-block features are projected (zero-initialized) and added to
/// the base model's hidden features.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    config: AdapterConfig,
    branch_spec: MlpSpec,
    params: ParamSet,
    branch_off: usize,
    /// (weight offset, bias offset, base width, branch width) per block.
    proj: Vec<(usize, usize, usize, usize)>,
}

/// Cache of one adapted forward pass.
#[derive(Debug, Clone)]
pub struct AdaptedCache {
    base_cache: ActivationCache,
    branch_cache: ActivationCache,
}

impl AdapterModel {
    pub fn init(config: AdapterConfig, base: &VelocityModel, rng: &mut Rng) -> Result<Self> {
        let base_hidden = &base.config().hidden;
        if config.hidden.len() > base_hidden.len() {
            return Err(CoreError::InvalidSpec(
                "adapter depth exceeds base hidden depth".into(),
            ));
        }
        if config.hidden.is_empty() {
            return Err(CoreError::InvalidSpec(
                "adapter needs at least one block".into(),
            ));
        }
        if config.audio_dim != base.config().data_dim {
            return Err(CoreError::InvalidSpec(
                "adapter audio dim must match the base data dim".into(),
            ));
        }
        let mut widths = Vec::with_capacity(config.hidden.len() + 1);
        widths.push(config.audio_dim + TIME_FEATURES);
        widths.extend_from_slice(&config.hidden);
        let branch_spec = MlpSpec::new(widths, vec![Activation::SiLU; config.hidden.len()])?;

        let mut layout = ParamLayout::new();
        let branch_off = layout.extend_prefixed("branch.", &branch_spec.layout());
        let mut proj = Vec::with_capacity(config.hidden.len());
        for (l, &bw) in config.hidden.iter().enumerate() {
            let base_w = base_hidden[l];
            let w_off = layout.push(alloc::format!("proj{l}.w"), base_w * bw);
            let b_off = layout.push(alloc::format!("proj{l}.b"), base_w);
            proj.push((w_off, b_off, base_w, bw));
        }
        let mut values = vec![0.0; layout.total_len()];
        values[branch_off..branch_off + branch_spec.param_count()]
            .copy_from_slice(&branch_spec.init_params(rng));
        // Projections stay zero so the adapted model starts exactly at the
        // base model's behavior.
        let params = ParamSet::new(layout, values)?;
        Ok(AdapterModel {
            config,
            branch_spec,
            params,
            branch_off,
            proj,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(CoreError::DimensionMismatch {
                what: "adapter parameters",
                expected: self.params.len(),
                got: values.len(),
            });
        }
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.proj.len()
    }

    fn branch_params(&self) -> &[f64] {
        &self.params.values()[self.branch_off..self.branch_off + self.branch_spec.param_count()]
    }

    /// Per-base-layer injections (empty for layers beyond the branch depth
    /// and for the output layer).
    fn injections(&self, branch_cache: &ActivationCache, base_layers: usize) -> Vec<Vec<f64>> {
        let vals = self.params.values();
        let mut extra = vec![Vec::new(); base_layers];
        for (l, &(w_off, b_off, base_w, bw)) in self.proj.iter().enumerate() {
            let feat = branch_cache.post_activation(l);
            debug_assert_eq!(feat.len(), bw);
            let mut inj = vec![0.0; base_w];
            for (o, io) in inj.iter_mut().enumerate() {
                let row = &vals[w_off + o * bw..w_off + (o + 1) * bw];
                *io = vals[b_off + o] + math::dot(row, feat);
            }
            extra[l] = inj;
        }
        extra
    }
}

fn check_null_text(cond: &Condition) -> Result<()> {
    if cond.text.is_some() {
        return Err(CoreError::NonNullText);
    }
    Ok(())
}

/// u(x_t, t, V, null, x_cond): the base forward pass with the adapter
/// branch's features added to the base's hidden layers. The text member
/// must be null.
pub fn adapted_velocity(
    base: &VelocityModel,
    adapter: &AdapterModel,
    x_t: &[f64],
    t: f64,
    cond: &Condition,
    audio: &AudioCondition,
) -> Result<Vec<f64>> {
    let (out, _) = adapted_velocity_cached(base, adapter, x_t, t, cond, audio)?;
    Ok(out)
}

/// Adapted forward pass keeping caches for [`adapted_backward_psi`].
pub fn adapted_velocity_cached(
    base: &VelocityModel,
    adapter: &AdapterModel,
    x_t: &[f64],
    t: f64,
    cond: &Condition,
    audio: &AudioCondition,
) -> Result<(Vec<f64>, AdaptedCache)> {
    check_null_text(cond)?;
    if x_t.len() != base.config().data_dim {
        return Err(CoreError::DimensionMismatch {
            what: "velocity input",
            expected: base.config().data_dim,
            got: x_t.len(),
        });
    }
    if audio.latent.len() != adapter.config.audio_dim {
        return Err(CoreError::DimensionMismatch {
            what: "audio condition latent",
            expected: adapter.config.audio_dim,
            got: audio.latent.len(),
        });
    }
    let mut branch_input = Vec::with_capacity(adapter.config.audio_dim + TIME_FEATURES);
    branch_input.extend_from_slice(&audio.latent);
    branch_input.extend_from_slice(&time_features(t));
    let branch_cache = forward_raw(&adapter.branch_spec, adapter.branch_params(), &branch_input);

    let scene_e = base.scene_embedding(cond.scene);
    let text_e = base.text_embedding(&TextCond::Null)?;
    let input = base.assemble_input(x_t, t, &scene_e, &text_e);
    let extra = adapter.injections(&branch_cache, base.mlp_spec.num_layers());
    let base_cache = forward_raw_with_injection(&base.mlp_spec, base.mlp_params(), &input, &extra);
    let out = base_cache.output().to_vec();
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            what: "adapted velocity output",
            index,
        });
    }
    Ok((
        out,
        AdaptedCache {
            base_cache,
            branch_cache,
        },
    ))
}

/// Accumulates dL/dpsi into `psi_grads`; the base parameters receive no
/// gradient (they are frozen during adapter training).
pub fn adapted_backward_psi(
    base: &VelocityModel,
    adapter: &AdapterModel,
    cache: &AdaptedCache,
    out_grad: &[f64],
    psi_grads: &mut [f64],
) -> Result<()> {
    if psi_grads.len() != adapter.params.len() {
        return Err(CoreError::DimensionMismatch {
            what: "adapter gradient buffer",
            expected: adapter.params.len(),
            got: psi_grads.len(),
        });
    }
    // Backward through the base, capturing what each injection saw.
    let mut post_grads: Vec<Vec<f64>> = Vec::new();
    let _ = backward_raw(
        &base.mlp_spec,
        base.mlp_params(),
        &cache.base_cache,
        out_grad,
        &[],
        None,
        Some(&mut post_grads),
    );
    // Projection gradients and the external gradients for the branch.
    let vals = adapter.params.values();
    let mut branch_extra = vec![Vec::new(); adapter.branch_spec.num_layers()];
    for (l, &(w_off, b_off, base_w, bw)) in adapter.proj.iter().enumerate() {
        let g_inj = &post_grads[l];
        debug_assert_eq!(g_inj.len(), base_w);
        let feat = cache.branch_cache.post_activation(l);
        let mut feat_grad = vec![0.0; bw];
        for o in 0..base_w {
            let g = g_inj[o];
            psi_grads[b_off + o] += g;
            let w_row = &vals[w_off + o * bw..w_off + (o + 1) * bw];
            let dw_row = &mut psi_grads[w_off + o * bw..w_off + (o + 1) * bw];
            for i in 0..bw {
                dw_row[i] += g * feat[i];
                feat_grad[i] += g * w_row[i];
            }
        }
        branch_extra[l] = feat_grad;
    }
    // Backward through the branch; its last layer has no downstream output
    // of its own, only the per-block taps.
    let zero_out = vec![0.0; adapter.branch_spec.output_dim()];
    let branch_range = adapter.branch_off..adapter.branch_off + adapter.branch_spec.param_count();
    let _ = backward_raw(
        &adapter.branch_spec,
        adapter.branch_params(),
        &cache.branch_cache,
        &zero_out,
        &branch_extra,
        Some(&mut psi_grads[branch_range]),
        None,
    );
    Ok(())
}
