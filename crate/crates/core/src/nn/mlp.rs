//! Dense feed-forward networks over flat `f64` parameter buffers.
//!
//! Parameters live in a single flat array described by a [`ParamLayout`] of
//! named slices, so one buffer can also carry embedding tables next to the
//! layer weights and the optimizer can freeze slices individually. Layer `l`
//! stores its weight matrix row-major `(out, in)` followed by its biases.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    SiLU,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::SiLU => z * math::sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::SiLU => {
                let s = math::sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Widths and per-layer activations of a dense network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(CoreError::InvalidSpec(format!(
                "need at least 2 layer widths, got {}",
                widths.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidSpec("zero layer width".into()));
        }
        if activations.len() != widths.len() - 1 {
            return Err(CoreError::InvalidSpec(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len() - 1,
                activations.len()
            )));
        }
        Ok(MlpSpec {
            widths,
            activations,
        })
    }

    /// SiLU hidden layers, identity output.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut activations = vec![Activation::SiLU; widths.len() - 2];
        activations.push(Activation::Identity);
        MlpSpec::new(widths, activations)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of weight/bias layers.
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.widths[l] * self.widths[l + 1] + self.widths[l + 1])
            .sum()
    }

    /// Offset of layer `l`'s weight block within the flat parameter array.
    fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| self.widths[k] * self.widths[k + 1] + self.widths[k + 1])
            .sum()
    }

    /// Layout with one weights slice and one biases slice per layer.
    pub fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        for l in 0..self.num_layers() {
            layout.push(format!("w{l}"), self.widths[l] * self.widths[l + 1]);
            layout.push(format!("b{l}"), self.widths[l + 1]);
        }
        layout
    }

    /// Uniform init scaled by 1/sqrt(fan_in) for weights, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut values = vec![0.0; self.param_count()];
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let scale = 1.0 / math::sqrt(fan_in as f64);
            let off = self.layer_offset(l);
            for w in values[off..off + fan_in * fan_out].iter_mut() {
                *w = rng.uniform(-scale, scale);
            }
        }
        values
    }
}

/// One named region of a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    slices: Vec<ParamSlice>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        ParamLayout::default()
    }

    pub fn push(&mut self, name: String, len: usize) -> usize {
        let offset = self.total;
        self.slices.push(ParamSlice { name, offset, len });
        self.total += len;
        offset
    }

    /// Appends every slice of `other`, prefixing the names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamLayout) -> usize {
        let base = self.total;
        for s in &other.slices {
            self.push(format!("{prefix}{}", s.name), s.len);
        }
        base
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn find(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }
}

/// Flat parameter values plus a per-slice frozen flag.
///
/// Frozen slices are skipped entirely by the optimizer: neither the values
/// nor the moment estimates for those entries change.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layout: ParamLayout,
    values: Vec<f64>,
    frozen: Vec<bool>,
}

impl ParamSet {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(CoreError::DimensionMismatch {
                what: "parameter values",
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        let frozen = vec![false; layout.slices().len()];
        Ok(ParamSet {
            layout,
            values,
            frozen,
        })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParamSet::new(layout, values).unwrap()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Direct mutable access for initialization; does not honor frozen flags.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice_values(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .find(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let idx = self
            .layout
            .slices()
            .iter()
            .position(|s| s.name == name)
            .ok_or(CoreError::UnknownId {
                what: "parameter slice",
                id: usize::MAX,
                vocab: self.layout.slices().len(),
            })?;
        self.frozen[idx] = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    /// FNV-1a over the exact bit patterns; detects any parameter change.
    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.values)
    }
}

pub fn checksum_f64(values: &[f64]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    widths: Vec<usize>,
    input: Vec<f64>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per layer; the last entry is the output.
    post: Vec<Vec<f64>>,
}

impl ActivationCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().unwrap()
    }

    pub fn post_activation(&self, layer: usize) -> &[f64] {
        &self.post[layer]
    }

    fn matches(&self, spec: &MlpSpec) -> bool {
        self.widths == spec.widths
    }
}

/// Forward pass over a raw parameter region; caller guarantees lengths.
pub(crate) fn forward_raw(spec: &MlpSpec, params: &[f64], input: &[f64]) -> ActivationCache {
    debug_assert_eq!(params.len(), spec.param_count());
    debug_assert_eq!(input.len(), spec.input_dim());
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut post = Vec::with_capacity(spec.num_layers());
    let mut a: &[f64] = input;
    for l in 0..spec.num_layers() {
        let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
        let off = spec.layer_offset(l);
        let weights = &params[off..off + n_in * n_out];
        let biases = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut z = vec![0.0; n_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &weights[o * n_in..(o + 1) * n_in];
            *zo = biases[o] + math::dot(row, a);
        }
        let act = spec.activations[l];
        let y: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
        pre.push(z);
        post.push(y);
        a = post.last().unwrap();
    }
    ActivationCache {
        widths: spec.widths.clone(),
        input: input.to_vec(),
        pre,
        post,
    }
}

/// Like [`forward_raw`], but adds `extra[l]` to layer `l`'s post-activation
/// features before they feed the next layer. Used by the conditioning
/// adapter, which injects its per-block features into the base network's
/// hidden features. Entries of `extra` may be empty to skip a layer.
pub(crate) fn forward_raw_with_injection(
    spec: &MlpSpec,
    params: &[f64],
    input: &[f64],
    extra: &[Vec<f64>],
) -> ActivationCache {
    debug_assert_eq!(extra.len(), spec.num_layers());
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut post = Vec::with_capacity(spec.num_layers());
    let mut a: &[f64] = input;
    for l in 0..spec.num_layers() {
        let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
        let off = spec.layer_offset(l);
        let weights = &params[off..off + n_in * n_out];
        let biases = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut z = vec![0.0; n_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &weights[o * n_in..(o + 1) * n_in];
            *zo = biases[o] + math::dot(row, a);
        }
        let act = spec.activations[l];
        let mut y: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
        if !extra[l].is_empty() {
            debug_assert_eq!(extra[l].len(), n_out);
            for (yo, e) in y.iter_mut().zip(&extra[l]) {
                *yo += e;
            }
        }
        pre.push(z);
        post.push(y);
        a = post.last().unwrap();
    }
    ActivationCache {
        widths: spec.widths.clone(),
        input: input.to_vec(),
        pre,
        post,
    }
}

/// General reverse pass over a raw parameter region.
///
/// `out_grad` is dL/d(output). `extra_post_grads`, when nonempty, adds an
/// external gradient at each layer's post-activation (a layer whose features
/// were consumed elsewhere, as in the adapter branch). Parameter gradients
/// accumulate (`+=`) into `param_grads` when given. `post_grads_out`, when
/// given, captures the total gradient arriving at each layer's
/// post-activation, which is exactly what an additive injection into that
/// layer sees. Returns the input gradient.
pub(crate) fn backward_raw(
    spec: &MlpSpec,
    params: &[f64],
    cache: &ActivationCache,
    out_grad: &[f64],
    extra_post_grads: &[Vec<f64>],
    mut param_grads: Option<&mut [f64]>,
    mut post_grads_out: Option<&mut Vec<Vec<f64>>>,
) -> Vec<f64> {
    debug_assert_eq!(out_grad.len(), spec.output_dim());
    let n_layers = spec.num_layers();
    if let Some(pg) = post_grads_out.as_deref_mut() {
        pg.clear();
        pg.resize(n_layers, Vec::new());
    }
    let mut grad: Vec<f64> = out_grad.to_vec();
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
        let off = spec.layer_offset(l);
        let act = spec.activations[l];
        if !extra_post_grads.is_empty() && !extra_post_grads[l].is_empty() {
            debug_assert_eq!(extra_post_grads[l].len(), n_out);
            for (g, e) in grad.iter_mut().zip(&extra_post_grads[l]) {
                *g += e;
            }
        }
        if let Some(pg) = post_grads_out.as_deref_mut() {
            pg[l] = grad.clone();
        }
        let z = &cache.pre[l];
        let dz: Vec<f64> = grad
            .iter()
            .zip(z)
            .map(|(&g, &zv)| g * act.derivative(zv))
            .collect();
        if let Some(pgr) = param_grads.as_deref_mut() {
            debug_assert_eq!(pgr.len(), spec.param_count());
            let a_prev: &[f64] = if l == 0 {
                &cache.input
            } else {
                &cache.post[l - 1]
            };
            let (w_grads, b_grads) =
                pgr[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = dz[o];
                b_grads[o] += d;
                let row = &mut w_grads[o * n_in..(o + 1) * n_in];
                for (wg, &ap) in row.iter_mut().zip(a_prev) {
                    *wg += d * ap;
                }
            }
        }
        let weights = &params[off..off + n_in * n_out];
        let mut din = vec![0.0; n_in];
        for o in 0..n_out {
            let d = dz[o];
            let row = &weights[o * n_in..(o + 1) * n_in];
            for (di, &w) in din.iter_mut().zip(row) {
                *di += d * w;
            }
        }
        grad = din;
    }
    grad
}

/// One deterministic forward pass. Returns the output and a cache that is
/// sufficient for an exact backward pass.
pub fn mlp_forward(
    spec: &MlpSpec,
    params: &ParamSet,
    input: &[f64],
) -> Result<(Vec<f64>, ActivationCache)> {
    if params.len() != spec.param_count() {
        return Err(CoreError::DimensionMismatch {
            what: "mlp parameters",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    if input.len() != spec.input_dim() {
        return Err(CoreError::DimensionMismatch {
            what: "mlp input",
            expected: spec.input_dim(),
            got: input.len(),
        });
    }
    let cache = forward_raw(spec, params.values(), input);
    Ok((cache.output().to_vec(), cache))
}

/// Exact gradients of the forward map. The cache must come from a forward
/// call with this spec and these parameter values.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamSet,
    cache: &ActivationCache,
    out_grad: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if params.len() != spec.param_count() {
        return Err(CoreError::DimensionMismatch {
            what: "mlp parameters",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    if !cache.matches(spec) {
        return Err(CoreError::CacheMismatch {
            detail: "cache layer widths differ from spec",
        });
    }
    if out_grad.len() != spec.output_dim() {
        return Err(CoreError::DimensionMismatch {
            what: "output gradient",
            expected: spec.output_dim(),
            got: out_grad.len(),
        });
    }
    let mut param_grads = vec![0.0; spec.param_count()];
    let input_grad = backward_raw(
        spec,
        params.values(),
        cache,
        out_grad,
        &[],
        Some(&mut param_grads),
        None,
    );
    Ok((input_grad, param_grads))
}

/// Max relative error between analytic parameter gradients and central
/// finite differences of the scalar loss `sum(outputs)`.
pub fn grad_check(spec: &MlpSpec, params: &ParamSet, input: &[f64], eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(CoreError::OutOfRange {
            what: "finite-difference step",
            value: eps,
        });
    }
    let (_, cache) = mlp_forward(spec, params, input)?;
    let ones = vec![1.0; spec.output_dim()];
    let (_, analytic) = mlp_backward(spec, params, &cache, &ones)?;
    Ok(max_rel_error_vs_fd(spec, params, input, eps, &analytic))
}

/// Compares an analytic gradient vector against central finite differences
/// of `sum(outputs)` over every parameter.
pub fn max_rel_error_vs_fd(
    spec: &MlpSpec,
    params: &ParamSet,
    input: &[f64],
    eps: f64,
    analytic: &[f64],
) -> f64 {
    let mut scratch = params.values().to_vec();
    let loss = |vals: &[f64]| -> f64 {
        let cache = forward_raw(spec, vals, input);
        cache.output().iter().sum()
    };
    let mut worst: f64 = 0.0;
    for i in 0..scratch.len() {
        let orig = scratch[i];
        scratch[i] = orig + eps;
        let up = loss(&scratch);
        scratch[i] = orig - eps;
        let down = loss(&scratch);
        scratch[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = math::fabs(analytic[i]).max(math::fabs(numeric)).max(1e-6);
        let rel = math::fabs(analytic[i] - numeric) / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
