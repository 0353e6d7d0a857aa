//! Probability-flow ODE integration, track generation, and the step-by-step
//! multi-track protocol with composite mixing and loudness normalization.

use alloc::vec::Vec;

use crate::cond::{AudioCondition, ConceptId, SceneId};
use crate::error::{CoreError, Result};
use crate::guidance::{
    guide_cfg, guide_nag, guide_nag_full, guide_neg_prompt, guide_two_cond, GuidanceSpec,
    VelocityOracle,
};
use crate::math;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeScheme {
    Euler,
    /// Classical two-stage second-order midpoint rule.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OdeConfig {
    pub num_steps: usize,
    pub scheme: OdeScheme,
}

impl OdeConfig {
    pub fn new(num_steps: usize, scheme: OdeScheme) -> Result<Self> {
        if num_steps == 0 {
            return Err(CoreError::InvalidSpec("ode needs at least one step".into()));
        }
        Ok(OdeConfig { num_steps, scheme })
    }

    pub fn euler(num_steps: usize) -> Result<Self> {
        OdeConfig::new(num_steps, OdeScheme::Euler)
    }
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            num_steps: 64,
            scheme: OdeScheme::Euler,
        }
    }
}

/// One generated latent with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub latent: Vec<f64>,
    pub concept: ConceptId,
    /// 1-based position in the generation order.
    pub step_index: usize,
    pub guidance: GuidanceSpec,
}

/// Loudness-normalized sum of tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub latent: Vec<f64>,
    /// `step_index` values of the mixed tracks.
    pub source_tracks: Vec<usize>,
    pub measured_loudness_db: f64,
}

/// Fixed-step explicit integration of dx/dt = u(x, t) from t=0 to t=1.
pub fn integrate<F>(mut u_fn: F, x0: &[f64], cfg: &OdeConfig) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let n = cfg.num_steps;
    let dt = 1.0 / n as f64;
    let mut x = x0.to_vec();
    for step in 0..n {
        let t = step as f64 / n as f64;
        match cfg.scheme {
            OdeScheme::Euler => {
                let u = u_fn(&x, t)?;
                ensure_dim(&u, x.len(), "velocity")?;
                for (xi, ui) in x.iter_mut().zip(&u) {
                    *xi += dt * ui;
                }
            }
            OdeScheme::Midpoint => {
                let k1 = u_fn(&x, t)?;
                ensure_dim(&k1, x.len(), "velocity")?;
                let mut xm = x.clone();
                for (mi, ki) in xm.iter_mut().zip(&k1) {
                    *mi += 0.5 * dt * ki;
                }
                let k2 = u_fn(&xm, t + 0.5 * dt)?;
                ensure_dim(&k2, x.len(), "velocity")?;
                for (xi, ki) in x.iter_mut().zip(&k2) {
                    *xi += dt * ki;
                }
            }
        }
        if !math::all_finite(&x) {
            return Err(CoreError::Diverged {
                what: "ode state",
                step,
            });
        }
    }
    Ok(x)
}

fn ensure_dim(v: &[f64], want: usize, what: &'static str) -> Result<()> {
    if v.len() != want {
        return Err(CoreError::DimensionMismatch {
            what,
            expected: want,
            got: v.len(),
        });
    }
    Ok(())
}

/// 20 log10(rms); an all-zero or empty signal has no defined loudness.
pub fn measure_loudness(signal: &[f64]) -> Result<f64> {
    if signal.is_empty() {
        return Err(CoreError::EmptyInput { what: "signal" });
    }
    let r = math::rms(signal);
    if r == 0.0 {
        return Err(CoreError::SilentSignal { what: "signal" });
    }
    Ok(20.0 * math::log10(r))
}

/// Uniformly rescales so the result measures exactly `target_db`.
pub fn normalize_loudness(signal: &[f64], target_db: f64) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(CoreError::EmptyInput { what: "signal" });
    }
    let r = math::rms(signal);
    if r == 0.0 {
        return Err(CoreError::SilentSignal { what: "mix" });
    }
    let target_rms = math::pow(10.0, target_db / 20.0);
    let scale = target_rms / r;
    Ok(signal.iter().map(|&v| v * scale).collect())
}

/// Elementwise sum of equal-length latents, then loudness normalization.
pub fn mix_and_normalize(latents: &[Vec<f64>], target_db: f64) -> Result<Vec<f64>> {
    let first = latents.first().ok_or(CoreError::EmptyInput { what: "tracks" })?;
    let d = first.len();
    let mut sum = alloc::vec![0.0; d];
    for latent in latents {
        ensure_dim(latent, d, "track latent")?;
        for (s, &v) in sum.iter_mut().zip(latent) {
            *s += v;
        }
    }
    normalize_loudness(&sum, target_db)
}

/// Mixes whole tracks into a [`Composite`].
pub fn composite_of(tracks: &[Track], target_db: f64) -> Result<Composite> {
    let latents: Vec<Vec<f64>> = tracks.iter().map(|t| t.latent.clone()).collect();
    let latent = mix_and_normalize(&latents, target_db)?;
    let measured = measure_loudness(&latent)?;
    Ok(Composite {
        latent,
        source_tracks: tracks.iter().map(|t| t.step_index).collect(),
        measured_loudness_db: measured,
    })
}

/// Evaluates the guided field selected by `spec` at one point.
pub fn guided_velocity<O: VelocityOracle + ?Sized>(
    oracle: &O,
    spec: &GuidanceSpec,
    x_t: &[f64],
    t: f64,
    scene: Option<SceneId>,
    text: Option<ConceptId>,
    audio: Option<&AudioCondition>,
) -> Result<Vec<f64>> {
    match spec {
        GuidanceSpec::Cfg { w1 } => guide_cfg(oracle, x_t, t, scene, text, *w1),
        GuidanceSpec::TwoCond { w1, w2 } => {
            guide_two_cond(oracle, x_t, t, scene, text, *w1, *w2)
        }
        GuidanceSpec::Nag { alpha, beta } => {
            let audio = audio.ok_or(CoreError::EmptyInput {
                what: "audio condition for negation guidance",
            })?;
            guide_nag(oracle, x_t, t, scene, text, audio, *alpha, *beta)
        }
        GuidanceSpec::NagFull { w1p, w2p, w3p } => {
            let audio = audio.ok_or(CoreError::EmptyInput {
                what: "audio condition for negation guidance",
            })?;
            guide_nag_full(oracle, x_t, t, scene, text, audio, *w1p, *w2p, *w3p)
        }
        GuidanceSpec::NegPrompt {
            w1,
            negative_concepts,
        } => guide_neg_prompt(oracle, x_t, t, scene, text, negative_concepts, *w1),
    }
}

/// Draws x0 from the standard normal and integrates the guided field.
pub fn generate_track<O: VelocityOracle + ?Sized>(
    oracle: &O,
    scene: Option<SceneId>,
    concept: ConceptId,
    guidance: &GuidanceSpec,
    audio: Option<&AudioCondition>,
    ode: &OdeConfig,
    rng: &mut Rng,
    step_index: usize,
) -> Result<Track> {
    guidance.validate()?;
    let x0 = rng.normal_vec(oracle.data_dim());
    let latent = integrate(
        |x, t| guided_velocity(oracle, guidance, x, t, scene, Some(concept), audio),
        &x0,
        ode,
    )?;
    Ok(Track {
        latent,
        concept,
        step_index,
        guidance: guidance.clone(),
    })
}

/// The step-by-step protocol: track 1 by classifier-free guidance, every
/// later track by negation guidance conditioned on the running composite of
/// all previous tracks. Per-track noise comes from `rng.derive(k)`, so runs
/// with different guidance settings stay paired sample for sample.
///
/// With `beta == 0` the negation term vanishes and each track degenerates
/// to an independent CFG generation, so no intermediate composite (and no
/// adapter) is needed.
pub fn step_by_step<O: VelocityOracle + ?Sized>(
    oracle: &O,
    scene: Option<SceneId>,
    concepts: &[ConceptId],
    alpha: f64,
    beta: f64,
    ode: &OdeConfig,
    rng: &Rng,
    target_loudness_db: f64,
) -> Result<(Vec<Track>, Composite)> {
    if concepts.is_empty() {
        return Err(CoreError::EmptyInput { what: "concept list" });
    }
    let cfg_spec = GuidanceSpec::Cfg { w1: alpha };
    let mut tracks: Vec<Track> = Vec::with_capacity(concepts.len());
    for (i, &concept) in concepts.iter().enumerate() {
        let k = i + 1;
        let mut track_rng = rng.derive(k as u64);
        let track = if k == 1 || beta == 0.0 {
            generate_track(
                oracle,
                scene,
                concept,
                &cfg_spec,
                None,
                ode,
                &mut track_rng,
                k,
            )?
        } else {
            let prior: Vec<Vec<f64>> = tracks.iter().map(|t| t.latent.clone()).collect();
            let running = mix_and_normalize(&prior, target_loudness_db)?;
            let audio = AudioCondition::negation(running);
            generate_track(
                oracle,
                scene,
                concept,
                &GuidanceSpec::Nag { alpha, beta },
                Some(&audio),
                ode,
                &mut track_rng,
                k,
            )?
        };
        tracks.push(track);
    }
    let composite = composite_of(&tracks, target_loudness_db)?;
    Ok((tracks, composite))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::TextCond;
    use alloc::vec;
    use core::cell::Cell;

    #[test]
    fn constant_field_is_exact_for_both_schemes() {
        let c = [0.3, -1.2];
        for scheme in [OdeScheme::Euler, OdeScheme::Midpoint] {
            for steps in [1, 2, 7, 64] {
                let cfg = OdeConfig::new(steps, scheme).unwrap();
                let out = integrate(|_, _| Ok(c.to_vec()), &[1.0, 2.0], &cfg).unwrap();
                assert!((out[0] - 1.3).abs() < 1e-12);
                assert!((out[1] - 0.8).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_path_field_recovers_target() {
        // u = x1 - x0 for a known pair is constant in x, so Euler is exact.
        let x0 = [0.5, -0.5];
        let x1 = [2.0, 3.0];
        let u: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let cfg = OdeConfig::euler(16).unwrap();
        let out = integrate(|_, _| Ok(u.clone()), &x0, &cfg).unwrap();
        for (o, want) in out.iter().zip(&x1) {
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_growth_euler_steps() {
        // x' = x from x0 = 1: 1 Euler step -> 2; 2 steps -> 2.25; -> e.
        let field = |x: &[f64], _t: f64| Ok(vec![x[0]]);
        let one = integrate(field, &[1.0], &OdeConfig::euler(1).unwrap()).unwrap();
        assert!((one[0] - 2.0).abs() < 1e-15);
        let two = integrate(field, &[1.0], &OdeConfig::euler(2).unwrap()).unwrap();
        assert!((two[0] - 2.25).abs() < 1e-15);
        let many = integrate(field, &[1.0], &OdeConfig::euler(4096).unwrap()).unwrap();
        assert!((many[0] - core::f64::consts::E).abs() < 1e-3);
    }

    #[test]
    fn midpoint_beats_euler_on_exponential() {
        let field = |x: &[f64], _t: f64| Ok(vec![x[0]]);
        for steps in [2usize, 4, 8, 16, 64] {
            let e = integrate(field, &[1.0], &OdeConfig::euler(steps).unwrap()).unwrap();
            let m = integrate(
                field,
                &[1.0],
                &OdeConfig::new(steps, OdeScheme::Midpoint).unwrap(),
            )
            .unwrap();
            let err_e = (e[0] - core::f64::consts::E).abs();
            let err_m = (m[0] - core::f64::consts::E).abs();
            assert!(err_m < err_e, "steps={steps}: {err_m} !< {err_e}");
        }
    }

    #[test]
    fn divergence_reports_step_index() {
        let field = |_x: &[f64], t: f64| {
            Ok(vec![if t >= 0.5 { f64::INFINITY } else { 1.0 }])
        };
        let err = integrate(field, &[0.0], &OdeConfig::euler(4).unwrap()).unwrap_err();
        assert_eq!(
            err,
            CoreError::Diverged {
                what: "ode state",
                step: 2
            }
        );
    }

    #[test]
    fn loudness_closed_forms() {
        let v = vec![0.1; 64];
        assert!((measure_loudness(&v).unwrap() + 20.0).abs() < 1e-12);
        let mut rng = Rng::new(5);
        let sig = rng.normal_vec(256);
        let l1 = measure_loudness(&sig).unwrap();
        let scaled: Vec<f64> = sig.iter().map(|&x| 10.0 * x).collect();
        let l2 = measure_loudness(&scaled).unwrap();
        assert!((l2 - l1 - 20.0).abs() < 1e-12);
    }

    #[test]
    fn unit_rms_is_zero_db() {
        let mut rng = Rng::new(6);
        let sig = rng.normal_vec(512);
        let r = math::rms(&sig);
        let unit: Vec<f64> = sig.iter().map(|&x| x / r).collect();
        assert!(measure_loudness(&unit).unwrap().abs() < 1e-9);
    }

    #[test]
    fn silent_signal_rejected() {
        assert!(matches!(
            measure_loudness(&[0.0, 0.0]),
            Err(CoreError::SilentSignal { .. })
        ));
        assert!(matches!(
            mix_and_normalize(&[vec![1.0, -1.0], vec![-1.0, 1.0]], -20.0),
            Err(CoreError::SilentSignal { .. })
        ));
        assert!(matches!(
            mix_and_normalize(&[], -20.0),
            Err(CoreError::EmptyInput { .. })
        ));
    }

    #[test]
    fn normalization_is_idempotent_and_scale_invariant() {
        let mut rng = Rng::new(7);
        let track = rng.normal_vec(32);
        let once = mix_and_normalize(&[track.clone()], -20.0).unwrap();
        let twice = mix_and_normalize(&[once.clone()], -20.0).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        // Two identical tracks mix to a scalar multiple of one: same output.
        let doubled = mix_and_normalize(&[track.clone(), track.clone()], -20.0).unwrap();
        for (a, b) in once.iter().zip(&doubled) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((measure_loudness(&once).unwrap() + 20.0).abs() < 1e-9);
    }

    /// Deterministic analytic oracle; counts adapted-branch evaluations.
    struct CountingOracle {
        adapted_calls: Cell<usize>,
    }

    impl CountingOracle {
        fn new() -> Self {
            CountingOracle {
                adapted_calls: Cell::new(0),
            }
        }
    }

    impl VelocityOracle for CountingOracle {
        fn data_dim(&self) -> usize {
            2
        }

        fn velocity(
            &self,
            x: &[f64],
            t: f64,
            scene: Option<SceneId>,
            text: &TextCond,
        ) -> Result<Vec<f64>> {
            let bias = match (scene, text) {
                (None, TextCond::Null) => 0.0,
                (Some(_), TextCond::Null) => 0.5,
                _ => 1.0,
            };
            Ok(x.iter().map(|&xi| bias - 0.3 * xi + 0.1 * t).collect())
        }

        fn adapted(
            &self,
            x: &[f64],
            t: f64,
            _scene: Option<SceneId>,
            audio: &AudioCondition,
        ) -> Result<Vec<f64>> {
            self.adapted_calls.set(self.adapted_calls.get() + 1);
            Ok(x.iter()
                .zip(&audio.latent)
                .map(|(&xi, &ai)| 0.8 + ai - 0.3 * xi + 0.1 * t)
                .collect())
        }
    }

    #[test]
    fn same_seed_same_track() {
        let o = CountingOracle::new();
        let ode = OdeConfig::euler(8).unwrap();
        let spec = GuidanceSpec::Cfg { w1: 2.0 };
        let mut r1 = Rng::new(31);
        let mut r2 = Rng::new(31);
        let a = generate_track(&o, Some(SceneId(0)), ConceptId(0), &spec, None, &ode, &mut r1, 1)
            .unwrap();
        let b = generate_track(&o, Some(SceneId(0)), ConceptId(0), &spec, None, &ode, &mut r2, 1)
            .unwrap();
        assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn single_concept_reduces_to_cfg_track() {
        let o = CountingOracle::new();
        let ode = OdeConfig::euler(8).unwrap();
        let rng = Rng::new(9);
        let (tracks, composite) = step_by_step(
            &o,
            Some(SceneId(0)),
            &[ConceptId(0)],
            4.5,
            1.5,
            &ode,
            &rng,
            -20.0,
        )
        .unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(o.adapted_calls.get(), 0);
        let mut track_rng = rng.derive(1);
        let direct = generate_track(
            &o,
            Some(SceneId(0)),
            ConceptId(0),
            &GuidanceSpec::Cfg { w1: 4.5 },
            None,
            &ode,
            &mut track_rng,
            1,
        )
        .unwrap();
        assert_eq!(tracks[0].latent, direct.latent);
        let renorm = mix_and_normalize(&[direct.latent], -20.0).unwrap();
        assert_eq!(composite.latent, renorm);
    }

    #[test]
    fn five_concepts_use_one_cfg_and_four_nag_generations() {
        let o = CountingOracle::new();
        let ode = OdeConfig::euler(8).unwrap();
        let concepts: Vec<ConceptId> = (0..5).map(ConceptId).collect();
        let rng = Rng::new(10);
        let (tracks, _) = step_by_step(
            &o,
            Some(SceneId(0)),
            &concepts,
            4.5,
            1.5,
            &ode,
            &rng,
            -20.0,
        )
        .unwrap();
        assert_eq!(tracks.len(), 5);
        assert!(matches!(tracks[0].guidance, GuidanceSpec::Cfg { .. }));
        for track in &tracks[1..] {
            assert!(matches!(track.guidance, GuidanceSpec::Nag { .. }));
        }
        // one adapted evaluation per ODE step per negation-guided track
        assert_eq!(o.adapted_calls.get(), 4 * 8);
    }

    #[test]
    fn beta_zero_reproduces_independent_cfg_bit_exactly() {
        let o = CountingOracle::new();
        let ode = OdeConfig::euler(16).unwrap();
        let concepts: Vec<ConceptId> = (0..4).map(ConceptId).collect();
        let rng = Rng::new(77);
        let (tracks, _) = step_by_step(
            &o,
            Some(SceneId(0)),
            &concepts,
            4.5,
            0.0,
            &ode,
            &rng,
            -20.0,
        )
        .unwrap();
        assert_eq!(o.adapted_calls.get(), 0);
        for (i, &concept) in concepts.iter().enumerate() {
            let mut track_rng = rng.derive((i + 1) as u64);
            let independent = generate_track(
                &o,
                Some(SceneId(0)),
                concept,
                &GuidanceSpec::Cfg { w1: 4.5 },
                None,
                &ode,
                &mut track_rng,
                i + 1,
            )
            .unwrap();
            let bits_a: Vec<u64> = tracks[i].latent.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = independent.latent.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn nag_without_audio_condition_rejected() {
        let o = CountingOracle::new();
        let err = guided_velocity(
            &o,
            &GuidanceSpec::Nag {
                alpha: 4.5,
                beta: 1.5,
            },
            &[0.0, 0.0],
            0.5,
            Some(SceneId(0)),
            Some(ConceptId(0)),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::EmptyInput { .. }));
    }
}
