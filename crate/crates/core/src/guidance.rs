//! Inference-time guidance and the Euler flow sampler.
//!
//! Every mode is an affine combination of model forwards differing in the
//! text condition and in how the cross-modal branch is composed:
//!
//! * two-pass context guidance: the unconditional branch routes cross
//!   attention to the context banks only, the same code path single-modality
//!   training uses, one conditional and one unconditional forward;
//! * three-pass context guidance: decouples the text scale from the
//!   cross-modal scale with a third forward;
//! * plain multi-modal CFG: like three-pass, but the unconditional branch
//!   drops the cross-modal term outright instead of the bank substitute;
//! * static-reference baseline: the unconditional cross-modal branch feeds a
//!   frame-0-repeated video or silent audio as a clean reference stream,
//!   which costs one forward more than two-pass guidance.
//!
//! Combinations are computed as weighted sums with zero-weight terms dropped
//! and unit weights passed through, so the documented reductions (for
//! instance a cross scale of 1 collapsing two-pass guidance to the plain
//! conditional path) hold bit-exactly end to end.

use rand::Rng;

use crate::dcr::RoutingPlan;
use crate::error::{Error, Result};
use crate::model::{DualStreamModel, ForwardInputs, TextCond};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    Ucg2,
    Ucg3,
    MmCfg,
    SyncCfgStatic,
    TextOnly,
}

impl GuidanceMode {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::Ucg2 => "ucg2",
            GuidanceMode::Ucg3 => "ucg3",
            GuidanceMode::MmCfg => "mmcfg",
            GuidanceMode::SyncCfgStatic => "synccfg",
            GuidanceMode::TextOnly => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ucg2" => Ok(GuidanceMode::Ucg2),
            "ucg3" => Ok(GuidanceMode::Ucg3),
            "mmcfg" => Ok(GuidanceMode::MmCfg),
            "synccfg" => Ok(GuidanceMode::SyncCfgStatic),
            "none" | "text-only" => Ok(GuidanceMode::TextOnly),
            other => Err(Error::Config(format!("unknown guidance mode {other:?}"))),
        }
    }

    /// Dual-stream forwards per sampler step.
    pub fn forwards_per_step(&self) -> usize {
        match self {
            GuidanceMode::Ucg2 => 2,
            GuidanceMode::Ucg3 | GuidanceMode::MmCfg | GuidanceMode::SyncCfgStatic => 3,
            GuidanceMode::TextOnly => 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub s_text: f64,
    pub s_m: f64,
    pub steps: usize,
    /// Optional audio-stream overrides; the audio stream often wants a
    /// gentler cross-modal push than the video stream.
    pub s_text_audio: Option<f64>,
    pub s_m_audio: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::Ucg2,
            s_text: 4.0,
            s_m: 2.0,
            steps: 50,
            s_text_audio: None,
            s_m_audio: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("sampler needs at least one step"));
        }
        for s in [Some(self.s_text), Some(self.s_m), self.s_text_audio, self.s_m_audio]
            .into_iter()
            .flatten()
        {
            if !s.is_finite() {
                return Err(Error::contract("guidance scales must be finite"));
            }
        }
        Ok(())
    }

    fn scales(&self) -> StreamScales {
        StreamScales {
            s_text_audio: self.s_text_audio.unwrap_or(self.s_text),
            s_m_audio: self.s_m_audio.unwrap_or(self.s_m),
            s_text_video: self.s_text,
            s_m_video: self.s_m,
        }
    }
}

struct StreamScales {
    s_text_audio: f64,
    s_m_audio: f64,
    s_text_video: f64,
    s_m_video: f64,
}

/// How one forward composes its cross-modal branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CrossBranch {
    /// Cross latents plus banks: the conditional composition.
    Joint,
    /// Banks only: the trained unconditional composition.
    LctOnly,
    /// No cross-modal term at all: modality drop.
    Drop,
    /// Replace the audio input with silence fed as a clean reference; only
    /// the video output of this forward is meaningful.
    SilentAudioRef,
    /// Replace the video input with its first frame repeated; only the
    /// audio output is meaningful.
    StaticVideoRef,
}

/// Anything that can evaluate joint velocities: the real model, or closed
/// form mocks in tests.
pub trait VelocityModel<S: Scalar> {
    fn velocities(
        &self,
        x_audio: &Tensor<S>,
        x_video: &Tensor<S>,
        t: S,
        class_ids: &[usize],
        text: TextCond,
        branch: CrossBranch,
    ) -> Result<(Tensor<S>, Tensor<S>)>;
}

/// A velocity pair plus the number of forwards spent producing it.
pub struct GuidedVelocities<S: Scalar> {
    pub audio: Tensor<S>,
    pub video: Tensor<S>,
    pub forwards: usize,
}

/// All t_v frames equal frame 0, bit-exact.
pub fn static_video<S: Scalar>(x_video: &Tensor<S>) -> Result<Tensor<S>> {
    if x_video.rank() < 2 {
        return Err(Error::shape(
            "static_video",
            format!("need [b, t_v, ..], got {}", fmt_shape(x_video.shape())),
        ));
    }
    let b = x_video.shape()[0];
    let t_v = x_video.shape()[1];
    let per_frame = x_video.numel() / (b * t_v);
    let mut data = Vec::with_capacity(x_video.numel());
    for bi in 0..b {
        let frame0 = &x_video.data()[bi * t_v * per_frame..bi * t_v * per_frame + per_frame];
        for _ in 0..t_v {
            data.extend_from_slice(frame0);
        }
    }
    Tensor::new(x_video.shape().to_vec(), data)
}

/// Zero latent standing in for silent audio.
pub fn silent_audio<S: Scalar>(x_audio: &Tensor<S>) -> Tensor<S> {
    Tensor::zeros(x_audio.shape().to_vec())
}

impl<S: Scalar> VelocityModel<S> for DualStreamModel<S> {
    fn velocities(
        &self,
        x_audio: &Tensor<S>,
        x_video: &Tensor<S>,
        t: S,
        class_ids: &[usize],
        text: TextCond,
        branch: CrossBranch,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let b = class_ids.len();
        let t_vec = vec![t; b];
        let zeros = vec![S::zero(); b];
        let (plan, xa, xv, ta, tv): (RoutingPlan, Tensor<S>, Tensor<S>, &[S], &[S]) = match branch
        {
            CrossBranch::Joint => (
                RoutingPlan::joint_inference(),
                x_audio.clone(),
                x_video.clone(),
                &t_vec,
                &t_vec,
            ),
            CrossBranch::LctOnly => (
                RoutingPlan::lct_only_inference(),
                x_audio.clone(),
                x_video.clone(),
                &t_vec,
                &t_vec,
            ),
            CrossBranch::Drop => (
                RoutingPlan::drop_cross_inference(),
                x_audio.clone(),
                x_video.clone(),
                &t_vec,
                &t_vec,
            ),
            CrossBranch::SilentAudioRef => (
                RoutingPlan::audio_reference_inference(),
                silent_audio(x_audio),
                x_video.clone(),
                &zeros,
                &t_vec,
            ),
            CrossBranch::StaticVideoRef => (
                RoutingPlan::video_reference_inference(),
                x_audio.clone(),
                static_video(x_video)?,
                &t_vec,
                &zeros,
            ),
        };
        let (va, vv, _) = self.forward_tensors(&ForwardInputs {
            x_audio: Some(&xa),
            x_video: Some(&xv),
            t_audio: Some(ta),
            t_video: Some(tv),
            class_ids,
            text,
            plan: &plan,
            capture_attn: false,
        })?;
        Ok((
            va.ok_or_else(|| Error::contract("guidance forward produced no audio velocity"))?,
            vv.ok_or_else(|| Error::contract("guidance forward produced no video velocity"))?,
        ))
    }
}

/// Weighted sum with zero weights dropped and a lone unit weight passed
/// through untouched, so algebraic reductions are bit-exact.
fn weighted_sum<S: Scalar>(terms: &[(f64, &Tensor<S>)]) -> Result<Tensor<S>> {
    let live: Vec<_> = terms.iter().filter(|(w, _)| *w != 0.0).collect();
    match live.as_slice() {
        [] => Ok(Tensor::zeros(terms[0].1.shape().to_vec())),
        [(w, t)] if *w == 1.0 => Ok((*t).clone()),
        _ => {
            let shape = live[0].1.shape().to_vec();
            let mut acc = vec![S::zero(); live[0].1.numel()];
            for (w, t) in live {
                let ws = S::from_f64(*w);
                for (a, &v) in acc.iter_mut().zip(t.data().iter()) {
                    *a = *a + ws * v;
                }
            }
            Tensor::new(shape, acc)
        }
    }
}

pub struct GuidanceInput<'a, S: Scalar> {
    pub x_audio: &'a Tensor<S>,
    pub x_video: &'a Tensor<S>,
    pub t: S,
    pub class_ids: &'a [usize],
}

/// Two-pass context guidance: `v = u + s_m (c - u)` where the unconditional
/// branch routes cross attention to the banks.
pub fn ucg_two_pass<S: Scalar>(
    model: &dyn VelocityModel<S>,
    input: &GuidanceInput<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<GuidedVelocities<S>> {
    let sc = cfg.scales();
    let (ua, uv) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Null,
        CrossBranch::LctOnly,
    )?;
    let (ca, cv) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Class,
        CrossBranch::Joint,
    )?;
    Ok(GuidedVelocities {
        audio: weighted_sum(&[(1.0 - sc.s_m_audio, &ua), (sc.s_m_audio, &ca)])?,
        video: weighted_sum(&[(1.0 - sc.s_m_video, &uv), (sc.s_m_video, &cv)])?,
        forwards: 2,
    })
}

/// Three-pass context guidance decoupling the text and cross-modal scales:
/// `v = u + s_text (c - u) + s_m (m - u)` with bank-routed unconditionals.
pub fn ucg_three_pass<S: Scalar>(
    model: &dyn VelocityModel<S>,
    input: &GuidanceInput<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<GuidedVelocities<S>> {
    three_branch(model, input, cfg, CrossBranch::LctOnly)
}

/// Plain multi-modal CFG: identical structure, but the unconditional branch
/// drops the cross-modal term instead of substituting the banks.
pub fn mm_cfg_baseline<S: Scalar>(
    model: &dyn VelocityModel<S>,
    input: &GuidanceInput<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<GuidedVelocities<S>> {
    three_branch(model, input, cfg, CrossBranch::Drop)
}

fn three_branch<S: Scalar>(
    model: &dyn VelocityModel<S>,
    input: &GuidanceInput<'_, S>,
    cfg: &GuidanceConfig,
    uncond: CrossBranch,
) -> Result<GuidedVelocities<S>> {
    let sc = cfg.scales();
    let (ua, uv) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Null,
        uncond,
    )?;
    let (ta, tv) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Class,
        uncond,
    )?;
    let (ma, mv) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Null,
        CrossBranch::Joint,
    )?;
    let combine = |u: &Tensor<S>, c: &Tensor<S>, m: &Tensor<S>, s_text: f64, s_m: f64| {
        weighted_sum(&[(1.0 - s_text - s_m, u), (s_text, c), (s_m, m)])
    };
    Ok(GuidedVelocities {
        audio: combine(&ua, &ta, &ma, sc.s_text_audio, sc.s_m_audio)?,
        video: combine(&uv, &tv, &mv, sc.s_text_video, sc.s_m_video)?,
        forwards: 3,
    })
}

/// Static-unconditional baseline: the unconditional branch replaces the
/// opposing modality with silence (for the video stream) or a frozen first
/// frame (for the audio stream), each fed as a clean reference. One forward
/// more than two-pass guidance.
pub fn synccfg_static_baseline<S: Scalar>(
    model: &dyn VelocityModel<S>,
    input: &GuidanceInput<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<GuidedVelocities<S>> {
    let sc = cfg.scales();
    let (ca, cv) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Class,
        CrossBranch::Joint,
    )?;
    let (_, uv) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Null,
        CrossBranch::SilentAudioRef,
    )?;
    let (ua, _) = model.velocities(
        input.x_audio,
        input.x_video,
        input.t,
        input.class_ids,
        TextCond::Null,
        CrossBranch::StaticVideoRef,
    )?;
    Ok(GuidedVelocities {
        audio: weighted_sum(&[(1.0 - sc.s_m_audio, &ua), (sc.s_m_audio, &ca)])?,
        video: weighted_sum(&[(1.0 - sc.s_m_video, &uv), (sc.s_m_video, &cv)])?,
        forwards: 3,
    })
}

/// One guided velocity evaluation in the configured mode.
pub fn guided_velocities<S: Scalar>(
    model: &dyn VelocityModel<S>,
    input: &GuidanceInput<'_, S>,
    cfg: &GuidanceConfig,
) -> Result<GuidedVelocities<S>> {
    match cfg.mode {
        GuidanceMode::Ucg2 => ucg_two_pass(model, input, cfg),
        GuidanceMode::Ucg3 => ucg_three_pass(model, input, cfg),
        GuidanceMode::MmCfg => mm_cfg_baseline(model, input, cfg),
        GuidanceMode::SyncCfgStatic => synccfg_static_baseline(model, input, cfg),
        GuidanceMode::TextOnly => {
            let (a, v) = model.velocities(
                input.x_audio,
                input.x_video,
                input.t,
                input.class_ids,
                TextCond::Class,
                CrossBranch::Joint,
            )?;
            Ok(GuidedVelocities { audio: a, video: v, forwards: 1 })
        }
    }
}

/// Current latents plus the descending time schedule.
pub struct SamplerState<S: Scalar> {
    pub x_audio: Tensor<S>,
    pub x_video: Tensor<S>,
    /// Strictly decreasing, from 1 to 0 inclusive.
    pub schedule: Vec<f64>,
}

impl<S: Scalar> SamplerState<S> {
    pub fn gaussian_init(
        audio_shape: Vec<usize>,
        video_shape: Vec<usize>,
        steps: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng_from(derive_seed(seed, "sample-init"));
        let mut gauss = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| S::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal)))
                .collect();
            Tensor::new(shape, data).expect("sized by construction")
        };
        let schedule = (0..=steps).map(|k| (steps - k) as f64 / steps as f64).collect();
        SamplerState { x_audio: gauss(audio_shape), x_video: gauss(video_shape), schedule }
    }
}

pub struct SampleResult<S: Scalar> {
    pub audio: Tensor<S>,
    pub video: Tensor<S>,
    pub total_forwards: usize,
}

/// Integrate the flow from Gaussian noise at t=1 down to t=0 with explicit
/// Euler steps: `x <- x - dt * v(x, t)`.
pub fn euler_sample<S: Scalar>(
    model: &dyn VelocityModel<S>,
    audio_shape: Vec<usize>,
    video_shape: Vec<usize>,
    class_ids: &[usize],
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<SampleResult<S>> {
    cfg.validate()?;
    let mut state = SamplerState::<S>::gaussian_init(audio_shape, video_shape, cfg.steps, seed);
    let mut total_forwards = 0;
    for k in 0..cfg.steps {
        let t = state.schedule[k];
        let dt = t - state.schedule[k + 1];
        let guided = guided_velocities(
            model,
            &GuidanceInput {
                x_audio: &state.x_audio,
                x_video: &state.x_video,
                t: S::from_f64(t),
                class_ids,
            },
            cfg,
        )?;
        total_forwards += guided.forwards;
        state.x_audio = state.x_audio.axpy(S::from_f64(-dt), &guided.audio)?;
        state.x_video = state.x_video.axpy(S::from_f64(-dt), &guided.video)?;
        if !state.x_audio.is_finite() || !state.x_video.is_finite() {
            return Err(Error::NonFinite { op: "euler_sample" });
        }
    }
    Ok(SampleResult { audio: state.x_audio, video: state.x_video, total_forwards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::collections::HashMap;

    /// Mock returning a fixed tensor per (text, branch) and counting calls.
    struct MockModel {
        responses: HashMap<(TextCond, CrossBranch), f64>,
        calls: RefCell<usize>,
        shape: Vec<usize>,
    }

    impl MockModel {
        fn new(responses: &[((TextCond, CrossBranch), f64)]) -> Self {
            MockModel {
                responses: responses.iter().cloned().collect(),
                calls: RefCell::new(0),
                shape: vec![1, 4],
            }
        }
    }

    impl VelocityModel<f64> for MockModel {
        fn velocities(
            &self,
            _xa: &Tensor<f64>,
            _xv: &Tensor<f64>,
            _t: f64,
            _ids: &[usize],
            text: TextCond,
            branch: CrossBranch,
        ) -> Result<(Tensor<f64>, Tensor<f64>)> {
            *self.calls.borrow_mut() += 1;
            let v = *self
                .responses
                .get(&(text, branch))
                .unwrap_or_else(|| panic!("unexpected branch {text:?}/{branch:?}"));
            Ok((
                Tensor::full(self.shape.clone(), v),
                Tensor::full(self.shape.clone(), 10.0 * v),
            ))
        }
    }

    fn input_fixtures() -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::zeros(vec![1, 4]), Tensor::zeros(vec![1, 4]))
    }

    #[test]
    fn ucg2_matches_hand_evaluated_affine() {
        // uncond A = 1, cond B = 3, s_m = 2 -> 2B - A = 5
        let mock = MockModel::new(&[
            ((TextCond::Null, CrossBranch::LctOnly), 1.0),
            ((TextCond::Class, CrossBranch::Joint), 3.0),
        ]);
        let (xa, xv) = input_fixtures();
        let cfg = GuidanceConfig { mode: GuidanceMode::Ucg2, s_m: 2.0, ..Default::default() };
        let out = ucg_two_pass(
            &mock,
            &GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] },
            &cfg,
        )
        .unwrap();
        assert!(out.audio.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
        assert!(out.video.data().iter().all(|&v| (v - 50.0).abs() < 1e-12));
        assert_eq!(out.forwards, 2);
        assert_eq!(*mock.calls.borrow(), 2);
    }

    #[test]
    fn ucg2_unit_scale_is_bitwise_conditional() {
        let mock = MockModel::new(&[
            ((TextCond::Null, CrossBranch::LctOnly), 0.3),
            ((TextCond::Class, CrossBranch::Joint), -0.7),
        ]);
        let (xa, xv) = input_fixtures();
        let cfg = GuidanceConfig { mode: GuidanceMode::Ucg2, s_m: 1.0, ..Default::default() };
        let out = ucg_two_pass(
            &mock,
            &GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] },
            &cfg,
        )
        .unwrap();
        assert!(out.audio.data().iter().all(|&v| v.to_bits() == (-0.7f64).to_bits()));
        // still two forwards: reductions change the combination, not the cost
        assert_eq!(*mock.calls.borrow(), 2);
    }

    #[test]
    fn ucg2_zero_scale_is_the_unconditional_branch() {
        let mock = MockModel::new(&[
            ((TextCond::Null, CrossBranch::LctOnly), 0.25),
            ((TextCond::Class, CrossBranch::Joint), 9.0),
        ]);
        let (xa, xv) = input_fixtures();
        let cfg = GuidanceConfig { mode: GuidanceMode::Ucg2, s_m: 0.0, ..Default::default() };
        let out = ucg_two_pass(
            &mock,
            &GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] },
            &cfg,
        )
        .unwrap();
        assert!(out.audio.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn ucg3_matches_hand_evaluated_affine() {
        // U=1, T=2, M=5; s_text=2, s_m=3 -> U + 2(T-U) + 3(M-U) = 15
        let mock = MockModel::new(&[
            ((TextCond::Null, CrossBranch::LctOnly), 1.0),
            ((TextCond::Class, CrossBranch::LctOnly), 2.0),
            ((TextCond::Null, CrossBranch::Joint), 5.0),
        ]);
        let (xa, xv) = input_fixtures();
        let cfg = GuidanceConfig {
            mode: GuidanceMode::Ucg3,
            s_text: 2.0,
            s_m: 3.0,
            ..Default::default()
        };
        let out = ucg_three_pass(
            &mock,
            &GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] },
            &cfg,
        )
        .unwrap();
        assert!(out.audio.data().iter().all(|&v| (v - 15.0).abs() < 1e-12));
        assert_eq!(out.forwards, 3);
        assert_eq!(*mock.calls.borrow(), 3);
    }

    #[test]
    fn ucg3_reductions_are_exact() {
        let mock = MockModel::new(&[
            ((TextCond::Null, CrossBranch::LctOnly), 0.11),
            ((TextCond::Class, CrossBranch::LctOnly), 0.37),
            ((TextCond::Null, CrossBranch::Joint), 0.53),
        ]);
        let (xa, xv) = input_fixtures();
        let input = GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] };
        // s_text = 1, s_m = 0: exactly the text-conditional bank branch
        let cfg = GuidanceConfig {
            mode: GuidanceMode::Ucg3,
            s_text: 1.0,
            s_m: 0.0,
            ..Default::default()
        };
        let out = ucg_three_pass(&mock, &input, &cfg).unwrap();
        assert!(out.audio.data().iter().all(|&v| v.to_bits() == 0.37f64.to_bits()));
        // s_text = 0, s_m = 1: exactly the cross-conditional branch
        let cfg = GuidanceConfig {
            mode: GuidanceMode::Ucg3,
            s_text: 0.0,
            s_m: 1.0,
            ..Default::default()
        };
        let out = ucg_three_pass(&mock, &input, &cfg).unwrap();
        assert!(out.audio.data().iter().all(|&v| v.to_bits() == 0.53f64.to_bits()));
    }

    #[test]
    fn mmcfg_uses_the_drop_branch() {
        let mock = MockModel::new(&[
            ((TextCond::Null, CrossBranch::Drop), 1.0),
            ((TextCond::Class, CrossBranch::Drop), 2.0),
            ((TextCond::Null, CrossBranch::Joint), 5.0),
        ]);
        let (xa, xv) = input_fixtures();
        let cfg = GuidanceConfig {
            mode: GuidanceMode::MmCfg,
            s_text: 2.0,
            s_m: 3.0,
            ..Default::default()
        };
        let out = mm_cfg_baseline(
            &mock,
            &GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] },
            &cfg,
        )
        .unwrap();
        assert!(out.audio.data().iter().all(|&v| (v - 15.0).abs() < 1e-12));
        assert_eq!(out.forwards, 3);
    }

    #[test]
    fn mmcfg_equals_ucg3_when_the_unconditionals_coincide() {
        let same = [
            ((TextCond::Null, CrossBranch::Drop), 0.4),
            ((TextCond::Class, CrossBranch::Drop), 1.3),
            ((TextCond::Null, CrossBranch::LctOnly), 0.4),
            ((TextCond::Class, CrossBranch::LctOnly), 1.3),
            ((TextCond::Null, CrossBranch::Joint), 2.2),
        ];
        let (xa, xv) = input_fixtures();
        let input = GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] };
        let cfg = GuidanceConfig {
            mode: GuidanceMode::Ucg3,
            s_text: 1.7,
            s_m: 0.9,
            ..Default::default()
        };
        let a = ucg_three_pass(&MockModel::new(&same), &input, &cfg).unwrap();
        let b = mm_cfg_baseline(&MockModel::new(&same), &input, &cfg).unwrap();
        assert_eq!(a.audio.data(), b.audio.data());
        assert_eq!(a.video.data(), b.video.data());
    }

    #[test]
    fn synccfg_counts_one_extra_forward_over_ucg2() {
        let mock = MockModel::new(&[
            ((TextCond::Class, CrossBranch::Joint), 1.0),
            ((TextCond::Null, CrossBranch::SilentAudioRef), 0.5),
            ((TextCond::Null, CrossBranch::StaticVideoRef), 0.25),
        ]);
        let (xa, xv) = input_fixtures();
        let cfg = GuidanceConfig { mode: GuidanceMode::SyncCfgStatic, s_m: 2.0, ..Default::default() };
        let out = synccfg_static_baseline(
            &mock,
            &GuidanceInput { x_audio: &xa, x_video: &xv, t: 0.5, class_ids: &[0] },
            &cfg,
        )
        .unwrap();
        assert_eq!(out.forwards, GuidanceMode::Ucg2.forwards_per_step() + 1);
        assert_eq!(*mock.calls.borrow(), 3);
        // audio mixes against the static-video unconditional:
        // (1-2)*0.25 + 2*1 = 1.75
        assert!(out.audio.data().iter().all(|&v| (v - 1.75).abs() < 1e-12));
        // video against the silent-audio unconditional: (1-2)*5 + 2*10 = 15
        assert!(out.video.data().iter().all(|&v| (v - 15.0).abs() < 1e-12));
    }

    #[test]
    fn static_video_repeats_frame_zero_bit_exactly() {
        let x = Tensor::new(vec![1, 3, 2], vec![1.0f64, -2.0, 9.0, 9.0, 8.0, 8.0]).unwrap();
        let s = static_video(&x).unwrap();
        assert_eq!(s.data(), &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let silent = silent_audio(&x);
        assert!(silent.data().iter().all(|&v| v == 0.0));
    }

    /// Constant-velocity mock for sampler telescoping.
    struct ConstModel(f64);

    impl VelocityModel<f64> for ConstModel {
        fn velocities(
            &self,
            xa: &Tensor<f64>,
            xv: &Tensor<f64>,
            _t: f64,
            _ids: &[usize],
            _text: TextCond,
            _branch: CrossBranch,
        ) -> Result<(Tensor<f64>, Tensor<f64>)> {
            Ok((
                Tensor::full(xa.shape().to_vec(), self.0),
                Tensor::full(xv.shape().to_vec(), self.0),
            ))
        }
    }

    #[test]
    fn euler_telescopes_under_constant_velocity() {
        let cfg = GuidanceConfig {
            mode: GuidanceMode::TextOnly,
            steps: 4,
            ..Default::default()
        };
        let model = ConstModel(2.5);
        let out = euler_sample(&model, vec![1, 4], vec![1, 4], &[0], &cfg, 9).unwrap();
        let init = SamplerState::<f64>::gaussian_init(vec![1, 4], vec![1, 4], 4, 9);
        for (x, x0) in out.audio.data().iter().zip(init.x_audio.data().iter()) {
            assert!((x - (x0 - 2.5)).abs() < 1e-12);
        }
        assert_eq!(out.total_forwards, 4);
    }

    #[test]
    fn single_step_is_one_full_euler_step() {
        let cfg = GuidanceConfig { mode: GuidanceMode::TextOnly, steps: 1, ..Default::default() };
        let model = ConstModel(-1.0);
        let out = euler_sample(&model, vec![2], vec![2], &[0], &cfg, 3).unwrap();
        let init = SamplerState::<f64>::gaussian_init(vec![2], vec![2], 1, 3);
        for (x, x0) in out.video.data().iter().zip(init.x_video.data().iter()) {
            assert_eq!(*x, x0 + 1.0);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let cfg = GuidanceConfig { mode: GuidanceMode::TextOnly, steps: 8, ..Default::default() };
        let model = ConstModel(0.5);
        let a = euler_sample(&model, vec![3], vec![3], &[1], &cfg, 77).unwrap();
        let b = euler_sample(&model, vec![3], vec![3], &[1], &cfg, 77).unwrap();
        assert!(a
            .audio
            .data()
            .iter()
            .zip(b.audio.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn schedule_is_strictly_decreasing_with_unit_endpoints() {
        let st = SamplerState::<f64>::gaussian_init(vec![1], vec![1], 7, 0);
        assert_eq!(st.schedule.first(), Some(&1.0));
        assert_eq!(st.schedule.last(), Some(&0.0));
        assert!(st.schedule.windows(2).all(|w| w[0] > w[1]));
    }
}
