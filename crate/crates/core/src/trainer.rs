//! Flow-matching multi-task training.
//!
//! Each step samples a task, draws a data batch, noises the active streams
//! along the linear interpolation path, and regresses the velocity target
//! with a mean-squared loss gated per stream by the task's routing plan.
//! Reference streams enter clean (timestep 0) and detached; their loss
//! weight is zero, so their parameters receive exactly zero gradient.
//!
//! All per-step randomness (task, data, timesteps, noise, text dropout) is
//! keyed by `(seed, purpose, step)`, which makes runs resumable and lets the
//! benchmark pair variants on identical data and noise sequences.
//!
//! The optimizer is Adam with two learning-rate groups: the cross-modal
//! exchange parameters (projections and context banks) at `lr_cca`,
//! everything else at `lr_base`.

use rand::Rng;

use crate::dcr::{gated_routing_plan, routing_plan, RoutingPlan, TaskKind};
use crate::error::{Error, Result};
use crate::model::{DualStreamModel, ForwardInputs, ModelOutput, TextCond, Variant};
use crate::params::{ParamLeaves, ParamStore};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from};
use crate::scalar::Scalar;
use crate::synthdata::{stack_batch, AVSample, DatasetIter, DatasetSpec};
use crate::tape::{Tape, ValueId};
use crate::tensor::{fmt_shape, Tensor};

/// Sampling probabilities of the five training tasks. The combined
/// text-to-video/text-to-audio share defaults to 0.1, split evenly.
#[derive(Clone, Copy, Debug)]
pub struct TaskProbs {
    pub t2v: f64,
    pub t2a: f64,
    pub a2v: f64,
    pub v2a: f64,
    pub joint: f64,
}

impl Default for TaskProbs {
    fn default() -> Self {
        TaskProbs { t2v: 0.05, t2a: 0.05, a2v: 0.15, v2a: 0.15, joint: 0.6 }
    }
}

impl TaskProbs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.t2v, self.t2a, self.a2v, self.v2a, self.joint];
        if all.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::contract("task probabilities must be nonnegative"));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("task probabilities sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub task_probs: TaskProbs,
    /// Learning rate of the cross-modal group (exchange + banks).
    pub lr_cca: f64,
    /// Learning rate of everything else.
    pub lr_base: f64,
    pub steps: usize,
    pub batch: usize,
    /// Decay of the logged loss EMA.
    pub ema_decay: f64,
    /// Per-sample probability of replacing the class text with the null row,
    /// so the unconditional text branch is trained.
    pub text_null_prob: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn toy_default(seed: u64) -> Self {
        TrainConfig {
            task_probs: TaskProbs::default(),
            lr_cca: 1e-3,
            lr_base: 1e-4,
            steps: 1500,
            batch: 8,
            ema_decay: 0.99,
            text_null_prob: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task_probs.validate()?;
        if self.batch == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::contract("ema_decay must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.text_null_prob) {
            return Err(Error::contract("text_null_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Linear interpolation between data and noise: `x_t = (1-t) x0 + t eps`,
/// with velocity target `eps - x0` (constant along the path).
pub fn flow_interpolate<S: Scalar>(
    x0: &Tensor<S>,
    eps: &Tensor<S>,
    t: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "flow_interpolate",
            format!("{} vs {}", fmt_shape(x0.shape()), fmt_shape(eps.shape())),
        ));
    }
    if t < S::zero() || t > S::one() {
        return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
    }
    let one_minus = S::one() - t;
    let xt = Tensor::new(
        x0.shape().to_vec(),
        x0.data()
            .iter()
            .zip(eps.data().iter())
            .map(|(&a, &e)| one_minus * a + t * e)
            .collect(),
    )?;
    let v = Tensor::new(
        x0.shape().to_vec(),
        x0.data().iter().zip(eps.data().iter()).map(|(&a, &e)| e - a).collect(),
    )?;
    Ok((xt, v))
}

/// Batched interpolation with one timestep per leading-axis sample.
pub fn flow_interpolate_batch<S: Scalar>(
    x0: &Tensor<S>,
    eps: &Tensor<S>,
    t: &[S],
) -> Result<(Tensor<S>, Tensor<S>)> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&t.len()) {
        return Err(Error::shape(
            "flow_interpolate",
            format!(
                "{} vs {} with {} timesteps",
                fmt_shape(x0.shape()),
                fmt_shape(eps.shape()),
                t.len()
            ),
        ));
    }
    if t.iter().any(|v| *v < S::zero() || *v > S::one()) {
        return Err(Error::contract("flow times must lie in [0, 1]"));
    }
    let per = x0.numel() / t.len();
    let mut xt = Vec::with_capacity(x0.numel());
    let mut v = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let one_minus = S::one() - ti;
        for j in i * per..(i + 1) * per {
            let (a, e) = (x0.data()[j], eps.data()[j]);
            xt.push(one_minus * a + ti * e);
            v.push(e - a);
        }
    }
    Ok((Tensor::new(x0.shape().to_vec(), xt)?, Tensor::new(x0.shape().to_vec(), v)?))
}

/// Categorical task draw in the fixed order t2v, t2a, a2v, v2a, joint.
pub fn sample_task(probs: &TaskProbs, rng: &mut impl Rng) -> TaskKind {
    let u: f64 = rng.gen::<f64>();
    let order = [
        (TaskKind::TextToVideo, probs.t2v),
        (TaskKind::TextToAudio, probs.t2a),
        (TaskKind::AudioToVideo, probs.a2v),
        (TaskKind::VideoToAudio, probs.v2a),
        (TaskKind::JointAV, probs.joint),
    ];
    let mut acc = 0.0;
    for (task, p) in order {
        acc += p;
        if u < acc {
            return task;
        }
    }
    TaskKind::JointAV
}

/// The routing a variant uses for a task.
pub fn plan_for(variant: Variant, task: TaskKind) -> RoutingPlan {
    match variant {
        Variant::Ccl => routing_plan(task),
        Variant::Gated => gated_routing_plan(task),
    }
}

/// Per-sample timesteps for the active streams, audio drawn before video;
/// joint tasks share one draw, references are pinned at 0.
pub fn draw_timesteps<S: Scalar>(
    plan: &RoutingPlan,
    batch: usize,
    rng: &mut impl Rng,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<S> {
        (0..batch).map(|_| S::from_f64(rng.gen::<f64>())).collect()
    };
    if plan.shared_timestep && plan.audio.is_active() && plan.video.is_active() {
        let t = draw(rng);
        return (Some(t.clone()), Some(t));
    }
    let t_a = match (plan.audio.is_active(), plan.audio.is_reference) {
        (true, true) => Some(vec![S::zero(); batch]),
        (true, false) => Some(draw(rng)),
        (false, _) => None,
    };
    let t_v = match (plan.video.is_active(), plan.video.is_reference) {
        (true, true) => Some(vec![S::zero(); batch]),
        (true, false) => Some(draw(rng)),
        (false, _) => None,
    };
    (t_a, t_v)
}

/// Scalar loss plus the per-stream pieces that were actually weighted in.
pub struct LossParts {
    pub total: ValueId,
    pub audio: Option<ValueId>,
    pub video: Option<ValueId>,
}

/// Weighted per-stream mean-squared error against the velocity targets.
/// Streams with loss weight 0 contribute nothing; a weighted stream without
/// a prediction is a contract error.
pub fn multitask_loss<S: Scalar>(
    tape: &mut Tape<S>,
    outputs: &ModelOutput<S>,
    target_audio: Option<&Tensor<S>>,
    target_video: Option<&Tensor<S>>,
    plan: &RoutingPlan,
) -> Result<LossParts> {
    let mut total: Option<ValueId> = None;
    let mut parts = (None, None);

    let mut add_stream = |tape: &mut Tape<S>,
                          pred: Option<ValueId>,
                          target: Option<&Tensor<S>>,
                          weight: u8,
                          name: &str|
     -> Result<Option<ValueId>> {
        if weight == 0 {
            return Ok(None);
        }
        let pred = pred.ok_or_else(|| {
            Error::contract(format!("loss weights the {name} stream but it was not predicted"))
        })?;
        let target = target.ok_or_else(|| {
            Error::contract(format!("loss weights the {name} stream but no target was given"))
        })?;
        let tgt = tape.constant(target)?;
        let diff = tape.sub(pred, tgt)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean_all(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
        Ok(Some(mse))
    };

    parts.0 = add_stream(tape, outputs.v_audio, target_audio, plan.audio.loss_weight, "audio")?;
    parts.1 = add_stream(tape, outputs.v_video, target_video, plan.video.loss_weight, "video")?;
    let total = total.ok_or_else(|| Error::contract("no stream carries loss weight"))?;
    Ok(LossParts { total, audio: parts.0, video: parts.1 })
}

// ── optimizer ────────────────────────────────────────────────────────

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

/// Adam with two learning-rate groups, beta = (0.9, 0.95), no weight decay.
pub struct Adam<S: Scalar> {
    pub lr_cca: f64,
    pub lr_base: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    is_cca: Vec<bool>,
    moments: Vec<Option<Moments<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(model: &DualStreamModel<S>, lr_cca: f64, lr_base: f64) -> Self {
        let is_cca: Vec<bool> = model
            .store
            .ids()
            .map(|id| DualStreamModel::<S>::is_cross_modal_param(model.store.name(id)))
            .collect();
        let n = is_cca.len();
        Adam {
            lr_cca,
            lr_base,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            is_cca,
            moments: (0..n).map(|_| None).collect(),
        }
    }

    /// Which parameters sit in the high-rate cross-modal group.
    pub fn cca_group(&self) -> &[bool] {
        &self.is_cca
    }

    /// Apply one update from the gradients of the last backward pass.
    /// Parameters that received no gradient this step are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        tape: &Tape<S>,
        leaves: &ParamLeaves,
    ) -> Result<()> {
        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let Some(leaf) = leaves.registered(id) else { continue };
            let Some(grad) = tape.grad(leaf) else { continue };
            let lr = if self.is_cca[idx] { self.lr_cca } else { self.lr_base };
            let slot = &mut self.moments[idx];
            if slot.is_none() {
                let n = store.get(id).numel();
                *slot = Some(Moments { m: vec![S::zero(); n], v: vec![S::zero(); n], t: 0 });
            }
            let mom = slot.as_mut().unwrap();
            mom.t += 1;
            let bc1 = 1.0 - self.beta1.powi(mom.t as i32);
            let bc2 = 1.0 - self.beta2.powi(mom.t as i32);
            let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
            let one = S::one();
            let lr_s = S::from_f64(lr);
            let eps_s = S::from_f64(self.eps);
            let (bc1_s, bc2_s) = (S::from_f64(bc1), S::from_f64(bc2));
            let data = store.get_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                mom.m[i] = b1 * mom.m[i] + (one - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (one - b2) * g * g;
                let mhat = mom.m[i] / bc1_s;
                let vhat = mom.v[i] / bc2_s;
                data[i] = data[i] - lr_s * mhat / (vhat.sqrt() + eps_s);
            }
        }
        Ok(())
    }
}

// ── training loop ────────────────────────────────────────────────────

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub task: TaskKind,
    /// This step's weighted loss.
    pub loss: f64,
    pub loss_audio: Option<f64>,
    pub loss_video: Option<f64>,
    /// EMA over all steps' losses.
    pub ema: f64,
    /// EMA over joint-task losses only, carried between joint steps.
    pub joint_ema: Option<f64>,
}

impl TrainRecord {
    /// One structured text line: `step= task= loss= ema=` plus the optional
    /// per-stream and joint-EMA fields. Floats use the shortest
    /// representation that parses back exactly.
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "step={} task={} loss={} ema={}",
            self.step,
            self.task.name(),
            self.loss,
            self.ema
        );
        if let Some(a) = self.loss_audio {
            s.push_str(&format!(" aud={a}"));
        }
        if let Some(v) = self.loss_video {
            s.push_str(&format!(" vid={v}"));
        }
        if let Some(j) = self.joint_ema {
            s.push_str(&format!(" jema={j}"));
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<TrainRecord> {
        let mut step = None;
        let mut task = None;
        let mut loss = None;
        let mut ema = None;
        let mut aud = None;
        let mut vid = None;
        let mut jema = None;
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("bad log field {field:?}")))?;
            match key {
                "step" => step = Some(value.parse::<usize>().map_err(bad_field)?),
                "task" => task = Some(TaskKind::parse(value)?),
                "loss" => loss = Some(value.parse::<f64>().map_err(bad_field)?),
                "ema" => ema = Some(value.parse::<f64>().map_err(bad_field)?),
                "aud" => aud = Some(value.parse::<f64>().map_err(bad_field)?),
                "vid" => vid = Some(value.parse::<f64>().map_err(bad_field)?),
                "jema" => jema = Some(value.parse::<f64>().map_err(bad_field)?),
                other => return Err(Error::contract(format!("unknown log field {other:?}"))),
            }
        }
        Ok(TrainRecord {
            step: step.ok_or_else(|| Error::contract("log line missing step"))?,
            task: task.ok_or_else(|| Error::contract("log line missing task"))?,
            loss: loss.ok_or_else(|| Error::contract("log line missing loss"))?,
            loss_audio: aud,
            loss_video: vid,
            ema: ema.ok_or_else(|| Error::contract("log line missing ema"))?,
            joint_ema: jema,
        })
    }
}

fn bad_field(e: impl std::fmt::Display) -> Error {
    Error::contract(format!("bad log value: {e}"))
}

/// Optimizer and EMA state that persists across chunked training calls
/// (checkpoint cadence splits one run into several ranges).
pub struct TrainerState<S: Scalar> {
    opt: Adam<S>,
    ema: Option<f64>,
    joint_ema: Option<f64>,
}

impl<S: Scalar> TrainerState<S> {
    pub fn new(model: &DualStreamModel<S>, cfg: &TrainConfig) -> Self {
        TrainerState { opt: Adam::new(model, cfg.lr_cca, cfg.lr_base), ema: None, joint_ema: None }
    }

    pub fn optimizer(&self) -> &Adam<S> {
        &self.opt
    }
}

/// Run a contiguous range of seeded training steps, mutating the model in
/// place. `on_record` sees every step as it happens.
pub fn train_range<S: Scalar>(
    model: &mut DualStreamModel<S>,
    data: &DatasetSpec,
    cfg: &TrainConfig,
    state: &mut TrainerState<S>,
    steps: std::ops::Range<usize>,
    on_record: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let iter = DatasetIter::<S>::new(*data, cfg.batch, derive_seed(cfg.seed, "data"))?;
    let mut records = Vec::with_capacity(steps.len());
    for step in steps {
        let record = match train_step(
            model,
            &iter,
            cfg,
            &mut state.opt,
            step,
            &mut state.ema,
            &mut state.joint_ema,
        ) {
            Ok(r) => r,
            Err(err) => {
                // leave a diagnostic record behind before aborting
                let diag = TrainRecord {
                    step,
                    task: TaskKind::JointAV,
                    loss: f64::NAN,
                    loss_audio: None,
                    loss_video: None,
                    ema: state.ema.unwrap_or(f64::NAN),
                    joint_ema: state.joint_ema,
                };
                let _ = on_record(&diag);
                return Err(err);
            }
        };
        on_record(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Run steps `[start_step, cfg.steps)` with fresh optimizer state.
pub fn train_loop<S: Scalar>(
    model: &mut DualStreamModel<S>,
    data: &DatasetSpec,
    cfg: &TrainConfig,
    start_step: usize,
    on_record: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    let mut state = TrainerState::new(model, cfg);
    train_range(model, data, cfg, &mut state, start_step..cfg.steps, on_record)
}

fn train_step<S: Scalar>(
    model: &mut DualStreamModel<S>,
    iter: &DatasetIter<S>,
    cfg: &TrainConfig,
    opt: &mut Adam<S>,
    step: usize,
    ema: &mut Option<f64>,
    joint_ema: &mut Option<f64>,
) -> Result<TrainRecord> {
    let seed = cfg.seed;
    let task = sample_task(
        &cfg.task_probs,
        &mut rng_from(derive_seed_indexed(seed, "task", step as u64)),
    );
    let plan = plan_for(model.config.variant, task);

    let samples: Vec<AVSample<S>> = iter.batch_at(step as u64)?;
    let (audio0, video0) = stack_batch(&samples)?;
    let b = samples.len();

    let mut t_rng = rng_from(derive_seed_indexed(seed, "time", step as u64));
    let (t_a, t_v) = draw_timesteps::<S>(&plan, b, &mut t_rng);

    let mut n_rng = rng_from(derive_seed_indexed(seed, "noise", step as u64));
    let mut gauss = |shape: &[usize]| -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::from_f64(n_rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("sized by construction")
    };

    let (x_audio, target_audio) = match (&t_a, plan.audio.is_reference) {
        (Some(_), true) => (Some(audio0.clone()), None),
        (Some(t), false) => {
            let eps = gauss(audio0.shape());
            let (xt, v) = flow_interpolate_batch(&audio0, &eps, t)?;
            (Some(xt), Some(v))
        }
        (None, _) => (None, None),
    };
    let (x_video, target_video) = match (&t_v, plan.video.is_reference) {
        (Some(_), true) => (Some(video0.clone()), None),
        (Some(t), false) => {
            let eps = gauss(video0.shape());
            let (xt, v) = flow_interpolate_batch(&video0, &eps, t)?;
            (Some(xt), Some(v))
        }
        (None, _) => (None, None),
    };

    let mut d_rng = rng_from(derive_seed_indexed(seed, "textdrop", step as u64));
    let class_ids: Vec<usize> = samples
        .iter()
        .map(|s| {
            if d_rng.gen_bool(cfg.text_null_prob) {
                model.config.n_classes
            } else {
                s.class_id
            }
        })
        .collect();

    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new(&model.store);
    let outputs = model.forward(
        &mut tape,
        &mut leaves,
        &ForwardInputs {
            x_audio: x_audio.as_ref(),
            x_video: x_video.as_ref(),
            t_audio: t_a.as_deref(),
            t_video: t_v.as_deref(),
            class_ids: &class_ids,
            text: TextCond::Class,
            plan: &plan,
            capture_attn: false,
        },
    )?;
    let loss =
        multitask_loss(&mut tape, &outputs, target_audio.as_ref(), target_video.as_ref(), &plan)?;
    tape.backward(loss.total)?;
    opt.step(&mut model.store, &tape, &leaves)?;

    let loss_value = tape.value(loss.total)[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }
    let next_ema = match *ema {
        Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * loss_value,
        None => loss_value,
    };
    *ema = Some(next_ema);
    if task == TaskKind::JointAV {
        *joint_ema = Some(match *joint_ema {
            Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * loss_value,
            None => loss_value,
        });
    }
    Ok(TrainRecord {
        step,
        task,
        loss: loss_value,
        loss_audio: loss.audio.map(|id| tape.value(id)[0].as_f64()),
        loss_video: loss.video.map(|id| tape.value(id)[0].as_f64()),
        ema: next_ema,
        joint_ema: *joint_ema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_data(seed: u64) -> DatasetSpec {
        let cfg = ModelConfig::tiny();
        DatasetSpec {
            grid: cfg.grid,
            n_classes: cfg.n_classes,
            event_rate: 0.4,
            noise_std: 0.05,
            signal_channels: cfg.signal_channels,
            seed,
        }
    }

    fn tiny_train(seed: u64, steps: usize) -> TrainConfig {
        TrainConfig {
            task_probs: TaskProbs::default(),
            lr_cca: 1e-3,
            lr_base: 1e-4,
            steps,
            batch: 2,
            ema_decay: 0.9,
            text_null_prob: 0.1,
            seed,
        }
    }

    #[test]
    fn flow_endpoints() {
        let x0 = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let eps = Tensor::new(vec![2, 2], vec![-1.0, 0.5, 0.0, 2.0]).unwrap();
        let (at0, v) = flow_interpolate(&x0, &eps, 0.0).unwrap();
        assert_eq!(at0.data(), x0.data());
        let (at1, _) = flow_interpolate(&x0, &eps, 1.0).unwrap();
        assert_eq!(at1.data(), eps.data());
        // the path is linear: x_{t2} - x_{t1} == (t2 - t1) * v
        let (a, _) = flow_interpolate(&x0, &eps, 0.25).unwrap();
        let (b, _) = flow_interpolate(&x0, &eps, 0.75).unwrap();
        for i in 0..4 {
            assert!((b.data()[i] - a.data()[i] - 0.5 * v.data()[i]).abs() < 1e-12);
        }
        assert!(flow_interpolate(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn degenerate_probs_always_joint() {
        let probs = TaskProbs { t2v: 0.0, t2a: 0.0, a2v: 0.0, v2a: 0.0, joint: 1.0 };
        let mut rng = rng_from(1);
        for _ in 0..100 {
            assert_eq!(sample_task(&probs, &mut rng), TaskKind::JointAV);
        }
    }

    #[test]
    fn task_sequence_is_seeded() {
        let probs = TaskProbs::default();
        let draw = |seed| -> Vec<TaskKind> {
            let mut rng = rng_from(seed);
            (0..50).map(|_| sample_task(&probs, &mut rng)).collect()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn task_frequencies_match_defaults() {
        let probs = TaskProbs::default();
        let mut rng = rng_from(123);
        let n = 100_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            *counts.entry(sample_task(&probs, &mut rng)).or_insert(0usize) += 1;
        }
        let freq = |t: TaskKind| *counts.get(&t).unwrap_or(&0) as f64 / n as f64;
        let text = freq(TaskKind::TextToVideo) + freq(TaskKind::TextToAudio);
        assert!((text - 0.1).abs() < 0.01, "text tasks {text}");
        assert!((freq(TaskKind::AudioToVideo) - 0.15).abs() < 0.01);
        assert!((freq(TaskKind::VideoToAudio) - 0.15).abs() < 0.01);
        assert!((freq(TaskKind::JointAV) - 0.6).abs() < 0.01);
    }

    #[test]
    fn joint_timesteps_share_one_draw() {
        let plan = routing_plan(TaskKind::JointAV);
        let mut rng = rng_from(4);
        let (ta, tv) = draw_timesteps::<f64>(&plan, 6, &mut rng);
        assert_eq!(ta.unwrap(), tv.unwrap());
        let plan = routing_plan(TaskKind::AudioToVideo);
        let (ta, tv) = draw_timesteps::<f64>(&plan, 6, &mut rng);
        assert!(ta.unwrap().iter().all(|&t| t == 0.0));
        assert!(tv.unwrap().iter().any(|&t| t != 0.0));
    }

    fn tiny_forward_loss(
        model: &DualStreamModel<f64>,
        task: TaskKind,
        seed: u64,
    ) -> (Tape<f64>, ParamLeaves, ValueId) {
        let data = tiny_data(seed);
        let iter = DatasetIter::<f64>::new(data, 2, 3).unwrap();
        let samples = iter.batch_at(0).unwrap();
        let (a0, v0) = stack_batch(&samples).unwrap();
        let plan = plan_for(model.config.variant, task);
        let mut rng = rng_from(seed);
        let (ta, tv) = draw_timesteps::<f64>(&plan, 2, &mut rng);
        let mut gauss = |shape: &[usize]| -> Tensor<f64> {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect(),
            )
            .unwrap()
        };
        let (xa, tgt_a) = match (&ta, plan.audio.is_reference) {
            (Some(_), true) => (Some(a0.clone()), None),
            (Some(t), false) => {
                let eps = gauss(a0.shape());
                let (x, v) = flow_interpolate_batch(&a0, &eps, t).unwrap();
                (Some(x), Some(v))
            }
            (None, _) => (None, None),
        };
        let (xv, tgt_v) = match (&tv, plan.video.is_reference) {
            (Some(_), true) => (Some(v0.clone()), None),
            (Some(t), false) => {
                let eps = gauss(v0.shape());
                let (x, v) = flow_interpolate_batch(&v0, &eps, t).unwrap();
                (Some(x), Some(v))
            }
            (None, _) => (None, None),
        };
        let ids: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
        let mut tape = Tape::new();
        let mut leaves = ParamLeaves::new(&model.store);
        let out = model
            .forward(
                &mut tape,
                &mut leaves,
                &ForwardInputs {
                    x_audio: xa.as_ref(),
                    x_video: xv.as_ref(),
                    t_audio: ta.as_deref(),
                    t_video: tv.as_deref(),
                    class_ids: &ids,
                    text: TextCond::Class,
                    plan: &plan,
                    capture_attn: false,
                },
            )
            .unwrap();
        let loss =
            multitask_loss(&mut tape, &out, tgt_a.as_ref(), tgt_v.as_ref(), &plan).unwrap();
        (tape, leaves, loss.total)
    }

    #[test]
    fn reference_stream_gradients_vanish_exactly() {
        // warm up so the zero-initialized exchange outputs move off zero and
        // gradients actually flow through the exchange internals
        let mut model = DualStreamModel::<f64>::init(ModelConfig::tiny(), 42).unwrap();
        let data = tiny_data(40);
        let mut warm = tiny_train(41, 2);
        warm.task_probs = TaskProbs { t2v: 0.0, t2a: 0.0, a2v: 0.0, v2a: 0.0, joint: 1.0 };
        train_loop(&mut model, &data, &warm, 0, &mut |_| Ok(())).unwrap();

        let (mut tape, leaves, loss) = tiny_forward_loss(&model, TaskKind::AudioToVideo, 5);
        tape.backward(loss).unwrap();
        // every audio-exclusive parameter: exactly zero gradient
        for id in model.stream_exclusive_params(crate::dcr::StreamKind::Audio) {
            if let Some(leaf) = leaves.registered(id) {
                if let Some(g) = tape.grad(leaf) {
                    assert!(
                        g.iter().all(|&v| v == 0.0),
                        "nonzero gradient on {}",
                        model.store.name(id)
                    );
                }
            }
        }
        // while the video trunk does learn
        let vid = model.store.id_by_name("video.block0.sa.wq").unwrap();
        let g = tape.grad(leaves.registered(vid).unwrap()).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        // and so do the audio-to-video exchange projections fed by the
        // detached reference latents
        let wk = model.store.id_by_name("cca.block0.a2v.wk").unwrap();
        let g = tape.grad(leaves.registered(wk).unwrap()).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn a2v_loss_is_video_mse_alone() {
        let model = DualStreamModel::<f64>::init(ModelConfig::tiny(), 42).unwrap();
        let (tape, _, loss) = tiny_forward_loss(&model, TaskKind::AudioToVideo, 6);
        let total = tape.value(loss)[0];
        assert!(total.is_finite());
        // joint puts both streams in
        let (tape_j, _, loss_j) = tiny_forward_loss(&model, TaskKind::JointAV, 6);
        let total_j = tape_j.value(loss_j)[0];
        assert!(total_j.is_finite());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let mut model = DualStreamModel::<f32>::init(ModelConfig::tiny(), 1).unwrap();
        let before: Vec<Vec<u32>> = model
            .store
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let data = tiny_data(2);
        let mut cfg = tiny_train(2, 3);
        cfg.lr_cca = 0.0;
        cfg.lr_base = 0.0;
        train_loop(&mut model, &data, &cfg, 0, &mut |_| Ok(())).unwrap();
        let after: Vec<Vec<u32>> = model
            .store
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn fixed_seed_reproduces_the_record_stream() {
        let run = || {
            let mut model = DualStreamModel::<f32>::init(ModelConfig::tiny(), 7).unwrap();
            let data = tiny_data(8);
            let cfg = tiny_train(9, 5);
            train_loop(&mut model, &data, &cfg, 0, &mut |_| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for r in &a {
            let parsed = TrainRecord::parse_line(&r.log_line()).unwrap();
            assert_eq!(&parsed, r);
        }
    }

    #[test]
    fn optimizer_groups_are_exactly_the_cross_modal_parameters() {
        let model = DualStreamModel::<f32>::init(ModelConfig::tiny(), 3).unwrap();
        let opt = Adam::new(&model, 1e-3, 1e-4);
        let mut cca_count = 0;
        for (idx, id) in model.store.ids().enumerate() {
            let name = model.store.name(id);
            let expect = name.starts_with("cca.");
            assert_eq!(opt.cca_group()[idx], expect, "{name}");
            if expect {
                cca_count += 1;
            }
        }
        // both banks and their projections are in the group
        assert!(cca_count > 0);
        assert!(model.store.id_by_name("cca.block0.a2v.lct.tokens").is_some());
        assert!(model.store.id_by_name("cca.block1.v2a.lct.tokens").is_some());
    }

    #[test]
    fn every_parameter_learns_under_joint_training() {
        // warm up two steps so the zero-initialized exchange outputs move
        // off zero, then expect some nonzero gradient for every parameter
        // within five random joint batches
        let mut model = DualStreamModel::<f64>::init(ModelConfig::tiny(), 13).unwrap();
        let data = tiny_data(14);
        let mut cfg = tiny_train(15, 2);
        cfg.task_probs = TaskProbs { t2v: 0.0, t2a: 0.0, a2v: 0.0, v2a: 0.0, joint: 1.0 };
        train_loop(&mut model, &data, &cfg, 0, &mut |_| Ok(())).unwrap();

        let mut touched = vec![false; model.store.len()];
        for batch in 0..5u64 {
            let (mut tape, leaves, loss) =
                tiny_forward_loss(&model, TaskKind::JointAV, 100 + batch);
            tape.backward(loss).unwrap();
            for (idx, id) in model.store.ids().enumerate() {
                if let Some(leaf) = leaves.registered(id) {
                    if let Some(g) = tape.grad(leaf) {
                        if g.iter().any(|&v| v != 0.0) {
                            touched[idx] = true;
                        }
                    }
                }
            }
        }
        for (idx, id) in model.store.ids().enumerate() {
            assert!(
                touched[idx],
                "parameter {} never received gradient",
                model.store.name(id)
            );
        }
    }
}
