//! The dual-stream transformer.
//!
//! Two stacks of equal depth, one per modality, each block running
//! self-attention, text cross-attention, the cross-modal exchange, then the
//! feed-forward layer, every sub-layer pre-normalized and residual. The
//! audio stream uses fewer channels. Timestep conditioning is a sinusoidal
//! embedding through a two-layer MLP added to the token features before the
//! stack; text conditioning is a class-embedding table with a learned
//! null-text row, presented as two tokens per sample (the chosen row plus a
//! shared register row, so single-token attention never degenerates).
//!
//! The same assembly also instantiates the gated baseline: no context token
//! banks, full-span cross attention, and a binary per-task gate deciding
//! whether the cross residual exists at all.

use std::sync::Arc;

use crate::cca::{
    cca_block_forward, scaled_attention, AttnMap, CcaBlock, CcaContext, CcaDirection, CcaLct,
    CrossRopeTables,
};
use crate::dcr::{RoutingPlan, StreamKind};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamLeaves, ParamStore};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tarp::{build_window_map, full_span_map, GridMeta, RopeTable, WindowMap};
use crate::tensor::{fmt_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ccl,
    Gated,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ccl => "ccl",
            Variant::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ccl" => Ok(Variant::Ccl),
            "gated" => Ok(Variant::Gated),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Local windows from the partitioning maps.
    Tarp,
    /// Every token sees the whole other stream.
    Full,
}

/// Per-stream architecture knobs. Depth must match across streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Size of the opposite-modality context bank held by this stream's
    /// cross-attention direction.
    pub n_lct: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub audio: StreamConfig,
    pub video: StreamConfig,
    pub grid: GridMeta,
    pub text_dim: usize,
    pub n_classes: usize,
    pub signal_channels: usize,
    pub cross_heads: usize,
    pub variant: Variant,
    pub window_mode: WindowMode,
    pub rope_base: f64,
}

impl ModelConfig {
    /// The default desk-scale configuration.
    pub fn toy_default() -> Self {
        ModelConfig {
            audio: StreamConfig { depth: 4, dim: 32, heads: 4, ffn_mult: 4, n_lct: 128 },
            video: StreamConfig { depth: 4, dim: 64, heads: 4, ffn_mult: 4, n_lct: 8 },
            grid: GridMeta { t_a: 32, t_v: 8, h: 4, w: 4 },
            text_dim: 16,
            n_classes: 4,
            signal_channels: 4,
            cross_heads: 4,
            variant: Variant::Ccl,
            window_mode: WindowMode::Tarp,
            rope_base: crate::tarp::DEFAULT_ROPE_BASE,
        }
    }

    /// A configuration small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            audio: StreamConfig { depth: 2, dim: 8, heads: 2, ffn_mult: 2, n_lct: 4 },
            video: StreamConfig { depth: 2, dim: 16, heads: 2, ffn_mult: 2, n_lct: 2 },
            grid: GridMeta { t_a: 4, t_v: 2, h: 2, w: 2 },
            text_dim: 4,
            n_classes: 2,
            signal_channels: 2,
            cross_heads: 2,
            variant: Variant::Ccl,
            window_mode: WindowMode::Tarp,
            rope_base: crate::tarp::DEFAULT_ROPE_BASE,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        if variant == Variant::Gated {
            self.window_mode = WindowMode::Full;
            self.audio.n_lct = 0;
            self.video.n_lct = 0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.audio.depth != self.video.depth {
            return Err(Error::contract(format!(
                "streams must share the same depth, got {} vs {}",
                self.audio.depth, self.video.depth
            )));
        }
        for (name, s) in [("audio", &self.audio), ("video", &self.video)] {
            if s.heads == 0 || s.dim % s.heads != 0 || (s.dim / s.heads) % 2 != 0 {
                return Err(Error::contract(format!(
                    "{name} dim {} must split into even head dims across {} heads",
                    s.dim, s.heads
                )));
            }
            if s.dim % self.cross_heads != 0 || (s.dim / self.cross_heads) % 2 != 0 {
                return Err(Error::contract(format!(
                    "{name} dim {} must split into even head dims across {} cross heads",
                    s.dim, self.cross_heads
                )));
            }
        }
        if self.n_classes == 0 || self.text_dim == 0 || self.signal_channels == 0 {
            return Err(Error::contract(
                "n_classes, text_dim and signal_channels must be positive",
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count; checked against the store by a test.
    pub fn param_count(&self) -> usize {
        let stream = |s: &StreamConfig, text_dim: usize, c_sig: usize| {
            let d = s.dim;
            let per_block = 4 * d                 // four norms
                + 4 * d * d                        // self-attention
                + 2 * d * d + 2 * text_dim * d     // text cross-attention
                + 2 * s.ffn_mult * d * d; // feed-forward
            s.depth * per_block + 2 * c_sig * d + d + 2 * d * d
        };
        let (d_a, d_v) = (self.audio.dim, self.video.dim);
        let cca_dir = |d_q: usize, d_src: usize, n: usize| {
            let core = 2 * d_q * d_q + 2 * d_src * d_q;
            let bank = if self.variant == Variant::Ccl { n * d_q + 2 * d_q * d_q } else { 0 };
            core + bank
        };
        let depth = self.audio.depth;
        stream(&self.audio, self.text_dim, self.signal_channels)
            + stream(&self.video, self.text_dim, self.signal_channels)
            + depth * (cca_dir(d_v, d_a, self.video.n_lct) + cca_dir(d_a, d_v, self.audio.n_lct))
            + (self.n_classes + 2) * self.text_dim
    }

    /// Row index of the learned null-text embedding.
    pub fn null_text_id(&self) -> usize {
        self.n_classes
    }

    /// Row index of the always-present register token.
    fn register_text_id(&self) -> usize {
        self.n_classes + 1
    }
}

/// Attention projection handles.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm_sa: ParamId,
    pub sa: AttnParams,
    pub norm_text: ParamId,
    pub text: AttnParams,
    pub norm_cca: ParamId,
    pub norm_ffn: ParamId,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct StreamParams {
    pub blocks: Vec<BlockParams>,
    pub patchify: ParamId,
    pub unpatchify: ParamId,
    pub norm_out: ParamId,
    pub time_w1: ParamId,
    pub time_w2: ParamId,
}

struct ModelRope<S: Scalar> {
    audio_self: RopeTable<S>,
    video_self: RopeTable<S>,
    cross: CrossRopeTables<S>,
}

pub struct DualStreamModel<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub audio: StreamParams,
    pub video: StreamParams,
    pub cca: Vec<CcaBlock>,
    pub text_table: ParamId,
    pub window: WindowMap,
    rope: ModelRope<S>,
}

pub const NORM_EPS: f64 = 1e-6;

/// Text conditioning for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TextCond {
    /// Per-sample class embeddings.
    Class,
    /// The learned null-text row, for unconditional branches.
    Null,
}

pub struct ForwardInputs<'a, S: Scalar> {
    /// [b, t_a, c_sig]; required when the plan runs the audio stream.
    pub x_audio: Option<&'a Tensor<S>>,
    /// [b, t_v, h, w, c_sig]; required when the plan runs the video stream.
    pub x_video: Option<&'a Tensor<S>>,
    /// Per-sample flow timesteps in [0, 1].
    pub t_audio: Option<&'a [S]>,
    pub t_video: Option<&'a [S]>,
    pub class_ids: &'a [usize],
    pub text: TextCond,
    pub plan: &'a RoutingPlan,
    pub capture_attn: bool,
}

#[derive(Clone, Debug)]
pub struct BlockAttnMaps<S: Scalar> {
    pub block: usize,
    pub a2v: Option<AttnMap<S>>,
    pub v2a: Option<AttnMap<S>>,
}

pub struct ModelOutput<S: Scalar> {
    /// Predicted audio velocity, [b, t_a, c_sig]; absent for skipped streams.
    pub v_audio: Option<ValueId>,
    /// Predicted video velocity, [b, t_v, h, w, c_sig].
    pub v_video: Option<ValueId>,
    pub maps: Vec<BlockAttnMaps<S>>,
}

impl<S: Scalar> DualStreamModel<S> {
    /// Deterministic initialization; the same seed yields bit-identical
    /// parameters. Every tensor draws from its own stream keyed by
    /// `(seed, parameter name)`, so adding or removing parameters (for
    /// instance the gated variant's missing banks) never shifts the rest.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let audio = init_stream(&mut store, "audio", &config.audio, &config, seed)?;
        let video = init_stream(&mut store, "video", &config.video, &config, seed)?;
        let mut cca = Vec::with_capacity(config.audio.depth);
        for i in 0..config.audio.depth {
            let a2v = init_cca_direction(
                &mut store,
                &format!("cca.block{i}.a2v"),
                config.video.dim,
                config.audio.dim,
                config.video.n_lct,
                config.cross_heads,
                config.variant,
                seed,
            )?;
            let v2a = init_cca_direction(
                &mut store,
                &format!("cca.block{i}.v2a"),
                config.audio.dim,
                config.video.dim,
                config.audio.n_lct,
                config.cross_heads,
                config.variant,
                seed,
            )?;
            cca.push(CcaBlock { a2v, v2a });
        }
        let text_table = store.add(
            "text.table",
            gaussian(seed, "text.table", vec![config.n_classes + 2, config.text_dim], 0.02),
        )?;

        let window = match config.window_mode {
            WindowMode::Tarp => build_window_map(&config.grid)?,
            WindowMode::Full => full_span_map(&config.grid)?,
        };
        let audio_positions: Vec<f64> = (0..config.grid.t_a).map(|j| j as f64).collect();
        let rope = ModelRope {
            audio_self: RopeTable::temporal(
                &audio_positions,
                config.audio.dim,
                config.audio.dim / config.audio.heads,
                config.rope_base,
            )?,
            video_self: RopeTable::video_factorized(
                &config.grid,
                config.video.dim,
                config.video.dim / config.video.heads,
                config.rope_base,
            )?,
            cross: CrossRopeTables::build(
                &config.grid,
                config.audio.dim,
                config.video.dim,
                config.cross_heads,
                config.rope_base,
            )?,
        };
        Ok(DualStreamModel { config, store, audio, video, cca, text_table, window, rope })
    }

    /// Parameter names in the cross-modal group (exchange projections and
    /// context banks); these receive the higher learning rate.
    pub fn is_cross_modal_param(name: &str) -> bool {
        name.starts_with("cca.")
    }

    /// Parameters whose forward use lies exclusively in producing the given
    /// stream's latents: the stream trunk plus the exchange direction whose
    /// queries come from that stream. When the stream is a detached
    /// reference, exactly these gradients must vanish.
    pub fn stream_exclusive_params(&self, stream: StreamKind) -> Vec<ParamId> {
        let (prefix, dir_tag) = match stream {
            StreamKind::Audio => ("audio.", ".v2a."),
            StreamKind::Video => ("video.", ".a2v."),
        };
        self.store
            .ids()
            .filter(|&id| {
                let name = self.store.name(id);
                name.starts_with(prefix) || name.contains(dir_tag)
            })
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut ParamLeaves,
        inputs: &ForwardInputs<'_, S>,
    ) -> Result<ModelOutput<S>> {
        let plan = inputs.plan;
        let b = inputs.class_ids.len();
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        if !plan.audio.is_active() && !plan.video.is_active() {
            return Err(Error::contract("plan activates no stream"));
        }
        self.check_stream_inputs(inputs, b)?;

        // text embedding: the chosen row (class or null) plus the shared
        // register row, two tokens per sample
        let chosen: Vec<usize> = match inputs.text {
            TextCond::Class => inputs.class_ids.to_vec(),
            TextCond::Null => vec![self.config.null_text_id(); b],
        };
        if chosen.iter().any(|&c| c > self.config.null_text_id()) {
            return Err(Error::contract(format!(
                "class id out of range for {} classes",
                self.config.n_classes
            )));
        }
        let mut ids = Vec::with_capacity(2 * b);
        for c in chosen {
            ids.push(c);
            ids.push(self.config.register_text_id());
        }
        let table = leaves.leaf(tape, &self.store, self.text_table)?;
        let text = tape.embed(table, Arc::new(ids))?;
        let text = tape.reshape(text, vec![b, 2, self.config.text_dim])?;

        let mut x_a = match plan.audio.is_active() {
            true => Some(self.embed_audio(tape, leaves, inputs, b)?),
            false => None,
        };
        let mut x_v = match plan.video.is_active() {
            true => Some(self.embed_video(tape, leaves, inputs, b)?),
            false => None,
        };

        let mut maps = Vec::new();
        for i in 0..self.config.audio.depth {
            if let Some(x) = x_a {
                x_a = Some(self.block_pre_cca(
                    tape,
                    leaves,
                    x,
                    text,
                    &self.audio.blocks[i],
                    &self.rope.audio_self,
                )?);
            }
            if let Some(x) = x_v {
                x_v = Some(self.block_pre_cca(
                    tape,
                    leaves,
                    x,
                    text,
                    &self.video.blocks[i],
                    &self.rope.video_self,
                )?);
            }

            let a_norm = match x_a {
                Some(x) => {
                    let w = leaves.leaf(tape, &self.store, self.audio.blocks[i].norm_cca)?;
                    Some(tape.rms_norm(x, w, S::from_f64(NORM_EPS))?)
                }
                None => None,
            };
            let v_norm = match x_v {
                Some(x) => {
                    let w = leaves.leaf(tape, &self.store, self.video.blocks[i].norm_cca)?;
                    Some(tape.rms_norm(x, w, S::from_f64(NORM_EPS))?)
                }
                None => None,
            };
            let ctx = CcaContext {
                store: &self.store,
                meta: &self.config.grid,
                window: &self.window,
                rope: &self.rope.cross,
                capture_maps: inputs.capture_attn,
            };
            let out = cca_block_forward(tape, leaves, &ctx, &self.cca[i], a_norm, v_norm, plan)?;
            if let (Some(x), Some(d)) = (x_a, out.delta_audio) {
                x_a = Some(tape.add(x, d)?);
            }
            if let (Some(x), Some(d)) = (x_v, out.delta_video) {
                x_v = Some(tape.add(x, d)?);
            }
            if inputs.capture_attn {
                maps.push(BlockAttnMaps { block: i, a2v: out.map_a2v, v2a: out.map_v2a });
            }

            if let Some(x) = x_a {
                x_a = Some(self.block_ffn(tape, leaves, x, &self.audio.blocks[i])?);
            }
            if let Some(x) = x_v {
                x_v = Some(self.block_ffn(tape, leaves, x, &self.video.blocks[i])?);
            }
        }

        let v_audio = match x_a {
            Some(x) => {
                let out = self.output_head(tape, leaves, x, &self.audio)?;
                Some(tape.reshape(
                    out,
                    vec![b, self.config.grid.t_a, self.config.signal_channels],
                )?)
            }
            None => None,
        };
        let v_video = match x_v {
            Some(x) => {
                let out = self.output_head(tape, leaves, x, &self.video)?;
                let g = &self.config.grid;
                Some(tape.reshape(out, vec![b, g.t_v, g.h, g.w, self.config.signal_channels])?)
            }
            None => None,
        };
        Ok(ModelOutput { v_audio, v_video, maps })
    }

    fn check_stream_inputs(&self, inputs: &ForwardInputs<'_, S>, b: usize) -> Result<()> {
        let plan = inputs.plan;
        let g = &self.config.grid;
        if plan.audio.is_active() {
            let x = inputs
                .x_audio
                .ok_or_else(|| Error::contract("plan runs the audio stream but x_audio is absent"))?;
            let want = [b, g.t_a, self.config.signal_channels];
            if x.shape() != want {
                return Err(Error::shape(
                    "model_forward",
                    format!("audio {} vs expected {}", fmt_shape(x.shape()), fmt_shape(&want)),
                ));
            }
            check_timesteps(inputs.t_audio, b, plan.audio.is_reference, "audio")?;
        }
        if plan.video.is_active() {
            let x = inputs
                .x_video
                .ok_or_else(|| Error::contract("plan runs the video stream but x_video is absent"))?;
            let want = [b, g.t_v, g.h, g.w, self.config.signal_channels];
            if x.shape() != want {
                return Err(Error::shape(
                    "model_forward",
                    format!("video {} vs expected {}", fmt_shape(x.shape()), fmt_shape(&want)),
                ));
            }
            check_timesteps(inputs.t_video, b, plan.video.is_reference, "video")?;
        }
        if plan.shared_timestep && plan.audio.is_active() && plan.video.is_active() {
            let (ta, tv) = (inputs.t_audio.unwrap(), inputs.t_video.unwrap());
            if ta.iter().zip(tv.iter()).any(|(a, v)| *a != *v) {
                return Err(Error::contract(
                    "joint generation requires synchronized timesteps across streams",
                ));
            }
        }
        Ok(())
    }

    fn embed_audio(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut ParamLeaves,
        inputs: &ForwardInputs<'_, S>,
        b: usize,
    ) -> Result<ValueId> {
        let x = tape.leaf(inputs.x_audio.unwrap())?;
        let x = tape.reshape(x, vec![b, self.config.grid.t_a, self.config.signal_channels])?;
        self.embed_stream(tape, leaves, x, inputs.t_audio.unwrap(), &self.audio)
    }

    fn embed_video(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut ParamLeaves,
        inputs: &ForwardInputs<'_, S>,
        b: usize,
    ) -> Result<ValueId> {
        let x = tape.leaf(inputs.x_video.unwrap())?;
        let g = &self.config.grid;
        let x = tape.reshape(x, vec![b, g.video_tokens(), self.config.signal_channels])?;
        self.embed_stream(tape, leaves, x, inputs.t_video.unwrap(), &self.video)
    }

    fn embed_stream(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut ParamLeaves,
        tokens: ValueId,
        t: &[S],
        stream: &StreamParams,
    ) -> Result<ValueId> {
        let patch = leaves.leaf(tape, &self.store, stream.patchify)?;
        let x = tape.matmul(tokens, patch)?;
        let dim = self.store.get(stream.patchify).shape()[1];
        let sinus = timestep_embedding(t, dim);
        let sinus = tape.constant(&sinus)?;
        let w1 = leaves.leaf(tape, &self.store, stream.time_w1)?;
        let w2 = leaves.leaf(tape, &self.store, stream.time_w2)?;
        let h = tape.matmul(sinus, w1)?;
        let h = tape.gelu(h)?;
        let temb = tape.matmul(h, w2)?;
        tape.add_rows(x, temb)
    }

    fn block_pre_cca(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut ParamLeaves,
        x: ValueId,
        text: ValueId,
        bp: &BlockParams,
        self_rope: &RopeTable<S>,
    ) -> Result<ValueId> {
        // self-attention
        let w = leaves.leaf(tape, &self.store, bp.norm_sa)?;
        let n = tape.rms_norm(x, w, S::from_f64(NORM_EPS))?;
        let wq = leaves.leaf(tape, &self.store, bp.sa.wq)?;
        let wk = leaves.leaf(tape, &self.store, bp.sa.wk)?;
        let wv = leaves.leaf(tape, &self.store, bp.sa.wv)?;
        let q = tape.matmul(n, wq)?;
        let q = self_rope.apply(tape, q)?;
        let k = tape.matmul(n, wk)?;
        let k = self_rope.apply(tape, k)?;
        let v = tape.matmul(n, wv)?;
        let (attn, _) = scaled_attention(tape, q, k, v, bp.sa.heads, false)?;
        let wo = leaves.leaf(tape, &self.store, bp.sa.wo)?;
        let o = tape.matmul(attn, wo)?;
        let x = tape.add(x, o)?;

        // text cross-attention
        let w = leaves.leaf(tape, &self.store, bp.norm_text)?;
        let n = tape.rms_norm(x, w, S::from_f64(NORM_EPS))?;
        let wq = leaves.leaf(tape, &self.store, bp.text.wq)?;
        let wk = leaves.leaf(tape, &self.store, bp.text.wk)?;
        let wv = leaves.leaf(tape, &self.store, bp.text.wv)?;
        let q = tape.matmul(n, wq)?;
        let k = tape.matmul(text, wk)?;
        let v = tape.matmul(text, wv)?;
        let (attn, _) = scaled_attention(tape, q, k, v, bp.text.heads, false)?;
        let wo = leaves.leaf(tape, &self.store, bp.text.wo)?;
        let o = tape.matmul(attn, wo)?;
        tape.add(x, o)
    }

    fn block_ffn(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut ParamLeaves,
        x: ValueId,
        bp: &BlockParams,
    ) -> Result<ValueId> {
        let w = leaves.leaf(tape, &self.store, bp.norm_ffn)?;
        let n = tape.rms_norm(x, w, S::from_f64(NORM_EPS))?;
        let w1 = leaves.leaf(tape, &self.store, bp.ffn.w1)?;
        let w2 = leaves.leaf(tape, &self.store, bp.ffn.w2)?;
        let h = tape.matmul(n, w1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add(x, o)
    }

    fn output_head(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut ParamLeaves,
        x: ValueId,
        stream: &StreamParams,
    ) -> Result<ValueId> {
        let w = leaves.leaf(tape, &self.store, stream.norm_out)?;
        let n = tape.rms_norm(x, w, S::from_f64(NORM_EPS))?;
        let up = leaves.leaf(tape, &self.store, stream.unpatchify)?;
        tape.matmul(n, up)
    }

    /// Inference convenience: run one forward without gradients and return
    /// plain tensors.
    pub fn forward_tensors(
        &self,
        inputs: &ForwardInputs<'_, S>,
    ) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>, Vec<BlockAttnMaps<S>>)> {
        let mut tape = Tape::no_grad();
        let mut leaves = ParamLeaves::new(&self.store);
        let out = self.forward(&mut tape, &mut leaves, inputs)?;
        Ok((
            out.v_audio.map(|id| tape.to_tensor(id)),
            out.v_video.map(|id| tape.to_tensor(id)),
            out.maps,
        ))
    }
}

fn check_timesteps<S: Scalar>(
    t: Option<&[S]>,
    b: usize,
    is_reference: bool,
    stream: &str,
) -> Result<()> {
    let t = t.ok_or_else(|| {
        Error::contract(format!("plan runs the {stream} stream but its timesteps are absent"))
    })?;
    if t.len() != b {
        return Err(Error::contract(format!(
            "{stream} timesteps: {} entries for batch {b}",
            t.len()
        )));
    }
    if t.iter().any(|v| *v < S::zero() || *v > S::one()) {
        return Err(Error::contract(format!("{stream} timesteps must lie in [0, 1]")));
    }
    if is_reference && t.iter().any(|v| *v != S::zero()) {
        return Err(Error::contract(format!(
            "{stream} stream is a clean reference; its timesteps must be 0"
        )));
    }
    Ok(())
}

/// Standard sinusoidal embedding of per-sample timesteps, scaled by 1000.
fn timestep_embedding<S: Scalar>(t: &[S], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let pos = ti.as_f64() * 1000.0;
        for k in 0..half {
            let freq = (-(k as f64) * (10000.0f64.ln()) / half as f64).exp();
            data.push(S::from_f64((pos * freq).sin()));
            data.push(S::from_f64((pos * freq).cos()));
        }
        if dim % 2 == 1 {
            data.push(S::zero());
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("sized by construction")
}

// ── initialization ───────────────────────────────────────────────────

fn gaussian<S: Scalar>(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor<S> {
    use rand::Rng;
    let mut rng = rng_from(derive_seed(seed, name));
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal) * std))
        .collect();
    Tensor::new(shape, data).expect("sized by construction")
}

fn add_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    seed: u64,
    name: String,
    fan_in: usize,
    fan_out: usize,
) -> Result<ParamId> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let t = gaussian(seed, &name, vec![fan_in, fan_out], std);
    store.add(name, t)
}

fn add_norm<S: Scalar>(store: &mut ParamStore<S>, name: String, dim: usize) -> Result<ParamId> {
    store.add(name, Tensor::full(vec![dim], S::one()))
}

fn init_stream<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    cfg: &StreamConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<StreamParams> {
    let d = cfg.dim;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("{prefix}.block{i}");
        let sa = AttnParams {
            wq: add_linear(store, seed, format!("{p}.sa.wq"), d, d)?,
            wk: add_linear(store, seed, format!("{p}.sa.wk"), d, d)?,
            wv: add_linear(store, seed, format!("{p}.sa.wv"), d, d)?,
            wo: add_linear(store, seed, format!("{p}.sa.wo"), d, d)?,
            heads: cfg.heads,
        };
        let text = AttnParams {
            wq: add_linear(store, seed, format!("{p}.text.wq"), d, d)?,
            wk: add_linear(store, seed, format!("{p}.text.wk"), model.text_dim, d)?,
            wv: add_linear(store, seed, format!("{p}.text.wv"), model.text_dim, d)?,
            wo: add_linear(store, seed, format!("{p}.text.wo"), d, d)?,
            heads: cfg.heads,
        };
        blocks.push(BlockParams {
            norm_sa: add_norm(store, format!("{p}.norm_sa"), d)?,
            sa,
            norm_text: add_norm(store, format!("{p}.norm_text"), d)?,
            text,
            norm_cca: add_norm(store, format!("{p}.norm_cca"), d)?,
            norm_ffn: add_norm(store, format!("{p}.norm_ffn"), d)?,
            ffn: FfnParams {
                w1: add_linear(store, seed, format!("{p}.ffn.w1"), d, d * cfg.ffn_mult)?,
                w2: add_linear(store, seed, format!("{p}.ffn.w2"), d * cfg.ffn_mult, d)?,
            },
        });
    }
    Ok(StreamParams {
        blocks,
        patchify: add_linear(store, seed, format!("{prefix}.patchify"), model.signal_channels, d)?,
        unpatchify: add_linear(
            store,
            seed,
            format!("{prefix}.unpatchify"),
            d,
            model.signal_channels,
        )?,
        norm_out: add_norm(store, format!("{prefix}.norm_out"), d)?,
        time_w1: add_linear(store, seed, format!("{prefix}.time.w1"), d, d)?,
        time_w2: add_linear(store, seed, format!("{prefix}.time.w2"), d, d)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn init_cca_direction<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    d_q: usize,
    d_src: usize,
    n_lct: usize,
    heads: usize,
    variant: Variant,
    seed: u64,
) -> Result<CcaDirection> {
    let wq = add_linear(store, seed, format!("{prefix}.wq"), d_q, d_q)?;
    let wk_src = add_linear(store, seed, format!("{prefix}.wk"), d_src, d_q)?;
    let wv_src = add_linear(store, seed, format!("{prefix}.wv"), d_src, d_q)?;
    // zero-initialized so the exchange starts as an identity residual
    let wo = store.add(format!("{prefix}.wo"), Tensor::zeros(vec![d_q, d_q]))?;
    let lct = match variant {
        Variant::Ccl => Some(CcaLct {
            tokens: store.add(
                format!("{prefix}.lct.tokens"),
                gaussian(seed, &format!("{prefix}.lct.tokens"), vec![n_lct, d_q], 0.02),
            )?,
            wk: add_linear(store, seed, format!("{prefix}.lct.wk"), d_q, d_q)?,
            wv: add_linear(store, seed, format!("{prefix}.lct.wv"), d_q, d_q)?,
        }),
        Variant::Gated => None,
    };
    Ok(CcaDirection { wq, wk_src, wv_src, lct, wo, heads })
}
