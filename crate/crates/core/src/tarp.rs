//! Temporally aligned rotary embeddings and cross-modal partitioning.
//!
//! The audio and video streams tick at different token rates (`t_a` audio
//! tokens vs `t_v` latent frames). Audio rotary positions are rescaled by
//! `t_v / t_a` so both streams share the same temporal unit, and cross-modal
//! attention is restricted to local windows: each video frame sees the
//! `s = 3c` audio tokens around its aligned span, and each audio token sees
//! the spatial tokens of its nearest video frame.
//!
//! Windows that fall off either end of the audio sequence are clamped to the
//! valid range, duplicating edge tokens rather than masking them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::fmt_shape;

pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

/// Token-grid geometry shared by one batch of paired sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMeta {
    /// Audio token count.
    pub t_a: usize,
    /// Video latent frame count.
    pub t_v: usize,
    /// Video spatial extents.
    pub h: usize,
    pub w: usize,
}

impl GridMeta {
    pub fn new(t_a: usize, t_v: usize, h: usize, w: usize) -> Result<Self> {
        let meta = GridMeta { t_a, t_v, h, w };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_v < 1 || self.t_a < self.t_v {
            return Err(Error::contract(format!(
                "grid requires t_a >= t_v >= 1, got t_a={} t_v={}",
                self.t_a, self.t_v
            )));
        }
        if self.h < 1 || self.w < 1 {
            return Err(Error::contract(format!(
                "grid requires h, w >= 1, got h={} w={}",
                self.h, self.w
            )));
        }
        Ok(())
    }

    /// Number of video tokens `s_v = t_v * h * w`.
    pub fn video_tokens(&self) -> usize {
        self.t_v * self.h * self.w
    }

    /// Strictly aligned audio tokens per video frame, `c = floor(t_a / t_v)`.
    pub fn tokens_per_frame(&self) -> usize {
        self.t_a / self.t_v
    }
}

/// Index maps that realize the partitioning: which audio tokens each video
/// frame attends to, and which video frame each audio token attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowMap {
    /// `c`, audio tokens per frame.
    pub tokens_per_frame: usize,
    /// Window center `m_i` per video frame.
    pub centers: Vec<usize>,
    /// Audio window width per frame (`3c` for local windows, `t_a` for full span).
    pub audio_span: usize,
    /// `t_v x audio_span` audio token indices.
    pub audio_window_indices: Vec<usize>,
    /// Nearest video frame per audio token, length `t_a`.
    pub video_frame_of_audio: Vec<usize>,
    /// Video tokens visible per audio token (`h*w`, or `s_v` for full span).
    pub video_span: usize,
    /// `t_a x video_span` video token indices.
    pub video_token_indices: Vec<usize>,
}

/// Real-valued rotary positions for the audio stream: token `j` sits at
/// `j * t_v / t_a` in video-frame units, so `t_a == t_v` reduces to standard
/// integer positions exactly.
pub fn audio_rope_positions(meta: &GridMeta) -> Result<Vec<f64>> {
    meta.validate()?;
    if meta.t_a == 0 {
        return Err(Error::contract("audio_rope_positions requires t_a >= 1"));
    }
    Ok((0..meta.t_a)
        .map(|j| (j * meta.t_v) as f64 / meta.t_a as f64)
        .collect())
}

/// Build the local-window index maps.
pub fn build_window_map(meta: &GridMeta) -> Result<WindowMap> {
    meta.validate()?;
    let c = meta.tokens_per_frame();
    let span = 3 * c;
    let centers: Vec<usize> = (0..meta.t_v).map(|i| c / 2 + c * i).collect();
    let mut audio_window_indices = Vec::with_capacity(meta.t_v * span);
    for &m in &centers {
        let start = m as i64 - (span / 2) as i64;
        for k in 0..span as i64 {
            audio_window_indices.push((start + k).clamp(0, meta.t_a as i64 - 1) as usize);
        }
    }
    let video_frame_of_audio = nearest_frames(meta);
    let video_token_indices = frame_token_indices(meta, &video_frame_of_audio);
    Ok(WindowMap {
        tokens_per_frame: c,
        centers,
        audio_span: span,
        audio_window_indices,
        video_frame_of_audio,
        video_span: meta.h * meta.w,
        video_token_indices,
    })
}

/// Index maps where every frame sees every audio token and every audio token
/// sees every video token. Used by the gated baseline and by the equivalence
/// tests that reduce partitioned attention to dense cross-attention.
pub fn full_span_map(meta: &GridMeta) -> Result<WindowMap> {
    meta.validate()?;
    let c = meta.tokens_per_frame();
    let s_v = meta.video_tokens();
    let mut audio_window_indices = Vec::with_capacity(meta.t_v * meta.t_a);
    for _ in 0..meta.t_v {
        audio_window_indices.extend(0..meta.t_a);
    }
    let mut video_token_indices = Vec::with_capacity(meta.t_a * s_v);
    for _ in 0..meta.t_a {
        video_token_indices.extend(0..s_v);
    }
    Ok(WindowMap {
        tokens_per_frame: c,
        centers: (0..meta.t_v).map(|i| c / 2 + c * i).collect(),
        audio_span: meta.t_a,
        audio_window_indices,
        video_frame_of_audio: nearest_frames(meta),
        video_span: s_v,
        video_token_indices,
    })
}

fn nearest_frames(meta: &GridMeta) -> Vec<usize> {
    (0..meta.t_a)
        .map(|j| ((j * meta.t_v) / meta.t_a).min(meta.t_v - 1))
        .collect()
}

fn frame_token_indices(meta: &GridMeta, frames: &[usize]) -> Vec<usize> {
    let hw = meta.h * meta.w;
    let mut out = Vec::with_capacity(meta.t_a * hw);
    for &f in frames {
        out.extend(f * hw..(f + 1) * hw);
    }
    out
}

// ── rotary tables ────────────────────────────────────────────────────

/// Precomputed cos/sin tables for one sequence of positions, shaped
/// `[len x dim/2]` to match [`Tape::rope`]. Frequencies follow the standard
/// geometric ladder within each head and repeat across heads, so the table
/// can be applied before the head split.
#[derive(Clone)]
pub struct RopeTable<S: Scalar> {
    pub cos: Arc<Vec<S>>,
    pub sin: Arc<Vec<S>>,
    pub len: usize,
    pub dim: usize,
}

impl<S: Scalar> RopeTable<S> {
    /// Purely temporal rotation: every channel pair of each head rotates by
    /// `position * base^(-2k/head_dim)`.
    pub fn temporal(positions: &[f64], dim: usize, head_dim: usize, base: f64) -> Result<Self> {
        check_dims(dim, head_dim)?;
        let half_head = head_dim / 2;
        let heads = dim / head_dim;
        let half = dim / 2;
        let freqs: Vec<f64> = (0..half_head)
            .map(|k| base.powf(-2.0 * k as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for _ in 0..heads {
                for &f in &freqs {
                    let angle = p * f;
                    cos.push(S::from_f64(angle.cos()));
                    sin.push(S::from_f64(angle.sin()));
                }
            }
        }
        Ok(RopeTable { cos: Arc::new(cos), sin: Arc::new(sin), len: positions.len(), dim })
    }

    /// Factorized (t, y, x) rotation for video self-attention. Within each
    /// head, half the channel pairs carry the temporal axis and a quarter
    /// each carry the two spatial axes; heads too narrow for a spatial share
    /// degrade to purely temporal rotation.
    pub fn video_factorized(meta: &GridMeta, dim: usize, head_dim: usize, base: f64) -> Result<Self> {
        meta.validate()?;
        check_dims(dim, head_dim)?;
        let pairs = head_dim / 2;
        let p_h = pairs / 4;
        let p_w = pairs / 4;
        let p_t = pairs - p_h - p_w;
        let heads = dim / head_dim;
        let half = dim / 2;
        let ladder = |n: usize| -> Vec<f64> {
            (0..n).map(|k| base.powf(-(k as f64) / n as f64)).collect()
        };
        let f_t = ladder(p_t);
        let f_h = ladder(p_h.max(1));
        let f_w = ladder(p_w.max(1));
        let len = meta.video_tokens();
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for t in 0..meta.t_v {
            for y in 0..meta.h {
                for x in 0..meta.w {
                    for _ in 0..heads {
                        for &f in &f_t {
                            let a = t as f64 * f;
                            cos.push(S::from_f64(a.cos()));
                            sin.push(S::from_f64(a.sin()));
                        }
                        for &f in &f_h[..p_h] {
                            let a = y as f64 * f;
                            cos.push(S::from_f64(a.cos()));
                            sin.push(S::from_f64(a.sin()));
                        }
                        for &f in &f_w[..p_w] {
                            let a = x as f64 * f;
                            cos.push(S::from_f64(a.cos()));
                            sin.push(S::from_f64(a.sin()));
                        }
                    }
                }
            }
        }
        Ok(RopeTable { cos: Arc::new(cos), sin: Arc::new(sin), len, dim })
    }

    /// Temporal table over video tokens where every token in a frame shares
    /// the frame's integer position (cross-modal video side).
    pub fn video_frame_temporal(meta: &GridMeta, dim: usize, head_dim: usize, base: f64) -> Result<Self> {
        meta.validate()?;
        let hw = meta.h * meta.w;
        let positions: Vec<f64> = (0..meta.video_tokens()).map(|i| (i / hw) as f64).collect();
        Self::temporal(&positions, dim, head_dim, base)
    }

    pub fn apply(&self, tape: &mut Tape<S>, x: ValueId) -> Result<ValueId> {
        let shape = tape.shape(x);
        let ok = shape.len() >= 2
            && shape[shape.len() - 1] == self.dim
            && shape[shape.len() - 2] == self.len;
        if !ok {
            return Err(Error::shape(
                "rope_apply",
                format!(
                    "table [{}x{}] does not fit input {}",
                    self.len,
                    self.dim,
                    fmt_shape(shape)
                ),
            ));
        }
        tape.rope(x, self.cos.clone(), self.sin.clone())
    }
}

fn check_dims(dim: usize, head_dim: usize) -> Result<()> {
    if head_dim == 0 || head_dim % 2 != 0 || dim % head_dim != 0 {
        return Err(Error::contract(format!(
            "rope needs an even head dim dividing the feature dim, got dim={dim} head_dim={head_dim}"
        )));
    }
    Ok(())
}

/// Rotate `x: [rows x len x d]` by real-valued positions with the full-width
/// frequency ladder (single head).
pub fn apply_rope<S: Scalar>(
    tape: &mut Tape<S>,
    x: ValueId,
    positions: &[f64],
    base: f64,
) -> Result<ValueId> {
    let shape = tape.shape(x);
    let d = *shape.last().ok_or_else(|| Error::shape("rope_apply", "rank-0 input"))?;
    let table = RopeTable::temporal(positions, d, d, base)?;
    table.apply(tape, x)
}

// ── partitioning ─────────────────────────────────────────────────────

/// Gather windowed audio KV for the audio-to-video direction:
/// `[b x t_a x d]` becomes `[(b*t_v) x s x d]`, row `b_idx*t_v + i` holding
/// the window of frame `i` in order.
pub fn partition_audio_kv<S: Scalar>(
    tape: &mut Tape<S>,
    k_a: ValueId,
    v_a: ValueId,
    map: &WindowMap,
) -> Result<(ValueId, ValueId)> {
    let t_v = map.centers.len();
    let t_a = map.video_frame_of_audio.len();
    for id in [k_a, v_a] {
        let shape = tape.shape(id);
        if shape.len() != 3 || shape[1] != t_a {
            return Err(Error::shape(
                "partition_audio_kv",
                format!("expected [b x {t_a} x d], got {}", fmt_shape(shape)),
            ));
        }
    }
    let idx = Arc::new(map.audio_window_indices.clone());
    let k = tape.gather_tokens(k_a, idx.clone(), t_v, map.audio_span)?;
    let v = tape.gather_tokens(v_a, idx, t_v, map.audio_span)?;
    Ok((k, v))
}

/// Gather per-audio-token video KV for the video-to-audio direction:
/// `[b x s_v x d]` becomes `[(b*t_a) x (h*w) x d]`, row `b_idx*t_a + j`
/// holding the spatial tokens of token `j`'s nearest frame.
pub fn partition_video_kv<S: Scalar>(
    tape: &mut Tape<S>,
    k_v: ValueId,
    v_v: ValueId,
    map: &WindowMap,
    meta: &GridMeta,
) -> Result<(ValueId, ValueId)> {
    let s_v = meta.video_tokens();
    for id in [k_v, v_v] {
        let shape = tape.shape(id);
        if shape.len() != 3 || shape[1] != s_v {
            return Err(Error::shape(
                "partition_video_kv",
                format!("expected [b x {s_v} x d], got {}", fmt_shape(shape)),
            ));
        }
    }
    let idx = Arc::new(map.video_token_indices.clone());
    let k = tape.gather_tokens(k_v, idx.clone(), meta.t_a, map.video_span)?;
    let v = tape.gather_tokens(v_v, idx, meta.t_a, map.video_span)?;
    Ok((k, v))
}
