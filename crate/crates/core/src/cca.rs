//! Cross-modal context attention.
//!
//! Each transformer block carries one bidirectional exchange: video queries
//! attend to windowed audio KV (audio-to-video) and audio queries attend to
//! their nearest frame's spatial tokens (video-to-audio). Since the streams
//! run at different widths, the KV projections cross dimensions: audio
//! latents project into the video width and vice versa.
//!
//! Each direction also owns a learnable context token bank: a trainable
//! stand-in for the opposite modality, projected through its own KV weights,
//! tiled across rows, and concatenated after the latent tokens. Rotary
//! embedding is never adopted on the bank: latent attention logits pair the
//! rotated query with rotated keys, while bank logits pair the raw query
//! with the raw bank keys, so bank attention carries no positional signal
//! at all and the whole exchange is invariant to a global temporal shift.
//! Routing decides per task which of the two sources participates; with
//! neither, the residual is skipped.

use crate::dcr::RoutingPlan;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamLeaves, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tarp::{
    audio_rope_positions, partition_audio_kv, partition_video_kv, GridMeta, RopeTable, WindowMap,
};
use crate::tensor::fmt_shape;

/// A learnable context token bank plus its KV projections.
#[derive(Clone, Copy, Debug)]
pub struct CcaLct {
    /// [n x d_q] trainable tokens, in the query stream's width.
    pub tokens: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// One attention direction of the exchange.
#[derive(Clone, Copy, Debug)]
pub struct CcaDirection {
    /// [d_q x d_q] query projection.
    pub wq: ParamId,
    /// [d_src x d_q] key projection applied to the other stream's latents.
    pub wk_src: ParamId,
    /// [d_src x d_q] value projection applied to the other stream's latents.
    pub wv_src: ParamId,
    /// Context bank; absent in the gated baseline variant.
    pub lct: Option<CcaLct>,
    /// [d_q x d_q] output projection (zero-initialized).
    pub wo: ParamId,
    pub heads: usize,
}

/// Both directions of one block's exchange.
#[derive(Clone, Debug)]
pub struct CcaBlock {
    /// Video queries, audio KV.
    pub a2v: CcaDirection,
    /// Audio queries, video KV.
    pub v2a: CcaDirection,
}

/// Rotary tables for the cross-modal projections. Audio positions are the
/// rescaled fractional ones; video tokens share their frame's integer
/// position. Key tables live in the opposite stream's width because the
/// projections cross dimensions.
pub struct CrossRopeTables<S: Scalar> {
    pub video_q: RopeTable<S>,
    pub audio_k: RopeTable<S>,
    pub audio_q: RopeTable<S>,
    pub video_k: RopeTable<S>,
}

impl<S: Scalar> CrossRopeTables<S> {
    pub fn build(
        meta: &GridMeta,
        dim_audio: usize,
        dim_video: usize,
        heads: usize,
        base: f64,
    ) -> Result<Self> {
        let audio_pos = audio_rope_positions(meta)?;
        let hd_v = head_dim(dim_video, heads)?;
        let hd_a = head_dim(dim_audio, heads)?;
        Ok(CrossRopeTables {
            video_q: RopeTable::video_frame_temporal(meta, dim_video, hd_v, base)?,
            audio_k: RopeTable::temporal(&audio_pos, dim_video, hd_v, base)?,
            audio_q: RopeTable::temporal(&audio_pos, dim_audio, hd_a, base)?,
            video_k: RopeTable::video_frame_temporal(meta, dim_audio, hd_a, base)?,
        })
    }
}

fn head_dim(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 || (dim / heads) % 2 != 0 {
        return Err(Error::contract(format!(
            "dim {dim} must split into an even head dim across {heads} heads"
        )));
    }
    Ok(dim / heads)
}

/// Head-averaged attention weights of one direction, exported for analysis.
#[derive(Clone, Debug)]
pub struct AttnMap<S: Scalar> {
    pub rows: usize,
    pub q_len: usize,
    pub kv_len: usize,
    /// How many trailing KV columns are context tokens.
    pub n_lct: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> AttnMap<S> {
    /// Per-query attention mass on the context-token columns: the sum over
    /// the last `n_lct` columns, shaped [rows x q_len].
    pub fn lct_mass(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.rows * self.q_len);
        for rq in 0..self.rows * self.q_len {
            let base = rq * self.kv_len + (self.kv_len - self.n_lct);
            let mut acc = S::zero();
            for j in 0..self.n_lct {
                acc = acc + self.data[base + j];
            }
            out.push(acc);
        }
        out
    }
}

/// All six cross projections, shaped per the cross-dimension contract:
/// `q_a: [b, t_a, d_a]`, `k_a/v_a: [b, t_a, d_v]`, `q_v: [b, s_v, d_v]`,
/// `k_v/v_v: [b, s_v, d_a]`.
pub struct CrossQkv {
    pub q_a: ValueId,
    pub k_a: ValueId,
    pub v_a: ValueId,
    pub q_v: ValueId,
    pub k_v: ValueId,
    pub v_v: ValueId,
}

pub fn project_cross_qkv<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    leaves: &mut ParamLeaves,
    block: &CcaBlock,
    x_a: ValueId,
    x_v: ValueId,
) -> Result<CrossQkv> {
    let proj = |tape: &mut Tape<S>, leaves: &mut ParamLeaves, x: ValueId, w: ParamId| {
        let wl = leaves.leaf(tape, store, w)?;
        tape.matmul(x, wl)
    };
    Ok(CrossQkv {
        q_a: proj(tape, leaves, x_a, block.v2a.wq)?,
        k_a: proj(tape, leaves, x_a, block.a2v.wk_src)?,
        v_a: proj(tape, leaves, x_a, block.a2v.wv_src)?,
        q_v: proj(tape, leaves, x_v, block.a2v.wq)?,
        k_v: proj(tape, leaves, x_v, block.v2a.wk_src)?,
        v_v: proj(tape, leaves, x_v, block.v2a.wv_src)?,
    })
}

/// Concatenate partitioned latent KV with the projected, row-tiled context
/// bank (latents first, bank last). Returns the assembled pair and how many
/// trailing columns are bank tokens; `None` when no source participates.
pub fn assemble_context_kv<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    leaves: &mut ParamLeaves,
    latent_kv: Option<(ValueId, ValueId)>,
    lct: Option<&CcaLct>,
    rows: usize,
) -> Result<Option<(ValueId, ValueId, usize)>> {
    let bank = match lct {
        Some(l) if store.get(l.tokens).shape()[0] > 0 => {
            let tok = leaves.leaf(tape, store, l.tokens)?;
            let wk = leaves.leaf(tape, store, l.wk)?;
            let wv = leaves.leaf(tape, store, l.wv)?;
            let k = tape.matmul(tok, wk)?;
            let v = tape.matmul(tok, wv)?;
            let n = store.get(l.tokens).shape()[0];
            Some((tape.repeat_rows(k, rows)?, tape.repeat_rows(v, rows)?, n))
        }
        _ => None,
    };
    match (latent_kv, bank) {
        (None, None) => Ok(None),
        (Some((k, v)), None) => Ok(Some((k, v, 0))),
        (None, Some((k, v, n))) => Ok(Some((k, v, n))),
        (Some((lk, lv)), Some((bk, bv, n))) => {
            let k = tape.concat_mid(lk, bk)?;
            let v = tape.concat_mid(lv, bv)?;
            Ok(Some((k, v, n)))
        }
    }
}

/// Concatenate two score tensors `[rows, heads, q_len, n1]` and
/// `[rows, heads, q_len, n2]` along the last axis.
fn concat_lastdim<S: Scalar>(tape: &mut Tape<S>, a: ValueId, b: ValueId) -> Result<ValueId> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    let lead: usize = sa[..sa.len() - 1].iter().product();
    let (n1, n2) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let ar = tape.reshape(a, vec![lead, n1, 1])?;
    let br = tape.reshape(b, vec![lead, n2, 1])?;
    let cat = tape.concat_mid(ar, br)?;
    let mut out_shape = sa;
    *out_shape.last_mut().unwrap() = n1 + n2;
    tape.reshape(cat, out_shape)
}

/// Multi-head scaled dot-product attention over `[rows, len, dim]` inputs.
/// Optionally captures the head-averaged attention weights.
pub fn scaled_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
    heads: usize,
    capture: bool,
) -> Result<(ValueId, Option<AttnMap<S>>)> {
    let dim = *tape.shape(q).last().ok_or_else(|| Error::shape("attention", "rank-0 q"))?;
    let dh = head_dim(dim, heads).map_err(|_| {
        Error::contract(format!("attention dim {dim} not divisible into {heads} even heads"))
    })?;
    let qs = tape.split_heads(q, heads)?;
    let ks = tape.split_heads(k, heads)?;
    let vs = tape.split_heads(v, heads)?;
    let scores = tape.matmul_nt(qs, ks)?;
    let scaled = tape.scale(scores, S::one() / S::from_f64((dh as f64).sqrt()))?;
    let attn = tape.softmax_lastdim(scaled)?;
    let map = if capture {
        let shape = tape.shape(attn).to_vec(); // [rows, heads, q_len, kv_len]
        let (rows, q_len, kv_len) = (shape[0], shape[2], shape[3]);
        let data = head_mean(tape.value(attn), rows, heads, q_len, kv_len);
        Some(AttnMap { rows, q_len, kv_len, n_lct: 0, data })
    } else {
        None
    };
    let out = tape.matmul(attn, vs)?;
    let merged = tape.merge_heads(out)?;
    Ok((merged, map))
}

fn head_mean<S: Scalar>(data: &[S], rows: usize, heads: usize, q_len: usize, kv_len: usize) -> Vec<S> {
    let inv = S::one() / S::from_f64(heads as f64);
    let mut out = vec![S::zero(); rows * q_len * kv_len];
    for r in 0..rows {
        for h in 0..heads {
            let base = ((r * heads + h) * q_len) * kv_len;
            let dst = r * q_len * kv_len;
            for i in 0..q_len * kv_len {
                out[dst + i] = out[dst + i] + data[base + i] * inv;
            }
        }
    }
    out
}

/// Residual deltas of one block's exchange, plus any captured maps.
pub struct CcaOutput<S: Scalar> {
    pub delta_audio: Option<ValueId>,
    pub delta_video: Option<ValueId>,
    pub map_a2v: Option<AttnMap<S>>,
    pub map_v2a: Option<AttnMap<S>>,
}

/// Everything the exchange needs besides the per-block parameters.
pub struct CcaContext<'a, S: Scalar> {
    pub store: &'a ParamStore<S>,
    pub meta: &'a GridMeta,
    pub window: &'a WindowMap,
    pub rope: &'a CrossRopeTables<S>,
    pub capture_maps: bool,
}

struct DirectionIo<'a, S: Scalar> {
    dir: &'a CcaDirection,
    /// [b, lq_total, d_q] normalized latents of the query stream.
    q_input: ValueId,
    /// Normalized latents of the source stream, when routed in.
    kv_source: Option<ValueId>,
    detach_kv: bool,
    use_lct: bool,
    rope_q: &'a RopeTable<S>,
    rope_k: &'a RopeTable<S>,
    rows: usize,
    q_len: usize,
}

fn direction_forward<S: Scalar>(
    tape: &mut Tape<S>,
    leaves: &mut ParamLeaves,
    ctx: &CcaContext<'_, S>,
    io: DirectionIo<'_, S>,
    partition: impl FnOnce(&mut Tape<S>, ValueId, ValueId) -> Result<(ValueId, ValueId)>,
) -> Result<(Option<ValueId>, Option<AttnMap<S>>)> {
    let store = ctx.store;
    let d_q = dim_of(store, io.dir.wq);
    let heads = io.dir.heads;
    let dh = head_dim(d_q, heads)?;
    let q_shape = tape.shape(io.q_input).to_vec();
    let b = q_shape[0];

    let latent_kv = match io.kv_source {
        Some(src) => {
            let src = if io.detach_kv { tape.detach(src) } else { src };
            let wk = leaves.leaf(tape, store, io.dir.wk_src)?;
            let wv = leaves.leaf(tape, store, io.dir.wv_src)?;
            let k = tape.matmul(src, wk)?;
            let k = io.rope_k.apply(tape, k)?;
            let v = tape.matmul(src, wv)?;
            Some(partition(tape, k, v)?)
        }
        None => None,
    };
    let lct_kv = match io.dir.lct {
        Some(l) if io.use_lct && store.get(l.tokens).shape()[0] > 0 => {
            let tok = leaves.leaf(tape, store, l.tokens)?;
            let wk = leaves.leaf(tape, store, l.wk)?;
            let wv = leaves.leaf(tape, store, l.wv)?;
            let k = tape.matmul(tok, wk)?;
            let v = tape.matmul(tok, wv)?;
            let n = store.get(l.tokens).shape()[0];
            Some((tape.repeat_rows(k, io.rows)?, tape.repeat_rows(v, io.rows)?, n))
        }
        _ => None,
    };
    if latent_kv.is_none() && lct_kv.is_none() {
        return Ok((None, None));
    }

    let wq = leaves.leaf(tape, store, io.dir.wq)?;
    let q_proj = tape.matmul(io.q_input, wq)?;
    let scale = S::one() / S::from_f64((dh as f64).sqrt());

    let mut scores: Option<ValueId> = None;
    let mut values: Option<ValueId> = None;
    let mut n_lct = 0;
    if let Some((k_lat, v_lat)) = latent_kv {
        // rotated query against rotated latent keys
        let qr = io.rope_q.apply(tape, q_proj)?;
        let qr = tape.reshape(qr, vec![io.rows, io.q_len, d_q])?;
        let qs = tape.split_heads(qr, heads)?;
        let ks = tape.split_heads(k_lat, heads)?;
        let s = tape.matmul_nt(qs, ks)?;
        scores = Some(tape.scale(s, scale)?);
        values = Some(v_lat);
    }
    if let Some((k_l, v_l, n)) = lct_kv {
        // raw query against raw bank keys: no positional signal on bank columns
        let q_raw = tape.reshape(q_proj, vec![io.rows, io.q_len, d_q])?;
        let qs = tape.split_heads(q_raw, heads)?;
        let ks = tape.split_heads(k_l, heads)?;
        let s = tape.matmul_nt(qs, ks)?;
        let s = tape.scale(s, scale)?;
        scores = Some(match scores {
            Some(prev) => concat_lastdim(tape, prev, s)?,
            None => s,
        });
        values = Some(match values {
            Some(prev) => tape.concat_mid(prev, v_l)?,
            None => v_l,
        });
        n_lct = n;
    }

    let attn = tape.softmax_lastdim(scores.expect("at least one KV source"))?;
    let map = if ctx.capture_maps {
        let shape = tape.shape(attn).to_vec();
        let (rows, q_len, kv_len) = (shape[0], shape[2], shape[3]);
        let data = head_mean(tape.value(attn), rows, heads, q_len, kv_len);
        Some(AttnMap { rows, q_len, kv_len, n_lct, data })
    } else {
        None
    };
    let vs = tape.split_heads(values.expect("values follow scores"), heads)?;
    let out = tape.matmul(attn, vs)?;
    let merged = tape.merge_heads(out)?;
    let flat = tape.reshape(merged, vec![b, q_shape[1], d_q])?;
    let wo = leaves.leaf(tape, store, io.dir.wo)?;
    Ok((Some(tape.matmul(flat, wo)?), map))
}

/// Run one block's bidirectional exchange on the (already normalized)
/// stream latents. Inputs are `[b, t_a, d_a]` and `[b, s_v, d_v]`; the
/// returned deltas match them and the caller adds the residuals. A stream
/// marked as reference in the plan has its latents detached before they
/// enter the other direction's KV projections.
pub fn cca_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    leaves: &mut ParamLeaves,
    ctx: &CcaContext<'_, S>,
    block: &CcaBlock,
    audio_normed: Option<ValueId>,
    video_normed: Option<ValueId>,
    plan: &RoutingPlan,
) -> Result<CcaOutput<S>> {
    let mut out = CcaOutput {
        delta_audio: None,
        delta_video: None,
        map_a2v: None,
        map_v2a: None,
    };

    // audio-to-video: video queries
    if let Some(v_in) = video_normed {
        let b = tape.shape(v_in)[0];
        let s_v = ctx.meta.video_tokens();
        if tape.shape(v_in) != [b, s_v, dim_of(ctx.store, block.a2v.wq)] {
            return Err(Error::shape(
                "cca_block_forward",
                format!("video latents {}", fmt_shape(tape.shape(v_in))),
            ));
        }
        let io = DirectionIo {
            dir: &block.a2v,
            q_input: v_in,
            kv_source: if plan.video.use_cross_latent { audio_normed } else { None },
            detach_kv: plan.audio.is_reference,
            use_lct: plan.video.use_lct,
            rope_q: &ctx.rope.video_q,
            rope_k: &ctx.rope.audio_k,
            rows: b * ctx.meta.t_v,
            q_len: ctx.meta.h * ctx.meta.w,
        };
        let (delta, map) = direction_forward(tape, leaves, ctx, io, |t, k, v| {
            partition_audio_kv(t, k, v, ctx.window)
        })?;
        out.delta_video = delta;
        out.map_a2v = map;
    }

    // video-to-audio: audio queries
    if let Some(a_in) = audio_normed {
        let b = tape.shape(a_in)[0];
        let t_a = ctx.meta.t_a;
        if tape.shape(a_in) != [b, t_a, dim_of(ctx.store, block.v2a.wq)] {
            return Err(Error::shape(
                "cca_block_forward",
                format!("audio latents {}", fmt_shape(tape.shape(a_in))),
            ));
        }
        let io = DirectionIo {
            dir: &block.v2a,
            q_input: a_in,
            kv_source: if plan.audio.use_cross_latent { video_normed } else { None },
            detach_kv: plan.video.is_reference,
            use_lct: plan.audio.use_lct,
            rope_q: &ctx.rope.audio_q,
            rope_k: &ctx.rope.video_k,
            rows: b * t_a,
            q_len: 1,
        };
        let (delta, map) = direction_forward(tape, leaves, ctx, io, |t, k, v| {
            partition_video_kv(t, k, v, ctx.window, ctx.meta)
        })?;
        out.delta_audio = delta;
        out.map_v2a = map;
    }

    Ok(out)
}

fn dim_of<S: Scalar>(store: &ParamStore<S>, wq: ParamId) -> usize {
    store.get(wq).shape()[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tarp::{build_window_map, DEFAULT_ROPE_BASE};
    use crate::tensor::Tensor;
    use rand::Rng;

    const D_A: usize = 4;
    const D_V: usize = 8;
    const HEADS: usize = 2;

    fn randn(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    struct Fixture {
        store: ParamStore<f64>,
        block: CcaBlock,
        meta: GridMeta,
        window: WindowMap,
        rope: CrossRopeTables<f64>,
    }

    fn fixture(meta: GridMeta, n_a: usize, n_v: usize, zero_wo: bool) -> Fixture {
        let mut rng = rng_from(7);
        let mut store = ParamStore::new();
        let dir = |store: &mut ParamStore<f64>,
                       rng: &mut rand_chacha::ChaCha8Rng,
                       tag: &str,
                       d_q: usize,
                       d_src: usize,
                       n: usize| {
            let wq = store.add(format!("{tag}.wq"), randn(rng, vec![d_q, d_q], 0.3)).unwrap();
            let wk = store.add(format!("{tag}.wk"), randn(rng, vec![d_src, d_q], 0.3)).unwrap();
            let wv = store.add(format!("{tag}.wv"), randn(rng, vec![d_src, d_q], 0.3)).unwrap();
            let wo = if zero_wo {
                store.add(format!("{tag}.wo"), Tensor::zeros(vec![d_q, d_q])).unwrap()
            } else {
                store.add(format!("{tag}.wo"), randn(rng, vec![d_q, d_q], 0.3)).unwrap()
            };
            let lct = Some(CcaLct {
                tokens: store.add(format!("{tag}.lct"), randn(rng, vec![n, d_q], 0.5)).unwrap(),
                wk: store.add(format!("{tag}.lct_wk"), randn(rng, vec![d_q, d_q], 0.3)).unwrap(),
                wv: store.add(format!("{tag}.lct_wv"), randn(rng, vec![d_q, d_q], 0.3)).unwrap(),
            });
            CcaDirection { wq, wk_src: wk, wv_src: wv, lct, wo, heads: HEADS }
        };
        let a2v = dir(&mut store, &mut rng, "a2v", D_V, D_A, n_a);
        let v2a = dir(&mut store, &mut rng, "v2a", D_A, D_V, n_v);
        let window = build_window_map(&meta).unwrap();
        let rope = CrossRopeTables::build(&meta, D_A, D_V, HEADS, DEFAULT_ROPE_BASE).unwrap();
        Fixture { store, block: CcaBlock { a2v, v2a }, meta, window, rope }
    }

    fn run_block(
        fx: &Fixture,
        x_a: &Tensor<f64>,
        x_v: &Tensor<f64>,
        plan: &RoutingPlan,
        capture: bool,
    ) -> (Option<Tensor<f64>>, Option<Tensor<f64>>, Option<AttnMap<f64>>, Option<AttnMap<f64>>) {
        let mut tape = Tape::no_grad();
        let mut leaves = ParamLeaves::new(&fx.store);
        let a = tape.leaf(x_a).unwrap();
        let v = tape.leaf(x_v).unwrap();
        let ctx = CcaContext {
            store: &fx.store,
            meta: &fx.meta,
            window: &fx.window,
            rope: &fx.rope,
            capture_maps: capture,
        };
        let out =
            cca_block_forward(&mut tape, &mut leaves, &ctx, &fx.block, Some(a), Some(v), plan)
                .unwrap();
        (
            out.delta_audio.map(|id| tape.to_tensor(id)),
            out.delta_video.map(|id| tape.to_tensor(id)),
            out.map_a2v,
            out.map_v2a,
        )
    }

    #[test]
    fn qkv_projection_shapes_cross_dimensions() {
        let meta = GridMeta::new(8, 4, 2, 2).unwrap();
        let fx = fixture(meta, 3, 5, false);
        let mut rng = rng_from(1);
        let x_a = randn(&mut rng, vec![2, 8, D_A], 1.0);
        let x_v = randn(&mut rng, vec![2, 16, D_V], 1.0);
        let mut tape = Tape::no_grad();
        let mut leaves = ParamLeaves::new(&fx.store);
        let a = tape.leaf(&x_a).unwrap();
        let v = tape.leaf(&x_v).unwrap();
        let qkv = project_cross_qkv(&mut tape, &fx.store, &mut leaves, &fx.block, a, v).unwrap();
        assert_eq!(tape.shape(qkv.q_a), &[2, 8, D_A]);
        assert_eq!(tape.shape(qkv.k_a), &[2, 8, D_V]);
        assert_eq!(tape.shape(qkv.v_a), &[2, 8, D_V]);
        assert_eq!(tape.shape(qkv.q_v), &[2, 16, D_V]);
        assert_eq!(tape.shape(qkv.k_v), &[2, 16, D_A]);
        assert_eq!(tape.shape(qkv.v_v), &[2, 16, D_A]);
    }

    #[test]
    fn zero_inputs_project_to_zero() {
        let meta = GridMeta::new(4, 2, 1, 2).unwrap();
        let fx = fixture(meta, 2, 2, false);
        let mut tape = Tape::no_grad();
        let mut leaves = ParamLeaves::new(&fx.store);
        let a = tape.leaf(&Tensor::zeros(vec![1, 4, D_A])).unwrap();
        let v = tape.leaf(&Tensor::zeros(vec![1, 4, D_V])).unwrap();
        let qkv = project_cross_qkv(&mut tape, &fx.store, &mut leaves, &fx.block, a, v).unwrap();
        for id in [qkv.q_a, qkv.k_a, qkv.v_a, qkv.q_v, qkv.k_v, qkv.v_v] {
            assert!(tape.value(id).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn assemble_without_bank_passes_latents_through() {
        let meta = GridMeta::new(8, 2, 1, 1).unwrap();
        let fx = fixture(meta, 0, 0, false);
        let mut tape = Tape::no_grad();
        let mut leaves = ParamLeaves::new(&fx.store);
        let mut rng = rng_from(3);
        let k = tape.leaf(&randn(&mut rng, vec![2, 12, D_V], 1.0)).unwrap();
        let v = tape.leaf(&randn(&mut rng, vec![2, 12, D_V], 1.0)).unwrap();
        let (k2, v2, n) = assemble_context_kv(
            &mut tape,
            &fx.store,
            &mut leaves,
            Some((k, v)),
            fx.block.a2v.lct.as_ref(),
            2,
        )
        .unwrap()
        .unwrap();
        assert_eq!(n, 0);
        assert_eq!(tape.value(k2), tape.value(k));
        assert_eq!(tape.value(v2), tape.value(v));
    }

    #[test]
    fn assemble_appends_identical_bank_rows() {
        // s=12 latent columns + 8 bank tokens -> kv_len 20, bank tail equal
        // across every batch-frame row.
        let meta = GridMeta::new(16, 4, 1, 1).unwrap();
        let fx = fixture(meta, 8, 4, false);
        let mut tape = Tape::no_grad();
        let mut leaves = ParamLeaves::new(&fx.store);
        let mut rng = rng_from(4);
        let rows = 8;
        let k = tape.leaf(&randn(&mut rng, vec![rows, 12, D_V], 1.0)).unwrap();
        let v = tape.leaf(&randn(&mut rng, vec![rows, 12, D_V], 1.0)).unwrap();
        let (k_hat, _, n) = assemble_context_kv(
            &mut tape,
            &fx.store,
            &mut leaves,
            Some((k, v)),
            fx.block.a2v.lct.as_ref(),
            rows,
        )
        .unwrap()
        .unwrap();
        assert_eq!(n, 8);
        assert_eq!(tape.shape(k_hat), &[rows, 20, D_V]);
        let data = tape.value(k_hat);
        let tail = |r: usize| &data[(r * 20 + 12) * D_V..(r + 1) * 20 * D_V];
        for r in 1..rows {
            assert_eq!(tail(r), tail(0));
        }
    }

    #[test]
    fn bank_rows_ignore_latent_positions() {
        // Rotating latent positions must leave the bank's key rows
        // bit-identical: the bank never sees rotary embedding.
        let meta = GridMeta::new(8, 4, 1, 2).unwrap();
        let fx = fixture(meta, 3, 3, false);
        let mut rng = rng_from(5);
        let x_a = randn(&mut rng, vec![1, 8, D_A], 1.0);

        let tail_of = |shift: f64| -> Vec<f64> {
            let mut tape = Tape::no_grad();
            let mut leaves = ParamLeaves::new(&fx.store);
            let a = tape.leaf(&x_a).unwrap();
            let wk = leaves.leaf(&mut tape, &fx.store, fx.block.a2v.wk_src).unwrap();
            let k = tape.matmul(a, wk).unwrap();
            let positions: Vec<f64> =
                audio_rope_positions(&fx.meta).unwrap().iter().map(|p| p + shift).collect();
            let table =
                RopeTable::temporal(&positions, D_V, D_V / HEADS, DEFAULT_ROPE_BASE).unwrap();
            let k = table.apply(&mut tape, k).unwrap();
            let v = tape.detach(k);
            let (pk, pv) = partition_audio_kv(&mut tape, k, v, &fx.window).unwrap();
            let _ = pv;
            let (k_hat, _, n) = assemble_context_kv(
                &mut tape,
                &fx.store,
                &mut leaves,
                Some((pk, pk)),
                fx.block.a2v.lct.as_ref(),
                4,
            )
            .unwrap()
            .unwrap();
            let kv_len = tape.shape(k_hat)[1];
            let data = tape.value(k_hat);
            (0..4)
                .flat_map(|r| {
                    data[(r * kv_len + (kv_len - n)) * D_V..(r + 1) * kv_len * D_V].to_vec()
                })
                .collect()
        };
        let a = tail_of(0.0);
        let b = tail_of(2.5);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let mut tape = Tape::<f64>::no_grad();
        let mut rng = rng_from(6);
        let q = tape.leaf(&randn(&mut rng, vec![2, 3, 4], 1.0)).unwrap();
        let k = tape.leaf(&randn(&mut rng, vec![2, 1, 4], 1.0)).unwrap();
        let value = randn(&mut rng, vec![2, 1, 4], 1.0);
        let v = tape.leaf(&value).unwrap();
        let (out, _) = scaled_attention(&mut tape, q, k, v, 2, false).unwrap();
        let got = tape.value(out);
        for row in 0..2 {
            for ql in 0..3 {
                let base = (row * 3 + ql) * 4;
                let want = &value.data()[row * 4..(row + 1) * 4];
                for j in 0..4 {
                    assert!((got[base + j] - want[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_equal_logits_average_values() {
        let mut tape = Tape::<f64>::no_grad();
        let mut rng = rng_from(8);
        // zero keys force equal logits regardless of q
        let q = tape.leaf(&randn(&mut rng, vec![1, 2, 4], 1.0)).unwrap();
        let k = tape.leaf(&Tensor::zeros(vec![1, 5, 4])).unwrap();
        let value = randn(&mut rng, vec![1, 5, 4], 1.0);
        let v = tape.leaf(&value).unwrap();
        let (out, _) = scaled_attention(&mut tape, q, k, v, 1, false).unwrap();
        let got = tape.value(out);
        for j in 0..4 {
            let mean: f64 = (0..5).map(|i| value.data()[i * 4 + j]).sum::<f64>() / 5.0;
            assert!((got[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_dense_oracle_single_head() {
        let mut rng = rng_from(9);
        let (lq, lk, d) = (3, 5, 4);
        let q = randn(&mut rng, vec![1, lq, d], 1.0);
        let k = randn(&mut rng, vec![1, lk, d], 1.0);
        let v = randn(&mut rng, vec![1, lk, d], 1.0);
        // explicit softmax/matmul oracle
        let mut expect = vec![0.0f64; lq * d];
        for i in 0..lq {
            let mut logits = vec![0.0f64; lk];
            for j in 0..lk {
                for c in 0..d {
                    logits[j] += q.data()[i * d + c] * k.data()[j * d + c];
                }
                logits[j] /= (d as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..lk {
                for c in 0..d {
                    expect[i * d + c] += exps[j] / z * v.data()[j * d + c];
                }
            }
        }
        let mut tape = Tape::no_grad();
        let qi = tape.leaf(&q).unwrap();
        let ki = tape.leaf(&k).unwrap();
        let vi = tape.leaf(&v).unwrap();
        let (out, map) = scaled_attention(&mut tape, qi, ki, vi, 1, true).unwrap();
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // captured rows sum to 1
        let map = map.unwrap();
        for row in map.data.chunks(map.kv_len) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rejects_non_divisible_heads() {
        let mut tape = Tape::<f64>::no_grad();
        let q = tape.leaf(&Tensor::zeros(vec![1, 2, 6])).unwrap();
        let k = tape.leaf(&Tensor::zeros(vec![1, 2, 6])).unwrap();
        let v = tape.leaf(&Tensor::zeros(vec![1, 2, 6])).unwrap();
        assert!(matches!(
            scaled_attention(&mut tape, q, k, v, 4, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lct_only_routing_ignores_other_streams_latents() {
        let meta = GridMeta::new(8, 4, 2, 2).unwrap();
        let fx = fixture(meta, 4, 4, false);
        let mut rng = rng_from(10);
        let x_v = randn(&mut rng, vec![1, 16, D_V], 1.0);
        let x_a1 = randn(&mut rng, vec![1, 8, D_A], 1.0);
        let x_a2 = randn(&mut rng, vec![1, 8, D_A], 1.0);
        let plan = RoutingPlan::lct_only_inference();
        let (_, dv1, _, _) = run_block(&fx, &x_a1, &x_v, &plan, false);
        let (_, dv2, _, _) = run_block(&fx, &x_a2, &x_v, &plan, false);
        assert_eq!(dv1.unwrap().data(), dv2.unwrap().data());
    }

    #[test]
    fn joint_with_empty_banks_is_plain_partitioned_cross_attention() {
        let meta = GridMeta::new(8, 4, 2, 2).unwrap();
        let fx = fixture(meta, 0, 0, false);
        let mut rng = rng_from(11);
        let x_a = randn(&mut rng, vec![1, 8, D_A], 1.0);
        let x_v = randn(&mut rng, vec![1, 16, D_V], 1.0);
        let joint = RoutingPlan::joint_inference();
        let (da, dv, map_a2v, _) = run_block(&fx, &x_a, &x_v, &joint, true);
        assert!(da.is_some() && dv.is_some());
        // kv_len carries no bank columns
        let m = map_a2v.unwrap();
        assert_eq!(m.n_lct, 0);
        assert_eq!(m.kv_len, fx.window.audio_span);
    }

    #[test]
    fn drop_plan_produces_no_residual() {
        let meta = GridMeta::new(4, 2, 1, 1).unwrap();
        let fx = fixture(meta, 2, 2, false);
        let mut rng = rng_from(12);
        let x_a = randn(&mut rng, vec![1, 4, D_A], 1.0);
        let x_v = randn(&mut rng, vec![1, 2, D_V], 1.0);
        let plan = RoutingPlan::drop_cross_inference();
        let (da, dv, _, _) = run_block(&fx, &x_a, &x_v, &plan, false);
        assert!(da.is_none() && dv.is_none());
    }

    #[test]
    fn output_is_shift_invariant_in_time() {
        // Shifting every temporal position by a constant leaves the full
        // exchange invariant: latent-latent logits only see relative
        // positions, the bank sees none at all.
        let meta = GridMeta::new(8, 4, 2, 2).unwrap();
        let fx = fixture(meta, 4, 6, false);
        let mut rng = rng_from(13);
        let x_a = randn(&mut rng, vec![1, 8, D_A], 1.0);
        let x_v = randn(&mut rng, vec![1, 16, D_V], 1.0);

        let run_with_shift = |delta: f64| -> (Vec<f64>, Vec<f64>) {
            let audio_pos: Vec<f64> =
                audio_rope_positions(&fx.meta).unwrap().iter().map(|p| p + delta).collect();
            let frame_pos: Vec<f64> = (0..fx.meta.video_tokens())
                .map(|i| (i / (fx.meta.h * fx.meta.w)) as f64 + delta)
                .collect();
            let rope = CrossRopeTables {
                video_q: RopeTable::temporal(&frame_pos, D_V, D_V / HEADS, DEFAULT_ROPE_BASE)
                    .unwrap(),
                audio_k: RopeTable::temporal(&audio_pos, D_V, D_V / HEADS, DEFAULT_ROPE_BASE)
                    .unwrap(),
                audio_q: RopeTable::temporal(&audio_pos, D_A, D_A / HEADS, DEFAULT_ROPE_BASE)
                    .unwrap(),
                video_k: RopeTable::temporal(&frame_pos, D_A, D_A / HEADS, DEFAULT_ROPE_BASE)
                    .unwrap(),
            };
            let mut tape = Tape::no_grad();
            let mut leaves = ParamLeaves::new(&fx.store);
            let a = tape.leaf(&x_a).unwrap();
            let v = tape.leaf(&x_v).unwrap();
            let ctx = CcaContext {
                store: &fx.store,
                meta: &fx.meta,
                window: &fx.window,
                rope: &rope,
                capture_maps: false,
            };
            let plan = RoutingPlan::joint_inference();
            let out = cca_block_forward(&mut tape, &mut leaves, &ctx, &fx.block, Some(a), Some(v), &plan)
                .unwrap();
            (
                tape.value(out.delta_audio.unwrap()).to_vec(),
                tape.value(out.delta_video.unwrap()).to_vec(),
            )
        };
        let (a0, v0) = run_with_shift(0.0);
        let (a1, v1) = run_with_shift(3.25);
        for (x, y) in a0.iter().zip(a1.iter()).chain(v0.iter().zip(v1.iter())) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn captured_map_rows_sum_to_one() {
        let meta = GridMeta::new(8, 4, 2, 2).unwrap();
        let fx = fixture(meta, 4, 6, false);
        let mut rng = rng_from(14);
        let x_a = randn(&mut rng, vec![2, 8, D_A], 1.0);
        let x_v = randn(&mut rng, vec![2, 16, D_V], 1.0);
        let (_, _, ma, mv) = run_block(&fx, &x_a, &x_v, &RoutingPlan::joint_inference(), true);
        for map in [ma.unwrap(), mv.unwrap()] {
            for row in map.data.chunks(map.kv_len) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            // mass on bank columns is a probability
            for m in map.lct_mass() {
                assert!((0.0..=1.0 + 1e-9).contains(&m));
            }
        }
    }
}
