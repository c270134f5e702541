//! Synthetic paired audio-video data with known cross-modal structure.
//!
//! Each sample is a short clip of per-frame pulse events. An event at video
//! frame `f` brightens a class-positioned blob of pixels at that frame and
//! simultaneously raises the audio amplitude on exactly the aligned token
//! span `[f*c, (f+1)*c)`. Everything else is independent Gaussian noise, so
//! the foreground/background split and the temporal alignment are both known
//! exactly, which is what the attention analysis and the sync metric need.
//!
//! Generation is stateless per `(seed, index)`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed_indexed, rng_from};
use crate::scalar::Scalar;
use crate::tarp::GridMeta;
use crate::tensor::{fmt_shape, Tensor};

/// Peak event amplitude in both modalities.
pub const EVENT_AMP: f64 = 1.0;
/// Channel-RMS of the audio oscillation basis (quadrature pairs).
pub const OSC_RMS: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub grid: GridMeta,
    pub n_classes: usize,
    /// Per-frame event probability in (0, 1); exactly 0 disables events.
    pub event_rate: f64,
    pub noise_std: f64,
    pub signal_channels: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(0.0..1.0).contains(&self.event_rate) {
            return Err(Error::contract(format!(
                "event_rate must lie in [0, 1), got {}",
                self.event_rate
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::contract("noise_std must be nonnegative"));
        }
        if self.n_classes == 0 || self.signal_channels == 0 {
            return Err(Error::contract("n_classes and signal_channels must be positive"));
        }
        Ok(())
    }

    pub fn toy_default(seed: u64) -> Self {
        DatasetSpec {
            grid: GridMeta { t_a: 32, t_v: 8, h: 4, w: 4 },
            n_classes: 4,
            event_rate: 0.4,
            noise_std: 0.1,
            signal_channels: 4,
            seed,
        }
    }
}

/// One paired sequence with its ground truth.
#[derive(Clone, Debug)]
pub struct AVSample<S: Scalar> {
    /// [t_v, h, w, c]
    pub video: Tensor<S>,
    /// [t_a, c]
    pub audio: Tensor<S>,
    pub class_id: usize,
    /// Blob pixels at event frames, length t_v*h*w.
    pub fg_video_mask: Vec<bool>,
    /// Event-active tokens, length t_a.
    pub fg_audio_mask: Vec<bool>,
    pub event_frames: Vec<usize>,
}

/// Blob anchor for a class: one of the four corners, cycling.
fn blob_box(class: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let bh = h.min(2);
    let bw = w.min(2);
    let corners = [(0, 0), (0, w - bw), (h - bh, 0), (h - bh, w - bw)];
    let (y0, x0) = corners[class % 4];
    (y0, x0, bh, bw)
}

pub fn generate_pair<S: Scalar>(spec: &DatasetSpec, index: u64) -> Result<AVSample<S>> {
    spec.validate()?;
    let g = &spec.grid;
    let c_frame = g.tokens_per_frame();
    let mut rng = rng_from(derive_seed_indexed(spec.seed, "sample", index));

    let class_id = rng.gen_range(0..spec.n_classes);

    // Draw per-frame events; when enabled, keep the count inside
    // [1, t_v - 1] so every sample has both event and non-event frames.
    let mut events: Vec<bool> = (0..g.t_v).map(|_| rng.gen_bool(spec.event_rate)).collect();
    if spec.event_rate > 0.0 {
        let count = events.iter().filter(|&&e| e).count();
        if count == 0 {
            events[rng.gen_range(0..g.t_v)] = true;
        } else if count == g.t_v && g.t_v > 1 {
            events[rng.gen_range(0..g.t_v)] = false;
        }
    }
    let event_frames: Vec<usize> =
        events.iter().enumerate().filter(|(_, &e)| e).map(|(f, _)| f).collect();

    let (y0, x0, bh, bw) = blob_box(class_id, g.h, g.w);
    let ch = spec.signal_channels;

    // video: event pulses on the blob plus background noise
    let mut video = Vec::with_capacity(g.t_v * g.h * g.w * ch);
    let mut fg_video_mask = Vec::with_capacity(g.t_v * g.h * g.w);
    for f in 0..g.t_v {
        for y in 0..g.h {
            for x in 0..g.w {
                let in_blob = (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x);
                let lit = events[f] && in_blob;
                fg_video_mask.push(lit);
                for _ in 0..ch {
                    let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
                    let v = if lit { EVENT_AMP } else { 0.0 } + spec.noise_std * noise;
                    video.push(S::from_f64(v));
                }
            }
        }
    }

    // audio: class-pitched quadrature oscillation gated by the aligned
    // event span, plus background noise
    let freq = (class_id + 1) as f64;
    let mut audio = Vec::with_capacity(g.t_a * ch);
    let mut fg_audio_mask = Vec::with_capacity(g.t_a);
    for j in 0..g.t_a {
        let frame = j / c_frame.max(1);
        let active = frame < g.t_v && events[frame] && j < c_frame * g.t_v;
        fg_audio_mask.push(active);
        let phase_base = 2.0 * std::f64::consts::PI * freq * j as f64 / g.t_a as f64;
        for k in 0..ch {
            let phase = phase_base + k as f64 * std::f64::consts::FRAC_PI_2;
            let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            let v = if active { EVENT_AMP * phase.sin() } else { 0.0 } + spec.noise_std * noise;
            audio.push(S::from_f64(v));
        }
    }

    Ok(AVSample {
        video: Tensor::new(vec![g.t_v, g.h, g.w, ch], video)?,
        audio: Tensor::new(vec![g.t_a, ch], audio)?,
        class_id,
        fg_video_mask,
        fg_audio_mask,
        event_frames,
    })
}

/// Pearson correlation between the per-frame audio amplitude envelope and
/// the per-frame video brightness.
#[derive(Clone, Copy, Debug)]
pub struct SyncScore {
    pub value: f64,
    /// One of the two series had no variance; the value is defined as 0.
    pub degenerate: bool,
}

pub fn sync_score<S: Scalar>(audio: &Tensor<S>, video: &Tensor<S>) -> Result<SyncScore> {
    if audio.rank() != 2 || video.rank() != 4 {
        return Err(Error::shape(
            "sync_score",
            format!("audio {} video {}", fmt_shape(audio.shape()), fmt_shape(video.shape())),
        ));
    }
    let (t_a, ch) = (audio.shape()[0], audio.shape()[1]);
    let (t_v, h, w, chv) = (
        video.shape()[0],
        video.shape()[1],
        video.shape()[2],
        video.shape()[3],
    );
    if ch != chv || t_a < t_v || t_v == 0 {
        return Err(Error::shape(
            "sync_score",
            format!(
                "incompatible grids: audio {} video {}",
                fmt_shape(audio.shape()),
                fmt_shape(video.shape())
            ),
        ));
    }
    let c_frame = t_a / t_v;

    // audio envelope: per-token channel RMS, averaged over each frame span
    let mut env = vec![0.0f64; t_v];
    for (f, e) in env.iter_mut().enumerate() {
        for j in f * c_frame..(f + 1) * c_frame {
            let mut ss = 0.0;
            for k in 0..ch {
                let v = audio.data()[j * ch + k].as_f64();
                ss += v * v;
            }
            *e += (ss / ch as f64).sqrt();
        }
        *e /= c_frame as f64;
    }
    // video brightness: plain mean per frame
    let per_frame = h * w * ch;
    let mut bright = vec![0.0f64; t_v];
    for (f, b) in bright.iter_mut().enumerate() {
        let base = f * per_frame;
        for i in 0..per_frame {
            *b += video.data()[base + i].as_f64();
        }
        *b /= per_frame as f64;
    }

    Ok(pearson(&env, &bright))
}

fn pearson(a: &[f64], b: &[f64]) -> SyncScore {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-12 || vb < 1e-12 {
        return SyncScore { value: 0.0, degenerate: true };
    }
    SyncScore { value: cov / (va * vb).sqrt(), degenerate: false }
}

/// Seeded, shuffled, infinite batch iterator. Batch `step` draws its sample
/// indices from a stream keyed by `(seed, step)`, so seeking is free and a
/// resumed run sees exactly the batches an uninterrupted one would.
pub struct DatasetIter<S: Scalar> {
    spec: DatasetSpec,
    batch: usize,
    stream_seed: u64,
    step: u64,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> DatasetIter<S> {
    pub fn new(spec: DatasetSpec, batch: usize, stream_seed: u64) -> Result<Self> {
        spec.validate()?;
        if batch == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        Ok(DatasetIter { spec, batch, stream_seed, step: 0, _marker: std::marker::PhantomData })
    }

    pub fn seek(&mut self, step: u64) {
        self.step = step;
    }

    pub fn batch_at(&self, step: u64) -> Result<Vec<AVSample<S>>> {
        let mut rng = rng_from(derive_seed_indexed(self.stream_seed, "batch", step));
        (0..self.batch)
            .map(|_| generate_pair(&self.spec, rng.gen::<u64>()))
            .collect()
    }
}

impl<S: Scalar> Iterator for DatasetIter<S> {
    type Item = Result<Vec<AVSample<S>>>;

    fn next(&mut self) -> Option<Self::Item> {
        let out = self.batch_at(self.step);
        self.step += 1;
        Some(out)
    }
}

/// Stack per-sample tensors into `[b, t_a, c]` and `[b, t_v, h, w, c]`.
pub fn stack_batch<S: Scalar>(samples: &[AVSample<S>]) -> Result<(Tensor<S>, Tensor<S>)> {
    if samples.is_empty() {
        return Err(Error::contract("cannot stack an empty batch"));
    }
    let a_shape = samples[0].audio.shape().to_vec();
    let v_shape = samples[0].video.shape().to_vec();
    let mut audio = Vec::with_capacity(samples.len() * samples[0].audio.numel());
    let mut video = Vec::with_capacity(samples.len() * samples[0].video.numel());
    for s in samples {
        if s.audio.shape() != a_shape || s.video.shape() != v_shape {
            return Err(Error::shape("stack_batch", "samples disagree on grid".to_string()));
        }
        audio.extend_from_slice(s.audio.data());
        video.extend_from_slice(s.video.data());
    }
    let mut a_full = vec![samples.len()];
    a_full.extend(&a_shape);
    let mut v_full = vec![samples.len()];
    v_full.extend(&v_shape);
    Ok((Tensor::new(a_full, audio)?, Tensor::new(v_full, video)?))
}

/// Shuffle helper for building fixed eval sets.
pub fn sample_indices(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = rng_from(derive_seed_indexed(seed, "eval-set", 0));
    let mut v: Vec<u64> = (0..count as u64 * 4).collect();
    v.shuffle(&mut rng);
    v.truncate(count);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec::toy_default(77)
    }

    #[test]
    fn degenerate_spec_gives_silent_constant_sample() {
        let mut s = spec();
        s.noise_std = 0.0;
        s.event_rate = 0.0;
        let p: AVSample<f64> = generate_pair(&s, 3).unwrap();
        assert!(p.audio.data().iter().all(|&v| v == 0.0));
        assert!(p.video.data().iter().all(|&v| v == 0.0));
        assert!(p.fg_audio_mask.iter().all(|&m| !m));
        assert!(p.fg_video_mask.iter().all(|&m| !m));
        assert!(p.event_frames.is_empty());
    }

    #[test]
    fn audio_mask_covers_aligned_token_spans() {
        let s = spec();
        for idx in 0..20u64 {
            let p: AVSample<f64> = generate_pair(&s, idx).unwrap();
            let c = s.grid.tokens_per_frame();
            for j in 0..s.grid.t_a {
                let expected = p.event_frames.contains(&(j / c));
                assert_eq!(p.fg_audio_mask[j], expected, "token {j} of sample {idx}");
            }
        }
    }

    #[test]
    fn event_at_frame_2_activates_tokens_8_to_11() {
        let s = spec();
        // find a sample with an event at frame 2
        for idx in 0..200u64 {
            let p: AVSample<f64> = generate_pair(&s, idx).unwrap();
            if p.event_frames.contains(&2) {
                for j in 8..12 {
                    assert!(p.fg_audio_mask[j]);
                }
                return;
            }
        }
        panic!("no sample with an event at frame 2 in 200 draws");
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec();
        let a: AVSample<f32> = generate_pair(&s, 11).unwrap();
        let b: AVSample<f32> = generate_pair(&s, 11).unwrap();
        assert_eq!(a.audio.data(), b.audio.data());
        assert_eq!(a.video.data(), b.video.data());
        assert_eq!(a.event_frames, b.event_frames);
        let c: AVSample<f32> = generate_pair(&s, 12).unwrap();
        assert_ne!(a.audio.data(), c.audio.data());
    }

    #[test]
    fn ground_truth_pairs_score_high() {
        let s = spec();
        let mut worst: f64 = 1.0;
        for idx in 0..50u64 {
            let p: AVSample<f64> = generate_pair(&s, idx).unwrap();
            let sc = sync_score(&p.audio, &p.video).unwrap();
            assert!(!sc.degenerate);
            worst = worst.min(sc.value);
        }
        assert!(worst >= 0.9, "worst ground-truth sync {worst}");
    }

    #[test]
    fn mismatched_pairs_score_near_zero_on_average() {
        let s = spec();
        let mut acc = 0.0;
        let n = 100u64;
        for idx in 0..n {
            let a: AVSample<f64> = generate_pair(&s, idx).unwrap();
            let b: AVSample<f64> = generate_pair(&s, idx + 1000).unwrap();
            acc += sync_score(&a.audio, &b.video).unwrap().value;
        }
        let mean = acc / n as f64;
        assert!(mean.abs() < 0.3, "mean mismatched sync {mean}");
    }

    #[test]
    fn constant_video_is_degenerate() {
        let s = spec();
        let p: AVSample<f64> = generate_pair(&s, 4).unwrap();
        let flat = Tensor::full(p.video.shape().to_vec(), 0.25f64);
        let sc = sync_score(&p.audio, &flat).unwrap();
        assert!(sc.degenerate);
        assert_eq!(sc.value, 0.0);
    }

    #[test]
    fn envelope_peak_lies_in_event_windows() {
        let s = spec();
        for idx in 0..30u64 {
            let p: AVSample<f64> = generate_pair(&s, idx).unwrap();
            let c = s.grid.tokens_per_frame();
            let ch = s.signal_channels;
            let mut best = (0usize, f64::MIN);
            for j in 0..s.grid.t_a {
                let rms: f64 = (0..ch)
                    .map(|k| p.audio.data()[j * ch + k].powi(2))
                    .sum::<f64>()
                    .sqrt();
                if rms > best.1 {
                    best = (j, rms);
                }
            }
            assert!(
                p.event_frames.contains(&(best.0 / c)),
                "sample {idx}: peak token {} outside event spans {:?}",
                best.0,
                p.event_frames
            );
        }
    }

    #[test]
    fn foreground_power_dominates_background() {
        let s = spec();
        let mut fg_pow = 0.0;
        let mut bg_pow = 0.0;
        let (mut fg_n, mut bg_n) = (0usize, 0usize);
        for idx in 0..40u64 {
            let p: AVSample<f64> = generate_pair(&s, idx).unwrap();
            let ch = s.signal_channels;
            for (tok, &fg) in p.fg_video_mask.iter().enumerate() {
                for k in 0..ch {
                    let v = p.video.data()[tok * ch + k];
                    if fg {
                        fg_pow += v * v;
                        fg_n += 1;
                    } else {
                        bg_pow += v * v;
                        bg_n += 1;
                    }
                }
            }
        }
        let ratio = (fg_pow / fg_n as f64) / (bg_pow / bg_n as f64);
        assert!(ratio >= 4.0, "contrast ratio {ratio}");
    }

    #[test]
    fn iterator_is_seeded_and_seekable() {
        let s = spec();
        let mut i1 = DatasetIter::<f32>::new(s, 2, 9).unwrap();
        let mut i2 = DatasetIter::<f32>::new(s, 2, 9).unwrap();
        let a = i1.next().unwrap().unwrap();
        let b = i2.next().unwrap().unwrap();
        assert_eq!(a[0].audio.data(), b[0].audio.data());
        assert_eq!(a[1].class_id, b[1].class_id);
        // seeking reproduces the same batch
        let direct = i1.batch_at(0).unwrap();
        assert_eq!(direct[0].audio.data(), a[0].audio.data());
    }

    #[test]
    fn class_distribution_is_uniform() {
        let s = spec();
        let mut counts = vec![0usize; s.n_classes];
        let n = 10_000u64;
        for idx in 0..n {
            let p: AVSample<f32> = generate_pair(&s, idx).unwrap();
            counts[p.class_id] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.02, "class frequency {freq}");
        }
    }

    #[test]
    fn batches_share_the_spec_grid() {
        let s = spec();
        let mut it = DatasetIter::<f32>::new(s, 3, 1).unwrap();
        let batch = it.next().unwrap().unwrap();
        let (a, v) = stack_batch(&batch).unwrap();
        assert_eq!(a.shape(), &[3, 32, 4]);
        assert_eq!(v.shape(), &[3, 8, 4, 4, 4]);
    }
}
