//! End-to-end run orchestration behind the command-line entry points:
//! training runs with periodic checkpoints, guided sampling with dumps, the
//! paired gate-vs-context benchmark, and the foreground/background
//! attention-mass evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::ckpt::{load_checkpoint, load_into_model, save_checkpoint};
use crate::config::RunConfig;
use crate::dcr::RoutingPlan;
use crate::dump::{
    list_attn_maps, list_sample_stems, read_sample, write_attn_map, write_sample, AttnDirection,
    SampleMeta,
};
use crate::error::{Error, Result};
use crate::guidance::{euler_sample, GuidanceMode};
use crate::model::{DualStreamModel, ForwardInputs, TextCond, Variant};
use crate::params::ParamLeaves;
use crate::rng::derive_seed;
use crate::synthdata::{generate_pair, stack_batch, sync_score, AVSample, SyncScore};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{flow_interpolate_batch, train_range, TrainRecord, TrainerState};

// ── training ─────────────────────────────────────────────────────────

pub struct TrainOptions {
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub variant: Option<Variant>,
    pub resume: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

pub struct TrainArtifacts {
    pub output_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<TrainRecord>,
    pub final_step: usize,
}

/// Train per the configuration, checkpointing every `ckpt_every` steps and
/// at the end, appending one log line per step.
pub fn run_train(opts: &TrainOptions) -> Result<TrainArtifacts> {
    let variant = match opts.variant {
        Some(v) => Some(v),
        None => Some(Variant::parse(&opts.config.model.variant)?),
    };
    let model_cfg = opts.config.model_config(variant)?;
    let train_cfg = opts.config.train_config(opts.seed, opts.steps)?;
    let data = opts.config.dataset_spec(train_cfg.seed)?;

    let output_dir = opts
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(&opts.config.output_dir));
    std::fs::create_dir_all(&output_dir)?;

    // echo the effective configuration
    let mut effective = opts.config.clone();
    effective.model.variant = variant.unwrap().name().to_string();
    if variant.unwrap() == Variant::Gated {
        effective.model.window_mode = "full".to_string();
        effective.model.audio.n_lct = 0;
        effective.model.video.n_lct = 0;
    }
    effective.train.seed = train_cfg.seed;
    effective.train.steps = train_cfg.steps;
    effective.output_dir = output_dir.to_string_lossy().to_string();
    let effective_toml = effective.to_toml();
    std::fs::write(output_dir.join("config.toml"), &effective_toml)?;

    let mut model = DualStreamModel::<f32>::init(model_cfg, train_cfg.seed)?;
    let mut start_step = 0usize;
    if let Some(resume_dir) = &opts.resume {
        let loaded = load_checkpoint(resume_dir)?;
        load_into_model(&mut model, &loaded)?;
        start_step = loaded.step;
    }

    let log_path = output_dir.join("train.log");
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;

    let ckpt_every = opts.config.train.ckpt_every;
    let mut state = TrainerState::new(&model, &train_cfg);
    let mut records = Vec::new();
    let mut step = start_step;
    while step < train_cfg.steps {
        let chunk_end = match ckpt_every {
            0 => train_cfg.steps,
            n => (step + n).min(train_cfg.steps),
        };
        let chunk = train_range(&mut model, &data, &train_cfg, &mut state, step..chunk_end, &mut |r| {
            writeln!(log, "{}", r.log_line())?;
            Ok(())
        })?;
        records.extend(chunk);
        step = chunk_end;
        if step < train_cfg.steps {
            let dir = output_dir.join(format!("ckpt-{step:06}"));
            save_checkpoint(&dir, &model.store, step, &effective_toml)?;
        }
    }
    log.flush()?;
    let checkpoint_dir = output_dir.join("checkpoint");
    save_checkpoint(&checkpoint_dir, &model.store, train_cfg.steps, &effective_toml)?;
    Ok(TrainArtifacts {
        output_dir,
        checkpoint_dir,
        log_path,
        records,
        final_step: train_cfg.steps,
    })
}

/// Rebuild a model from a checkpoint directory alone.
pub fn load_model(ckpt_dir: &Path) -> Result<(DualStreamModel<f32>, RunConfig)> {
    let loaded = load_checkpoint(ckpt_dir)?;
    let config = RunConfig::parse(&loaded.config_toml)?;
    let model_cfg = config.model_config(None)?;
    let mut model = DualStreamModel::<f32>::init(model_cfg, config.train.seed)?;
    load_into_model(&mut model, &loaded)?;
    Ok((model, config))
}

// ── sampling ─────────────────────────────────────────────────────────

pub struct SampleOptions {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub mode: Option<GuidanceMode>,
    pub s_text: Option<f64>,
    pub s_m: Option<f64>,
    pub class: usize,
    pub seed: u64,
    pub dump_attn: bool,
}

pub struct SampleArtifacts {
    pub sample_dir: PathBuf,
    pub stem: String,
    pub sync: SyncScore,
    pub attn_dir: Option<PathBuf>,
    pub total_forwards: usize,
}

/// Sample one joint pair from a checkpoint and write it in the dump format;
/// optionally export per-block attention maps of the finished sample.
pub fn run_sample(opts: &SampleOptions) -> Result<SampleArtifacts> {
    let (model, config) = load_model(&opts.checkpoint)?;
    let mut gcfg = config.guidance_config()?;
    if let Some(mode) = opts.mode {
        gcfg.mode = mode;
    }
    if let Some(s) = opts.s_text {
        gcfg.s_text = s;
    }
    if let Some(s) = opts.s_m {
        gcfg.s_m = s;
    }
    gcfg.validate()?;
    if opts.class >= model.config.n_classes {
        return Err(Error::Config(format!(
            "class {} out of range for {} classes",
            opts.class, model.config.n_classes
        )));
    }

    let g = model.config.grid;
    let c = model.config.signal_channels;
    let result = euler_sample(
        &model,
        vec![1, g.t_a, c],
        vec![1, g.t_v, g.h, g.w, c],
        &[opts.class],
        &gcfg,
        opts.seed,
    )?;
    let audio = result.audio.clone().reshape(vec![g.t_a, c])?;
    let video = result.video.clone().reshape(vec![g.t_v, g.h, g.w, c])?;
    let sync = sync_score(&audio, &video)?;

    let stem = format!("gen_{}_c{}_s{}", gcfg.mode.name(), opts.class, opts.seed);
    let meta = SampleMeta { grid: g, channels: c, class_id: opts.class, event_frames: None };
    write_sample(&opts.out_dir, &stem, &audio, &video, &meta, None, None)?;

    let attn_dir = if opts.dump_attn {
        let dir = opts.out_dir.join(format!("{stem}.attn"));
        let maps = capture_maps(&model, &result.audio, &result.video, 0.0, &[opts.class])?;
        write_all_maps(&dir, &maps)?;
        Some(dir)
    } else {
        None
    };

    Ok(SampleArtifacts {
        sample_dir: opts.out_dir.clone(),
        stem,
        sync,
        attn_dir,
        total_forwards: result.total_forwards,
    })
}

fn capture_maps(
    model: &DualStreamModel<f32>,
    x_audio: &Tensor<f32>,
    x_video: &Tensor<f32>,
    t: f32,
    class_ids: &[usize],
) -> Result<Vec<crate::model::BlockAttnMaps<f32>>> {
    let b = class_ids.len();
    let t_vec = vec![t; b];
    let plan = RoutingPlan::joint_inference();
    let (_, _, maps) = model.forward_tensors(&ForwardInputs {
        x_audio: Some(x_audio),
        x_video: Some(x_video),
        t_audio: Some(&t_vec),
        t_video: Some(&t_vec),
        class_ids,
        text: TextCond::Class,
        plan: &plan,
        capture_attn: true,
    })?;
    Ok(maps)
}

fn write_all_maps(dir: &Path, maps: &[crate::model::BlockAttnMaps<f32>]) -> Result<()> {
    for block in maps {
        if let Some(m) = &block.a2v {
            write_attn_map(dir, block.block, AttnDirection::AudioToVideo, m)?;
        }
        if let Some(m) = &block.v2a {
            write_attn_map(dir, block.block, AttnDirection::VideoToAudio, m)?;
        }
    }
    Ok(())
}

// ── benchmark ────────────────────────────────────────────────────────

pub struct BenchOptions {
    pub config: RunConfig,
    pub seeds: usize,
    pub steps: usize,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct BenchRun {
    pub variant: Variant,
    pub seed: u64,
    /// (iteration, joint-task EMA) from iteration 100 on.
    pub curve: Vec<(usize, f64)>,
    pub final_joint_ema: f64,
    /// Mean per-stream losses over the joint-task steps of the final
    /// quarter of training.
    pub tail_joint_audio: f64,
    pub tail_joint_video: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub runs: Vec<BenchRun>,
    pub wins: usize,
    pub seeds: usize,
    pub report_text: String,
}

impl BenchReport {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.seeds as f64
    }
}

/// Train both variants on identical data/noise/task sequences for each seed
/// (in parallel across runs) and compare their joint-task EMA curves.
pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    let output_dir = opts
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(&opts.config.output_dir).join("bench"));
    std::fs::create_dir_all(&output_dir)?;

    let jobs: Vec<(Variant, u64)> = (0..opts.seeds as u64)
        .flat_map(|seed| [(Variant::Ccl, seed), (Variant::Gated, seed)])
        .collect();
    let runs: Vec<BenchRun> = jobs
        .par_iter()
        .map(|&(variant, seed)| bench_one(&opts.config, variant, seed, opts.steps, &output_dir))
        .collect::<Result<Vec<_>>>()?;

    let mut wins = 0;
    let mut lines = Vec::new();
    lines.push(format!(
        "paired gate-vs-ccl benchmark: {} seeds x {} steps (joint-task EMA, logged from iteration 100)",
        opts.seeds, opts.steps
    ));
    lines.push(format!(
        "{:<6} {:>6} {:>14} {:>14} {:>9}",
        "seed", "", "ccl", "gated", "ccl<=gated"
    ));
    for seed in 0..opts.seeds as u64 {
        let ccl = runs
            .iter()
            .find(|r| r.variant == Variant::Ccl && r.seed == seed)
            .expect("both variants ran");
        let gated = runs
            .iter()
            .find(|r| r.variant == Variant::Gated && r.seed == seed)
            .expect("both variants ran");
        let win = ccl.final_joint_ema <= gated.final_joint_ema;
        if win {
            wins += 1;
        }
        lines.push(format!(
            "{:<6} {:>6} {:>14.6} {:>14.6} {:>9}",
            seed, "final", ccl.final_joint_ema, gated.final_joint_ema, win
        ));
        lines.push(format!(
            "{:<6} {:>6} {:>7.4}/{:>6.4} {:>7.4}/{:>6.4}",
            seed,
            "a/v",
            ccl.tail_joint_audio,
            ccl.tail_joint_video,
            gated.tail_joint_audio,
            gated.tail_joint_video
        ));
    }
    lines.push(format!("win rate: {wins}/{}", opts.seeds));
    let report_text = lines.join("\n") + "\n";
    std::fs::write(output_dir.join("report.txt"), &report_text)?;
    Ok(BenchReport { runs, wins, seeds: opts.seeds, report_text })
}

fn bench_one(
    config: &RunConfig,
    variant: Variant,
    seed: u64,
    steps: usize,
    output_dir: &Path,
) -> Result<BenchRun> {
    let run_dir = output_dir.join(format!("{}_seed{seed}", variant.name()));
    let opts = TrainOptions {
        config: config.clone(),
        seed: Some(seed),
        steps: Some(steps),
        variant: Some(variant),
        resume: None,
        output_dir: Some(run_dir.clone()),
    };
    let artifacts = run_train(&opts)?;
    let curve: Vec<(usize, f64)> = artifacts
        .records
        .iter()
        .filter(|r| r.step + 1 >= 100)
        .filter_map(|r| r.joint_ema.map(|j| (r.step + 1, j)))
        .collect();
    let mut csv = String::from("iter,joint_ema\n");
    for (iter, j) in &curve {
        csv.push_str(&format!("{iter},{j}\n"));
    }
    std::fs::write(run_dir.join("curve.csv"), csv)?;

    let final_joint_ema = curve
        .last()
        .map(|(_, j)| *j)
        .ok_or_else(|| Error::contract("benchmark run logged no joint-task EMA"))?;
    let tail_start = steps - (steps / 4).max(1);
    let tail: Vec<&TrainRecord> = artifacts
        .records
        .iter()
        .filter(|r| r.step >= tail_start && r.task == crate::dcr::TaskKind::JointAV)
        .collect();
    let mean = |f: &dyn Fn(&TrainRecord) -> Option<f64>| -> f64 {
        let vals: Vec<f64> = tail.iter().filter_map(|r| f(r)).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    Ok(BenchRun {
        variant,
        seed,
        curve,
        final_joint_ema,
        tail_joint_audio: mean(&|r| r.loss_audio),
        tail_joint_video: mean(&|r| r.loss_video),
    })
}

// ── attention evaluation ─────────────────────────────────────────────

pub struct ProduceAttnOptions {
    pub checkpoint: PathBuf,
    pub n_samples: usize,
    /// Flow time at which the latents are noised for the analysis forward.
    pub noise_t: f64,
    pub data_seed: u64,
    pub attn_dir: PathBuf,
    pub sample_dir: PathBuf,
}

/// Materialize attention dumps for evaluation: generate dataset samples
/// (with ground-truth masks), noise them, run one captured joint forward,
/// and write both the samples and the per-block maps.
pub fn produce_attn_dumps(opts: &ProduceAttnOptions) -> Result<()> {
    if !(0.0..=1.0).contains(&opts.noise_t) {
        return Err(Error::contract("noise_t must lie in [0, 1]"));
    }
    let (model, config) = load_model(&opts.checkpoint)?;
    let spec = config.dataset_spec(opts.data_seed)?;
    let samples: Vec<AVSample<f32>> = (0..opts.n_samples as u64)
        .map(|i| generate_pair(&spec, i))
        .collect::<Result<_>>()?;
    for (i, s) in samples.iter().enumerate() {
        let meta = SampleMeta {
            grid: spec.grid,
            channels: spec.signal_channels,
            class_id: s.class_id,
            event_frames: Some(s.event_frames.clone()),
        };
        write_sample(
            &opts.sample_dir,
            &format!("sample_{i:04}"),
            &s.audio,
            &s.video,
            &meta,
            Some(&s.fg_audio_mask),
            Some(&s.fg_video_mask),
        )?;
    }
    let (a0, v0) = stack_batch(&samples)?;
    let mut rng = crate::rng::rng_from(derive_seed(opts.data_seed, "attn-noise"));
    use rand::Rng;
    let mut gauss = |shape: &[usize]| -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
                .collect(),
        )
        .expect("sized by construction")
    };
    let t = vec![opts.noise_t as f32; samples.len()];
    let ea = gauss(a0.shape());
    let ev = gauss(v0.shape());
    let (xa, _) = flow_interpolate_batch(&a0, &ea, &t)?;
    let (xv, _) = flow_interpolate_batch(&v0, &ev, &t)?;
    let ids: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let maps = {
        let plan = RoutingPlan::joint_inference();
        let mut tape = Tape::no_grad();
        let mut leaves = ParamLeaves::new(&model.store);
        let out = model.forward(
            &mut tape,
            &mut leaves,
            &ForwardInputs {
                x_audio: Some(&xa),
                x_video: Some(&xv),
                t_audio: Some(&t),
                t_video: Some(&t),
                class_ids: &ids,
                text: TextCond::Class,
                plan: &plan,
                capture_attn: true,
            },
        )?;
        out.maps
    };
    write_all_maps(&opts.attn_dir, &maps)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DirectionMass {
    pub fg_mass: f64,
    pub bg_mass: f64,
    pub fg_queries: usize,
    pub bg_queries: usize,
}

impl DirectionMass {
    fn add(&mut self, fg: bool, mass: f64) {
        if fg {
            self.fg_mass += mass;
            self.fg_queries += 1;
        } else {
            self.bg_mass += mass;
            self.bg_queries += 1;
        }
    }

    fn finalize(&mut self) {
        if self.fg_queries > 0 {
            self.fg_mass /= self.fg_queries as f64;
        }
        if self.bg_queries > 0 {
            self.bg_mass /= self.bg_queries as f64;
        }
    }

    pub fn bg_exceeds_fg(&self) -> bool {
        self.bg_mass > self.fg_mass
    }
}

#[derive(Clone, Debug)]
pub struct AttnEvalReport {
    pub a2v: DirectionMass,
    pub v2a: DirectionMass,
    pub per_block: Vec<(usize, AttnDirection, DirectionMass)>,
    pub report_text: String,
}

/// Compare mean attention mass on the context-token columns between
/// ground-truth foreground and background query tokens.
pub fn run_eval_attn(attn_dir: &Path, sample_dir: &Path) -> Result<AttnEvalReport> {
    let stems = list_sample_stems(sample_dir)?;
    if stems.is_empty() {
        return Err(Error::Config(format!("no samples found in {}", sample_dir.display())));
    }
    let mut fg_video = Vec::new();
    let mut fg_audio = Vec::new();
    let mut grid = None;
    for stem in &stems {
        let s = read_sample(sample_dir, stem)?;
        let fv = s.fg_video.ok_or_else(|| {
            Error::Config(format!("sample {stem} carries no ground-truth video mask"))
        })?;
        let fa = s.fg_audio.ok_or_else(|| {
            Error::Config(format!("sample {stem} carries no ground-truth audio mask"))
        })?;
        fg_video.push(fv);
        fg_audio.push(fa);
        grid = Some(s.meta.grid);
    }
    let grid = grid.unwrap();
    let b = stems.len();

    let maps = list_attn_maps(attn_dir)?;
    if maps.is_empty() {
        return Err(Error::Config(format!("no attention dumps in {}", attn_dir.display())));
    }

    let mut a2v = DirectionMass::default();
    let mut v2a = DirectionMass::default();
    let mut per_block = Vec::new();
    for (header, data) in &maps {
        if header.n_lct == 0 {
            return Err(Error::Config(format!(
                "attention dump block {} {} carries no context-token columns",
                header.block,
                header.direction.tag()
            )));
        }
        let (expected_rows, q_len) = match header.direction {
            AttnDirection::AudioToVideo => (b * grid.t_v, grid.h * grid.w),
            AttnDirection::VideoToAudio => (b * grid.t_a, 1),
        };
        if header.rows != expected_rows || header.q_len != q_len {
            return Err(Error::Integrity(format!(
                "attention dump block {} {}: rows {} q_len {} do not match {} samples on the grid",
                header.block,
                header.direction.tag(),
                header.rows,
                header.q_len,
                b
            )));
        }
        let mut block_mass = DirectionMass::default();
        let lct_start = header.kv_len - header.n_lct;
        for r in 0..header.rows {
            for q in 0..header.q_len {
                let base = (r * header.q_len + q) * header.kv_len;
                let mass: f64 = data[base + lct_start..base + header.kv_len]
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                let fg = match header.direction {
                    AttnDirection::AudioToVideo => {
                        let sample = r / grid.t_v;
                        let frame = r % grid.t_v;
                        fg_video[sample][frame * grid.h * grid.w + q]
                    }
                    AttnDirection::VideoToAudio => {
                        let sample = r / grid.t_a;
                        let token = r % grid.t_a;
                        fg_audio[sample][token]
                    }
                };
                block_mass.add(fg, mass);
                match header.direction {
                    AttnDirection::AudioToVideo => a2v.add(fg, mass),
                    AttnDirection::VideoToAudio => v2a.add(fg, mass),
                }
            }
        }
        block_mass.finalize();
        per_block.push((header.block, header.direction, block_mass));
    }
    a2v.finalize();
    v2a.finalize();

    let mut lines = vec![format!(
        "context-token attention mass over {} samples ({} maps)",
        b,
        maps.len()
    )];
    for (dir, mass) in [("audio-to-video", &a2v), ("video-to-audio", &v2a)] {
        lines.push(format!(
            "{dir}: fg {:.6} bg {:.6} bg>fg {}",
            mass.fg_mass,
            mass.bg_mass,
            mass.bg_exceeds_fg()
        ));
    }
    for (block, dir, mass) in &per_block {
        lines.push(format!(
            "  block {block} {}: fg {:.6} bg {:.6}",
            dir.tag(),
            mass.fg_mass,
            mass.bg_mass
        ));
    }
    let report_text = lines.join("\n") + "\n";
    Ok(AttnEvalReport { a2v, v2a, per_block, report_text })
}
