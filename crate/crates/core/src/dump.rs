//! Sample and attention-map dump formats.
//!
//! Samples are raw little-endian 32-bit float arrays plus a structured-text
//! sidecar carrying the grid, the class, and any ground truth. Per stem:
//!
//! * `<stem>.audio.bin` — `t_a * channels` floats;
//! * `<stem>.video.bin` — `t_v * h * w * channels` floats;
//! * `<stem>.meta` — `key=value` lines (`t_a t_v h w channels class_id`,
//!   optional `event_frames` as comma-separated indices);
//! * `<stem>.fg_audio.bin`, `<stem>.fg_video.bin` — 0/1 bytes, present only
//!   for generator output with ground-truth masks.
//!
//! Attention maps are one file per block per direction:
//! magic `CCLA`, then seven little-endian u32 words
//! `{version, block, direction, rows, q_len, kv_len, n_lct}` (direction 0 is
//! audio-to-video, 1 is video-to-audio), then `rows * q_len * kv_len`
//! row-major little-endian floats.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::cca::AttnMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tarp::GridMeta;
use crate::tensor::Tensor;

const ATTN_MAGIC: &[u8; 4] = b"CCLA";
const ATTN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub grid: GridMeta,
    pub channels: usize,
    pub class_id: usize,
    pub event_frames: Option<Vec<usize>>,
}

pub struct SampleFiles {
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
    pub meta: SampleMeta,
    pub fg_audio: Option<Vec<bool>>,
    pub fg_video: Option<Vec<bool>>,
}

fn write_f32s(path: &Path, data: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Integrity(format!("{}: not float-aligned", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_sample<S: Scalar>(
    dir: &Path,
    stem: &str,
    audio: &Tensor<S>,
    video: &Tensor<S>,
    meta: &SampleMeta,
    fg_audio: Option<&[bool]>,
    fg_video: Option<&[bool]>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_f32s(
        &dir.join(format!("{stem}.audio.bin")),
        audio.data().iter().map(|v| v.as_f64() as f32),
    )?;
    write_f32s(
        &dir.join(format!("{stem}.video.bin")),
        video.data().iter().map(|v| v.as_f64() as f32),
    )?;
    let mut text = format!(
        "t_a={} t_v={} h={} w={} channels={} class_id={}\n",
        meta.grid.t_a, meta.grid.t_v, meta.grid.h, meta.grid.w, meta.channels, meta.class_id
    );
    if let Some(frames) = &meta.event_frames {
        let list: Vec<String> = frames.iter().map(|f| f.to_string()).collect();
        text.push_str(&format!("event_frames={}\n", list.join(",")));
    }
    std::fs::write(dir.join(format!("{stem}.meta")), text)?;
    if let Some(mask) = fg_audio {
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        std::fs::write(dir.join(format!("{stem}.fg_audio.bin")), bytes)?;
    }
    if let Some(mask) = fg_video {
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        std::fs::write(dir.join(format!("{stem}.fg_video.bin")), bytes)?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path, stem: &str) -> Result<SampleFiles> {
    let meta_text = std::fs::read_to_string(dir.join(format!("{stem}.meta")))?;
    let mut fields = std::collections::HashMap::new();
    for line in meta_text.lines() {
        for field in line.split_whitespace() {
            if let Some((k, v)) = field.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
    }
    let get = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::Integrity(format!("sample meta missing {k}")))
    };
    let grid = GridMeta { t_a: get("t_a")?, t_v: get("t_v")?, h: get("h")?, w: get("w")? };
    let channels = get("channels")?;
    let class_id = get("class_id")?;
    let event_frames = fields.get("event_frames").map(|v| {
        v.split(',')
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse::<usize>().ok())
            .collect::<Vec<_>>()
    });

    let audio_data = read_f32s(&dir.join(format!("{stem}.audio.bin")))?;
    let video_data = read_f32s(&dir.join(format!("{stem}.video.bin")))?;
    let audio = Tensor::new(vec![grid.t_a, channels], audio_data)
        .map_err(|e| Error::Integrity(format!("audio blob does not match meta: {e}")))?;
    let video = Tensor::new(vec![grid.t_v, grid.h, grid.w, channels], video_data)
        .map_err(|e| Error::Integrity(format!("video blob does not match meta: {e}")))?;

    let read_mask = |name: String, want: usize| -> Result<Option<Vec<bool>>> {
        let path = dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path)?;
        if bytes.len() != want {
            return Err(Error::Integrity(format!(
                "{}: {} mask bytes, expected {want}",
                path.display(),
                bytes.len()
            )));
        }
        Ok(Some(bytes.iter().map(|&b| b != 0).collect()))
    };
    let fg_audio = read_mask(format!("{stem}.fg_audio.bin"), grid.t_a)?;
    let fg_video = read_mask(format!("{stem}.fg_video.bin"), grid.t_v * grid.h * grid.w)?;

    Ok(SampleFiles {
        audio,
        video,
        meta: SampleMeta { grid, channels, class_id, event_frames },
        fg_audio,
        fg_video,
    })
}

/// Stems of all samples in a directory, sorted.
pub fn list_sample_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".meta") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

// ── attention maps ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnDirection {
    AudioToVideo,
    VideoToAudio,
}

impl AttnDirection {
    pub fn tag(&self) -> &'static str {
        match self {
            AttnDirection::AudioToVideo => "a2v",
            AttnDirection::VideoToAudio => "v2a",
        }
    }

    fn code(&self) -> u32 {
        match self {
            AttnDirection::AudioToVideo => 0,
            AttnDirection::VideoToAudio => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(AttnDirection::AudioToVideo),
            1 => Ok(AttnDirection::VideoToAudio),
            other => Err(Error::Integrity(format!("unknown attention direction {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDumpHeader {
    pub block: usize,
    pub direction: AttnDirection,
    pub rows: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub n_lct: usize,
}

pub fn attn_file_name(block: usize, direction: AttnDirection) -> String {
    format!("attn_b{block}_{}.bin", direction.tag())
}

pub fn write_attn_map<S: Scalar>(
    dir: &Path,
    block: usize,
    direction: AttnDirection,
    map: &AttnMap<S>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(attn_file_name(block, direction));
    let mut f = std::fs::File::create(&path)?;
    f.write_all(ATTN_MAGIC)?;
    for word in [
        ATTN_VERSION,
        block as u32,
        direction.code(),
        map.rows as u32,
        map.q_len as u32,
        map.kv_len as u32,
        map.n_lct as u32,
    ] {
        f.write_all(&word.to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(map.data.len() * 4);
    for v in &map.data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(path)
}

pub fn read_attn_map(path: &Path) -> Result<(AttnDumpHeader, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 7 * 4 || &bytes[0..4] != ATTN_MAGIC {
        return Err(Error::Integrity(format!("{}: not an attention dump", path.display())));
    }
    let word = |i: usize| -> u32 {
        let base = 4 + i * 4;
        u32::from_le_bytes([bytes[base], bytes[base + 1], bytes[base + 2], bytes[base + 3]])
    };
    if word(0) != ATTN_VERSION {
        return Err(Error::Integrity(format!("{}: unsupported version {}", path.display(), word(0))));
    }
    let header = AttnDumpHeader {
        block: word(1) as usize,
        direction: AttnDirection::from_code(word(2))?,
        rows: word(3) as usize,
        q_len: word(4) as usize,
        kv_len: word(5) as usize,
        n_lct: word(6) as usize,
    };
    let expect = header.rows * header.q_len * header.kv_len;
    let payload = &bytes[4 + 7 * 4..];
    if payload.len() != expect * 4 {
        return Err(Error::Integrity(format!(
            "{}: payload holds {} floats, header declares {expect}",
            path.display(),
            payload.len() / 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

/// All attention dumps in a directory, sorted by (block, direction).
pub fn list_attn_maps(dir: &Path) -> Result<Vec<(AttnDumpHeader, Vec<f32>)>> {
    let mut maps = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("attn_b") && name.ends_with(".bin") {
            maps.push(read_attn_map(&entry.path())?);
        }
    }
    maps.sort_by_key(|(h, _)| (h.block, h.direction.code()));
    Ok(maps)
}
