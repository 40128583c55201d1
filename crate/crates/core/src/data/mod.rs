//! On-disk video datasets, clip sampling, a synthetic data generator and
//! checkpoint files.
//!
//! Layout of a dataset root:
//!
//! ```text
//! <root>/<video_id>/frames/00000.png   8-bit RGB, numbered from 0
//! <root>/<video_id>/fixations.csv      header `frame,x,y`
//! <root>/<video_id>/maps/00000.png     optional 8-bit grayscale densities
//! <root>/<video_id>/audio.wav          optional PCM16 mono
//! ```

mod checkpoint;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{fixations_to_density, Fixation, FixationRecord, MetricError, SaliencyMap};
use crate::model::ModelConfig;
use crate::tensor::{trilinear_sample_axis, Tensor, TensorError};

pub use checkpoint::{
    decode_params, encode_params, load_checkpoint, load_meta, load_model, save_checkpoint, save_model,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use synth::{generate_synthetic, SynthOptions, SynthTruth};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("frame {t} out of range for video '{video}' with {len} frames")]
    Index { video: String, t: usize, len: usize },
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Mono waveform accompanying a video; it spans the whole video.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub frames: Vec<PathBuf>,
    /// `(height, width)` shared by every frame.
    pub frame_size: (usize, usize),
    /// One record per frame, possibly empty.
    pub fixations: Vec<FixationRecord>,
    pub maps: Option<Vec<PathBuf>>,
    pub audio: Option<Waveform>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Samples aligned with frames `first..=last`, with frame `i` owning
    /// `[i*L/N, (i+1)*L/N)`.
    pub fn audio_span(&self, first: usize, last: usize) -> Option<&[f32]> {
        let a = self.audio.as_ref()?;
        Some(aligned_span(&a.samples, self.len(), first, last))
    }

    /// Fixations of frame `t` mapped to a `height x width` grid.
    pub fn fixations_at(&self, t: usize, height: usize, width: usize) -> FixationRecord {
        let (fh, fw) = self.frame_size;
        FixationRecord::new(
            self.fixations[t]
                .points
                .iter()
                .map(|p| Fixation {
                    x: scale_coord(p.x, fw, width),
                    y: scale_coord(p.y, fh, height),
                })
                .collect(),
        )
    }
}

/// The part of `samples` belonging to frames `first..=last` when the
/// waveform is split evenly over `n_frames`. Never empty for non-empty input.
pub fn aligned_span(samples: &[f32], n_frames: usize, first: usize, last: usize) -> &[f32] {
    let (l, n) = (samples.len(), n_frames.max(1));
    if l == 0 {
        return samples;
    }
    let start = (first * l / n).min(l.saturating_sub(1));
    let end = ((last + 1) * l / n).clamp(start + 1, l);
    &samples[start..end]
}

/// Numbered `NNNNN.png` files in `dir`, checked to run 0, 1, 2, ...
fn numbered_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    for (i, p) in files.iter().enumerate() {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if stem.parse::<usize>().ok() != Some(i) {
            return Err(format_err(p, format!("expected frame number {i:05}")));
        }
    }
    Ok(files)
}

fn read_fixations(path: &Path, frames: usize, height: usize, width: usize) -> Result<Vec<FixationRecord>> {
    let mut out = vec![FixationRecord::default(); frames];
    if !path.exists() {
        return Ok(out);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let headers = reader.headers().map_err(|e| format_err(path, e))?;
    if headers != vec!["frame", "x", "y"] {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header frame,x,y, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let field = |i: usize| -> Result<usize> {
            let s = record.get(i).unwrap_or("").trim();
            s.parse().map_err(|_| parse_err(format!("'{s}' is not a non-negative integer")))
        };
        let (f, x, y) = (field(0)?, field(1)?, field(2)?);
        if f >= frames {
            return Err(parse_err(format!("frame {f} out of range ({frames} frames)")));
        }
        if x >= width || y >= height {
            return Err(parse_err(format!("fixation ({x}, {y}) outside {width}x{height} frame")));
        }
        out[f].points.push(Fixation { x, y });
    }
    Ok(out)
}

fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| format_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(format_err(path, "audio must be PCM16 mono"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e))?;
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

fn load_video(dir: &Path) -> Result<VideoRecord> {
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let frames_dir = dir.join("frames");
    let frames = numbered_pngs(&frames_dir)?;
    if frames.is_empty() {
        return Err(format_err(&frames_dir, "no frames"));
    }
    let size = |p: &Path| -> Result<(usize, usize)> {
        let (w, h) = image::image_dimensions(p).map_err(|e| format_err(p, e))?;
        Ok((h as usize, w as usize))
    };
    let frame_size = size(&frames[0])?;
    for p in &frames[1..] {
        if size(p)? != frame_size {
            return Err(format_err(p, format!("frame size differs from {frame_size:?}")));
        }
    }
    let fixations = read_fixations(&dir.join("fixations.csv"), frames.len(), frame_size.0, frame_size.1)?;
    let maps_dir = dir.join("maps");
    let maps = if maps_dir.is_dir() {
        let maps = numbered_pngs(&maps_dir)?;
        if maps.len() != frames.len() {
            return Err(format_err(&maps_dir, format!("{} maps for {} frames", maps.len(), frames.len())));
        }
        Some(maps)
    } else {
        None
    };
    let wav = dir.join("audio.wav");
    let audio = if wav.exists() { Some(read_wav(&wav)?) } else { None };
    Ok(VideoRecord {
        id,
        frames,
        frame_size,
        fixations,
        maps,
        audio,
    })
}

/// Every video directory under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(root)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_video(d)).collect()
}

/// Bilinear resize of a channel-first `[C, H, W]` buffer, half-pixel centres.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let (ys, xs) = (trilinear_sample_axis(h, out_h), trilinear_sample_axis(w, out_w));
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for sy in &ys {
            for sx in &xs {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = at(sy.lo, sx.lo) * (1.0 - sx.frac) + at(sy.lo, sx.hi) * sx.frac;
                let bottom = at(sy.hi, sx.lo) * (1.0 - sx.frac) + at(sy.hi, sx.hi) * sx.frac;
                out.push((top * (1.0 - sy.frac) + bottom * sy.frac) as f32);
            }
        }
    }
    out
}

/// Frame `[3, H, W]` scaled to `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| format_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Indices of the `clip_len` frames ending at `t`, repeating frame 0 where
/// the window starts before the video does.
pub fn clip_frame_indices(t: usize, clip_len: usize) -> Vec<usize> {
    (0..clip_len).map(|k| (t + k + 1).saturating_sub(clip_len)).collect()
}

/// Training and evaluation view of the clip ending at frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub video_id: String,
    pub t: usize,
    /// `[3, T0, H0, W0]` in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// Ground-truth density at `H0 x W0`; absent when frame `t` has neither a
    /// map nor fixations.
    pub target: Option<SaliencyMap>,
    /// Frame `t`'s fixations mapped to `H0 x W0`.
    pub fixations: FixationRecord,
    /// Waveform samples spanning the clip's real frames.
    pub audio: Option<Vec<f32>>,
}

fn scale_coord(v: usize, from: usize, to: usize) -> usize {
    (((v as f64 + 0.5) * to as f64 / from as f64) as usize).min(to - 1)
}

/// Builds the clip ending at `t`. Deterministic: the same inputs always give
/// the same sample. `sigma` is the density blur in output pixels.
pub fn sample_clip(video: &VideoRecord, t: usize, cfg: &ModelConfig, sigma: f64) -> Result<ClipSample> {
    if t >= video.len() {
        return Err(DataError::Index {
            video: video.id.clone(),
            t,
            len: video.len(),
        });
    }
    let (h0, w0, t0) = (cfg.height, cfg.width, cfg.clip_len);
    let indices = clip_frame_indices(t, t0);
    let mut resized: Vec<(usize, Vec<f32>)> = Vec::new();
    let mut frames = vec![0.0f32; 3 * t0 * h0 * w0];
    for (k, &i) in indices.iter().enumerate() {
        let pos = match resized.iter().position(|(j, _)| *j == i) {
            Some(p) => p,
            None => {
                let (data, h, w) = read_frame(&video.frames[i])?;
                resized.push((i, resize_bilinear(&data, 3, h, w, h0, w0)));
                resized.len() - 1
            }
        };
        let img = &resized[pos].1;
        for c in 0..3 {
            let dst = (c * t0 + k) * h0 * w0;
            frames[dst..dst + h0 * w0].copy_from_slice(&img[c * h0 * w0..(c + 1) * h0 * w0]);
        }
    }
    let fixations = video.fixations_at(t, h0, w0);
    let from_map = match &video.maps {
        Some(maps) => {
            let img = image::open(&maps[t]).map_err(|e| format_err(&maps[t], e))?.to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw: Vec<f32> = img.pixels().map(|p| p[0] as f32).collect();
            let values = resize_bilinear(&raw, 1, h, w, h0, w0).into_iter().map(f64::from).collect();
            SaliencyMap::new(h0, w0, values)?.to_distribution()
        }
        None => None,
    };
    let target = match from_map {
        Some(m) => Some(m),
        None if !fixations.is_empty() => Some(fixations_to_density(&fixations, h0, w0, sigma)?),
        None => None,
    };
    Ok(ClipSample {
        video_id: video.id.clone(),
        t,
        frames: Tensor::new(&[3, t0, h0, w0], frames)?,
        target,
        fixations,
        audio: video.audio_span(indices[0], t).map(<[f32]>::to_vec),
    })
}
