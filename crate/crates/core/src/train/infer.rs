use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Result, TrainConfig, TrainError};
use crate::data::{aligned_span, clip_frame_indices, sample_clip, ClipSample, VideoRecord, Waveform};
use crate::fusion::{AudioFeatures, AudioInput, AudioSource};
use crate::metrics::{
    auc_judd, cc, kldiv, nss, sauc, sim, FixationRecord, FrameScores, SaliencyMap, DEFAULT_EPSILON,
    DEFAULT_SAUC_SPLITS, DEFAULT_SIGMA,
};
use crate::model::{ModelConfig, ViNet};
use crate::tensor::Tensor;

/// Anything that turns a clip into a saliency map at model resolution.
pub trait SaliencyPredictor: Sync {
    fn model_config(&self) -> &ModelConfig;

    fn predict_clip(&self, clip: &ClipSample, audio: Option<&AudioInput>) -> Result<SaliencyMap>;
}

impl SaliencyPredictor for ViNet {
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn predict_clip(&self, clip: &ClipSample, audio: Option<&AudioInput>) -> Result<SaliencyMap> {
        let out = self.predict(&clip.frames, audio)?;
        tensor_to_map(&out, self.config())
    }
}

pub(crate) fn tensor_to_map(t: &Tensor<f32>, cfg: &ModelConfig) -> Result<SaliencyMap> {
    let values = t.data().iter().map(|&v| f64::from(v)).collect();
    Ok(SaliencyMap::new(cfg.height, cfg.width, values)?)
}

/// Which audio accompanies each clip.
#[derive(Clone, Copy, Debug)]
pub enum AudioMode<'a> {
    /// The video's own track.
    Own,
    /// All-zero audio features.
    Zeroed,
    /// Another waveform, aligned to this video's frames proportionally.
    From(&'a Waveform),
}

fn clip_audio(cfg: &ModelConfig, video: &VideoRecord, clip: &ClipSample, mode: AudioMode<'_>) -> Result<Option<AudioInput>> {
    Ok(match mode {
        AudioMode::Own => clip.audio.clone().map(AudioInput::Waveform),
        AudioMode::Zeroed => {
            let zeros = Tensor::zeros(&[cfg.audio_channels, 3, 1]).map_err(crate::model::ModelError::from)?;
            Some(AudioInput::Features(AudioFeatures::new(zeros, AudioSource::Zeroed)?))
        }
        AudioMode::From(w) => {
            let first = clip_frame_indices(clip.t, cfg.clip_len)[0];
            let span = aligned_span(&w.samples, video.len(), first, clip.t);
            (!span.is_empty()).then(|| AudioInput::Waveform(span.to_vec()))
        }
    })
}

/// Runs `f` on every frame's clip and prediction, in frame order.
pub(crate) fn sweep<P: SaliencyPredictor + ?Sized>(
    pred: &P,
    video: &VideoRecord,
    mode: AudioMode<'_>,
    sigma: f64,
    mut f: impl FnMut(&ClipSample, SaliencyMap) -> Result<()>,
) -> Result<()> {
    if video.is_empty() {
        return Err(TrainError::EmptyDataset(format!("video '{}' has no frames", video.id)));
    }
    let cfg = pred.model_config();
    for t in 0..video.len() {
        let clip = sample_clip(video, t, cfg, sigma)?;
        let audio = clip_audio(cfg, video, &clip, mode)?;
        let map = pred.predict_clip(&clip, audio.as_ref())?;
        f(&clip, map)?;
    }
    Ok(())
}

/// One map per frame; frame `t` sees frames `t-T0+1..=t`, padded with frame 0.
pub fn predict_video<P: SaliencyPredictor + ?Sized>(pred: &P, video: &VideoRecord) -> Result<Vec<SaliencyMap>> {
    predict_video_with(pred, video, AudioMode::Own)
}

pub fn predict_video_with<P: SaliencyPredictor + ?Sized>(
    pred: &P,
    video: &VideoRecord,
    mode: AudioMode<'_>,
) -> Result<Vec<SaliencyMap>> {
    let mut maps = Vec::with_capacity(video.len());
    sweep(pred, video, mode, DEFAULT_SIGMA, |_, m| {
        maps.push(m);
        Ok(())
    })?;
    Ok(maps)
}

/// Maps `f` over `items` on scoped threads, keeping the input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if threads <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, x)| f(c * chunk + i, x))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Mean CC against the ground truth over every frame with a target,
/// averaged per video first.
pub fn validation_cc<P: SaliencyPredictor + ?Sized>(pred: &P, videos: &[VideoRecord], sigma: f64) -> Result<f64> {
    let per_video = par_map(videos, |_, v| -> Result<Option<f64>> {
        let (mut sum, mut n) = (0.0, 0usize);
        sweep(pred, v, AudioMode::Own, sigma, |clip, map| {
            if let Some(q) = &clip.target {
                sum += cc(&map, q)?.value;
                n += 1;
            }
            Ok(())
        })?;
        Ok((n > 0).then(|| sum / n as f64))
    });
    let scores: Vec<f64> = per_video.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if scores.is_empty() {
        return Err(TrainError::EmptyDataset("no validation frame has a ground-truth target".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sigma: f64,
    pub kl_eps: f64,
    pub sauc_splits: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            kl_eps: DEFAULT_EPSILON,
            sauc_splits: DEFAULT_SAUC_SPLITS,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            sigma: cfg.sigma,
            kl_eps: cfg.kl_eps,
            seed: cfg.seed,
            ..Self::default()
        }
    }
}

/// Column means, skipping NaN entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub cc: f64,
    pub sim: f64,
    pub auc_judd: f64,
    pub sauc: f64,
    pub nss: f64,
    pub kldiv: f64,
}

fn nan_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.filter(|v| !v.is_nan()) {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricMeans {
    pub fn of_frames(rows: &[FrameScores]) -> Self {
        Self {
            cc: nan_mean(rows.iter().map(|r| r.cc)),
            sim: nan_mean(rows.iter().map(|r| r.sim)),
            auc_judd: nan_mean(rows.iter().map(|r| r.auc_judd)),
            sauc: nan_mean(rows.iter().map(|r| r.sauc)),
            nss: nan_mean(rows.iter().map(|r| r.nss)),
            kldiv: nan_mean(rows.iter().map(|r| r.kldiv)),
        }
    }

    pub fn of_means(rows: &[&MetricMeans]) -> Self {
        Self {
            cc: nan_mean(rows.iter().map(|r| r.cc)),
            sim: nan_mean(rows.iter().map(|r| r.sim)),
            auc_judd: nan_mean(rows.iter().map(|r| r.auc_judd)),
            sauc: nan_mean(rows.iter().map(|r| r.sauc)),
            nss: nan_mean(rows.iter().map(|r| r.nss)),
            kldiv: nan_mean(rows.iter().map(|r| r.kldiv)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub video_id: String,
    pub frames: usize,
    pub means: MetricMeans,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScores>,
    pub videos: Vec<VideoScores>,
    /// Mean of the per-video means.
    pub mean: MetricMeans,
}

fn shuffle_pool(dataset: &[VideoRecord], vi: usize, t: usize, cfg: &ModelConfig) -> Vec<FixationRecord> {
    let scaled = |v: &VideoRecord, i: usize| v.fixations_at(i, cfg.height, cfg.width);
    if dataset.len() > 1 {
        dataset
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != vi)
            .flat_map(|(_, v)| (0..v.len()).map(move |i| scaled(v, i)))
            .collect()
    } else {
        let v = &dataset[vi];
        (0..v.len()).filter(|&i| i != t).map(|i| scaled(v, i)).collect()
    }
}

/// Scores every frame that has fixations with all six metrics. Shuffled AUC
/// draws its negatives from the other videos, or from the other frames when
/// there is only one video. A sAUC without any negative is NaN.
pub fn evaluate<P: SaliencyPredictor + ?Sized>(
    pred: &P,
    dataset: &[VideoRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation dataset is empty".into()));
    }
    let mcfg = pred.model_config();
    let uniform = SaliencyMap::new(mcfg.height, mcfg.width, vec![1.0 / (mcfg.height * mcfg.width) as f64; mcfg.height * mcfg.width])?;
    let per_video = par_map(dataset, |vi, video| -> Result<Vec<FrameScores>> {
        let mut rows = Vec::new();
        sweep(pred, video, AudioMode::Own, cfg.sigma, |clip, map| {
            let (Some(q), false) = (&clip.target, clip.fixations.is_empty()) else {
                return Ok(());
            };
            let pd = map.to_distribution().unwrap_or_else(|| uniform.clone());
            let pool = shuffle_pool(dataset, vi, clip.t, mcfg);
            let seed = cfg.seed.wrapping_add(((vi as u64) << 32) | clip.t as u64);
            let s = if pool.iter().all(FixationRecord::is_empty) {
                f64::NAN
            } else {
                sauc(&map, &clip.fixations, &pool, cfg.sauc_splits, seed)?
            };
            rows.push(FrameScores {
                video_id: video.id.clone(),
                frame_id: clip.t,
                cc: cc(&map, q)?.value,
                sim: sim(&pd, q)?,
                auc_judd: auc_judd(&map, &clip.fixations)?,
                sauc: s,
                nss: nss(&map, &clip.fixations)?.value,
                kldiv: kldiv(&pd, q, cfg.kl_eps)?,
            });
            Ok(())
        })?;
        Ok(rows)
    });
    let mut frames = Vec::new();
    let mut videos = Vec::new();
    for (video, rows) in dataset.iter().zip(per_video) {
        let rows = rows?;
        if !rows.is_empty() {
            videos.push(VideoScores {
                video_id: video.id.clone(),
                frames: rows.len(),
                means: MetricMeans::of_frames(&rows),
            });
        }
        frames.extend(rows);
    }
    if frames.is_empty() {
        return Err(TrainError::EmptyDataset("no frame in the dataset has fixations".into()));
    }
    let mean = MetricMeans::of_means(&videos.iter().map(|v| &v.means).collect::<Vec<_>>());
    Ok(EvalReport { frames, videos, mean })
}

/// Per-video means followed by a `mean` row holding the mean over videos.
pub fn write_summary<W: Write>(out: W, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["video_id", "frames", "cc", "sim", "auc_judd", "sauc", "nss", "kldiv"])?;
    let total = report.videos.iter().map(|v| v.frames).sum();
    let rows = report
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v.frames, &v.means))
        .chain(std::iter::once(("mean", total, &report.mean)));
    for (id, n, m) in rows {
        let mut rec = vec![id.to_string(), n.to_string()];
        rec.extend([m.cc, m.sim, m.auc_judd, m.sauc, m.nss, m.kldiv].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
