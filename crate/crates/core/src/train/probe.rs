use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::infer::{predict_video_with, AudioMode, SaliencyPredictor};
use super::{Result, TrainError};
use crate::data::VideoRecord;
use crate::metrics::{cc, sim, SaliencyMap};
use crate::model::FusionMode;

/// Agreement between two sets of predictions on the same frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScores {
    pub cc: f64,
    pub sim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeVideo {
    pub video_id: String,
    pub frames: usize,
    /// Real audio against zeroed audio features.
    pub zeroed: PairScores,
    /// Real audio against the track of `swapped_from`.
    pub swapped: PairScores,
    pub swapped_from: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub videos: Vec<ProbeVideo>,
    /// Means over videos.
    pub zeroed: PairScores,
    pub swapped: PairScores,
}

fn pair(a: &[SaliencyMap], b: &[SaliencyMap]) -> Result<PairScores> {
    let (mut c, mut s) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += cc(x, y)?.value;
        match (x.to_distribution(), y.to_distribution()) {
            (Some(dx), Some(dy)) => s += sim(&dx, &dy)?,
            // Both all-zero maps agree completely; one all-zero map shares nothing.
            (None, None) => s += 1.0,
            _ => {}
        }
    }
    let n = a.len() as f64;
    Ok(PairScores { cc: c / n, sim: s / n })
}

fn mean(v: impl Iterator<Item = PairScores>) -> PairScores {
    let all: Vec<_> = v.collect();
    let n = all.len() as f64;
    PairScores {
        cc: all.iter().map(|p| p.cc).sum::<f64>() / n,
        sim: all.iter().map(|p| p.sim).sum::<f64>() / n,
    }
}

/// Compares predictions with each video's own audio against predictions with
/// zeroed audio and with audio borrowed from another, randomly chosen video.
/// Scores are frame means, then video means.
pub fn probe_audio<P: SaliencyPredictor + ?Sized>(pred: &P, dataset: &[VideoRecord], seed: u64) -> Result<ProbeReport> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("probe dataset is empty".into()));
    }
    let fused = pred.model_config().fusion_mode != FusionMode::None;
    if fused {
        if let Some(v) = dataset.iter().find(|v| v.audio.is_none()) {
            return Err(TrainError::MissingAudio(v.id.clone()));
        }
        if dataset.len() < 2 {
            return Err(TrainError::Config("swapping audio needs at least two videos".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut videos = Vec::with_capacity(dataset.len());
    for (i, video) in dataset.iter().enumerate() {
        let donor = if dataset.len() > 1 {
            let j = rng.random_range(0..dataset.len() - 1);
            &dataset[if j >= i { j + 1 } else { j }]
        } else {
            video
        };
        let real = predict_video_with(pred, video, AudioMode::Own)?;
        let zeroed = predict_video_with(pred, video, AudioMode::Zeroed)?;
        let swap_mode = donor.audio.as_ref().map_or(AudioMode::Own, AudioMode::From);
        let swapped = predict_video_with(pred, video, swap_mode)?;
        videos.push(ProbeVideo {
            video_id: video.id.clone(),
            frames: video.len(),
            zeroed: pair(&real, &zeroed)?,
            swapped: pair(&real, &swapped)?,
            swapped_from: donor.id.clone(),
        });
    }
    Ok(ProbeReport {
        zeroed: mean(videos.iter().map(|v| v.zeroed)),
        swapped: mean(videos.iter().map(|v| v.swapped)),
        videos,
    })
}

/// Aggregate table with columns `comparison,cc,sim`.
pub fn write_probe<W: Write>(out: W, report: &ProbeReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["comparison", "cc", "sim"])?;
    for (name, p) in [("zeroed audio", report.zeroed), ("swapped audio", report.swapped)] {
        w.write_record([name.to_string(), p.cc.to_string(), p.sim.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-video rows: `video_id,comparison,cc,sim,swapped_from`.
pub fn write_probe_videos<W: Write>(out: W, report: &ProbeReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["video_id", "comparison", "cc", "sim", "swapped_from"])?;
    for v in &report.videos {
        for (name, p) in [("zeroed audio", v.zeroed), ("swapped audio", v.swapped)] {
            w.write_record([v.video_id.clone(), name.to_string(), p.cc.to_string(), p.sim.to_string(), v.swapped_from.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}
