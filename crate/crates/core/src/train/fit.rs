use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::infer::validation_cc;
use super::{Result, TrainConfig, TrainError};
use crate::data::{sample_clip, ClipSample, VideoRecord};
use crate::fusion::AudioInput;
use crate::model::ViNet;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean batch loss before this step's update.
    pub kldiv: f64,
    /// Validation CC after the update, on validation steps.
    pub val_cc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the best validation pass.
    pub model: ViNet,
    pub curve: Vec<CurvePoint>,
    pub best_step: usize,
    pub best_val_cc: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Mean KL loss over `clips` and its gradient for every parameter.
pub fn batch_gradient(model: &ViNet, clips: &[&ClipSample], kl_eps: f64) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let mut grads: BTreeMap<String, Vec<f32>> =
        model.params().iter().map(|(n, t)| (n.to_string(), vec![0.0; t.len()])).collect();
    let mut total = 0.0;
    for clip in clips {
        let target = clip
            .target
            .as_ref()
            .ok_or_else(|| TrainError::EmptyDataset(format!("frame {} of '{}' has no target", clip.t, clip.video_id)))?;
        let mut tape = Tape::<f32>::new();
        let bound = model.params().bind(&mut tape, true);
        let audio = clip.audio.clone().map(AudioInput::Waveform);
        let out = model.forward_on(&mut tape, &bound, &clip.frames, audio.as_ref())?;
        let shape = tape.shape(out).to_vec();
        let q = Tensor::new(&shape, target.values().iter().map(|&v| v as f32).collect()).map_err(crate::model::ModelError::from)?;
        let q = tape.constant(q);
        let p = tape.normalize_to_distribution(out).map_err(crate::model::ModelError::from)?;
        let loss = tape.kldiv(p, q, kl_eps as f32).map_err(crate::model::ModelError::from)?;
        tape.backward(loss).map_err(crate::model::ModelError::from)?;
        total += f64::from(tape.value(loss).data()[0]);
        for (name, var) in bound.iter() {
            if let (Some(g), Some(acc)) = (tape.grad(var), grads.get_mut(name)) {
                acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
        }
    }
    let scale = 1.0 / clips.len().max(1) as f32;
    grads.values_mut().flatten().for_each(|g| *g *= scale);
    Ok((total / clips.len().max(1) as f64, grads))
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Describes the state at a non-finite loss and logs per-parameter norms.
fn dump_state(model: &ViNet, grads: &BTreeMap<String, Vec<f32>>, keys: &[(usize, usize)], last: Option<f64>) -> String {
    for (name, t) in model.params().iter() {
        let g = grads.get(name).map_or(f64::NAN, |g| norm(g));
        log::error!("  {name}: |w| = {:.4e}, |g| = {g:.4e}", norm(t.data()));
    }
    let worst = grads
        .iter()
        .filter(|(_, g)| g.iter().any(|x| !x.is_finite()))
        .map(|(n, _)| n.as_str())
        .next()
        .unwrap_or("none");
    format!(
        "batch (video, frame) {keys:?}, last finite loss {}, first non-finite gradient in '{worst}'",
        last.map_or("n/a".to_string(), |l| format!("{l:.6}"))
    )
}

/// Trains with Adam on the KL loss, validating every `val_interval` steps
/// and at the end, and returns the weights with the best validation CC.
/// Stops once `patience` validations pass without improvement.
pub fn train(mut model: ViNet, train_set: &[VideoRecord], val_set: &[VideoRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config().validate()?;
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation set is empty".into()));
    }
    // Frames that can carry a target.
    let usable: Vec<(usize, Vec<usize>)> = train_set
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let frames = (0..v.len()).filter(|&t| v.maps.is_some() || !v.fixations[t].is_empty()).collect::<Vec<_>>();
            (i, frames)
        })
        .filter(|(_, f)| !f.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(TrainError::EmptyDataset("no training frame has fixations or a saliency map".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: HashMap<(usize, usize), ClipSample> = HashMap::new();
    let mut state = AdamState::default();
    let adam = cfg.adam();
    let mut curve = Vec::new();
    let mut best = model.params().clone();
    let mut best_cc = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut steps_run = 0;
    let mut last_loss = None;

    for step in 1..=cfg.max_steps {
        let keys: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let (v, frames) = &usable[rng.random_range(0..usable.len())];
                (*v, frames[rng.random_range(0..frames.len())])
            })
            .collect();
        for &(v, t) in &keys {
            if !cache.contains_key(&(v, t)) {
                let clip = sample_clip(&train_set[v], t, model.config(), cfg.sigma)?;
                cache.insert((v, t), clip);
            }
        }
        let clips: Vec<&ClipSample> = keys.iter().map(|k| &cache[k]).collect();
        let (loss, grads) = batch_gradient(&model, &clips, cfg.kl_eps)?;
        if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
            log::error!("non-finite loss at step {step}; parameter and gradient norms follow");
            let detail = dump_state(&model, &grads, &keys, last_loss);
            return Err(TrainError::NonFinite { step, detail });
        }
        last_loss = Some(loss);
        adam_step(model.params_mut(), &grads, &mut state, &adam)?;
        steps_run = step;

        let val_cc = if step % cfg.val_interval == 0 || step == cfg.max_steps {
            Some(validation_cc(&model, val_set, cfg.sigma)?)
        } else {
            None
        };
        curve.push(CurvePoint { step, kldiv: loss, val_cc });
        if let Some(cc) = val_cc {
            log::info!("step {step}: kldiv {loss:.5}, val cc {cc:.4}");
            if cc > best_cc {
                best_cc = cc;
                best_step = step;
                best = model.params().clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if cfg.max_steps == 0 {
        best_cc = validation_cc(&model, val_set, cfg.sigma)?;
    }
    let model = ViNet::from_params(model.config().clone(), best)?;
    Ok(TrainOutcome {
        model,
        curve,
        best_step,
        best_val_cc: best_cc,
        steps_run,
        stopped_early,
    })
}

/// Whitespace-separated `step kldiv val_cc` lines under a header; steps
/// without validation show `nan`.
pub fn write_curve<W: Write>(mut out: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "step kldiv val_cc")?;
    for p in curve {
        match p.val_cc {
            Some(cc) => writeln!(out, "{} {} {}", p.step, p.kldiv, cc)?,
            None => writeln!(out, "{} {} nan", p.step, p.kldiv)?,
        }
    }
    Ok(())
}
