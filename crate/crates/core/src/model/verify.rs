use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward, AudioArg, Bound, ModelConfig, ModelError, Result, TapeBackend, ViNet};
use crate::fusion::resample;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{Tensor, TensorError};

/// Parameters of the first encoder convolution.
pub const FIRST_LAYER: [&str; 2] = ["enc1.spatial.weight", "enc1.spatial.bias"];

/// Finite-difference check of the KL loss of a freshly initialised model
/// with respect to the named parameters, in `f64`. Clip, target and audio
/// are drawn from `seed`; `max_coords` limits the coordinates per parameter.
pub fn end_to_end_gradcheck(
    cfg: &ModelConfig,
    names: &[&str],
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let model = ViNet::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let shape = cfg.clip_shape();
    let clip = Tensor::new(&shape, (0..shape.iter().product()).map(|_| f64::from(rng.random::<f32>())).collect())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let q: Vec<f64> = (0..cfg.height * cfg.width).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = q.iter().sum();
    let target = Tensor::new(&[cfg.height, cfg.width], q.iter().map(|v| v / total).collect())?;
    let audio: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wave = resample(&audio, cfg.audio_len)?;

    let mut checked = Vec::with_capacity(names.len());
    for n in names {
        let t = model.params().get(n).ok_or_else(|| ModelError::MissingParam(n.to_string()))?;
        checked.push((n.to_string(), t.cast::<f64>()));
    }
    let report = grad_check(
        &checked,
        |tape, vars| {
            let mut bound = Bound::new();
            for (name, t) in model.params().iter() {
                bound.insert(name.to_string(), tape.constant(t.cast()));
            }
            for (name, &v) in names.iter().zip(vars) {
                bound.insert(name.to_string(), v);
            }
            let mut b = TapeBackend::new(tape, &bound);
            let c = b.constant(clip.clone());
            let w = b.constant(Tensor::new(&[1, cfg.audio_len], wave.clone())?);
            let map = forward(&mut b, cfg, c, Some(AudioArg::Waveform(w))).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::InvalidArgument {
                    op: "forward",
                    detail: other.to_string(),
                },
            })?;
            let p = tape.normalize_to_distribution(map)?;
            let qv = tape.constant(target.clone());
            tape.kldiv(p, qv, 1e-7)
        },
        &GradCheckOptions {
            max_coords,
            seed,
            ..GradCheckOptions::default()
        },
    )?;
    Ok(report)
}
