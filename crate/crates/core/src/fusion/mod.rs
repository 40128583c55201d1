//! Audio feature branch and the two ways of merging audio into X4:
//! channel concatenation with a 1x1x1 reduction, and a channel-shared
//! bilinear form over pooled visual positions and audio bins.

use crate::model::{conv_params, AudioArg, Backend, ModelConfig, ModelError, ParamKind, Result, TapeBackend};
use crate::tensor::{trilinear_sample_axis, Real, Tensor, Tape, Var};

/// Provenance of an audio feature tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioSource {
    Waveform,
    Precomputed,
    Zeroed,
}

/// Audio features of shape `[Ca, 3, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub tensor: Tensor<f32>,
    pub source: AudioSource,
}

impl AudioFeatures {
    pub fn new(tensor: Tensor<f32>, source: AudioSource) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[1] != 3 || s[2] != 1 {
            return Err(ModelError::Input(format!("audio features must be [Ca, 3, 1], got {s:?}")));
        }
        if !tensor.is_finite() {
            return Err(ModelError::Input("audio features contain non-finite values".into()));
        }
        Ok(Self { tensor, source })
    }
}

/// All-zero features of the same shape.
pub fn zero_audio(like: &AudioFeatures) -> AudioFeatures {
    AudioFeatures {
        tensor: Tensor::zeros(like.tensor.shape()).expect("shape already validated"),
        source: AudioSource::Zeroed,
    }
}

/// Audio handed to the model for one clip.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioInput {
    /// Raw samples covering the clip; resampled to `audio_len`.
    Waveform(Vec<f32>),
    Features(AudioFeatures),
}

impl AudioInput {
    pub(crate) fn place<T: Real>(&self, b: &mut TapeBackend<'_, T>, cfg: &ModelConfig) -> Result<AudioArg<Var>> {
        Ok(match self {
            AudioInput::Waveform(samples) => {
                let r = resample(samples, cfg.audio_len)?;
                let t = Tensor::new(&[1, cfg.audio_len], r.into_iter().map(T::from_f64_lossy).collect())?;
                AudioArg::Waveform(b.constant(t))
            }
            AudioInput::Features(f) => AudioArg::Features(b.constant(f.tensor.cast())),
        })
    }
}

/// Linear resampling to `len` samples on half-sample centres.
pub fn resample(samples: &[f32], len: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(ModelError::Input("empty waveform".into()));
    }
    if len == 0 {
        return Err(ModelError::Input("resample length must be positive".into()));
    }
    Ok(trilinear_sample_axis(samples.len(), len)
        .into_iter()
        .map(|s| {
            let (lo, hi) = (samples[s.lo] as f64, samples[s.hi] as f64);
            lo + (hi - lo) * s.frac
        })
        .collect())
}

/// One stage of the audio stack: conv1d, ReLU, max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AudioStage {
    pub out_channels: Option<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `None` pools whatever remains down to 3 bins.
    pub pool: Option<usize>,
}

/// The stack; the last stage's width is the configured audio width.
pub const AUDIO_STAGES: [AudioStage; 3] = [
    AudioStage { out_channels: Some(8), kernel: 9, stride: 4, pad: 4, pool: Some(4) },
    AudioStage { out_channels: Some(16), kernel: 5, stride: 2, pad: 2, pool: Some(4) },
    AudioStage { out_channels: None, kernel: 3, stride: 1, pad: 1, pool: None },
];

/// `[1, audio_len]` waveform to `[Ca, 3, 1]` features.
pub fn audio_branch<B: Backend>(b: &mut B, cfg: &ModelConfig, wave: B::V) -> Result<B::V> {
    let s = b.shape_of(wave);
    if s != [1, cfg.audio_len] {
        return Err(ModelError::Input(format!(
            "audio branch expects [1, {}], got {s:?}",
            cfg.audio_len
        )));
    }
    let mut x = b.reshape(wave, &[1, cfg.audio_len, 1, 1])?;
    let mut cin = 1;
    for (i, stage) in AUDIO_STAGES.iter().enumerate() {
        let cout = stage.out_channels.unwrap_or(cfg.audio_channels);
        let (w, bias) = conv_params(b, &format!("audio.conv{}", i + 1), [cout, cin, stage.kernel, 1, 1], true)?;
        x = b.conv3d(x, w, bias, [stage.stride, 1, 1], [stage.pad, 0, 0])?;
        x = b.relu(x)?;
        let pool = stage.pool.unwrap_or(b.shape_of(x)[1] / 3);
        x = b.maxpool3d(x, [pool, 1, 1], [pool, 1, 1])?;
        cin = cout;
    }
    let out = b.reshape(x, &[cfg.audio_channels, 3, 1])?;
    b.mark("audio", out);
    Ok(out)
}

/// Tiles the per-channel audio mean over `T x H x W`, concatenates on
/// channels and reduces back with a 1x1x1 conv.
pub fn fuse_concat<B: Backend>(b: &mut B, cfg: &ModelConfig, visual: B::V, audio: B::V) -> Result<B::V> {
    let vs = b.shape_of(visual);
    let ca = b.shape_of(audio)[0];
    if ca != vs[0] {
        return Err(ModelError::Input(format!(
            "audio width {ca} does not match visual width {}",
            vs[0]
        )));
    }
    let flat = b.reshape(audio, &[ca, 3])?;
    let mean = b.mean_axis(flat, 1)?;
    let mean = b.reshape(mean, &[ca, 1, 1, 1])?;
    let tiled = b.broadcast_to(mean, &vs)?;
    let joined = b.concat(&[visual, tiled], 0)?;
    b.mark("fusion.concat", joined);
    let c4 = cfg.encoder_widths[3];
    let (w, bias) = conv_params(b, "fusion.reduce", [c4, 2 * c4, 1, 1, 1], true)?;
    b.conv3d(joined, w, bias, [1, 1, 1], [0, 0, 0])
}

/// Max-pools X4 by `fusion_pool`, flattens to `[C4, x0]`, and applies
/// `y[c, k] = sum_ij x1[c, i] A[i, k, j] x2[c, j] + b[k]` with `k` ranging
/// over X4's `T x H x W` positions, so the result reshapes back to X4.
pub fn fuse_bilinear<B: Backend>(b: &mut B, cfg: &ModelConfig, visual: B::V, audio: B::V) -> Result<B::V> {
    let vs = b.shape_of(visual);
    let pooled = b.maxpool3d(visual, cfg.fusion_pool, cfg.fusion_pool)?;
    let ps = b.shape_of(pooled);
    let x0 = ps[1] * ps[2] * ps[3];
    let x = vs[1] * vs[2] * vs[3];
    let x1 = b.reshape(pooled, &[vs[0], x0])?;
    let a_shape = b.shape_of(audio);
    let y0 = a_shape[1] * a_shape[2];
    let x2 = b.reshape(audio, &[a_shape[0], y0])?;
    let a = b.param("fusion.bilinear.A", &[x0, x, y0], x0 * y0, ParamKind::Weight)?;
    let bias = b.param("fusion.bilinear.b", &[x], x0 * y0, ParamKind::Bias)?;
    let y = b.bilinear(x1, a, x2, bias)?;
    b.reshape(y, &vs)
}

/// Runs only the audio branch of a model on raw samples.
pub fn compute_audio_features(model: &crate::model::ViNet, samples: &[f32]) -> Result<AudioFeatures> {
    let cfg = model.config();
    let mut tape = Tape::<f32>::new();
    let bound = model.params().bind(&mut tape, false);
    let mut b = TapeBackend::new(&mut tape, &bound);
    let AudioArg::Waveform(w) = AudioInput::Waveform(samples.to_vec()).place(&mut b, cfg)? else {
        unreachable!()
    };
    let out = audio_branch(&mut b, cfg, w)?;
    AudioFeatures::new(tape.value(out).clone(), AudioSource::Waveform)
}
