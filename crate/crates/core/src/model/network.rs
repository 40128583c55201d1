use crate::fusion::{self, AudioInput};
use crate::tensor::{Real, Tape, Tensor, Var};

use super::backend::{conv_params, Backend, Bound, ParamKind, ParamSpec, ShapeBackend, TapeBackend};
use super::config::{FusionMode, ModelConfig, SkipMode, UpsampleMode};
use super::params::{count_specs, Params};
use super::{ModelError, Result};

/// Encoder outputs, finest first.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid<V> {
    pub x1: V,
    pub x2: V,
    pub x3: V,
    pub x4: V,
}

/// Audio as it enters the graph.
#[derive(Clone, Copy, Debug)]
pub enum AudioArg<V> {
    /// `[1, audio_len]` resampled waveform.
    Waveform(V),
    /// `[Ca, 3, 1]` features.
    Features(V),
}

/// Spatial conv, ReLU, temporal conv, ReLU, max-pool. The first stage
/// strides 2 spatially in its conv and pools only spatially; later stages
/// pool by 2 on every axis.
pub fn encoder_stage<B: Backend>(b: &mut B, name: &str, x: B::V, out_channels: usize, first: bool) -> Result<B::V> {
    let cin = b.shape_of(x)[0];
    let c = out_channels;
    let (spatial_stride, pool) = if first { ([1, 2, 2], [1, 2, 2]) } else { ([1, 1, 1], [2, 2, 2]) };
    let (w, bias) = conv_params(b, &format!("{name}.spatial"), [c, cin, 1, 3, 3], true)?;
    let x = b.conv3d(x, w, bias, spatial_stride, [0, 1, 1])?;
    let x = b.relu(x)?;
    let (w, bias) = conv_params(b, &format!("{name}.temporal"), [c, c, 3, 1, 1], true)?;
    let x = b.conv3d(x, w, bias, [1, 1, 1], [1, 0, 0])?;
    let x = b.relu(x)?;
    b.maxpool3d(x, pool, pool)
}

/// Four stages of spatial conv, temporal conv and max-pool. Cumulative
/// strides: temporal 1,2,2,2 and spatial 4,2,2,2.
pub fn encode<B: Backend>(b: &mut B, cfg: &ModelConfig, clip: B::V) -> Result<Pyramid<B::V>> {
    let shape = b.shape_of(clip);
    if shape != cfg.clip_shape() {
        return Err(ModelError::Input(format!(
            "clip shape {shape:?} does not match config {:?}",
            cfg.clip_shape()
        )));
    }
    let mut x = clip;
    let mut levels = Vec::with_capacity(4);
    for (s, &c) in cfg.encoder_widths.iter().enumerate() {
        x = encoder_stage(b, &format!("enc{}", s + 1), x, c, s == 0)?;
        b.mark(&format!("X{}", s + 1), x);
        levels.push(x);
    }
    Ok(Pyramid {
        x1: levels[0],
        x2: levels[1],
        x3: levels[2],
        x4: levels[3],
    })
}

/// Skip join before and after the merge conv.
#[derive(Clone, Copy, Debug)]
pub struct SkipFuse<V> {
    pub pre_merge: V,
    pub output: V,
}

/// Joins a skip feature to the decoder state. The skip is max-pooled in time
/// down to the state's length and projected to its width by a 1x1x1 conv,
/// then concatenated on T (merged by a stride-2 temporal conv) or on C
/// (merged by a same-padded conv).
pub fn skip_fuse<B: Backend>(b: &mut B, name: &str, state: B::V, skip: B::V, mode: SkipMode) -> Result<SkipFuse<B::V>> {
    let (ss, ks) = (b.shape_of(state), b.shape_of(skip));
    let aligned = ss.len() == 4 && ks.len() == 4 && ss[2..] == ks[2..] && ks[1] >= ss[1] && ks[1] % ss[1] == 0;
    if !aligned {
        return Err(ModelError::Input(format!(
            "{name}: skip {ks:?} cannot be aligned to decoder state {ss:?}"
        )));
    }
    let ratio = ks[1] / ss[1];
    let mut s = skip;
    if ratio > 1 {
        s = b.maxpool3d(s, [ratio, 1, 1], [ratio, 1, 1])?;
    }
    let d = ss[0];
    let (w, bias) = conv_params(b, &format!("{name}.align"), [d, ks[0], 1, 1, 1], true)?;
    s = b.conv3d(s, w, bias, [1, 1, 1], [0, 0, 0])?;
    let (pre_merge, merged) = match mode {
        SkipMode::Temporal => {
            let pre = b.concat(&[state, s], 1)?;
            let (w, bias) = conv_params(b, &format!("{name}.merge"), [d, d, 3, 3, 3], true)?;
            (pre, b.conv3d(pre, w, bias, [2, 1, 1], [1, 1, 1])?)
        }
        SkipMode::Channel => {
            let pre = b.concat(&[state, s], 0)?;
            let (w, bias) = conv_params(b, &format!("{name}.merge"), [d, 2 * d, 3, 3, 3], true)?;
            (pre, b.conv3d(pre, w, bias, [1, 1, 1], [1, 1, 1])?)
        }
    };
    let output = b.relu(merged)?;
    Ok(SkipFuse { pre_merge, output })
}

/// Five upsample+conv blocks (the first three joined with X3, X2, X1 when
/// hierarchy is on) and a final block collapsing time to one sigmoid map.
pub fn decode<B: Backend>(b: &mut B, cfg: &ModelConfig, pyr: &Pyramid<B::V>) -> Result<B::V> {
    let top = b.shape_of(pyr.x4);
    if top != cfg.x4_shape() {
        return Err(ModelError::Input(format!(
            "decoder input {top:?} does not match config X4 {:?}",
            cfg.x4_shape()
        )));
    }
    let skips = [pyr.x3, pyr.x2, pyr.x1];
    let mut x = pyr.x4;
    for (k, &d) in cfg.decoder_widths.iter().enumerate() {
        let name = format!("dec{}", k + 1);
        let skip = skips.get(k).copied().filter(|_| cfg.use_hierarchy);
        x = decoder_block(b, &name, x, skip, d, cfg.upsample_mode, cfg.skip_mode)?;
        b.mark(&name, x);
    }
    let map = output_block(b, "dec6", x)?;
    b.mark("map", map);
    Ok(map)
}

/// Doubles H and W, convolves to `out_channels` with ReLU, and joins `skip`
/// when given.
pub fn decoder_block<B: Backend>(
    b: &mut B,
    name: &str,
    x: B::V,
    skip: Option<B::V>,
    out_channels: usize,
    upsample: UpsampleMode,
    skip_mode: SkipMode,
) -> Result<B::V> {
    let s = b.shape_of(x);
    let cin = s[0];
    let x = match upsample {
        UpsampleMode::Trilinear => b.upsample(x, [s[1], 2 * s[2], 2 * s[3]])?,
        UpsampleMode::TransposeConv => {
            let fan_in = cin * 4;
            let w = b.param(&format!("{name}.up.weight"), &[cin, cin, 1, 2, 2], fan_in, ParamKind::Weight)?;
            let bias = b.param(&format!("{name}.up.bias"), &[cin], fan_in, ParamKind::Bias)?;
            b.conv_transpose3d(x, w, Some(bias), [1, 2, 2])?
        }
    };
    let (w, bias) = conv_params(b, &format!("{name}.conv"), [out_channels, cin, 3, 3, 3], true)?;
    let x = b.conv3d(x, w, bias, [1, 1, 1], [1, 1, 1])?;
    let x = b.relu(x)?;
    match skip {
        Some(skip) => Ok(skip_fuse(b, &format!("{name}.skip"), x, skip, skip_mode)?.output),
        None => Ok(x),
    }
}

/// Collapses time with a conv spanning all remaining frames, then a
/// one-channel 1x1x1 conv and sigmoid; returns `[H, W]`.
pub fn output_block<B: Backend>(b: &mut B, name: &str, x: B::V) -> Result<B::V> {
    let s = b.shape_of(x);
    let (c, t) = (s[0], s[1]);
    let (w, bias) = conv_params(b, &format!("{name}.conv"), [c, c, t, 3, 3], true)?;
    let x = b.conv3d(x, w, bias, [1, 1, 1], [0, 1, 1])?;
    let x = b.relu(x)?;
    let (w, bias) = conv_params(b, &format!("{name}.out"), [1, c, 1, 1, 1], true)?;
    let x = b.conv3d(x, w, bias, [1, 1, 1], [0, 0, 0])?;
    let x = b.sigmoid(x)?;
    b.reshape(x, &[s[2], s[3]])
}

/// Encoder, optional audio fusion replacing X4, decoder. Audio is ignored
/// when fusion is off.
pub fn forward<B: Backend>(b: &mut B, cfg: &ModelConfig, clip: B::V, audio: Option<AudioArg<B::V>>) -> Result<B::V> {
    let mut pyr = encode(b, cfg, clip)?;
    if cfg.fusion_mode != FusionMode::None {
        let feats = match audio.ok_or(ModelError::MissingAudio)? {
            AudioArg::Waveform(w) => fusion::audio_branch(b, cfg, w)?,
            AudioArg::Features(f) => {
                let want = [cfg.audio_channels, 3, 1];
                if b.shape_of(f) != want {
                    return Err(ModelError::Input(format!(
                        "audio features {:?} do not match {want:?}",
                        b.shape_of(f)
                    )));
                }
                f
            }
        };
        pyr.x4 = match cfg.fusion_mode {
            FusionMode::Concat => fusion::fuse_concat(b, cfg, pyr.x4, feats)?,
            FusionMode::Bilinear => fusion::fuse_bilinear(b, cfg, pyr.x4, feats)?,
            FusionMode::None => unreachable!(),
        };
        b.mark("X4 fused", pyr.x4);
    }
    decode(b, cfg, &pyr)
}

fn symbolic(cfg: &ModelConfig) -> Result<ShapeBackend> {
    cfg.validate()?;
    let mut b = ShapeBackend::new();
    let clip = b.input(&cfg.clip_shape());
    let audio = b.input(&[1, cfg.audio_len]);
    forward(&mut b, cfg, clip, Some(AudioArg::Waveform(audio)))?;
    Ok(b)
}

/// Every parameter the configured architecture uses, in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    Ok(symbolic(cfg)?.into_specs())
}

pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(count_specs(&param_specs(cfg)?))
}

/// Labelled intermediate shapes (pyramid levels, decoder blocks, output),
/// computed without allocating any weights.
pub fn shape_trace(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    Ok(symbolic(cfg)?.marks().to_vec())
}

/// A configured network with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ViNet {
    config: ModelConfig,
    params: Params,
}

impl ViNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let specs = param_specs(&config)?;
        let params = Params::init(&specs, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        params.check_against(&param_specs(&config)?)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn into_params(self) -> Params {
        self.params
    }

    /// Records the forward pass on `tape` with parameters already bound there.
    pub fn forward_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        clip: &Tensor<T>,
        audio: Option<&AudioInput>,
    ) -> Result<Var> {
        let mut b = TapeBackend::new(tape, bound);
        let clip = b.constant(clip.clone());
        let audio = match (self.config.fusion_mode, audio) {
            (FusionMode::None, _) | (_, None) => None,
            (_, Some(a)) => Some(a.place(&mut b, &self.config)?),
        };
        forward(&mut b, &self.config, clip, audio)
    }

    /// Saliency map `[H0, W0]` for one clip, on a fresh tape.
    pub fn predict(&self, clip: &Tensor<f32>, audio: Option<&AudioInput>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &bound, clip, audio)?;
        Ok(tape.value(out).clone())
    }
}
