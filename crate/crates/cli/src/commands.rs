use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use vinet_core::data::{generate_synthetic, load_dataset, load_model, save_model, VideoRecord};
use vinet_core::metrics::{write_report, SaliencyMap};
use vinet_core::model::{count_parameters, end_to_end_gradcheck, shape_trace, FusionMode, Preset, ViNet, FIRST_LAYER};
use vinet_core::tensor::gradcheck::op_suite;
use vinet_core::train::{
    ablate_clip_size, ablate_hierarchy, evaluate, predict_video, probe_audio, train, write_ablation, write_curve,
    write_probe, write_probe_videos, write_summary, TrainError,
};

use crate::config::{resolve, FlagOverrides, RunConfig};
use crate::{Classify, Cli, Command, Common, Failure};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

type Outcome<T = ()> = Result<T, Failure>;

pub fn execute(cli: &Cli) -> Outcome {
    let c = &cli.common;
    let flags = FlagOverrides {
        preset: c.preset,
        seed: c.seed,
        clip_size: c.clip_size,
        fusion: c.fusion,
        sets: c.sets.clone(),
    };
    let cfg = resolve(c.config.as_deref(), &flags).invalid()?;
    match &cli.command {
        Command::Shapes => shapes(&cfg),
        Command::Synth => synth(c, &cfg),
        Command::Train => run_train(c, &cfg),
        Command::Eval => eval(c, &cfg),
        Command::Infer => infer(c, &cfg),
        Command::AblateClip { sizes } => ablate_clip(c, &cfg, sizes),
        Command::AblateHierarchy => ablate_hier(c, &cfg),
        Command::ProbeAudio => probe(c, &cfg),
        Command::Gradcheck => gradcheck(c, &cfg),
    }
}

/// Bad input from the user exits with 1; anything else with 2.
fn classify(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) | TrainError::MissingAudio(_) | TrainError::EmptyDataset(_) => {
            Failure::Invalid(e.into())
        }
        other => Failure::Runtime(other.into()),
    }
}

fn out_dir(c: &Common) -> Outcome<&Path> {
    fs::create_dir_all(&c.out)
        .with_context(|| format!("creating {}", c.out.display()))
        .runtime()?;
    Ok(&c.out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).runtime()
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("×")
}

fn shapes(cfg: &RunConfig) -> Outcome {
    let trace = shape_trace(&cfg.model).invalid()?;
    let x4 = trace
        .iter()
        .find(|(l, _)| l == "X4")
        .map(|(_, s)| s.clone())
        .ok_or_else(|| Failure::Runtime(anyhow!("shape trace has no X4 entry")))?;
    println!("input {}", dims(&cfg.model.clip_shape()));
    for (label, shape) in &trace {
        println!("{label} {}", dims(shape));
    }
    println!("X4 = {}", dims(&x4));
    println!("parameters {}", count_parameters(&cfg.model).invalid()?);
    Ok(())
}

fn fresh_dir(path: &Path) -> Outcome {
    if path.exists() {
        fs::remove_dir_all(path)
            .with_context(|| format!("clearing {}", path.display()))
            .runtime()?;
    }
    Ok(())
}

/// Writes `videos` synthetic videos to `dir`, replacing what was there.
fn make_synthetic(dir: &Path, cfg: &RunConfig, videos: usize, seed: u64) -> Outcome<Vec<VideoRecord>> {
    fresh_dir(dir)?;
    generate_synthetic(dir, &cfg.synth.options(videos, seed)).runtime()?;
    load_dataset(dir).runtime()
}

fn synth(c: &Common, cfg: &RunConfig) -> Outcome {
    let out = out_dir(c)?;
    let s = &cfg.synth;
    let train = make_synthetic(&out.join("train"), cfg, s.videos, s.seed)?;
    let val = make_synthetic(&out.join("val"), cfg, s.val_videos, s.seed.wrapping_add(1))?;
    println!(
        "wrote {} training and {} validation videos of {} frames to {}",
        train.len(),
        val.len(),
        s.frames,
        out.display()
    );
    Ok(())
}

fn load(root: &Path) -> Outcome<Vec<VideoRecord>> {
    let videos = load_dataset(root).invalid()?;
    if videos.is_empty() {
        return Err(Failure::Invalid(anyhow!("no videos found under {}", root.display())));
    }
    Ok(videos)
}

/// Training and validation sets: `--data`/`--val-data`, the last video held
/// out when only `--data` is given, or fresh synthetic data otherwise.
fn train_split(c: &Common, cfg: &RunConfig) -> Outcome<(Vec<VideoRecord>, Vec<VideoRecord>)> {
    match (&c.data, &c.val_data) {
        (Some(d), Some(v)) => Ok((load(d)?, load(v)?)),
        (Some(d), None) => {
            let mut train = load(d)?;
            if train.len() < 2 {
                return Err(Failure::Invalid(anyhow!(
                    "need --val-data or at least two videos under {}",
                    d.display()
                )));
            }
            let val = train.split_off(train.len() - 1);
            log::info!("holding out '{}' for validation", val[0].id);
            Ok((train, val))
        }
        (None, _) => {
            let root = out_dir(c)?.join("synth");
            log::info!("no --data given; generating synthetic data under {}", root.display());
            let s = &cfg.synth;
            let train = make_synthetic(&root.join("train"), cfg, s.videos, s.seed)?;
            let val = match &c.val_data {
                Some(v) => load(v)?,
                None => make_synthetic(&root.join("val"), cfg, s.val_videos, s.seed.wrapping_add(1))?,
            };
            Ok((train, val))
        }
    }
}

/// The dataset scored by `eval`, `infer` and `probe-audio`.
fn eval_set(c: &Common, cfg: &RunConfig) -> Outcome<Vec<VideoRecord>> {
    match &c.data {
        Some(d) => load(d),
        None => {
            let root = out_dir(c)?.join("synth").join("val");
            log::info!("no --data given; generating synthetic data under {}", root.display());
            make_synthetic(&root, cfg, cfg.synth.val_videos, cfg.synth.seed.wrapping_add(1))
        }
    }
}

fn model_for(c: &Common, cfg: &RunConfig) -> Outcome<ViNet> {
    match &c.checkpoint {
        Some(p) => {
            let model = load_model(p).invalid()?;
            if model.config() != &cfg.model {
                log::info!("using the model configuration stored with {}", p.display());
            }
            Ok(model)
        }
        None => {
            log::warn!("no --checkpoint given; using an untrained model");
            ViNet::new(cfg.model.clone(), cfg.train.seed).invalid()
        }
    }
}

fn run_train(c: &Common, cfg: &RunConfig) -> Outcome {
    let (train_set, val_set) = train_split(c, cfg)?;
    let model = match &c.checkpoint {
        Some(p) => load_model(p).invalid()?,
        None => ViNet::new(cfg.model.clone(), cfg.train.seed).invalid()?,
    };
    let outcome = train(model, &train_set, &val_set, &cfg.train).map_err(classify)?;
    let out = out_dir(c)?;
    save_model(&out.join("model.vnt"), &outcome.model, outcome.best_step as u64, cfg.train.seed).runtime()?;
    let mut curve = Vec::new();
    write_curve(&mut curve, &outcome.curve).runtime()?;
    write_file(&out.join("curve.txt"), &curve)?;
    let json = serde_json::to_vec_pretty(cfg).runtime()?;
    write_file(&out.join("config.json"), &json)?;
    println!(
        "best validation cc {:.4} at step {} after {} steps{}",
        outcome.best_val_cc,
        outcome.best_step,
        outcome.steps_run,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn eval(c: &Common, cfg: &RunConfig) -> Outcome {
    let model = model_for(c, cfg)?;
    let data = eval_set(c, cfg)?;
    let report = evaluate(&model, &data, &cfg.eval).map_err(classify)?;
    let out = out_dir(c)?;
    let mut frames = Vec::new();
    write_report(&mut frames, &report.frames).runtime()?;
    write_file(&out.join("frames.csv"), &frames)?;
    let mut summary = Vec::new();
    write_summary(&mut summary, &report).map_err(classify)?;
    write_file(&out.join("summary.csv"), &summary)?;
    print!("{}", String::from_utf8_lossy(&summary));
    Ok(())
}

/// 8-bit grayscale with values `round(255 * v / max)`; an all-zero map stays black.
fn to_png(map: &SaliencyMap) -> image::GrayImage {
    let max = map.values().iter().cloned().fold(0.0, f64::max);
    let pixels = map
        .values()
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 })
        .collect();
    image::GrayImage::from_raw(map.width() as u32, map.height() as u32, pixels).expect("buffer matches map size")
}

fn infer(c: &Common, cfg: &RunConfig) -> Outcome {
    let model = model_for(c, cfg)?;
    let data = eval_set(c, cfg)?;
    let root = out_dir(c)?.join("maps");
    let mut written = 0;
    for video in &data {
        let maps = predict_video(&model, video).map_err(classify)?;
        let dir = root.join(&video.id);
        fresh_dir(&dir)?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
        for (t, map) in maps.iter().enumerate() {
            let path: PathBuf = dir.join(format!("{t:05}.png"));
            to_png(map).save(&path).with_context(|| format!("writing {}", path.display())).runtime()?;
            written += 1;
        }
    }
    println!("wrote {written} maps under {}", root.display());
    Ok(())
}

fn emit_table(path: &Path, bytes: &[u8]) -> Outcome {
    write_file(path, bytes)?;
    print!("{}", String::from_utf8_lossy(bytes));
    Ok(())
}

fn parse_sizes(sizes: &str, cfg: &RunConfig) -> anyhow::Result<Vec<usize>> {
    let parsed = sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("'{s}' is not a clip length")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if parsed.is_empty() {
        bail!("no clip lengths given");
    }
    for &s in &parsed {
        let m = vinet_core::model::ModelConfig {
            clip_len: s,
            ..cfg.model.clone()
        };
        m.validate().with_context(|| format!("clip length {s}"))?;
    }
    Ok(parsed)
}

fn ablate_clip(c: &Common, cfg: &RunConfig, sizes: &str) -> Outcome {
    let sizes = parse_sizes(sizes, cfg).invalid()?;
    let (train_set, val_set) = train_split(c, cfg)?;
    let rows = ablate_clip_size(&sizes, &cfg.model, &cfg.train, &train_set, &val_set).map_err(classify)?;
    let mut table = Vec::new();
    write_ablation(&mut table, &rows).map_err(classify)?;
    emit_table(&out_dir(c)?.join("ablate_clip.csv"), &table)
}

fn ablate_hier(c: &Common, cfg: &RunConfig) -> Outcome {
    let (train_set, val_set) = train_split(c, cfg)?;
    let rows = ablate_hierarchy(&cfg.model, &cfg.train, &train_set, &val_set).map_err(classify)?;
    let mut table = Vec::new();
    write_ablation(&mut table, &rows).map_err(classify)?;
    emit_table(&out_dir(c)?.join("ablate_hierarchy.csv"), &table)
}

fn probe(c: &Common, cfg: &RunConfig) -> Outcome {
    let model = model_for(c, cfg)?;
    let data = eval_set(c, cfg)?;
    let report = probe_audio(&model, &data, cfg.eval.seed).map_err(classify)?;
    let out = out_dir(c)?;
    let mut per_video = Vec::new();
    write_probe_videos(&mut per_video, &report).map_err(classify)?;
    write_file(&out.join("probe_videos.csv"), &per_video)?;
    let mut table = Vec::new();
    write_probe(&mut table, &report).map_err(classify)?;
    emit_table(&out.join("probe.csv"), &table)
}

fn gradcheck(c: &Common, cfg: &RunConfig) -> Outcome {
    if cfg.model.preset == Preset::Paper {
        return Err(Failure::Invalid(anyhow!(
            "gradcheck runs in f64 at toy scale; use --preset toy"
        )));
    }
    let seed = cfg.train.seed;
    let mut rows = Vec::new();
    for (op, report) in op_suite(seed).runtime()? {
        rows.push((op, report));
    }
    let first = end_to_end_gradcheck(&cfg.model, &FIRST_LAYER, None, seed).runtime()?;
    rows.push(("model".to_string(), first));
    let fusion_params: &[&str] = match cfg.model.fusion_mode {
        FusionMode::None => &[],
        FusionMode::Concat => &["audio.conv1.weight", "fusion.reduce.weight"],
        FusionMode::Bilinear => &["audio.conv2.weight", "fusion.bilinear.A", "fusion.bilinear.b"],
    };
    if !fusion_params.is_empty() {
        let fused = end_to_end_gradcheck(&cfg.model, fusion_params, Some(24), seed).runtime()?;
        rows.push(("model".to_string(), fused));
    }

    let mut table = String::from("check,param,max_rel_error,checked,frozen\n");
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (check, report) in &rows {
        ok &= report.passes(GRADCHECK_TOLERANCE);
        for p in &report.params {
            worst = worst.max(p.max_rel_error);
            table.push_str(&format!("{check},{},{:.3e},{},{}\n", p.name, p.max_rel_error, p.checked, p.frozen));
        }
    }
    let out = out_dir(c)?;
    emit_table(&out.join("gradcheck.csv"), table.as_bytes())?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    if !ok {
        return Err(Failure::Runtime(anyhow!(
            "gradient check failed: max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}
