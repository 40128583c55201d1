//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use vinet_core::data::{
    encode_params, generate_synthetic, load_dataset, load_model, sample_clip, save_model, SynthOptions,
};
use vinet_core::fusion::fuse_bilinear;
use vinet_core::metrics::{auc_judd, cc, kldiv, nss, sauc, sim, Fixation, FixationRecord, SaliencyMap};
use vinet_core::model::{
    end_to_end_gradcheck, shape_trace, Bound, FusionMode, ModelConfig, TapeBackend, ViNet, FIRST_LAYER,
};
use vinet_core::tensor::gradcheck::op_suite;
use vinet_core::tensor::{Tape, Tensor};
use vinet_core::train::{
    adam_step, batch_gradient, predict_video, train, AdamConfig, AdamState, SaliencyPredictor, TrainConfig,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn vinet(args: &[&str]) -> Result<(i32, String), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vinet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    Ok((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned()))
}

fn synthetic(dir: &Path, n: usize, frames: usize, seed: u64) -> Vec<vinet_core::data::VideoRecord> {
    generate_synthetic(dir, &SynthOptions::new(n, frames, 32, 64, seed)).unwrap();
    load_dataset(dir).unwrap()
}

// ---- 1 ----
fn shape_contract() -> Check {
    let start = Instant::now();
    let (code, out) = vinet(&["shapes", "--preset", "paper"])?;
    let elapsed = start.elapsed();
    ensure(code == 0, format!("exit code {code}"))?;
    ensure(out.contains("input 3×32×224×384"), "input line missing")?;
    ensure(out.contains("X4 = 1024×4×7×12"), "X4 line missing")?;
    within(elapsed, Duration::from_secs(1))?;
    let mut checked = 0;
    for clip_len in [8, 16, 32, 48] {
        for (h, w) in [(32, 64), (64, 32), (96, 128)] {
            let cfg = ModelConfig {
                clip_len,
                height: h,
                width: w,
                ..ModelConfig::toy()
            };
            let trace = shape_trace(&cfg).map_err(|e| e.to_string())?;
            let x4 = &trace.iter().find(|(l, _)| l == "X4").ok_or("no X4")?.1;
            let want = vec![cfg.encoder_widths[3], clip_len / 8, h / 32, w / 32];
            ensure(x4 == &want, format!("toy {clip_len}x{h}x{w}: X4 {x4:?}, want {want:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("paper X4 1024×4×7×12 in {elapsed:.0?}; {checked} toy geometries"))
}

// ---- 2 ----
fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut ops = 0;
    for seed in 0..5 {
        for (op, report) in op_suite(seed).map_err(|e| e.to_string())? {
            ensure(report.passes(1e-4), format!("{op} seed {seed}: {:.3e}", report.max_rel_error()))?;
            worst = worst.max(report.max_rel_error());
            ops += 1;
        }
        let report = end_to_end_gradcheck(&ModelConfig::toy(), &FIRST_LAYER, None, seed).map_err(|e| e.to_string())?;
        ensure(report.passes(1e-4), format!("model seed {seed}: {:.3e}", report.max_rel_error()))?;
        worst = worst.max(report.max_rel_error());
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!("{ops} op checks + 5 end-to-end, max rel error {worst:.2e}, {elapsed:.0?}"))
}

// ---- 3 ----
fn roc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut ts = pos.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in ts {
        let tp = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
        let fp = neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
        pts.push((fp, tp));
    }
    pts.push((1.0, 1.0));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
    SaliencyMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap()
}

fn random_fixes(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> FixationRecord {
    FixationRecord::new(
        (0..n)
            .map(|_| Fixation {
                x: rng.random_range(0..w),
                y: rng.random_range(0..h),
            })
            .collect(),
    )
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let p = random_map(&mut rng, 8, 8).to_distribution().unwrap();
        let q = random_map(&mut rng, 8, 8).to_distribution().unwrap();
        let k = rng.random_range(1..10);
        let f = random_fixes(&mut rng, k, 8, 8);
        let (pv, qv) = (p.values(), q.values());
        let n = 64.0;
        let (mp, mq) = (pv.iter().sum::<f64>() / n, qv.iter().sum::<f64>() / n);
        let cov: f64 = pv.iter().zip(qv).map(|(a, b)| (a - mp) * (b - mq)).sum();
        let sp: f64 = pv.iter().map(|a| (a - mp).powi(2)).sum();
        let sq: f64 = qv.iter().map(|b| (b - mq).powi(2)).sum();
        let want_cc = cov / (sp * sq).sqrt();
        let want_sim: f64 = pv.iter().zip(qv).map(|(a, b)| a.min(*b)).sum();
        let want_kl: f64 = pv.iter().zip(qv).map(|(a, b)| b * (1e-7 + b / (a + 1e-7)).ln()).sum();
        let sd = (sp / n).sqrt();
        let want_nss = f.points.iter().map(|pt| (p.at(pt.x, pt.y) - mp) / sd).sum::<f64>() / k as f64;
        let pos: Vec<f64> = f.points.iter().map(|pt| p.at(pt.x, pt.y)).collect();
        let neg: Vec<f64> = (0..64)
            .filter(|&j| !f.points.contains(&Fixation { x: j % 8, y: j / 8 }))
            .map(|j| pv[j])
            .collect();
        let want_auc = roc(&pos, &neg);
        let pairs = [
            ("cc", cc(&p, &q).unwrap().value, want_cc),
            ("sim", sim(&p, &q).unwrap(), want_sim),
            ("kldiv", kldiv(&p, &q, 1e-7).unwrap(), want_kl),
            ("nss", nss(&p, &f).unwrap().value, want_nss),
            ("auc_judd", auc_judd(&p, &f).unwrap(), want_auc),
        ];
        for (name, got, want) in pairs {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-10, format!("instance {i}: {name} {got} vs {want}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..5 {
        let p = random_map(&mut rng, 4, 4);
        let k = rng.random_range(1..4);
        let f = random_fixes(&mut rng, k, 4, 4);
        let pool_size = rng.random_range(2..5);
        let pool = random_fixes(&mut rng, pool_size, 4, 4);
        let pos: Vec<f64> = f.points.iter().map(|pt| p.at(pt.x, pt.y)).collect();
        let total = pool_size.pow(k as u32);
        let values: Vec<f64> = (0..total)
            .map(|code| {
                let mut c = code;
                let neg: Vec<f64> = (0..k)
                    .map(|_| {
                        let pt = pool.points[c % pool_size];
                        c /= pool_size;
                        p.at(pt.x, pt.y)
                    })
                    .collect();
                roc(&pos, &neg)
            })
            .collect();
        let mean = values.iter().sum::<f64>() / total as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total as f64;
        let splits = 1000;
        let got = sauc(&p, &f, std::slice::from_ref(&pool), splits, i).unwrap();
        let se = (var / splits as f64).sqrt();
        ensure((got - mean).abs() <= 2.0 * se + 1e-12, format!("sauc {got} vs {mean} (se {se:.2e})"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!("200 instances, max abs error {worst:.1e}; sAUC within 2 SE on 5 pools; {elapsed:.0?}"))
}

// ---- 4 ----
fn kldiv_hand_values() -> Check {
    let m = |v: &[f64]| SaliencyMap::new(1, v.len(), v.to_vec()).unwrap();
    let a = kldiv(&m(&[0.9, 0.1]), &m(&[0.5, 0.5]), 1e-12).map_err(|e| e.to_string())?;
    ensure((a - 0.5108).abs() <= 1e-3, format!("{a}"))?;
    let b = kldiv(&m(&[0.25; 4]), &m(&[1.0, 0.0, 0.0, 0.0]), 1e-12).map_err(|e| e.to_string())?;
    ensure((b - 4f64.ln()).abs() <= 1e-3, format!("{b}"))?;
    Ok(format!("{a:.4} and {b:.4} (ln 4 = {:.4})", 4f64.ln()))
}

// ---- 5 ----
fn overfit() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = synthetic(dir.path(), 1, 4, 7);
    let cfg = ModelConfig::toy();
    let clips: Vec<_> = (0..4).map(|t| sample_clip(&ds[0], t, &cfg, 9.0).unwrap()).collect();
    let batch: Vec<_> = clips.iter().collect();
    let mut model = ViNet::new(cfg, 0).map_err(|e| e.to_string())?;
    let adam = AdamConfig::default();
    let mut state = AdamState::default();
    let mean_cc = |m: &ViNet| -> f64 {
        clips
            .iter()
            .map(|c| cc(&m.predict_clip(c, None).unwrap(), c.target.as_ref().unwrap()).unwrap().value)
            .sum::<f64>()
            / clips.len() as f64
    };
    let mut last = (f64::NAN, f64::NAN);
    for step in 0..=2000 {
        let (loss, grads) = batch_gradient(&model, &batch, 1e-7).map_err(|e| e.to_string())?;
        if loss < 0.05 {
            let c = mean_cc(&model);
            last = (loss, c);
            if c > 0.95 {
                let elapsed = start.elapsed();
                within(elapsed, Duration::from_secs(600))?;
                return Ok(format!("kldiv {loss:.4}, cc {c:.4} after {step} steps, {elapsed:.0?}"));
            }
        }
        if step < 2000 {
            adam_step(model.params_mut(), &grads, &mut state, &adam).map_err(|e| e.to_string())?;
        }
    }
    Err(format!("not reached in 2000 steps; last kldiv {:.4}, cc {:.4}", last.0, last.1))
}

// ---- 6 ----
fn hierarchy_trend() -> Check {
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ds = synthetic(dir.path(), 6, 8, 100 + seed);
        let (tr, va) = ds.split_at(4);
        let tc = TrainConfig {
            batch_size: 2,
            max_steps: 300,
            patience: 100,
            seed,
            ..TrainConfig::default()
        };
        let mut scores = [0.0; 2];
        for (i, h) in [true, false].into_iter().enumerate() {
            let cfg = ModelConfig {
                use_hierarchy: h,
                ..ModelConfig::toy()
            };
            let model = ViNet::new(cfg, seed).map_err(|e| e.to_string())?;
            scores[i] = train(model, tr, va, &tc).map_err(|e| e.to_string())?.best_val_cc;
        }
        if scores[0] >= scores[1] {
            wins += 1;
        }
        detail.push(format!("{:.3}/{:.3}", scores[0], scores[1]));
    }
    let summary = format!("with >= without in {wins}/5 seeds [{}], {:.0?}", detail.join(" "), start.elapsed());
    ensure(wins >= 3, summary.clone())?;
    Ok(summary)
}

// ---- 7 ----
fn ablation_format() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let out = out.to_str().unwrap();
        let args = [
            "ablate-clip",
            "8,16,32,48",
            "--out",
            out,
            "--seed",
            "0",
            "-s",
            "train.max_steps=2",
            "-s",
            "train.batch_size=1",
        ];
        let (code, _) = vinet(&args)?;
        ensure(code == 0, format!("exit code {code}"))?;
        tables.push(std::fs::read(dir.path().join(run).join("ablate_clip.csv")).map_err(|e| e.to_string())?);
    }
    ensure(tables[0] == tables[1], "reruns differ")?;
    let text = String::from_utf8(tables[0].clone()).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = text.lines().collect();
    ensure(lines[0] == "setting,params,cc,sim,nss", format!("header '{}'", lines[0]))?;
    ensure(lines.len() == 5, format!("{} rows", lines.len() - 1))?;
    for (line, size) in lines[1..].iter().zip(["8", "16", "32", "48"]) {
        ensure(line.split(',').next() == Some(size), format!("row '{line}'"))?;
    }
    Ok("4 rows (8, 16, 32, 48), reruns byte-identical".into())
}

// ---- 8 ----
fn sliding_window() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = synthetic(dir.path(), 1, 11, 3);
    let model = ViNet::new(ModelConfig::toy(), 1).map_err(|e| e.to_string())?;
    let maps = predict_video(&model, &ds[0]).map_err(|e| e.to_string())?;
    ensure(maps.len() == 11, format!("{} maps for 11 frames", maps.len()))?;
    for (t, map) in maps.iter().enumerate() {
        let clip = sample_clip(&ds[0], t, model.config(), 9.0).map_err(|e| e.to_string())?;
        let alone = model.predict_clip(&clip, None).map_err(|e| e.to_string())?;
        let same = alone.values().iter().zip(map.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("frame {t} differs"))?;
    }
    let clip = sample_clip(&ds[0], 0, model.config(), 9.0).map_err(|e| e.to_string())?;
    let (t0, hw) = (8, 32 * 64);
    let d = clip.frames.data();
    for c in 0..3 {
        let first = &d[c * t0 * hw..(c * t0 + 1) * hw];
        for k in 1..t0 {
            ensure(&d[(c * t0 + k) * hw..(c * t0 + k + 1) * hw] == first, "frame 0 clip is not repeated")?;
        }
    }
    Ok("11 frames -> 11 bit-identical maps; frame 0 clip repeats frame 0".into())
}

// ---- 9 ----
fn audio_probe() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let ds = synthetic(&data, 4, 6, 21);
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| e.to_string());

    let control = dir.path().join("control");
    let (code, _) = vinet(&[
        "probe-audio",
        "--data",
        data.to_str().unwrap(),
        "--out",
        control.to_str().unwrap(),
        "--fusion",
        "none",
    ])?;
    ensure(code == 0, format!("exit code {code}"))?;
    let table = read(&control.join("probe.csv"))?;
    ensure(
        table == "comparison,cc,sim\nzeroed audio,1,1\nswapped audio,1,1\n",
        format!("control table {table:?}"),
    )?;

    let cfg = ModelConfig {
        fusion_mode: FusionMode::Concat,
        ..ModelConfig::toy()
    };
    let tc = TrainConfig {
        batch_size: 2,
        max_steps: 60,
        val_interval: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let model = ViNet::new(cfg, 1).map_err(|e| e.to_string())?;
    let trained = train(model, &ds[..3], &ds[3..], &tc).map_err(|e| e.to_string())?.model;
    let ckpt = dir.path().join("avinet.vnt");
    save_model(&ckpt, &trained, 60, 1).map_err(|e| e.to_string())?;
    let fused = dir.path().join("fused");
    let (code, _) = vinet(&[
        "probe-audio",
        "--data",
        data.to_str().unwrap(),
        "--out",
        fused.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ])?;
    ensure(code == 0, format!("exit code {code}"))?;
    let table = read(&fused.join("probe.csv"))?;
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    ensure(rows[0] == ["comparison", "cc", "sim"], "header")?;
    let mut shown = Vec::new();
    for row in &rows[1..] {
        let c: f64 = row[1].parse().map_err(|_| "bad cc")?;
        ensure(c < 1.0 && c >= -1.0, format!("{} cc {c}", row[0]))?;
        shown.push(format!("{} cc {c:.6}", row[0]));
    }
    Ok(format!("control exactly 1/1; trained AViNet {}", shown.join(", ")))
}

// ---- 10 ----
fn bilinear_oracle() -> Check {
    let mut cfg = ModelConfig::toy();
    cfg.encoder_widths[3] = 2;
    cfg.audio_channels = 2;
    cfg.fusion_mode = FusionMode::Bilinear;
    cfg.fusion_pool = [1, 1, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        // Two channels, two visual positions, three audio bins.
        let (visual, audio, a, bias) = (rand(&[2, 1, 1, 2]), rand(&[2, 3, 1]), rand(&[2, 2, 3]), rand(&[2]));
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        bound.insert("fusion.bilinear.A".into(), tape.constant(a.clone()));
        bound.insert("fusion.bilinear.b".into(), tape.constant(bias.clone()));
        let mut b = TapeBackend::new(&mut tape, &bound);
        let v = b.constant(visual.clone());
        let u = b.constant(audio.clone());
        let y = fuse_bilinear(&mut b, &cfg, v, u).map_err(|e| e.to_string())?;
        let y = tape.value(y).data().to_vec();
        let (x1, x2, av) = (visual.data(), audio.data(), a.data());
        for ch in 0..2 {
            for k in 0..2 {
                let mut want = bias.data()[k];
                for i in 0..2 {
                    for j in 0..3 {
                        want += x1[ch * 2 + i] * av[(i * 2 + k) * 3 + j] * x2[ch * 3 + j];
                    }
                }
                worst = worst.max((y[ch * 2 + k] - want).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("max error {worst:.2e}"))?;
    let mut tape = Tape::<f64>::new();
    let x1 = tape.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let a = tape.constant(Tensor::new(&[1, 1, 1], vec![0.5]).unwrap());
    let x2 = tape.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let b = tape.constant(Tensor::new(&[1], vec![1.0]).unwrap());
    let y = tape.bilinear(x1, a, x2, b).map_err(|e| e.to_string())?;
    let scalar = tape.value(y).data()[0];
    ensure(scalar == 4.0, format!("scalar case gave {scalar}"))?;
    Ok(format!("100 instances, max error {worst:.1e}; (2, 3, A=0.5, b=1) -> 4"))
}

// ---- 11 ----
fn tree_hash(root: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = ViNet::new(
        ModelConfig {
            fusion_mode: FusionMode::Bilinear,
            ..ModelConfig::toy()
        },
        5,
    )
    .map_err(|e| e.to_string())?;
    let path = dir.path().join("m.vnt");
    save_model(&path, &model, 7, 5).map_err(|e| e.to_string())?;
    let back = load_model(&path).map_err(|e| e.to_string())?;
    let digest = |m: &ViNet| format!("{:x}", Sha256::digest(encode_params(m.params()).unwrap()));
    ensure(digest(&model) == digest(&back), "payload hashes differ")?;
    ensure(back == model, "loaded model differs")?;

    let opts = SynthOptions::new(3, 5, 32, 64, 42);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_synthetic(&a, &opts).map_err(|e| e.to_string())?;
    generate_synthetic(&b, &opts).map_err(|e| e.to_string())?;
    let (ha, hb) = (tree_hash(&a), tree_hash(&b));
    ensure(ha == hb, "regenerated dataset differs")?;
    Ok(format!("checkpoint sha256 {}..; dataset tree sha256 {}..", &digest(&model)[..12], &ha[..12]))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("shape contract", shape_contract),
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("kldiv hand values", kldiv_hand_values),
        ("overfit", overfit),
        ("hierarchy trend", hierarchy_trend),
        ("ablation harness format", ablation_format),
        ("sliding-window consistency", sliding_window),
        ("audio probe", audio_probe),
        ("bilinear fusion oracle", bilinear_oracle),
        ("persistence", persistence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
