use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sha2::{Digest, Sha256};
use vinet_core::data::{
    clip_frame_indices, decode_params, encode_params, generate_synthetic, load_checkpoint, load_dataset, load_meta,
    load_model, read_frame, resize_bilinear, sample_clip, save_checkpoint, save_model, DataError, SynthOptions,
};
use vinet_core::model::{ModelConfig, Params, ViNet};
use vinet_core::tensor::Tensor;

fn toy(clip_len: usize) -> ModelConfig {
    let mut c = ModelConfig::toy();
    c.clip_len = clip_len;
    c
}

/// Relative path -> SHA-256 of every file under `root`.
fn tree_hashes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, Sha256::digest(fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

#[test]
fn empty_root_has_no_videos() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn synthetic_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions::new(3, 7, 32, 64, 5);
    let truth = generate_synthetic(dir.path(), &opts).unwrap();
    let videos = load_dataset(dir.path()).unwrap();
    assert_eq!(videos.len(), 3);
    for (v, t) in videos.iter().zip(&truth) {
        assert_eq!(v.id, t.id);
        assert_eq!(v.len(), 7);
        assert_eq!(v.frame_size, (32, 64));
        let audio = v.audio.as_ref().unwrap();
        assert_eq!(audio.samples.len(), 7 * opts.samples_per_frame);
        assert_eq!(audio.sample_rate, opts.sample_rate);

        // Fixations come back exactly as written.
        let text = fs::read_to_string(dir.path().join(&v.id).join("fixations.csv")).unwrap();
        let mut written = vec![Vec::new(); 7];
        for line in text.lines().skip(1) {
            let f: Vec<usize> = line.split(',').map(|s| s.parse().unwrap()).collect();
            written[f[0]].push((f[1], f[2]));
        }
        for (rec, w) in v.fixations.iter().zip(&written) {
            assert_eq!(rec.len(), opts.fixations_per_frame);
            assert_eq!(&rec.points.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(), w);
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let opts = SynthOptions::new(2, 5, 32, 32, 9);
    generate_synthetic(a.path(), &opts).unwrap();
    generate_synthetic(b.path(), &opts).unwrap();
    let (ha, hb) = (tree_hashes(a.path()), tree_hashes(b.path()));
    assert_eq!(ha.len(), 2 * (5 + 2));
    assert_eq!(ha, hb);
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(c.path(), &SynthOptions::new(2, 5, 32, 32, 10)).unwrap();
    assert_ne!(ha, tree_hashes(c.path()));
}

#[test]
fn fixations_centre_on_the_blob() {
    let dir = tempfile::tempdir().unwrap();
    let truth = generate_synthetic(dir.path(), &SynthOptions::new(4, 12, 32, 64, 1)).unwrap();
    for (v, t) in load_dataset(dir.path()).unwrap().iter().zip(&truth) {
        let pts: Vec<(f64, f64)> = v.fixations.iter().flat_map(|r| r.points.iter().map(|p| (p.x as f64, p.y as f64))).collect();
        let n = pts.len() as f64;
        let fx = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let k = t.centers.len() as f64;
        let cx = (t.centers.iter().map(|c| c.0).sum::<f64>() / k, t.centers.iter().map(|c| c.1).sum::<f64>() / k);
        let d = ((fx.0 - cx.0).powi(2) + (fx.1 - cx.1).powi(2)).sqrt();
        assert!(d < 2.0, "{}: fixation mean {fx:?} vs blob mean {cx:?}", v.id);
    }
}

#[test]
fn uninformative_audio_ignores_the_trajectory() {
    // Different frame sizes give different blob paths; the uninformative
    // tone track must not change.
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut oa = SynthOptions::new(2, 6, 32, 64, 3);
    oa.audio_informative = false;
    let mut ob = oa.clone();
    ob.height = 64;
    ob.width = 32;
    let ta = generate_synthetic(a.path(), &oa).unwrap();
    let tb = generate_synthetic(b.path(), &ob).unwrap();
    assert_ne!(ta[0].centers, tb[0].centers);
    for id in ["video000", "video001"] {
        let wav = |root: &Path| fs::read(root.join(id).join("audio.wav")).unwrap();
        assert_eq!(wav(a.path()), wav(b.path()));
    }
    // Informative audio does follow the blob.
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(c.path(), &SynthOptions::new(2, 6, 32, 64, 3)).unwrap();
    assert_ne!(fs::read(c.path().join("video000/audio.wav")).unwrap(), fs::read(a.path().join("video000/audio.wav")).unwrap());
}

fn write_video(root: &Path, csv: &str) {
    let frames = root.join("v0/frames");
    fs::create_dir_all(&frames).unwrap();
    for i in 0..2 {
        image::RgbImage::new(8, 4).save(frames.join(format!("{i:05}.png"))).unwrap();
    }
    fs::write(root.join("v0/fixations.csv"), csv).unwrap();
}

#[test]
fn out_of_range_fixation_is_reported_with_location() {
    let dir = tempfile::tempdir().unwrap();
    write_video(dir.path(), "frame,x,y\n0,1,1\n1,8,0\n");
    let err = load_dataset(dir.path()).unwrap_err();
    match &err {
        DataError::Parse { path, line, msg } => {
            assert!(path.ends_with("fixations.csv"));
            assert_eq!(*line, 3);
            assert!(msg.contains("outside"), "{msg}");
        }
        other => panic!("{other}"),
    }
    assert!(err.to_string().contains("fixations.csv:3"));
}

#[test]
fn malformed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_video(dir.path(), "frame,x\n0,1\n");
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Parse { line: 1, .. })));
    write_video(dir.path(), "frame,x,y\n0,a,1\n");
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Parse { line: 2, .. })));
    write_video(dir.path(), "frame,x,y\n2,0,0\n");
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Parse { line: 2, .. })));

    // A gap in frame numbering.
    write_video(dir.path(), "frame,x,y\n");
    fs::rename(dir.path().join("v0/frames/00001.png"), dir.path().join("v0/frames/00002.png")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Format { .. })));
    let empty = tempfile::tempdir().unwrap();
    fs::create_dir_all(empty.path().join("v/frames")).unwrap();
    assert!(matches!(load_dataset(empty.path()), Err(DataError::Format { .. })));
}

#[test]
fn clip_window_pads_with_the_first_frame() {
    assert_eq!(clip_frame_indices(0, 4), vec![0, 0, 0, 0]);
    assert_eq!(clip_frame_indices(2, 4), vec![0, 0, 1, 2]);
    assert_eq!(clip_frame_indices(3, 4), vec![0, 1, 2, 3]);
    assert_eq!(clip_frame_indices(9, 4), vec![6, 7, 8, 9]);
}

fn frame_slice(clip: &Tensor<f32>, k: usize) -> Vec<f32> {
    let s = clip.shape();
    let (t0, hw) = (s[1], s[2] * s[3]);
    (0..3).flat_map(|c| clip.data()[(c * t0 + k) * hw..(c * t0 + k + 1) * hw].to_vec()).collect()
}

#[test]
fn sampled_clips_match_the_source_frames() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(dir.path(), &SynthOptions::new(1, 12, 64, 128, 2)).unwrap();
    let video = &load_dataset(dir.path()).unwrap()[0];
    let cfg = toy(8);
    let resized = |i: usize| {
        let (d, h, w) = read_frame(&video.frames[i]).unwrap();
        resize_bilinear(&d, 3, h, w, cfg.height, cfg.width)
    };

    let first = sample_clip(video, 0, &cfg, 9.0).unwrap();
    assert_eq!(first.frames.shape(), &[3, 8, 32, 64]);
    for k in 0..8 {
        assert_eq!(frame_slice(&first.frames, k), resized(0));
    }
    let full = sample_clip(video, 7, &cfg, 9.0).unwrap();
    for k in 0..8 {
        assert_eq!(frame_slice(&full.frames, k), resized(k));
    }
    let mid = sample_clip(video, 10, &cfg, 9.0).unwrap();
    for k in 0..8 {
        assert_eq!(frame_slice(&mid.frames, k), resized(3 + k));
    }
    assert_eq!(mid, sample_clip(video, 10, &cfg, 9.0).unwrap());

    // Targets and fixations live at model resolution.
    let target = mid.target.unwrap();
    assert_eq!(target.dims(), (32, 64));
    assert!((target.sum() - 1.0).abs() < 1e-9);
    assert!(mid.fixations.points.iter().all(|p| p.x < 64 && p.y < 32));
    // Audio covers frames 3..=10.
    assert_eq!(mid.audio.unwrap().len(), 8 * 640);
    assert_eq!(first.audio.unwrap().len(), 640);

    assert!(matches!(sample_clip(video, 12, &cfg, 9.0), Err(DataError::Index { t: 12, len: 12, .. })));
}

#[test]
fn resize_keeps_identity_and_constants() {
    let src: Vec<f32> = (0..24).map(|i| i as f32).collect();
    assert_eq!(resize_bilinear(&src, 2, 3, 4, 3, 4), src);
    let flat = vec![0.25f32; 2 * 3 * 4];
    assert!(resize_bilinear(&flat, 2, 3, 4, 7, 5).iter().all(|&v| (v - 0.25).abs() < 1e-7));
}

fn bits(p: &Params) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    p.iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = ViNet::new(toy(8), 4).unwrap();
    let path = dir.path().join("sub/model.vnt");
    save_model(&path, &model, 120, 4).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&loaded), bits(model.params()));
    let bytes = fs::read(&path).unwrap();
    assert_eq!(
        Sha256::digest(&bytes),
        Sha256::digest(encode_params(&loaded).unwrap())
    );
    let meta = load_meta(&path).unwrap().unwrap();
    assert_eq!((meta.step, meta.seed, meta.format_version), (120, 4, 1));
    assert_eq!(meta.config, *model.config());
    assert_eq!(load_model(&path).unwrap(), model);
    assert!(!dir.path().join("sub/model.vnt.tmp").exists());
}

#[test]
fn checkpoint_layout() {
    let mut p = Params::new();
    p.insert("ab", Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap());
    let bytes = encode_params(&p).unwrap();
    let mut want = b"VNT1".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(2u16.to_le_bytes());
    want.extend(b"ab");
    want.push(1);
    want.extend(2u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);
}

#[test]
fn empty_checkpoint() {
    let bytes = encode_params(&Params::new()).unwrap();
    assert_eq!(bytes, b"VNT1\0\0\0\0");
    assert!(decode_params(&bytes).unwrap().is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.vnt");
    save_checkpoint(&path, &Params::new(), None).unwrap();
    assert!(load_checkpoint(&path).unwrap().is_empty());
    assert_eq!(load_meta(&path).unwrap(), None);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let mut p = Params::new();
    p.insert("w", Tensor::new(&[2, 2], vec![1.0f32; 4]).unwrap());
    let good = encode_params(&p).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert_eq!(decode_params(&bad_magic).unwrap_err(), "bad magic");
    assert_eq!(decode_params(b"VN").unwrap_err(), "bad magic");
    assert!(decode_params(&good[..good.len() - 1]).unwrap_err().contains("truncated"));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(decode_params(&trailing).is_err());

    let mut overflow = b"VNT1".to_vec();
    overflow.extend(1u32.to_le_bytes());
    overflow.extend(1u16.to_le_bytes());
    overflow.push(b'w');
    overflow.push(4);
    for _ in 0..4 {
        overflow.extend(u32::MAX.to_le_bytes());
    }
    let err = decode_params(&overflow).unwrap_err();
    assert!(err.contains("overflow") || err.contains("truncated"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.vnt");
    fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(DataError::Checkpoint { .. })));
}

proptest! {
    #[test]
    fn encode_decode_round_trip(tensors in prop::collection::btree_map(
        "[a-z.]{1,12}",
        prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            (Just(shape), prop::collection::vec(any::<f32>(), n))
        }),
        0..5,
    )) {
        let mut p = Params::new();
        for (name, (shape, data)) in &tensors {
            p.insert(name, Tensor::new(shape, data.clone()).unwrap());
        }
        let bytes = encode_params(&p).unwrap();
        let back = decode_params(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&p));
        prop_assert_eq!(encode_params(&back).unwrap(), bytes);
    }
}
