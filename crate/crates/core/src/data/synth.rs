use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{format_err, io_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    /// When set, the tone's pitch follows the blob's horizontal position.
    pub audio_informative: bool,
    pub seed: u64,
    pub fixations_per_frame: usize,
    pub sample_rate: u32,
    pub samples_per_frame: usize,
}

impl SynthOptions {
    pub fn new(n_videos: usize, frames_per_video: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            n_videos,
            frames_per_video,
            height,
            width,
            audio_informative: true,
            seed,
            fixations_per_frame: 8,
            sample_rate: 16_000,
            samples_per_frame: 640,
        }
    }
}

/// The generator's own record of where each video's blob was.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub id: String,
    /// Blob centre `(x, y)` per frame, in pixels.
    pub centers: Vec<(f64, f64)>,
}

const LOW_HZ: f64 = 200.0;
const HIGH_HZ: f64 = 2000.0;

/// Writes `n_videos` clips of a bright Gaussian blob drifting over noise,
/// with fixations scattered around the blob and a tone track. The same
/// options always produce the same bytes.
pub fn generate_synthetic(root: &Path, opts: &SynthOptions) -> Result<Vec<SynthTruth>> {
    if opts.n_videos == 0 || opts.frames_per_video == 0 || opts.height == 0 || opts.width == 0 {
        return Err(format_err(root, "synthetic dataset sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // Audio for uninformative videos comes from its own stream so it carries
    // no information about the blob.
    let mut audio_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    audio_rng.set_stream(1);
    fs::create_dir_all(root).map_err(io_err(root))?;
    (0..opts.n_videos)
        .map(|v| write_video(root, &format!("video{v:03}"), opts, &mut rng, &mut audio_rng))
        .collect()
}

fn write_video(
    root: &Path,
    id: &str,
    opts: &SynthOptions,
    rng: &mut ChaCha8Rng,
    audio_rng: &mut ChaCha8Rng,
) -> Result<SynthTruth> {
    let (h, w) = (opts.height, opts.width);
    let dir = root.join(id);
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;

    let radius = (h.min(w) as f64 / 8.0).max(1.0);
    let margin = |len: usize| (radius * 1.5).min(len as f64 / 2.0);
    let (mx, my) = (margin(w), margin(h));
    let mut x = rng.random_range(mx..=(w as f64 - mx).max(mx));
    let mut y = rng.random_range(my..=(h as f64 - my).max(my));
    let speed = (h.min(w) as f64 / 16.0).max(0.5);
    let mut vx = rng.random_range(-speed..speed);
    let mut vy = rng.random_range(-speed..speed);
    let jitter = Normal::new(0.0, (radius / 3.0).max(0.5)).expect("positive deviation");

    let mut centers = Vec::with_capacity(opts.frames_per_video);
    let mut csv = String::from("frame,x,y\n");
    for f in 0..opts.frames_per_video {
        centers.push((x, y));
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (px, py, p) in img.enumerate_pixels_mut() {
            let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
            let blob = (-d2 / (2.0 * radius * radius)).exp();
            let noise: f64 = rng.random_range(0.0..0.25);
            let v = ((noise + 0.75 * blob).min(1.0) * 255.0).round() as u8;
            *p = image::Rgb([v, v, (v as f64 * 0.9) as u8]);
        }
        let path = frames_dir.join(format!("{f:05}.png"));
        img.save(&path).map_err(|e| format_err(&path, e))?;
        for _ in 0..opts.fixations_per_frame {
            let fx = (x + jitter.sample(rng)).round().clamp(0.0, (w - 1) as f64) as usize;
            let fy = (y + jitter.sample(rng)).round().clamp(0.0, (h - 1) as f64) as usize;
            csv.push_str(&format!("{f},{fx},{fy}\n"));
        }
        // Bounce off the margins.
        x += vx;
        y += vy;
        if x < mx || x > w as f64 - mx {
            vx = -vx;
            x = x.clamp(mx, (w as f64 - mx).max(mx));
        }
        if y < my || y > h as f64 - my {
            vy = -vy;
            y = y.clamp(my, (h as f64 - my).max(my));
        }
    }
    let csv_path = dir.join("fixations.csv");
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    write_audio(&dir.join("audio.wav"), opts, &centers, audio_rng)?;
    Ok(SynthTruth {
        id: id.to_string(),
        centers,
    })
}

fn write_audio(path: &Path, opts: &SynthOptions, centers: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: opts.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).map_err(|e| format_err(path, e))?;
        let mut phase = 0.0f64;
        let mut pitch = rng.random_range(0.0..1.0);
        for &(cx, _) in centers {
            let pos = if opts.audio_informative {
                cx / opts.width as f64
            } else {
                pitch = (pitch + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0);
                pitch
            };
            let hz = LOW_HZ + (HIGH_HZ - LOW_HZ) * pos;
            for _ in 0..opts.samples_per_frame {
                phase += 2.0 * std::f64::consts::PI * hz / opts.sample_rate as f64;
                let s = 0.5 * phase.sin() + rng.random_range(-0.02..0.02);
                writer
                    .write_sample((s * 32767.0).round() as i16)
                    .map_err(|e| format_err(path, e))?;
            }
        }
        writer.finalize().map_err(|e| format_err(path, e))?;
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(buf.get_ref()).map_err(io_err(path))
}
