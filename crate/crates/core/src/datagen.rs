//! Synthetic video clips: moving coloured shapes over textured backgrounds,
//! with exact per-pixel class labels.
//!
//! Class 0 is background; class k ≥ 1 is drawn as a circle, rectangle or
//! triangle (cycling with k). Shapes travel in straight lines and bounce off
//! the borders; later shapes occlude earlier ones.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"SDC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipParams {
    pub t: usize,
    /// Height and width.
    pub size: usize,
    pub cls: usize,
    pub shapes: usize,
    /// Pixels per frame.
    pub max_speed: f64,
    /// Chance that a clip forces two shapes onto crossing paths.
    pub occlusion_prob: f64,
    /// Per-frame brightness factor drawn from 1 ± jitter.
    pub jitter: f64,
    /// Standard deviation of per-pixel noise in [0, 1] units.
    pub noise: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self {
            t: 20,
            size: 64,
            cls: 4,
            shapes: 3,
            max_speed: 2.5,
            occlusion_prob: 0.5,
            jitter: 0.15,
            noise: 0.04,
            min_radius: 6.0,
            max_radius: 12.0,
        }
    }
}

impl ClipParams {
    pub fn validate(&self) -> Result<()> {
        if self.t < 8 {
            return Err(Error::Config(format!("clips need at least 8 frames, got {}", self.t)));
        }
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::Config(format!("frame size {} must be a positive multiple of 8", self.size)));
        }
        if self.cls < 2 || self.cls > 256 {
            return Err(Error::Config(format!("class count {} outside 2..=256", self.cls)));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) || self.max_speed < 0.0 {
            return Err(Error::Config("invalid shape radius or speed range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub params: ClipParams,
    pub seed: u64,
    /// T·H·W·3 bytes, frame-major.
    pub frames: Vec<u8>,
    /// T·H·W class ids.
    pub labels: Vec<u8>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.params.t
    }

    pub fn is_empty(&self) -> bool {
        self.params.t == 0
    }

    pub fn frame_bytes(&self, t: usize) -> &[u8] {
        let n = self.params.size * self.params.size * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    /// Frame `t` as [H, W, 3] in [0, 1].
    pub fn frame(&self, t: usize) -> Tensor {
        let s = self.params.size;
        crate::model::frame_tensor(s, s, self.frame_bytes(t))
    }

    pub fn label_bytes(&self, t: usize) -> &[u8] {
        let n = self.params.size * self.params.size;
        &self.labels[t * n..(t + 1) * n]
    }

    pub fn label_map(&self, t: usize) -> Vec<usize> {
        self.label_bytes(t).iter().map(|&c| c as usize).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Circle,
    Rect,
    Triangle,
}

#[derive(Clone, Debug)]
struct Shape {
    class: u8,
    kind: Kind,
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    r: f64,
    /// Half extents for rectangles as a fraction of r.
    aspect: f64,
    color: [f64; 3],
}

impl Shape {
    /// Pixel-centre containment test.
    fn contains(&self, py: f64, px: f64) -> bool {
        let (dy, dx) = (py - self.y, px - self.x);
        match self.kind {
            Kind::Circle => dy * dy + dx * dx <= self.r * self.r,
            Kind::Rect => dy.abs() <= self.r * self.aspect && dx.abs() <= self.r / self.aspect,
            Kind::Triangle => {
                // apex up, base at dy = r/2
                let (top, base) = (-self.r, 0.5 * self.r);
                if dy < top || dy > base {
                    return false;
                }
                let half = self.r * 0.866 * (dy - top) / (base - top);
                dx.abs() <= half
            }
        }
    }

    fn step(&mut self, size: f64) {
        self.y += self.vy;
        self.x += self.vx;
        let (lo, hi) = (0.0, size);
        if self.y < lo || self.y > hi {
            self.vy = -self.vy;
            self.y = self.y.clamp(lo, hi);
        }
        if self.x < lo || self.x > hi {
            self.vx = -self.vx;
            self.x = self.x.clamp(lo, hi);
        }
    }
}

/// Base colour of a class; background is 0.
fn class_color(class: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.85, 0.25, 0.2],
        [0.2, 0.7, 0.3],
        [0.25, 0.35, 0.9],
        [0.9, 0.8, 0.2],
        [0.7, 0.3, 0.8],
        [0.2, 0.8, 0.8],
    ];
    PALETTE[(class as usize - 1) % PALETTE.len()]
}

fn kind_of(class: u8) -> Kind {
    match (class - 1) % 3 {
        0 => Kind::Circle,
        1 => Kind::Rect,
        _ => Kind::Triangle,
    }
}

/// Deterministic clip for (seed, params).
pub fn generate_clip(seed: u64, params: &ClipParams) -> Result<VideoClip> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = params.size;
    let sf = s as f64;

    let bg_base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.6));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let grain = Normal::new(0.0, 0.03).unwrap();
    let texture: Vec<f64> = (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f64, (i % s) as f64);
            let w: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin()).sum();
            w + grain.sample(&mut rng)
        })
        .collect();

    let mut shapes: Vec<Shape> = (0..params.shapes)
        .map(|_| {
            let class = rng.random_range(1..params.cls) as u8;
            let r = rng.random_range(params.min_radius..=params.max_radius);
            let speed = if params.max_speed > 0.0 {
                rng.random_range(0.3 * params.max_speed..=params.max_speed)
            } else {
                0.0
            };
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
            let base = class_color(class);
            Shape {
                class,
                kind: kind_of(class),
                y: rng.random_range(r..sf - r),
                x: rng.random_range(r..sf - r),
                vy: speed * ang.sin(),
                vx: speed * ang.cos(),
                r,
                aspect: rng.random_range(0.6..1.4),
                color: std::array::from_fn(|c| (base[c] + tint[c]).clamp(0.0, 1.0)),
            }
        })
        .collect();

    if shapes.len() >= 2 && params.max_speed > 0.0 && rng.random_bool(params.occlusion_prob.clamp(0.0, 1.0)) {
        // aim the last shape at where the first will be mid-clip
        let half = params.t as f64 / 2.0;
        let mut probe = shapes[0].clone();
        for _ in 0..params.t / 2 {
            probe.step(sf);
        }
        let last = shapes.len() - 1;
        let (dy, dx) = (probe.y - shapes[last].y, probe.x - shapes[last].x);
        let dist = (dy * dy + dx * dx).sqrt().max(1e-9);
        let speed = (dist / half).min(params.max_speed);
        shapes[last].vy = speed * dy / dist;
        shapes[last].vx = speed * dx / dist;
    }

    let noise = Normal::new(0.0, params.noise.max(0.0)).unwrap();
    let mut frames = Vec::with_capacity(params.t * s * s * 3);
    let mut labels = Vec::with_capacity(params.t * s * s);
    for t in 0..params.t {
        if t > 0 {
            for sh in shapes.iter_mut() {
                sh.step(sf);
            }
        }
        let bright = 1.0 + rng.random_range(-params.jitter..=params.jitter);
        for i in 0..s * s {
            let (py, px) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
            let mut label = 0u8;
            let mut color: [f64; 3] = std::array::from_fn(|c| bg_base[c] + texture[i]);
            for sh in &shapes {
                if sh.contains(py, px) {
                    label = sh.class;
                    color = sh.color;
                }
            }
            labels.push(label);
            for c in color {
                let v = c * bright + if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                frames.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(VideoClip {
        params: params.clone(),
        seed,
        frames,
        labels,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    params: ClipParams,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (SDC1 container) and a JSON sidecar next to it.
pub fn write_clip(clip: &VideoClip, path: &Path) -> Result<()> {
    let p = &clip.params;
    let mut buf = Vec::with_capacity(20 + clip.frames.len() + clip.labels.len());
    buf.extend_from_slice(CLIP_MAGIC);
    for v in [p.t, p.size, p.size, p.cls] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&clip.frames);
    buf.extend_from_slice(&clip.labels);
    fs::write(path, buf)?;
    let side = Sidecar {
        seed: clip.seed,
        params: clip.params.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let buf = fs::read(path)?;
    if buf.len() < 20 || &buf[..4] != CLIP_MAGIC {
        return Err(Error::Format(format!("{}: not an SDC1 clip", path.display())));
    }
    let hdr: Vec<usize> = (0..4)
        .map(|i| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let (t, h, w, cls) = (hdr[0], hdr[1], hdr[2], hdr[3]);
    if h != w || h == 0 || t == 0 {
        return Err(Error::Format(format!("{}: unsupported header {t}×{h}×{w}", path.display())));
    }
    let nf = t * h * w * 3;
    let nl = t * h * w;
    if buf.len() != 20 + nf + nl {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            buf.len() - 20,
            nf + nl
        )));
    }
    let labels = buf[20 + nf..].to_vec();
    if let Some(bad) = labels.iter().find(|&&c| c as usize >= cls) {
        return Err(Error::Format(format!("{}: label {bad} outside {cls} classes", path.display())));
    }
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if (side.params.t, side.params.size, side.params.cls) != (t, h, cls) {
        return Err(Error::Format(format!("{}: sidecar disagrees with header", path.display())));
    }
    Ok(VideoClip {
        params: side.params,
        seed: side.seed,
        frames: buf[20..20 + nf].to_vec(),
        labels,
    })
}

/// Seed of clip `i` in a dataset generated from `seed`.
pub fn clip_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng.random()
}

/// Dataset manifest stored as `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: ClipParams,
    pub clips: Vec<String>,
    /// Number of leading clips used for training; the rest are validation.
    pub train: usize,
}

pub fn clip_file_name(i: usize) -> String {
    format!("clip_{i:05}.sdc")
}

/// Generates `n` clips into `dir`, holding out `val` of them for validation.
pub fn generate_dataset(dir: &Path, n: usize, val: usize, seed: u64, params: &ClipParams) -> Result<DatasetManifest> {
    params.validate()?;
    if val > n {
        return Err(Error::Config(format!("validation split {val} exceeds clip count {n}")));
    }
    fs::create_dir_all(dir)?;
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let clip = generate_clip(clip_seed(seed, i), params)?;
        let name = clip_file_name(i);
        write_clip(&clip, &dir.join(&name))?;
        clips.push(name);
    }
    let m = DatasetManifest {
        seed,
        params: params.clone(),
        clips,
        train: n - val,
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

/// In-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        let mut clips = manifest
            .clips
            .iter()
            .map(|c| read_clip(&dir.join(c)))
            .collect::<Result<Vec<_>>>()?;
        let val = clips.split_off(manifest.train.min(clips.len()));
        Ok(Self {
            manifest,
            train: clips,
            val,
        })
    }

    /// Builds the dataset in memory without touching disk.
    pub fn generate(n: usize, val: usize, seed: u64, params: &ClipParams) -> Result<Self> {
        let mut clips = (0..n)
            .map(|i| generate_clip(clip_seed(seed, i), params))
            .collect::<Result<Vec<_>>>()?;
        let v = clips.split_off(n - val.min(n));
        Ok(Self {
            manifest: DatasetManifest {
                seed,
                params: params.clone(),
                clips: (0..n).map(clip_file_name).collect(),
                train: n - val.min(n),
            },
            train: clips,
            val: v,
        })
    }
}
