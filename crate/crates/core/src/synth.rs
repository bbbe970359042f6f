//! Synthetic dual-pixel triplets and the on-disk dataset layout.
//!
//! A scene is a stack of textured, constant-depth layers. Each layer is
//! blurred with half-disc point-spread functions whose radius grows with the
//! distance to the focal plane; the left and right views use opposite halves
//! and swap them across the focal plane. Layers are composited back to front.
//!
//! Datasets are flat directories of 8-bit RGB PNGs named `<id>_L.png`,
//! `<id>_R.png` and `<id>_S.png` (left view, right view, sharp target).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Shape4, Tensor};

/// Depth range of generated scenes is `[1, Z_MAX]`.
pub const Z_MAX: f64 = 10.0;

/// Sub-samples per pixel side when rasterising a PSF.
const PSF_SUPERSAMPLE: usize = 8;

/// One constant-depth layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub depth: f64,
    /// Coverage in `{0, 1}`, `h * w`.
    pub mask: Vec<f64>,
    /// Full-frame colour source, `3 * h * w` planar.
    pub color: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Back to front; the first layer covers the whole frame.
    pub layers: Vec<Layer>,
}

impl Scene {
    /// Sharp all-in-focus image, `1x3xHxW`.
    pub fn sharp(&self) -> Tensor<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for layer in &self.layers {
            for c in 0..3 {
                for p in 0..plane {
                    if layer.mask[p] > 0.0 {
                        out[c * plane + p] = layer.color[c * plane + p];
                    }
                }
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], out).expect("scene shape")
    }

    /// Per-pixel depth of the front-most covering layer, `1x1xHxW`.
    pub fn depth(&self) -> Tensor<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane];
        for layer in &self.layers {
            for p in 0..plane {
                if layer.mask[p] > 0.0 {
                    out[p] = layer.depth;
                }
            }
        }
        Tensor::from_vec([1, 1, self.height, self.width], out).expect("scene shape")
    }

    /// Moves every layer to depth `z`.
    pub fn set_uniform_depth(&mut self, z: f64) {
        for layer in &mut self.layers {
            layer.depth = z;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensModel {
    pub focal_depth: f64,
    /// Blur radius in pixels per unit of depth.
    pub gain: f64,
    pub max_radius: f64,
}

impl Default for LensModel {
    fn default() -> Self {
        Self {
            focal_depth: 4.5,
            gain: 1.0,
            max_radius: 5.0,
        }
    }
}

impl LensModel {
    /// Signed blur radius at `depth`; positive behind the focal plane.
    pub fn radius(&self, depth: f64) -> f64 {
        (self.gain * (depth - self.focal_depth)).clamp(-self.max_radius, self.max_radius)
    }

    /// Depth at which the signed radius equals `r` (before clamping).
    pub fn depth_for_radius(&self, r: f64) -> f64 {
        self.focal_depth + r / self.gain
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn random_color(r: &mut rng::Rng) -> [f64; 3] {
    [r.random(), r.random(), r.random()]
}

/// Fills a full-frame texture: checkerboard, sinusoidal grating or
/// scattered rectangles over a base colour.
fn texture(r: &mut rng::Rng, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let a = random_color(r);
    let b = random_color(r);
    let mut out = vec![0.0; 3 * plane];
    let put = |out: &mut Vec<f64>, y: usize, x: usize, t: f64| {
        for c in 0..3 {
            out[c * plane + y * w + x] = lerp(a[c], b[c], t);
        }
    };
    match r.random_range(0..3) {
        0 => {
            let period = r.random_range(3..=10);
            for y in 0..h {
                for x in 0..w {
                    put(&mut out, y, x, ((y / period + x / period) % 2) as f64);
                }
            }
        }
        1 => {
            let angle = r.random_range(0.0..std::f64::consts::PI);
            let freq = r.random_range(0.15..0.8);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let t = 0.5 + 0.5 * (freq * (c * x as f64 + s * y as f64) + phase).sin();
                    put(&mut out, y, x, t);
                }
            }
        }
        _ => {
            for y in 0..h {
                for x in 0..w {
                    put(&mut out, y, x, 0.0);
                }
            }
            let count = r.random_range(8..24);
            for _ in 0..count {
                let color = random_color(r);
                let rh = r.random_range(2..=(h / 4).max(2));
                let rw = r.random_range(2..=(w / 4).max(2));
                let top = r.random_range(0..h);
                let left = r.random_range(0..w);
                for y in top..(top + rh).min(h) {
                    for x in left..(left + rw).min(w) {
                        for c in 0..3 {
                            out[c * plane + y * w + x] = color[c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rectangle or ellipse covering roughly 10-40% of each side.
fn region_mask(r: &mut rng::Rng, h: usize, w: usize) -> Vec<f64> {
    let rh = r.random_range(0.2..0.6) * h as f64;
    let rw = r.random_range(0.2..0.6) * w as f64;
    let cy = r.random_range(0.0..h as f64);
    let cx = r.random_range(0.0..w as f64);
    let ellipse = r.random_bool(0.5);
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / (rh / 2.0);
            let dx = (x as f64 + 0.5 - cx) / (rw / 2.0);
            let inside = if ellipse {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                mask[y * w + x] = 1.0;
            }
        }
    }
    mask
}

/// Procedural scene with `regions` layers (the background counts as one).
/// Layers are ordered back to front by depth.
pub fn generate_scene(seed: u64, height: usize, width: usize, regions: usize) -> Result<Scene> {
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::Config(format!(
            "scene size {height}x{width} must be a positive multiple of 8"
        )));
    }
    if regions == 0 {
        return Err(Error::Config("scene needs at least one region".into()));
    }
    let mut r = rng::seeded(seed);
    let mut depths: Vec<f64> = (0..regions).map(|_| r.random_range(1.0..=Z_MAX)).collect();
    depths.sort_by(|a, b| b.total_cmp(a));
    let layers = depths
        .into_iter()
        .enumerate()
        .map(|(i, depth)| {
            let color = texture(&mut r, height, width);
            let mask = if i == 0 {
                vec![1.0; height * width]
            } else {
                region_mask(&mut r, height, width)
            };
            Layer { depth, mask, color }
        })
        .collect();
    Ok(Scene { height, width, layers })
}

/// Which half of the aperture a view sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Half {
    Left,
    Right,
}

/// Unit-sum half-disc kernel of radius `radius`, `(2R+1)^2` with
/// `R = ceil(radius)`, anti-aliased by supersampling.
fn half_disc(radius: f64, half: Half) -> (usize, Vec<f64>) {
    let big_r = radius.ceil() as usize;
    let size = 2 * big_r + 1;
    let mut k = vec![0.0; size * size];
    let s = PSF_SUPERSAMPLE;
    for ky in 0..size {
        for kx in 0..size {
            let mut hits = 0usize;
            for sy in 0..s {
                for sx in 0..s {
                    let y = ky as f64 - big_r as f64 - 0.5 + (sy as f64 + 0.5) / s as f64;
                    let x = kx as f64 - big_r as f64 - 0.5 + (sx as f64 + 0.5) / s as f64;
                    let side = match half {
                        Half::Left => x < 0.0,
                        Half::Right => x > 0.0,
                    };
                    if side && x * x + y * y <= radius * radius {
                        hits += 1;
                    }
                }
            }
            k[ky * size + kx] = hits as f64;
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    (big_r, k)
}

/// `sum_u k(u) img(p - u)` with replicated borders.
fn convolve_plane(plane: &[f64], h: usize, w: usize, big_r: usize, k: &[f64]) -> Vec<f64> {
    let size = 2 * big_r + 1;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..size {
                let sy = (y as isize - (ky as isize - big_r as isize)).clamp(0, h as isize - 1) as usize;
                for kx in 0..size {
                    let kv = k[ky * size + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    let sx = (x as isize - (kx as isize - big_r as isize)).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Rendered views plus the signed blur radius of the front-most layer per
/// pixel.
#[derive(Clone, Debug)]
pub struct DpRender {
    pub left: Tensor<f64>,
    pub right: Tensor<f64>,
    pub radius: Tensor<f64>,
}

/// Renders both dual-pixel views. Layers with `|r| < 0.5` are left sharp.
pub fn render_dp_pair(scene: &Scene, lens: &LensModel) -> Result<DpRender> {
    let (h, w) = (scene.height, scene.width);
    if !(lens.gain > 0.0 && lens.max_radius >= 0.0) {
        return Err(Error::Config(format!(
            "lens gain must be positive and max radius non-negative, got {} and {}",
            lens.gain, lens.max_radius
        )));
    }
    let big_r = lens.max_radius.ceil() as usize;
    if 2 * big_r + 1 > h.min(w) {
        return Err(Error::Config(format!(
            "max blur radius {} needs a {}-pixel kernel, larger than the {h}x{w} image",
            lens.max_radius,
            2 * big_r + 1
        )));
    }
    let plane = h * w;
    let mut views = [vec![0.0; 3 * plane], vec![0.0; 3 * plane]];
    for layer in &scene.layers {
        let r = lens.radius(layer.depth);
        // Behind the focal plane the left view sees the left half of the
        // defocus disc; in front of it the halves swap.
        let halves = if r >= 0.0 {
            [Half::Left, Half::Right]
        } else {
            [Half::Right, Half::Left]
        };
        for (view, half) in views.iter_mut().zip(halves) {
            if r.abs() < 0.5 {
                for c in 0..3 {
                    for p in 0..plane {
                        let m = layer.mask[p];
                        let v = &mut view[c * plane + p];
                        *v = *v * (1.0 - m) + layer.color[c * plane + p] * m;
                    }
                }
                continue;
            }
            let (kr, k) = half_disc(r.abs(), half);
            let alpha = convolve_plane(&layer.mask, h, w, kr, &k);
            for c in 0..3 {
                let premul: Vec<f64> = (0..plane).map(|p| layer.color[c * plane + p] * layer.mask[p]).collect();
                let blurred = convolve_plane(&premul, h, w, kr, &k);
                for p in 0..plane {
                    let v = &mut view[c * plane + p];
                    *v = (*v * (1.0 - alpha[p]) + blurred[p]).clamp(0.0, 1.0);
                }
            }
        }
    }
    let depth = scene.depth();
    let radius = depth.map(|z| lens.radius(z));
    let [l, r] = views;
    Ok(DpRender {
        left: Tensor::from_vec([1, 3, h, w], l)?,
        right: Tensor::from_vec([1, 3, h, w], r)?,
        radius,
    })
}

/// A training or evaluation triplet. Images are `1x3xHxW` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DpSample {
    pub id: String,
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub sharp: Tensor<f32>,
    /// Depth map, synthetic samples only.
    pub depth: Option<Tensor<f32>>,
    /// Signed blur radius map, synthetic samples only.
    pub radius: Option<Tensor<f32>>,
}

/// Generation parameters, echoed to `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub regions: usize,
    pub lens: LensModel,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 64,
            height: 64,
            width: 64,
            regions: 4,
            lens: LensModel::default(),
            seed: 0,
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Deterministic sample `index` of a synthetic dataset.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<DpSample> {
    let scene_seed = rng::derived(cfg.seed, index as u64).random();
    let scene = generate_scene(scene_seed, cfg.height, cfg.width, cfg.regions)?;
    let render = render_dp_pair(&scene, &cfg.lens)?;
    Ok(DpSample {
        id: sample_id(index),
        left: render.left.cast(),
        right: render.right.cast(),
        sharp: scene.sharp().cast(),
        depth: Some(scene.depth().cast()),
        radius: Some(render.radius.cast()),
    })
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<DpSample>> {
    (0..cfg.count).map(|i| generate_sample(cfg, i)).collect()
}

/// Rounds `[0, 1]` images to 8 bits, as written to disk.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Writes a `1x3xHxW` tensor as an 8-bit RGB PNG; values are clamped.
pub fn write_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("write_png", "1x3xHxW", s));
    }
    let plane = s.plane();
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            buf.push((t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, s.w as u32, s.h as u32, image::ExtendedColorType::Rgb8).map_err(|e| Error::Image {
        path: path.to_owned(),
        source: e,
    })
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_owned(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape4::new(1, 3, h, w), data)
}

/// Writes `<id>_L.png`, `<id>_R.png` and `<id>_S.png` per sample.
pub fn write_dataset(root: &Path, samples: &[DpSample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in samples {
        write_png(&root.join(format!("{}_L.png", s.id)), &s.left)?;
        write_png(&root.join(format!("{}_R.png", s.id)), &s.right)?;
        write_png(&root.join(format!("{}_S.png", s.id)), &s.sharp)?;
    }
    Ok(())
}

#[derive(Default)]
struct Members {
    left: Option<PathBuf>,
    right: Option<PathBuf>,
    sharp: Option<PathBuf>,
}

fn scan(root: &Path) -> Result<BTreeMap<String, Members>> {
    let mut groups: BTreeMap<String, Members> = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let Some(stem) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".png"))
        else {
            continue;
        };
        let Some((id, role)) = stem.rsplit_once('_') else {
            continue;
        };
        let slot = groups.entry(id.to_owned()).or_default();
        match role {
            "L" => slot.left = Some(path),
            "R" => slot.right = Some(path),
            "S" => slot.sharp = Some(path),
            _ => {}
        }
    }
    Ok(groups)
}

fn incomplete(ids: Vec<String>, what: &str) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    Err(Error::Dataset(format!(
        "incomplete {what} for id(s): {}",
        ids.join(", ")
    )))
}

/// Reads every complete triplet under `root`, sorted by id. Any id with a
/// missing member is an error.
pub fn read_dataset(root: &Path) -> Result<Vec<DpSample>> {
    let groups = scan(root)?;
    let missing: Vec<String> = groups
        .iter()
        .filter(|(_, m)| m.left.is_none() || m.right.is_none() || m.sharp.is_none())
        .map(|(id, _)| id.clone())
        .collect();
    incomplete(missing, "triplets")?;
    groups
        .into_iter()
        .map(|(id, m)| {
            Ok(DpSample {
                left: read_png(m.left.as_deref().expect("checked"))?,
                right: read_png(m.right.as_deref().expect("checked"))?,
                sharp: read_png(m.sharp.as_deref().expect("checked"))?,
                id,
                depth: None,
                radius: None,
            })
        })
        .collect()
}

/// An input pair without ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DpPair {
    pub id: String,
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
}

/// Reads every `(L, R)` pair under `root`, sorted by id; sharp targets are
/// ignored when present.
pub fn read_pairs(root: &Path) -> Result<Vec<DpPair>> {
    let groups = scan(root)?;
    let missing: Vec<String> = groups
        .iter()
        .filter(|(_, m)| m.left.is_none() || m.right.is_none())
        .map(|(id, _)| id.clone())
        .collect();
    incomplete(missing, "L/R pairs")?;
    groups
        .into_iter()
        .map(|(id, m)| {
            Ok(DpPair {
                left: read_png(m.left.as_deref().expect("checked"))?,
                right: read_png(m.right.as_deref().expect("checked"))?,
                id,
            })
        })
        .collect()
}
