//! Procedural aerial scenes with solar panels and look-alike distractors.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::{write_pgm, write_ppm};
use super::manifest::{split_manifest, Manifest, SampleRecord, Split};
use super::{sample_rng, write_atomic};
use crate::config::{parse_kv, parse_range, KvEntry};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive panel count range for positive scenes.
    pub panels: (usize, usize),
    /// Probability that a scene has no panel at all.
    pub empty_prob: f64,
    /// Inclusive side-length range in pixels.
    pub panel_size: (f64, f64),
    /// Rotation is drawn uniformly from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    /// Pools and windows.
    pub distractors: (usize, usize),
    /// Roofs and roads.
    pub structures: (usize, usize),
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            height: 64,
            width: 64,
            panels: (1, 4),
            empty_prob: 0.3,
            panel_size: (4.0, 20.0),
            max_rotation_deg: 45.0,
            distractors: (0, 3),
            structures: (1, 3),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid!("scene canvas must be non-empty"));
        }
        let (lo, hi) = self.panel_size;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid!("panel_size range {lo}..{hi} is empty"));
        }
        if lo > self.height.min(self.width) as f64 {
            return Err(invalid!(
                "canvas {}x{} is smaller than the minimum panel side {lo}",
                self.height,
                self.width
            ));
        }
        if self.panels.0 > self.panels.1 || self.distractors.0 > self.distractors.1 || self.structures.0 > self.structures.1 {
            return Err(invalid!("count ranges must satisfy min <= max"));
        }
        if !(0.0..=1.0).contains(&self.empty_prob) {
            return Err(invalid!("empty_prob {} outside [0, 1]", self.empty_prob));
        }
        Ok(())
    }

    /// Parse `key=value` lines over the defaults.
    ///
    /// Keys: `height`, `width`, `panels`, `empty_prob`, `panel_size`,
    /// `max_rotation_deg`, `distractors`, `structures`. Ranges are written
    /// `lo..hi` (inclusive) or as a single value.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for KvEntry { line, key, value } in parse_kv(text)? {
            let err = |e: Error| Error::Config(format!("line {line}: {key}: {e}"));
            match key.as_str() {
                "height" => spec.height = value.parse().map_err(|_| err(invalid!("not an integer")))?,
                "width" => spec.width = value.parse().map_err(|_| err(invalid!("not an integer")))?,
                "panels" => spec.panels = parse_range(&value).map_err(err)?,
                "empty_prob" => spec.empty_prob = value.parse().map_err(|_| err(invalid!("not a number")))?,
                "panel_size" => spec.panel_size = parse_range(&value).map_err(err)?,
                "max_rotation_deg" => {
                    spec.max_rotation_deg = value.parse().map_err(|_| err(invalid!("not a number")))?
                }
                "distractors" => spec.distractors = parse_range(&value).map_err(err)?,
                "structures" => spec.structures = parse_range(&value).map_err(err)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Rectangle rotated about its centre, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotRect {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle: f64,
}

impl RotRect {
    pub fn axis_aligned(x0: f64, y0: f64, w: f64, h: f64) -> Self {
        RotRect { cx: x0 + w / 2.0, cy: y0 + h / 2.0, w, h, angle: 0.0 }
    }

    /// Coordinates of `(x, y)` in the rectangle's own frame.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Whether the centre of pixel `(col, row)` lies inside.
    pub fn covers_pixel(&self, col: usize, row: usize) -> bool {
        self.contains(col as f64 + 0.5, row as f64 + 0.5)
    }

    fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let hx = (c * self.w).abs() / 2.0 + (s * self.h).abs() / 2.0;
        let hy = (s * self.w).abs() / 2.0 + (c * self.h).abs() / 2.0;
        (hx, hy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistractorKind {
    Pool,
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StructureKind {
    Roof,
    Road,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub rect: RotRect,
    pub color: [f64; 3],
    /// Spacing of the cell grid lines, in pixels.
    pub cell: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ground: [f64; 3],
    pub structures: Vec<(StructureKind, RotRect, [f64; 3])>,
    pub distractors: Vec<(DistractorKind, RotRect, [f64; 3])>,
    pub panels: Vec<Panel>,
}

fn jitter(rng: &mut impl Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    let k = rng.random_range(-spread..=spread);
    base.map(|c| c + k + rng.random_range(-spread / 2.0..=spread / 2.0))
}

fn place(rng: &mut impl Rng, spec: &SyntheticSceneSpec, w: f64, h: f64, angle: f64) -> RotRect {
    let mut r = RotRect { cx: 0.0, cy: 0.0, w, h, angle };
    let (hx, hy) = r.half_extent();
    let pick = |rng: &mut dyn rand::RngCore, half: f64, extent: usize| {
        let extent = extent as f64;
        if 2.0 * half >= extent {
            extent / 2.0
        } else {
            rng.random_range(half..=extent - half)
        }
    };
    r.cx = pick(rng, hx, spec.width);
    r.cy = pick(rng, hy, spec.height);
    r
}

/// Draw a random scene layout.
pub fn sample_scene(spec: &SyntheticSceneSpec, rng: &mut impl Rng) -> Result<Scene> {
    spec.validate()?;
    let grounds = [[88.0, 118.0, 70.0], [132.0, 120.0, 96.0], [118.0, 118.0, 112.0]];
    let base = grounds[rng.random_range(0..grounds.len())];
    let ground = jitter(rng, base, 12.0);
    let long = spec.height.max(spec.width) as f64;

    let n_struct = rng.random_range(spec.structures.0..=spec.structures.1);
    let structures = (0..n_struct)
        .map(|_| {
            if rng.random_bool(0.35) {
                let w = long * 1.5;
                let h = rng.random_range(4.0..=9.0);
                let angle = if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::FRAC_PI_2 };
                let a = angle + rng.random_range(-0.2..=0.2);
                let r = place(rng, spec, w, h, a);
                (StructureKind::Road, r, jitter(rng, [105.0, 105.0, 108.0], 10.0))
            } else {
                let w = rng.random_range(long * 0.25..=long * 0.6);
                let h = rng.random_range(long * 0.25..=long * 0.6);
                let a = rng.random_range(-0.6..=0.6);
                let r = place(rng, spec, w, h, a);
                let base = if rng.random_bool(0.5) { [172.0, 88.0, 66.0] } else { [150.0, 146.0, 142.0] };
                (StructureKind::Roof, r, jitter(rng, base, 14.0))
            }
        })
        .collect();

    let n_dist = rng.random_range(spec.distractors.0..=spec.distractors.1);
    let distractors = (0..n_dist)
        .map(|_| {
            let angle = rng.random_range(-0.8..=0.8);
            if rng.random_bool(0.5) {
                let (w, h) = (rng.random_range(6.0..=14.0), rng.random_range(5.0..=10.0));
                let r = place(rng, spec, w, h, angle);
                (DistractorKind::Pool, r, jitter(rng, [70.0, 175.0, 215.0], 16.0))
            } else {
                let (w, h) = (rng.random_range(3.0..=7.0), rng.random_range(3.0..=7.0));
                let r = place(rng, spec, w, h, angle);
                (DistractorKind::Window, r, jitter(rng, [72.0, 84.0, 104.0], 10.0))
            }
        })
        .collect();

    let n_panels = if rng.random_bool(spec.empty_prob) {
        0
    } else {
        rng.random_range(spec.panels.0.max(1)..=spec.panels.1.max(1))
    };
    let (lo, hi) = spec.panel_size;
    let max_rot = spec.max_rotation_deg.to_radians().abs();
    let panels = (0..n_panels)
        .map(|_| {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let angle = if max_rot > 0.0 { rng.random_range(-max_rot..=max_rot) } else { 0.0 };
            let base = if rng.random_bool(0.7) { [28.0, 40.0, 92.0] } else { [18.0, 20.0, 26.0] };
            Panel {
                rect: place(rng, spec, w, h, angle),
                color: jitter(rng, base, 8.0),
                cell: rng.random_range(2.5..=4.5),
            }
        })
        .collect();
    Ok(Scene { ground, structures, distractors, panels })
}

fn bilinear_noise(rng: &mut impl Rng, h: usize, w: usize, cell: usize, amp: f64) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-amp..=amp)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Panel pixels of `scene`, row-major.
pub fn rasterize_panels(scene: &Scene, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    for p in &scene.panels {
        for (i, m) in mask.iter_mut().enumerate() {
            if p.rect.covers_pixel(i % width, i / width) {
                *m = true;
            }
        }
    }
    mask
}

/// Paint `scene`; `rng` drives texture only. The mask is 0/255.
pub fn render(scene: &Scene, height: usize, width: usize, rng: &mut impl Rng) -> (RgbImage, GrayImage) {
    let low = bilinear_noise(rng, height, width, 8, 14.0);
    let grain = Normal::new(0.0, 6.0).expect("valid normal");
    let mut px: Vec<[f64; 3]> = (0..height * width)
        .map(|i| {
            let n = low[i];
            let g = scene.ground;
            [g[0] + n, g[1] + n, g[2] + 0.6 * n]
        })
        .collect();
    let fill = |px: &mut Vec<[f64; 3]>, r: &RotRect, color: [f64; 3]| {
        for (i, p) in px.iter_mut().enumerate() {
            if r.covers_pixel(i % width, i / width) {
                *p = color;
            }
        }
    };
    for (_, r, c) in &scene.structures {
        fill(&mut px, r, *c);
    }
    for (_, r, c) in &scene.distractors {
        fill(&mut px, r, *c);
    }
    for p in &scene.panels {
        for (i, v) in px.iter_mut().enumerate() {
            let (x, y) = ((i % width) as f64 + 0.5, (i / width) as f64 + 0.5);
            if !p.rect.contains(x, y) {
                continue;
            }
            let (u, w) = p.rect.local(x, y);
            let on_line = (u + p.rect.w / 2.0).rem_euclid(p.cell) < 0.8 || (w + p.rect.h / 2.0).rem_euclid(p.cell) < 0.8;
            let lift = if on_line { 26.0 } else { 0.0 };
            *v = p.color.map(|c| c + lift);
        }
    }
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, p) in px.iter().enumerate() {
        let rgb = p.map(|c| (c + grain.sample(rng)).round().clamp(0.0, 255.0) as u8);
        img.put_pixel((i % width) as u32, (i / width) as u32, Rgb(rgb));
    }
    let mask = rasterize_panels(scene, height, width);
    let mut m = GrayImage::new(width as u32, height as u32);
    for (i, &on) in mask.iter().enumerate() {
        m.put_pixel((i % width) as u32, (i / width) as u32, Luma([if on { 255 } else { 0 }]));
    }
    (img, m)
}

/// Sample and render scene `index` of the stream identified by `seed`.
pub fn synthesize(spec: &SyntheticSceneSpec, seed: u64, index: u64) -> Result<(RgbImage, GrayImage)> {
    let mut rng = sample_rng(seed, index);
    let scene = sample_scene(spec, &mut rng)?;
    Ok(render(&scene, spec.height, spec.width, &mut rng))
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Write `n` scenes under `out` plus a split manifest; returns the manifest.
///
/// Fewer than five scenes cannot be split and all go to the train fold.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, seed: u64, n: usize, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid!("need at least one scene"));
    }
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(n);
    let mut positive = Vec::with_capacity(n);
    for i in 0..n {
        let (img, mask) = synthesize(spec, seed, i as u64)?;
        let image_rel = PathBuf::from(format!("images/{i:05}.ppm"));
        let mask_rel = PathBuf::from(format!("masks/{i:05}.pgm"));
        write_ppm(&out.join(&image_rel), &img)?;
        write_pgm(&out.join(&mask_rel), &mask)?;
        positive.push(mask.as_raw().iter().any(|&v| v > 0));
        records.push(SampleRecord::new(image_rel, Some(mask_rel)));
    }
    if n >= 5 {
        split_manifest(&mut records, &positive, seed)?;
    } else {
        records.iter_mut().for_each(|r| r.split = Some(Split::Train));
    }
    let manifest = Manifest { root: out.to_path_buf(), records };
    write_atomic(&out.join(MANIFEST_NAME), manifest.to_text().as_bytes())?;
    Ok(manifest)
}
