//! Procedural geotagged places seen under photometric and geometric jitter.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image_io::write_ppm;
use super::{write_manifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::training::TripletLossConfig;

/// Generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub places: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub spacing_m: f64,
    /// Maximum distance of a view from its place centre.
    pub view_jitter_m: f64,
    /// Scales every geometric and photometric perturbation; 0 renders the
    /// bare place texture.
    #[serde(default = "default_nuisance")]
    pub nuisance: f64,
}

fn default_nuisance() -> f64 {
    0.5
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            places: 64,
            views: 8,
            width: 128,
            height: 96,
            spacing_m: 100.0,
            view_jitter_m: 5.0,
            nuisance: default_nuisance(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let neg = TripletLossConfig::default().negative_radius_m;
        if !(self.spacing_m > 2.0 * neg) {
            return Err(Error::Config(format!(
                "grid spacing {} m must exceed {} m",
                self.spacing_m,
                2.0 * neg
            )));
        }
        if self.places == 0 || self.views < 2 || self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!(
                "need at least one place, two views and 8x8 images, got {self:?}"
            )));
        }
        if !(self.nuisance >= 0.0) {
            return Err(Error::Config(format!("nuisance must be >= 0, got {}", self.nuisance)));
        }
        if !(self.view_jitter_m >= 0.0) || 2.0 * self.view_jitter_m > TripletLossConfig::default().positive_radius_m {
            return Err(Error::Config(format!(
                "view jitter {} m would split a place across the positive radius",
                self.view_jitter_m
            )));
        }
        Ok(())
    }
}

/// Records plus the images they reference, in manifest order.
pub struct SynthDataset {
    pub records: Vec<ImageRecord>,
    pub images: Vec<RgbImage>,
}

impl SynthDataset {
    /// Writes `manifest.jsonl` and `images/*.ppm` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        self.records
            .par_iter()
            .zip(&self.images)
            .try_for_each(|(r, img)| write_ppm(&r.path(dir), img))?;
        write_manifest(&dir.join("manifest.jsonl"), &self.records)
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.15],
    [0.15, 0.55, 0.90],
    [0.95, 0.85, 0.20],
    [0.20, 0.75, 0.30],
    [0.55, 0.25, 0.70],
    [0.95, 0.55, 0.10],
    [0.10, 0.10, 0.12],
    [0.92, 0.92, 0.90],
];

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { r: f64 },
    Ring { r: f64, width: f64 },
    Rect { hw: f64, hh: f64, angle: f64 },
    Stripes { period: f64, angle: f64, hw: f64 },
    Triangle { r: f64, angle: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Motif {
    cx: f64,
    cy: f64,
    shape: Shape,
    color: [f64; 3],
}

fn rotate(x: f64, y: f64, a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

impl Motif {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let size = rng.random_range(0.08..0.28);
        let angle = rng.random_range(0.0..PI);
        let shape = match rng.random_range(0..5) {
            0 => Shape::Disc { r: size },
            1 => Shape::Ring {
                r: size,
                width: size * rng.random_range(0.2..0.45),
            },
            2 => Shape::Rect {
                hw: size,
                hh: size * rng.random_range(0.25..1.0),
                angle,
            },
            3 => Shape::Stripes {
                period: size * rng.random_range(0.3..0.6),
                angle,
                hw: size * 1.2,
            },
            _ => Shape::Triangle { r: size * 1.2, angle },
        };
        Self {
            cx: rng.random_range(-0.1..1.1),
            cy: rng.random_range(-0.1..1.1),
            shape,
            color: PALETTE[rng.random_range(0..PALETTE.len())],
        }
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            Shape::Disc { r } => dx * dx + dy * dy <= r * r,
            Shape::Ring { r, width } => {
                let d = dx.hypot(dy);
                d <= r && d >= r - width
            }
            Shape::Rect { hw, hh, angle } => {
                let (u, v) = rotate(dx, dy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Stripes { period, angle, hw } => {
                let (u, v) = rotate(dx, dy, angle);
                u.abs() <= hw && v.abs() <= hw && (u / period).rem_euclid(2.0) < 1.0
            }
            Shape::Triangle { r, angle } => (0..3).all(|i| {
                let a = angle + i as f64 * 2.0 * PI / 3.0;
                let (u, _) = rotate(dx, dy, a);
                u <= r * 0.5
            }),
        }
    }
}

/// Smooth lattice noise in `[0, 1]`.
struct ValueNoise {
    cells: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            cells,
            values: (0..cells * cells).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let n = self.cells as f64;
        let (fx, fy) = ((x * n).rem_euclid(n), (y * n).rem_euclid(n));
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let at = |i: usize, j: usize| self.values[(j % self.cells) * self.cells + i % self.cells];
        let top = at(x0, y0) * (1.0 - sx) + at(x0 + 1, y0) * sx;
        let bot = at(x0, y0 + 1) * (1.0 - sx) + at(x0 + 1, y0 + 1) * sx;
        top * (1.0 - sy) + bot * sy
    }
}

/// A place's appearance in unit canvas coordinates.
struct PlaceTexture {
    noise: [ValueNoise; 2],
    base: [[f64; 3]; 2],
    motifs: Vec<Motif>,
}

impl PlaceTexture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let noise = [ValueNoise::new(4, rng), ValueNoise::new(11, rng)];
        let a = rng.random_range(0..PALETTE.len());
        let b = (a + rng.random_range(1..PALETTE.len())) % PALETTE.len();
        let count = rng.random_range(10..17);
        Self {
            noise,
            base: [PALETTE[a], PALETTE[b]],
            motifs: (0..count).map(|_| Motif::random(rng)).collect(),
        }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some(m) = self.motifs.iter().rev().find(|m| m.covers(x, y)) {
            return m.color;
        }
        let t = 0.7 * self.noise[0].sample(x, y) + 0.3 * self.noise[1].sample(x, y);
        let [a, b] = self.base;
        [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
    }
}

/// Per-view nuisance parameters.
struct ViewJitter {
    /// Canvas coordinates of an output pixel: `a · (x, y) + t`.
    a: [[f64; 2]; 2],
    t: [f64; 2],
    gain: [f64; 3],
    offset: f64,
    shade: [f64; 2],
    occluders: Vec<([f64; 4], [f64; 3])>,
    noise_std: f64,
}

impl ViewJitter {
    fn random(rng: &mut ChaCha8Rng, aspect: f64, k: f64) -> Self {
        let mut spread = |half: f64| rng.random_range(-1.0..1.0) * half * k;
        let angle = spread(0.15);
        let scale = 0.9 + spread(0.1);
        let (s, c) = f64::sin_cos(angle);
        let a = [[c * scale, -s * scale * aspect], [s * scale / aspect, c * scale]];
        let centre = [0.5 + spread(0.1), 0.5 + spread(0.1)];
        let t = [
            centre[0] - 0.5 * (a[0][0] + a[0][1]),
            centre[1] - 0.5 * (a[1][0] + a[1][1]),
        ];
        let brightness = 0.95 + spread(0.4);
        let gain = [0, 1, 2].map(|_| brightness * (1.0 + spread(0.25)));
        let offset = spread(0.1);
        let shade = [spread(0.3), spread(0.3)];
        let occluders = (0..rng.random_range(0..3))
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                let (w, h) = (rng.random_range(0.05..0.25) * k, rng.random_range(0.05..0.25) * k);
                ([x - w, y - h, x + w, y + h], PALETTE[rng.random_range(0..PALETTE.len())])
            })
            .collect();
        Self {
            a,
            t,
            gain,
            offset,
            shade,
            occluders,
            noise_std: 0.03 * k,
        }
    }
}

/// Supersampling factor per axis.
const SUBSAMPLES: usize = 2;

fn render_view(tex: &PlaceTexture, jit: &ViewJitter, width: usize, height: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let noise = Normal::new(0.0, jit.noise_std).expect("non-negative std");
    let mut img = RgbImage::new(width as u32, height as u32);
    for py in 0..height {
        for px in 0..width {
            let mut acc = [0.0; 3];
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let u = (px as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64) / width as f64;
                    let v = (py as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64) / height as f64;
                    let occluder = jit
                        .occluders
                        .iter()
                        .find(|(r, _)| u >= r[0] && u <= r[2] && v >= r[1] && v <= r[3]);
                    let col = match occluder {
                        Some((_, c)) => *c,
                        None => {
                            let x = jit.a[0][0] * u + jit.a[0][1] * v + jit.t[0];
                            let y = jit.a[1][0] * u + jit.a[1][1] * v + jit.t[1];
                            tex.color(x, y)
                        }
                    };
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            let u = px as f64 / width as f64 - 0.5;
            let v = py as f64 / height as f64 - 0.5;
            let shade = 1.0 + jit.shade[0] * u + jit.shade[1] * v;
            let n = (SUBSAMPLES * SUBSAMPLES) as f64;
            let rgb = [0, 1, 2].map(|c| {
                let val = acc[c] / n * jit.gain[c] * shade + jit.offset + noise.sample(rng);
                (val.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(px as u32, py as u32, Rgb(rgb));
        }
    }
    img
}

fn place_seed(seed: u64, place: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (place as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Generates `places × views` records on a square-ish grid.
///
/// The first half of each place's views are `db`, the rest `query`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let cols = (cfg.places as f64).sqrt().ceil() as usize;
    let aspect = cfg.width as f64 / cfg.height as f64;
    let per_place: Vec<Vec<(ImageRecord, RgbImage)>> = (0..cfg.places)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(place_seed(cfg.seed, p));
            let tex = PlaceTexture::random(&mut rng);
            let centre = ((p % cols) as f64 * cfg.spacing_m, (p / cols) as f64 * cfg.spacing_m);
            (0..cfg.views)
                .map(|v| {
                    let r = cfg.view_jitter_m * rng.random::<f64>().sqrt();
                    let theta = rng.random_range(0.0..2.0 * PI);
                    let id = format!("p{p:03}_v{v:02}");
                    let jit = ViewJitter::random(&mut rng, aspect, cfg.nuisance);
                    let img = render_view(&tex, &jit, cfg.width, cfg.height, &mut rng);
                    let rec = ImageRecord {
                        image: format!("images/{id}.ppm"),
                        id,
                        x_m: centre.0 + r * theta.cos(),
                        y_m: centre.1 + r * theta.sin(),
                        split: if v < cfg.views / 2 { Split::Db } else { Split::Query },
                    };
                    (rec, img)
                })
                .collect()
        })
        .collect();
    let (records, images) = per_place.into_iter().flatten().unzip();
    Ok(SynthDataset { records, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            places: 5,
            views: 4,
            width: 32,
            height: 24,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_splits() {
        let ds = synth_dataset(&small()).unwrap();
        assert_eq!(ds.records.len(), 20);
        assert_eq!(ds.records.iter().filter(|r| r.split == Split::Db).count(), 10);
        assert_eq!(ds.records[0].id, "p000_v00");
        assert_eq!(ds.images[3].dimensions(), (32, 24));
    }

    #[test]
    fn own_place_is_exactly_the_tolerance_set() {
        let ds = synth_dataset(&small()).unwrap();
        for q in ds.records.iter().filter(|r| r.split == Split::Query) {
            let near: Vec<&str> = ds
                .records
                .iter()
                .filter(|d| d.split == Split::Db && d.distance_to(q.position()) <= 25.0)
                .map(|d| &d.id[..4])
                .collect();
            assert_eq!(near, vec![&q.id[..4]; 2]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        synth_dataset(&small()).unwrap().write(dir_a.path()).unwrap();
        synth_dataset(&small()).unwrap().write(dir_b.path()).unwrap();
        for name in ["manifest.jsonl", "images/p003_v02.ppm"] {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap()
            );
        }
        let other = synth_dataset(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(other.images[0], synth_dataset(&small()).unwrap().images[0]);
    }

    #[test]
    fn narrow_spacing_rejected() {
        assert!(synth_dataset(&SynthConfig { spacing_m: 50.0, ..small() }).is_err());
    }
}
