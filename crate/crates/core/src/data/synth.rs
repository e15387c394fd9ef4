//! Procedural multi-category datasets with pixel-exact defect masks.
//!
//! Texture categories are seeded smoothed-noise or stripe fields; object
//! categories are parametric shapes on a plain background. Defects are
//! painted into the 8-bit image after quantization, so every pixel outside a
//! mask is bit-identical to the defect-free rendering.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{pnm, Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryKind {
    Texture,
    Object,
}

/// Named generators; each fixes a pattern family and palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Two-tone smoothed value noise.
    Marble,
    /// Oriented stripes with jittered phase and fine noise.
    Weave,
    /// Fine-grained isotropic noise.
    Grain,
    /// A ring centred with small positional jitter.
    Washer,
    /// An axis-aligned ellipse with jittered size.
    Pill,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [Pattern::Marble, Pattern::Weave, Pattern::Washer, Pattern::Grain, Pattern::Pill];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Marble => "marble",
            Pattern::Weave => "weave",
            Pattern::Grain => "grain",
            Pattern::Washer => "washer",
            Pattern::Pill => "pill",
        }
    }

    pub fn kind(self) -> CategoryKind {
        match self {
            Pattern::Marble | Pattern::Weave | Pattern::Grain => CategoryKind::Texture,
            Pattern::Washer | Pattern::Pill => CategoryKind::Object,
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category pattern {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Blob,
    MissingRegion,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Scratch, DefectKind::Blob, DefectKind::MissingRegion];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kinds: Vec<DefectKind>,
    /// Characteristic defect size as a fraction of the image side.
    pub size_range: (f64, f64),
    /// Blend weight between the original pixel and the defect colour.
    pub intensity_range: (f64, f64),
}

impl Default for DefectSpec {
    fn default() -> Self {
        Self {
            kinds: DefectKind::ALL.to_vec(),
            size_range: (0.06, 0.14),
            intensity_range: (0.6, 1.0),
        }
    }
}

/// Allowed defect area as a fraction of the image.
pub const DEFECT_AREA_RANGE: (f64, f64) = (0.002, 0.2);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub categories: Vec<Pattern>,
    pub size: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_defect: usize,
    pub defects: DefectSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: vec![Pattern::Marble, Pattern::Weave, Pattern::Washer],
            size: 64,
            n_train: 200,
            n_test_normal: 50,
            n_test_defect: 50,
            defects: DefectSpec::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let mut names: Vec<&str> = self.categories.iter().map(|p| p.name()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() < 2 || names.len() != self.categories.len() {
            return bad("a dataset needs at least 2 distinct categories".into());
        }
        if self.size < 16 {
            return bad(format!("image size {} is below 16", self.size));
        }
        if self.n_train == 0 || self.n_test_normal == 0 {
            return bad("train and normal test counts must be >= 1".into());
        }
        if self.n_test_defect > 0 && self.defects.kinds.is_empty() {
            return bad("defective samples requested without defect kinds".into());
        }
        let (lo, hi) = self.defects.size_range;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return bad(format!("defect size range {:?} outside (0, 0.5)", self.defects.size_range));
        }
        let (lo, hi) = self.defects.intensity_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("defect intensity range {:?} outside (0, 1]", self.defects.intensity_range));
        }
        Ok(())
    }
}

/// One rendered sample held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: Record,
    pub rgb: Vec<u8>,
    pub mask: Option<Vec<bool>>,
}

fn sample_id(category: &str, split: Split, label: bool, index: usize) -> String {
    let tag = if label { "bad" } else { "good" };
    format!("{category}-{split}-{tag}-{index:04}")
}

/// Renders one category's records. Deterministic in `(seed, record id)`.
pub fn generate_category(
    pattern: Pattern,
    size: usize,
    counts: (usize, usize, usize),
    defects: &DefectSpec,
    seed: u64,
) -> Result<Vec<Sample>> {
    let (n_train, n_test_normal, n_test_defect) = counts;
    let name = pattern.name();
    let plan = (0..n_train)
        .map(|i| (Split::Train, false, i))
        .chain((0..n_test_normal).map(|i| (Split::Test, false, i)))
        .chain((0..n_test_defect).map(|i| (Split::Test, true, i)));
    let mut out = Vec::new();
    for (split, label, index) in plan {
        let id = sample_id(name, split, label, index);
        let mut r = rng::derive(seed, &id);
        let mut rgb = quantize(&render(pattern, size, &mut r));
        let dir = format!("{name}/{split}");
        let mask = if label {
            let mask = defect_mask(size, defects, &mut r)?;
            paint_defect(&mut rgb, &mask, defects, &mut r);
            Some(mask)
        } else {
            None
        };
        out.push(Sample {
            record: Record {
                image_path: format!("{dir}/images/{id}.ppm").into(),
                mask_path: label.then(|| format!("{dir}/masks/{id}.pgm").into()),
                id,
                category: name.to_string(),
                split,
                label,
            },
            rgb,
            mask,
        });
    }
    Ok(out)
}

/// Writes a full dataset with its manifest under `root`.
pub fn generate(root: &Path, config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut records = Vec::new();
    for &pattern in &config.categories {
        let samples = generate_category(
            pattern,
            config.size,
            (config.n_train, config.n_test_normal, config.n_test_defect),
            &config.defects,
            config.seed,
        )?;
        for s in samples {
            let img = root.join(&s.record.image_path);
            let parent = img.parent().expect("image path has a directory");
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            pnm::write_ppm(&img, config.size, config.size, &s.rgb)?;
            if let (Some(mask), Some(rel)) = (&s.mask, &s.record.mask_path) {
                let path = root.join(rel);
                let parent = path.parent().expect("mask path has a directory");
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                let gray: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
                pnm::write_pgm(&path, config.size, config.size, &gray)?;
            }
            records.push(s.record);
        }
    }
    let ds = Dataset {
        root: root.to_path_buf(),
        seed: Some(config.seed),
        records,
    };
    ds.write_manifest()?;
    Ok(ds)
}

fn quantize(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothed value noise in `[0, 1]` with lattice spacing `cell` pixels.
fn value_noise(size: usize, cell: usize, r: &mut Rng) -> Vec<f32> {
    let n = size / cell + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| r.gen()).collect();
    let (ox, oy) = (r.gen_range(0.0..1.0f32), r.gen_range(0.0..1.0f32));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f32 / cell as f32 + oy;
        let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..size {
            let fx = x as f32 / cell as f32 + ox;
            let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy.min(n - 1) * n + xx.min(n - 1)];
            let top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * tx;
            let bottom = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * tx;
            out.push(top + (bottom - top) * ty);
        }
    }
    out
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn render(pattern: Pattern, size: usize, r: &mut Rng) -> Vec<f32> {
    let mut px = Vec::with_capacity(size * size * 3);
    let s = size as f32;
    match pattern {
        Pattern::Marble => {
            let coarse = value_noise(size, (size / 4).max(2), r);
            let fine = value_noise(size, (size / 16).max(2), r);
            for (c, f) in coarse.iter().zip(&fine) {
                let t = 0.75 * c + 0.25 * f;
                px.extend(mix([0.78, 0.74, 0.70], [0.45, 0.42, 0.48], t));
            }
        }
        Pattern::Weave => {
            let period = s / 8.0 * r.gen_range(0.9..1.1f32);
            let phase = r.gen_range(0.0..std::f32::consts::TAU);
            let fine = value_noise(size, 2, r);
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f32 + y as f32) / period * std::f32::consts::TAU + phase;
                    let t = 0.5 + 0.35 * u.sin() + 0.15 * (fine[y * size + x] - 0.5);
                    px.extend(mix([0.25, 0.38, 0.55], [0.55, 0.68, 0.80], t));
                }
            }
        }
        Pattern::Grain => {
            let fine = value_noise(size, 2, r);
            let coarse = value_noise(size, (size / 8).max(2), r);
            for (f, c) in fine.iter().zip(&coarse) {
                let t = 0.6 * f + 0.4 * c;
                px.extend(mix([0.50, 0.36, 0.22], [0.70, 0.55, 0.35], t));
            }
        }
        Pattern::Washer | Pattern::Pill => {
            let (cy, cx) = (
                s / 2.0 + r.gen_range(-0.04..0.04f32) * s,
                s / 2.0 + r.gen_range(-0.04..0.04f32) * s,
            );
            let grit = value_noise(size, 2, r);
            let (outer, inner, ay, ax) = match pattern {
                Pattern::Washer => (s * r.gen_range(0.33..0.36f32), s * r.gen_range(0.14..0.16f32), 1.0, 1.0),
                _ => (s * 0.5, 0.0, r.gen_range(0.24..0.27f32) * s, r.gen_range(0.38..0.41f32) * s),
            };
            let background = [0.12, 0.12, 0.14];
            let body = if pattern == Pattern::Washer {
                [0.72, 0.72, 0.68]
            } else {
                [0.85, 0.55, 0.20]
            };
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    let inside = if pattern == Pattern::Washer {
                        let d = (dy * dy + dx * dx).sqrt();
                        d <= outer && d >= inner
                    } else {
                        (dy / ay).powi(2) + (dx / ax).powi(2) <= 1.0 && outer > 0.0
                    };
                    let base = if inside { body } else { background };
                    let g = 0.06 * (grit[y * size + x] - 0.5);
                    px.extend(base.map(|v| v + g));
                }
            }
        }
    }
    px
}

/// Pixels whose centres lie within `radius` of `(cy, cx)`.
pub fn rasterize_disc(size: usize, cy: f64, cx: f64, radius: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            mask[y * size + x] = dy * dy + dx * dx <= radius * radius;
        }
    }
    mask
}

fn rasterize_segment(size: usize, from: (f64, f64), to: (f64, f64), half_width: f64) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let (vy, vx) = (to.0 - from.0, to.1 - from.1);
    let len2 = vy * vy + vx * vx;
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5 - from.0, x as f64 + 0.5 - from.1);
            let t = ((py * vy + px * vx) / len2).clamp(0.0, 1.0);
            let (ey, ex) = (py - t * vy, px - t * vx);
            mask[y * size + x] = ey * ey + ex * ex <= half_width * half_width;
        }
    }
    mask
}

fn defect_mask(size: usize, spec: &DefectSpec, r: &mut Rng) -> Result<Vec<bool>> {
    let s = size as f64;
    let area_ok = |m: &[bool]| {
        let frac = m.iter().filter(|&&v| v).count() as f64 / (size * size) as f64;
        (DEFECT_AREA_RANGE.0..=DEFECT_AREA_RANGE.1).contains(&frac)
    };
    for _ in 0..64 {
        let kind = spec.kinds[r.gen_range(0..spec.kinds.len())];
        let extent = r.gen_range(spec.size_range.0..=spec.size_range.1) * s;
        let margin = 0.15 * s;
        let (cy, cx) = (r.gen_range(margin..s - margin), r.gen_range(margin..s - margin));
        let mask = match kind {
            DefectKind::Blob => rasterize_disc(size, cy, cx, extent),
            DefectKind::Scratch => {
                let angle = r.gen_range(0.0..std::f64::consts::PI);
                let (dy, dx) = (angle.sin() * extent * 1.5, angle.cos() * extent * 1.5);
                let half_width = r.gen_range(0.6..1.2) * (s / 64.0);
                rasterize_segment(size, (cy - dy, cx - dx), (cy + dy, cx + dx), half_width)
            }
            DefectKind::MissingRegion => {
                let (hh, hw) = (extent * r.gen_range(0.6..1.0), extent * r.gen_range(0.6..1.0));
                let mut m = vec![false; size * size];
                for y in 0..size {
                    for x in 0..size {
                        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                        m[y * size + x] = (py - cy).abs() <= hh && (px - cx).abs() <= hw;
                    }
                }
                m
            }
        };
        if area_ok(&mask) {
            return Ok(mask);
        }
    }
    Err(Error::InvalidArgument(format!(
        "defect size range {:?} cannot produce areas in {DEFECT_AREA_RANGE:?} at {size}px",
        spec.size_range
    )))
}

fn paint_defect(rgb: &mut [u8], mask: &[bool], spec: &DefectSpec, r: &mut Rng) {
    let intensity = r.gen_range(spec.intensity_range.0..=spec.intensity_range.1) as f32;
    let color: [f32; 3] = [r.gen(), r.gen(), r.gen()];
    for (px, _) in rgb.chunks_mut(3).zip(mask).filter(|(_, &m)| m) {
        for (v, c) in px.iter_mut().zip(color) {
            let orig = *v as f32 / 255.0;
            *v = ((orig + (c - orig) * intensity).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
}
