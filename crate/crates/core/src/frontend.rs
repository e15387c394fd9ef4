//! Multi-scale feature extraction.
//!
//! The random-projection featurizer area-pools the image once per scale,
//! projects every non-overlapping 2×2 patch with a fixed seeded Gaussian
//! matrix, area-pools each scale map down to the coarsest grid, and
//! concatenates channels. Every output cell therefore depends only on its own
//! `2^S × 2^S` pixel block. The precomputed loader reads features exported
//! by an external backbone.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tensor::{Element, Tensor};

const PATCH: usize = 2;

/// An RGB image, `H×W×3` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor<f32>,
}

impl Image {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        let [h, w, 3] = pixels.shape() else {
            return Err(Error::InvalidShape {
                shape: pixels.shape().to_vec(),
                reason: "image must be H×W×3".into(),
            });
        };
        if *h < 8 || *w < 8 {
            return Err(Error::InvalidArgument(format!("image {h}x{w} is smaller than 8x8")));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }
}

/// Bilinear resize; output values stay within the input's range.
pub fn resize_image(img: &Image, target: (usize, usize)) -> Result<Image> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument("zero resize target".into()));
    }
    if (th, tw) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let data = kernels::bilinear(img.pixels.data(), img.height(), img.width(), 3, th, tw);
    Image::new(Tensor::new(vec![th, tw, 3], data)?)
}

/// `h×w×C` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Element = f32> {
    data: Tensor<T>,
}

impl<T: Element> FeatureMap<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: data.shape().to_vec(),
                reason: "feature map must be h×w×C".into(),
            });
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    /// Channel vector at grid cell `(y, x)`.
    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let (_, w, c) = self.dims();
        let at = (y * w + x) * c;
        &self.data.data()[at..at + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FrontendKind {
    RandomProjection {
        seed: u64,
        scales: usize,
        c_feat: usize,
        bias: bool,
    },
    Precomputed {
        dir: PathBuf,
        c_feat: usize,
    },
}

impl FrontendKind {
    /// 64×64 images, 16×16 grid, 64 channels.
    pub fn desk(seed: u64) -> Self {
        FrontendKind::RandomProjection {
            seed,
            scales: 2,
            c_feat: 64,
            bias: false,
        }
    }

    /// 224×224 images, 14×14 grid, 272 channels.
    pub fn full(seed: u64) -> Self {
        FrontendKind::RandomProjection {
            seed,
            scales: 4,
            c_feat: 272,
            bias: false,
        }
    }

    pub fn c_feat(&self) -> usize {
        match self {
            FrontendKind::RandomProjection { c_feat, .. } | FrontendKind::Precomputed { c_feat, .. } => *c_feat,
        }
    }
}

struct ScaleProjection {
    weight: Vec<f32>,
    bias: Vec<f32>,
}

pub struct Frontend {
    kind: FrontendKind,
    projections: Vec<ScaleProjection>,
}

impl Frontend {
    pub fn new(kind: FrontendKind) -> Result<Self> {
        let projections = match &kind {
            FrontendKind::RandomProjection {
                seed,
                scales,
                c_feat,
                bias,
            } => {
                if *scales == 0 || *c_feat == 0 || c_feat % scales != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "random projection needs scales >= 1 dividing c_feat (got {scales}, {c_feat})"
                    )));
                }
                let per_scale = c_feat / scales;
                let fan_in = PATCH * PATCH * 3;
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                (0..*scales)
                    .map(|s| {
                        let mut r = rng::derive(*seed, &format!("frontend-scale-{s}"));
                        let weight = (0..fan_in * per_scale).map(|_| normal.sample(&mut r) as f32).collect();
                        let bias = if *bias {
                            (0..per_scale).map(|_| normal.sample(&mut r) as f32).collect()
                        } else {
                            vec![0.0; per_scale]
                        };
                        ScaleProjection { weight, bias }
                    })
                    .collect()
            }
            FrontendKind::Precomputed { c_feat, .. } => {
                if *c_feat == 0 {
                    return Err(Error::InvalidArgument("c_feat must be >= 1".into()));
                }
                Vec::new()
            }
        };
        Ok(Self { kind, projections })
    }

    pub fn kind(&self) -> &FrontendKind {
        &self.kind
    }

    pub fn c_feat(&self) -> usize {
        self.kind.c_feat()
    }

    /// Feature grid produced for an `h×w` image.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let scales = self.projections.len();
        if scales == 0 {
            return Err(Error::InvalidArgument("precomputed features have no image grid".into()));
        }
        let block = 1usize << scales;
        if !h.is_multiple_of(block) || !w.is_multiple_of(block) {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} is not divisible by {block} for {scales}-scale extraction"
            )));
        }
        Ok((h / block, w / block))
    }

    /// Extracts features from an image. Only the random-projection
    /// featurizer computes features from pixels.
    pub fn extract(&self, img: &Image) -> Result<FeatureMap> {
        if let FrontendKind::Precomputed { .. } = self.kind {
            return Err(Error::InvalidArgument(
                "precomputed frontend loads features by id, not from pixels".into(),
            ));
        }
        let (gh, gw) = self.grid_for(img.height(), img.width())?;
        let c_feat = self.c_feat();
        let per_scale = c_feat / self.projections.len();
        let mut out = vec![0.0f32; gh * gw * c_feat];
        let mut level = img.pixels.data().to_vec();
        let (mut h, mut w) = (img.height(), img.width());
        for (s, proj) in self.projections.iter().enumerate() {
            if s > 0 {
                level = area_pool(&level, h, w, 3, 2);
                h /= 2;
                w /= 2;
            }
            let (ph, pw) = (h / PATCH, w / PATCH);
            let mut patch = [0.0f32; PATCH * PATCH * 3];
            let mut map = vec![0.0f32; ph * pw * per_scale];
            for py in 0..ph {
                for px in 0..pw {
                    for dy in 0..PATCH {
                        let row = ((py * PATCH + dy) * w + px * PATCH) * 3;
                        patch[dy * PATCH * 3..(dy + 1) * PATCH * 3]
                            .copy_from_slice(&level[row..row + PATCH * 3]);
                    }
                    let cell = &mut map[(py * pw + px) * per_scale..(py * pw + px + 1) * per_scale];
                    cell.copy_from_slice(&proj.bias);
                    for (k, &p) in patch.iter().enumerate() {
                        let wrow = &proj.weight[k * per_scale..(k + 1) * per_scale];
                        for (c, &wv) in cell.iter_mut().zip(wrow) {
                            *c += p * wv;
                        }
                    }
                }
            }
            let map = area_pool(&map, ph, pw, per_scale, ph / gh);
            for (cell, src) in map.chunks(per_scale).enumerate() {
                out[cell * c_feat + s * per_scale..cell * c_feat + (s + 1) * per_scale].copy_from_slice(src);
            }
        }
        FeatureMap::new(Tensor::new(vec![gh, gw, c_feat], out)?)
    }

    /// Loads exported features stored as `<dir>/<split>/<category>/<id>.pfad`.
    pub fn load(&self, split: &str, category: &str, id: &str) -> Result<FeatureMap> {
        let FrontendKind::Precomputed { dir, c_feat } = &self.kind else {
            return Err(Error::InvalidArgument("random projection frontend has no feature files".into()));
        };
        let path = precomputed_path(dir, split, category, id);
        if !path.exists() {
            return Err(Error::MissingFile {
                id: id.to_string(),
                path,
            });
        }
        let map = FeatureMap::new(Tensor::<f32>::load(&path)?)?;
        if map.dims().2 != *c_feat {
            return Err(Error::ShapeMismatch {
                op: "precomputed features",
                lhs: vec![*c_feat],
                rhs: vec![map.dims().2],
            });
        }
        Ok(map)
    }
}

pub fn precomputed_path(dir: &Path, split: &str, category: &str, id: &str) -> PathBuf {
    dir.join(split).join(category).join(format!("{id}.pfad"))
}

/// Non-overlapping `factor×factor` mean pooling of an `h×w×c` map.
fn area_pool(data: &[f32], h: usize, w: usize, c: usize, factor: usize) -> Vec<f32> {
    if factor == 1 {
        return data.to_vec();
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh * factor {
        for x in 0..ow * factor {
            let src = &data[(y * w + x) * c..(y * w + x + 1) * c];
            let dst = &mut out[((y / factor) * ow + x / factor) * c..][..c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let norm = 1.0 / (factor * factor) as f32;
    out.iter_mut().for_each(|v| *v *= norm);
    out
}
