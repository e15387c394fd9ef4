//! Anomaly maps, image scores, localization, and AUROC evaluation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::frontend::FeatureMap;
use crate::ops;
use crate::tensor::Tensor;

/// Pooling window of the image-level score.
pub const IMAGE_SCORE_KERNEL: usize = 16;

/// Nonnegative `h×w` score map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    scores: Tensor<f32>,
}

impl ScoreMap {
    pub fn new(scores: Tensor<f32>) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: scores.shape().to_vec(),
                reason: "score map must be h×w".into(),
            });
        }
        if !scores.data().iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidArgument("score map values must be finite and >= 0".into()));
        }
        Ok(Self { scores })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.scores.shape()[0], self.scores.shape()[1])
    }

    pub fn scores(&self) -> &Tensor<f32> {
        &self.scores
    }

    pub fn max(&self) -> f32 {
        self.scores.data().iter().copied().fold(0.0, f32::max)
    }

    /// Bilinear resampling to `(h, w)`.
    pub fn upsample(&self, target: (usize, usize)) -> Result<ScoreMap> {
        if target == self.dims() {
            return Ok(self.clone());
        }
        ScoreMap::new(ops::bilinear_upsample(&self.scores, target)?)
    }
}

/// Per-cell L2 distance between original and reconstructed features.
pub fn anomaly_map(original: &FeatureMap, reconstructed: &FeatureMap) -> Result<ScoreMap> {
    if original.dims() != reconstructed.dims() {
        let (a, b) = (original.dims(), reconstructed.dims());
        return Err(Error::ShapeMismatch {
            op: "anomaly_map",
            lhs: vec![a.0, a.1, a.2],
            rhs: vec![b.0, b.1, b.2],
        });
    }
    let (h, w, c) = original.dims();
    let scores = original
        .data()
        .data()
        .chunks(c)
        .zip(reconstructed.data().data().chunks(c))
        .map(|(a, b)| {
            let sq: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
            sq.sqrt() as f32
        })
        .collect();
    ScoreMap::new(Tensor::new(vec![h, w], scores)?)
}

/// Maximum of the stride-1 average-pooled map. The kernel is clamped to the
/// map size.
pub fn image_score(map: &ScoreMap, kernel: usize) -> Result<f32> {
    let (h, w) = map.dims();
    let k = kernel.max(1).min(h).min(w);
    let pooled = ops::avg_pool2d(map.scores(), k, 1)?;
    Ok(pooled.data().iter().copied().fold(0.0, f32::max))
}

/// Upsamples to image resolution and thresholds. Returns the continuous map
/// alongside the mask.
pub fn localize(map: &ScoreMap, target: (usize, usize), threshold: f32) -> Result<(ScoreMap, Vec<bool>)> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold must be finite, got {threshold}")));
    }
    let up = map.upsample(target)?;
    let mask = up.scores().data().iter().map(|&v| v > threshold).collect();
    Ok((up, mask))
}

/// Area under the ROC curve with ties counted half, via midranks.
///
/// Ranks are kept doubled so every intermediate is an exact integer, and the
/// final ratio is formed so that `auroc(s) + auroc(-s) == 1` holds exactly.
pub fn auroc<S: Copy + Into<f64>>(scores: &[S], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auroc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let values: Vec<f64> = scores.iter().map(|&s| s.into()).collect();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("auroc scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));

    // Sum of doubled midranks of the positives; ranks are 1-based.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let doubled_midrank = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += doubled_midrank * pos_in_group;
        i = j;
    }
    let (np, nn) = (positives as u128, negatives as u128);
    let wins2 = rank_sum2 - np * (np + 1);
    let total2 = 2 * np * nn;
    let (w, q) = (wins2 as f64, total2 as f64);
    Ok(if 2 * wins2 >= total2 { w / q } else { 1.0 - (total2 - wins2) as f64 / q })
}

/// Scores produced for one test sample.
#[derive(Clone, Debug)]
pub struct SampleScore {
    pub image_score: f64,
    /// Per-pixel scores at image resolution.
    pub pixel_map: Option<ScoreMap>,
}

pub trait AnomalyScorer {
    fn score(&self, dataset: &Dataset, record: &Record) -> Result<SampleScore>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub n_images: usize,
    pub n_pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub categories: Vec<CategoryMetrics>,
    /// Mean of the per-category image AUROCs.
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
    /// AUROC over all categories' samples at once.
    pub pooled_image_auroc: f64,
    pub n_images: usize,
    pub n_pixels: usize,
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct CategoryAccumulator {
    image_scores: Vec<f64>,
    image_labels: Vec<bool>,
    pixel_scores: Vec<f32>,
    pixel_labels: Vec<bool>,
    missing_masks: usize,
}

/// Scores every record and aggregates per-category and mean metrics.
pub fn eval_dataset(scorer: &dyn AnomalyScorer, dataset: &Dataset, records: &[&Record]) -> Result<EvalReport> {
    let mut by_category: BTreeMap<String, CategoryAccumulator> = BTreeMap::new();
    for record in records {
        let score = scorer.score(dataset, record)?;
        let acc = by_category.entry(record.category.clone()).or_default();
        acc.image_scores.push(score.image_score);
        acc.image_labels.push(record.label);
        let Some(map) = score.pixel_map else {
            acc.missing_masks += 1;
            continue;
        };
        let truth = if record.label {
            match dataset.load_mask(record)? {
                Some(mask) => mask,
                None => {
                    acc.missing_masks += 1;
                    continue;
                }
            }
        } else {
            let (h, w) = map.dims();
            vec![false; h * w]
        };
        if truth.len() != map.scores().numel() {
            return Err(Error::Dataset(format!(
                "mask of {} has {} pixels, score map has {}",
                record.id,
                truth.len(),
                map.scores().numel()
            )));
        }
        acc.pixel_scores.extend_from_slice(map.scores().data());
        acc.pixel_labels.extend(truth);
    }
    summarize(by_category)
}

fn summarize(by_category: BTreeMap<String, CategoryAccumulator>) -> Result<EvalReport> {
    let mut warnings = Vec::new();
    let mut categories = Vec::new();
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    for (category, acc) in by_category {
        all_scores.extend_from_slice(&acc.image_scores);
        all_labels.extend_from_slice(&acc.image_labels);
        let image_auroc = match auroc(&acc.image_scores, &acc.image_labels) {
            Ok(v) => Some(v),
            Err(Error::SingleClass { .. }) => {
                warnings.push(format!("{category}: test images of a single class, image AUROC skipped"));
                None
            }
            Err(e) => return Err(e),
        };
        let pixel_auroc = if acc.missing_masks > 0 {
            warnings.push(format!(
                "{category}: {} anomalous images without masks, pixel AUROC skipped",
                acc.missing_masks
            ));
            None
        } else {
            match auroc(&acc.pixel_scores, &acc.pixel_labels) {
                Ok(v) => Some(v),
                Err(Error::SingleClass { .. }) => {
                    warnings.push(format!("{category}: no defect pixels, pixel AUROC skipped"));
                    None
                }
                Err(e) => return Err(e),
            }
        };
        categories.push(CategoryMetrics {
            category,
            image_auroc,
            pixel_auroc,
            n_images: acc.image_scores.len(),
            n_pixels: if pixel_auroc.is_some() { acc.pixel_scores.len() } else { 0 },
        });
    }
    let pooled_image_auroc = auroc(&all_scores, &all_labels)?;
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let image_auroc = mean(categories.iter().filter_map(|c| c.image_auroc).collect()).unwrap_or(pooled_image_auroc);
    let pixel_auroc = if categories.iter().all(|c| c.pixel_auroc.is_some()) {
        mean(categories.iter().filter_map(|c| c.pixel_auroc).collect())
    } else {
        None
    };
    Ok(EvalReport {
        n_images: categories.iter().map(|c| c.n_images).sum(),
        n_pixels: categories.iter().map(|c| c.n_pixels).sum(),
        categories,
        image_auroc,
        pixel_auroc,
        pooled_image_auroc,
        warnings,
    })
}

impl EvalReport {
    /// One `key=value` line per metric.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| x.to_string());
        let _ = writeln!(out, "image_auroc={}", self.image_auroc);
        let _ = writeln!(out, "pixel_auroc={}", opt(self.pixel_auroc));
        let _ = writeln!(out, "pooled_image_auroc={}", self.pooled_image_auroc);
        let _ = writeln!(out, "n_images={}", self.n_images);
        let _ = writeln!(out, "n_pixels={}", self.n_pixels);
        for c in &self.categories {
            let _ = writeln!(out, "category.{}.image_auroc={}", c.category, opt(c.image_auroc));
            let _ = writeln!(out, "category.{}.pixel_auroc={}", c.category, opt(c.pixel_auroc));
            let _ = writeln!(out, "category.{}.n_images={}", c.category, c.n_images);
            let _ = writeln!(out, "category.{}.n_pixels={}", c.category, c.n_pixels);
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning={w}");
        }
        out
    }

    pub fn save(&self, record_path: &Path, table_path: &Path) -> Result<()> {
        std::fs::write(record_path, self.to_record()).map_err(|e| Error::io(record_path, e))?;
        std::fs::write(table_path, self.to_string()).map_err(|e| Error::io(table_path, e))
    }

    /// Reads a record file back. Only the headline values are needed by
    /// callers; per-category rows are restored too.
    pub fn parse_record(text: &str) -> Result<EvalReport> {
        let bad = |reason: String| Error::Format {
            what: "eval report",
            reason,
        };
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        let mut warnings = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line without '=': {line}")))?;
            if k == "warning" {
                warnings.push(v.to_string());
            } else {
                kv.insert(k, v);
            }
        }
        let num = |k: &str| -> Result<Option<f64>> {
            match kv.get(k) {
                None => Err(bad(format!("missing {k}"))),
                Some(&"na") => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| bad(format!("{k} is not a number"))),
            }
        };
        let count = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| bad(format!("missing {k}")))?
                .parse()
                .map_err(|_| bad(format!("{k} is not a count")))
        };
        let names: Vec<&str> = kv
            .keys()
            .filter_map(|k| k.strip_prefix("category.")?.strip_suffix(".image_auroc"))
            .collect();
        let mut categories = Vec::new();
        for name in names {
            categories.push(CategoryMetrics {
                category: name.to_string(),
                image_auroc: num(&format!("category.{name}.image_auroc"))?,
                pixel_auroc: num(&format!("category.{name}.pixel_auroc"))?,
                n_images: count(&format!("category.{name}.n_images"))?,
                n_pixels: count(&format!("category.{name}.n_pixels"))?,
            });
        }
        Ok(EvalReport {
            categories,
            image_auroc: num("image_auroc")?.ok_or_else(|| bad("image_auroc is na".into()))?,
            pixel_auroc: num("pixel_auroc")?,
            pooled_image_auroc: num("pooled_image_auroc")?.ok_or_else(|| bad("pooled_image_auroc is na".into()))?,
            n_images: count("n_images")?,
            n_pixels: count("n_pixels")?,
            warnings,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or_else(|| "    -".to_string(), |x| format!("{:5.2}", 100.0 * x));
        let width = self.categories.iter().map(|c| c.category.len()).max().unwrap_or(0).max(8);
        writeln!(f, "{:width$}  image  pixel", "category")?;
        for c in &self.categories {
            writeln!(f, "{:width$}  {}  {}", c.category, pct(c.image_auroc), pct(c.pixel_auroc))?;
        }
        writeln!(f, "{:width$}  {}  {}", "mean", pct(Some(self.image_auroc)), pct(self.pixel_auroc))?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Writes a score map as an 8-bit graymap, linearly mapping `[0, max]` to
/// `[0, 255]`. A zero `max` writes an all-black image.
pub fn score_map_to_gray(map: &ScoreMap, max: f32) -> Vec<u8> {
    map.scores()
        .data()
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}
