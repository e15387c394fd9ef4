//! Dataset manifests, loading, and synthetic generation.
//!
//! A dataset root holds `manifest.tsv` and
//! `<category>/<split>/{images,masks}/<id>.{ppm,pgm}`. Manifest paths are
//! relative to the root.

pub mod pnm;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::Image;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "id\tcategory\tsplit\tlabel\timage_path\tmask_path";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    pub category: String,
    pub split: Split,
    /// `true` for defective samples.
    pub label: bool,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub seed: Option<u64>,
    pub records: Vec<Record>,
}

fn label_str(label: bool) -> &'static str {
    if label {
        "defective"
    } else {
        "normal"
    }
}

impl Dataset {
    pub fn categories(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.category.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("#seed\t{seed}\n"));
        }
        out.push_str(HEADER);
        out.push('\n');
        for r in &self.records {
            let mask = r.mask_path.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.category,
                r.split,
                label_str(r.label),
                r.image_path.display(),
                mask
            ));
        }
        out
    }

    pub fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.manifest_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn parse_manifest(root: &Path, text: &str) -> Result<Dataset> {
        let bad = |line: usize, msg: String| Error::Dataset(format!("{MANIFEST_FILE} line {line}: {msg}"));
        let mut seed = None;
        let mut records = Vec::new();
        let mut saw_header = false;
        for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.strip_prefix("seed\t") {
                    seed = Some(v.trim().parse().map_err(|_| bad(n, format!("bad seed {v:?}")))?);
                }
                continue;
            }
            if !saw_header {
                if line != HEADER {
                    return Err(bad(n, format!("expected header {HEADER:?}")));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, category, split, label, image, mask] = cols[..] else {
                return Err(bad(n, format!("expected 6 columns, found {}", cols.len())));
            };
            let label = match label {
                "normal" => false,
                "defective" => true,
                other => return Err(bad(n, format!("unknown label {other:?}"))),
            };
            records.push(Record {
                id: id.to_string(),
                category: category.to_string(),
                split: split.parse().map_err(|e: Error| bad(n, e.to_string()))?,
                label,
                image_path: PathBuf::from(image),
                mask_path: (mask != "-").then(|| PathBuf::from(mask)),
            });
        }
        if !saw_header {
            return Err(Error::Dataset(format!("{MANIFEST_FILE} has no header")));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            seed,
            records,
        })
    }

    /// Checks split/label/mask consistency and that every referenced file
    /// exists.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {}", r.id)));
            }
            if r.split == Split::Train && r.label {
                return Err(Error::Dataset(format!(
                    "training record {} is defective; training data must be normal only",
                    r.id
                )));
            }
            if !r.label && r.mask_path.is_some() {
                return Err(Error::Dataset(format!("normal record {} has a mask", r.id)));
            }
            for path in std::iter::once(&r.image_path).chain(&r.mask_path) {
                let full = self.root.join(path);
                if !full.is_file() {
                    return Err(Error::MissingFile {
                        id: r.id.clone(),
                        path: full,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ds = Self::parse_manifest(root, &text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn find(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn load_image(&self, record: &Record) -> Result<Image> {
        pnm::load_image(&self.root.join(&record.image_path))
    }

    /// Ground-truth mask (`true` = defect pixel), if the record has one.
    pub fn load_mask(&self, record: &Record) -> Result<Option<Vec<bool>>> {
        let Some(rel) = &record.mask_path else {
            return Ok(None);
        };
        let (_, _, gray) = pnm::read_pgm(&self.root.join(rel))?;
        Ok(Some(gray.into_iter().map(|v| v > 0).collect()))
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    Dataset::load(root)
}
