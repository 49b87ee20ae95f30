//! Dataset manifests, the lesion-coverage split and unpaired sampling.
//!
//! The manifest is the source of truth for lesion types. The Otsu-based
//! coverage estimate only proposes a label when no override is given.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::losses::DomainTag;

/// Coverage above which a melanoma image is type I (strict inequality).
pub const TYPE_I_COVERAGE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LesionType {
    /// Lesion covers more than a quarter of the frame.
    I,
    II,
    #[serde(rename = "not_applicable")]
    NotApplicable,
}

impl fmt::Display for LesionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::I => "I",
            Self::II => "II",
            Self::NotApplicable => "not_applicable",
        })
    }
}

impl FromStr for LesionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "i" | "1" => Ok(Self::I),
            "II" | "ii" | "2" => Ok(Self::II),
            "not_applicable" => Ok(Self::NotApplicable),
            other => Err(Error::validation(
                "lesion_type",
                format!("expected I or II, got `{other}`"),
            )),
        }
    }
}

/// Global Otsu threshold on the grayscale histogram; returns the fraction of
/// pixels in the dark class. A single-valued histogram has no dark class and gives 0.
pub fn estimate_lesion_coverage(img: &ImageTensor) -> Result<f64> {
    if img.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected an RGB image, got {} channels",
            img.channels()
        )));
    }
    let gray = img.denormalized().grayscale();
    let mut hist = [0u64; 256];
    for g in &gray {
        hist[(g.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = gray.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_t) = (0.0f64, None);
    for (t, &count) in hist.iter().enumerate() {
        w0 += count as f64;
        sum0 += t as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best {
            best = between;
            best_t = Some(t);
        }
    }
    Ok(match best_t {
        None => 0.0,
        Some(t) => hist[..=t].iter().sum::<u64>() as f64 / total,
    })
}

pub fn classify_lesion_type(coverage: f64) -> Result<LesionType> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::validation(
            "coverage",
            format!("must lie in [0, 1], got {coverage}"),
        ));
    }
    Ok(if coverage > TYPE_I_COVERAGE {
        LesionType::I
    } else {
        LesionType::II
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub domain: DomainTag,
    pub lesion_type: LesionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<()> {
        match (self.domain, self.lesion_type) {
            (DomainTag::Flower, LesionType::NotApplicable) => Ok(()),
            (DomainTag::Flower, t) => Err(Error::validation(
                "lesion_type",
                format!("{}: flower entries cannot have lesion type {t}", self.path.display()),
            )),
            (DomainTag::Melanoma, LesionType::NotApplicable) => Err(Error::validation(
                "lesion_type",
                format!("{}: melanoma entries need type I or II", self.path.display()),
            )),
            (DomainTag::Melanoma, t) => match self.coverage {
                Some(c) if classify_lesion_type(c)? != t => Err(Error::validation(
                    "lesion_type",
                    format!("{}: coverage {c} disagrees with type {t}", self.path.display()),
                )),
                _ => Ok(()),
            },
        }
    }
}

/// Line-delimited JSON records sorted by path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        for e in &entries {
            e.validate()?;
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self { entries })
    }

    pub fn merge(self, other: DatasetManifest) -> Result<Self> {
        let mut entries = self.entries;
        entries.extend(other.entries);
        Self::new(entries)
    }

    pub fn domain(&self, domain: DomainTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.domain == domain)
    }

    pub fn count(&self, domain: DomainTag, lesion: Option<LesionType>) -> usize {
        self.domain(domain)
            .filter(|e| lesion.is_none_or(|t| e.lesion_type == t))
            .count()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    /// Files that looked like images but failed to decode.
    pub skipped: Vec<PathBuf>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Scans `image_dir` (non-recursively) for PNG/JPEG files.
///
/// `overrides` maps file names to lesion types and takes precedence over the
/// coverage heuristic. Undecodable files are skipped and reported.
pub fn build_manifest(
    image_dir: &Path,
    domain: DomainTag,
    overrides: &HashMap<String, LesionType>,
) -> Result<(DatasetManifest, BuildReport)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no PNG or JPEG files in {}",
            image_dir.display()
        )));
    }
    let mut report = BuildReport::default();
    let mut entries = Vec::with_capacity(paths.len());
    for path in paths {
        let img = match ImageTensor::load(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push(path);
                continue;
            }
        };
        let entry = match domain {
            DomainTag::Flower => ManifestEntry {
                path,
                domain,
                lesion_type: LesionType::NotApplicable,
                coverage: None,
            },
            DomainTag::Melanoma => {
                let name = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                match overrides.get(&name) {
                    Some(&t) => ManifestEntry {
                        path,
                        domain,
                        lesion_type: t,
                        coverage: None,
                    },
                    None => {
                        let coverage = estimate_lesion_coverage(&img)?;
                        ManifestEntry {
                            path,
                            domain,
                            lesion_type: classify_lesion_type(coverage)?,
                            coverage: Some(coverage),
                        }
                    }
                }
            }
        };
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable images in {}",
            image_dir.display()
        )));
    }
    Ok((DatasetManifest::new(entries)?, report))
}

/// Reads `file_name,lesion_type` lines (a header line is allowed).
pub fn parse_overrides(text: &str) -> Result<HashMap<String, LesionType>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, t) = line
            .split_once([',', '\t'])
            .ok_or_else(|| Error::Parse(format!("override line {}: expected `name,type`", i + 1)))?;
        match t.parse::<LesionType>() {
            Ok(t) => {
                out.insert(name.trim().to_string(), t);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    HorizontalFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub working_size: usize,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            working_size: 256,
            augmentation: Augmentation::None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.working_size == 0 || !self.working_size.is_multiple_of(4) {
            return Err(Error::validation(
                "working_size",
                format!("must be a positive multiple of 4, got {}", self.working_size),
            ));
        }
        Ok(())
    }
}

/// Bilinear resize to the working square, then `v ↦ 2v − 1`.
pub fn preprocess(img: &ImageTensor, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let raw = match img.range() {
        ValueRange::Raw01 => img.clone(),
        ValueRange::Normalized => img.denormalized(),
    };
    Ok(raw.resize(cfg.working_size, cfg.working_size)?.normalized())
}

/// [`preprocess`] plus the configured training augmentation.
pub fn preprocess_train<R: Rng + ?Sized>(
    img: &ImageTensor,
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> Result<ImageTensor> {
    let out = preprocess(img, cfg)?;
    Ok(match cfg.augmentation {
        Augmentation::HorizontalFlip if rng.random_bool(0.5) => out.flip_horizontal(),
        _ => out,
    })
}

/// Reproducible unpaired pairing of melanoma and flower entries.
///
/// Each epoch draws two independent permutations from streams derived from
/// `(seed, epoch)` and zips them, giving `min(|X|, |Y|)` pairs.
#[derive(Debug, Clone)]
pub struct UnpairedSampler {
    melanoma: Vec<ManifestEntry>,
    flowers: Vec<ManifestEntry>,
    seed: u64,
}

impl UnpairedSampler {
    pub fn new(manifest: &DatasetManifest, lesion_filter: LesionType, seed: u64) -> Result<Self> {
        let melanoma: Vec<_> = manifest
            .domain(DomainTag::Melanoma)
            .filter(|e| e.lesion_type == lesion_filter)
            .cloned()
            .collect();
        let flowers: Vec<_> = manifest.domain(DomainTag::Flower).cloned().collect();
        if melanoma.is_empty() {
            return Err(Error::EmptyDataset(format!("no type {lesion_filter} melanoma images")));
        }
        if flowers.is_empty() {
            return Err(Error::EmptyDataset("no flower images".into()));
        }
        Ok(Self {
            melanoma,
            flowers,
            seed,
        })
    }

    pub fn pairs_per_epoch(&self) -> usize {
        self.melanoma.len().min(self.flowers.len())
    }

    fn permutation(&self, len: usize, stream: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch(&self, epoch: usize) -> Vec<(&ManifestEntry, &ManifestEntry)> {
        let xs = self.permutation(self.melanoma.len(), 2 * epoch as u64);
        let ys = self.permutation(self.flowers.len(), 2 * epoch as u64 + 1);
        xs.into_iter()
            .zip(ys)
            .map(|(i, j)| (&self.melanoma[i], &self.flowers[j]))
            .collect()
    }

    /// Epoch pairs grouped into batches of at most `batch_size`.
    pub fn batches(&self, epoch: usize, batch_size: usize) -> Vec<Vec<(&ManifestEntry, &ManifestEntry)>> {
        self.epoch(epoch).chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
    }
}
