//! Dataset manifests: a JSON index of image/mask files plus a split map.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use maskdiff_core::dataset::{fill_contour, sample_trimester_mix, split_dataset, Split, TRIMESTER_MIX};
use maskdiff_core::phantom::{generate_phantom, PhantomSpec};
use maskdiff_core::{AnnotatedPair, BinaryMask, Provenance, TrimesterLabel};
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("split map does not partition the entry ids ({0})")]
    BadSplit(String),
    #[error("{0}: referenced file does not exist")]
    MissingFile(PathBuf),
    #[error("{id}: image and mask sizes differ")]
    ShapeMismatch { id: String },
    #[error(transparent)]
    Dataset(#[from] maskdiff_core::dataset::DatasetError),
    #[error(transparent)]
    Phantom(#[from] maskdiff_core::phantom::PhantomError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub trimester: TrimesterLabel,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub mask_plane_index: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub split: BTreeMap<String, Split>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, seed: u64) -> Self {
        Self {
            version: MANIFEST_VERSION,
            mask_plane_index: maskdiff_core::image::MASK_PLANE_INDEX,
            entries,
            split: BTreeMap::new(),
            seed,
        }
    }

    /// Structural checks; file existence is checked by [`Self::load`].
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.version != MANIFEST_VERSION {
            return Err(ManifestError::Version(self.version));
        }
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(ManifestError::DuplicateId(e.id.clone()));
            }
        }
        if !self.split.is_empty() {
            if let Some(k) = self.split.keys().find(|k| !ids.contains(k.as_str())) {
                return Err(ManifestError::BadSplit(format!("unknown id {k}")));
            }
            if let Some(id) = ids.iter().find(|id| !self.split.contains_key(**id)) {
                return Err(ManifestError::BadSplit(format!("{id} has no split")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let m: Self = io::read_json(path)?;
        m.validate()?;
        let base = base_dir(path);
        for e in &m.entries {
            for p in [&e.image_path, &e.mask_path] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(ManifestError::MissingFile(full));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        self.validate()?;
        io::write_json(path, self)?;
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| self.split.get(&e.id) == Some(&split))
    }

    /// Assign train/val/test.
    pub fn with_split(mut self, train_frac: f64, val_count: usize, seed: u64) -> Result<Self, ManifestError> {
        self.split = split_dataset(&self.ids(), train_frac, val_count, seed)?;
        self.seed = seed;
        Ok(self)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.split.values() {
            c[*s as usize] += 1;
        }
        c
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_entry(base: &Path, e: &ManifestEntry) -> Result<AnnotatedPair, ManifestError> {
    let image = io::read_gray(&base.join(&e.image_path))?;
    let mask = io::read_mask(&base.join(&e.mask_path))?;
    AnnotatedPair::new(e.id.clone(), image, mask, e.trimester, e.provenance)
        .map_err(|_| ManifestError::ShapeMismatch { id: e.id.clone() })
}

/// Every pair of the manifest at `path` (optionally one split), in entry order.
pub fn load_pairs(path: &Path, split: Option<Split>) -> Result<Vec<AnnotatedPair>, ManifestError> {
    let m = DatasetManifest::load(path)?;
    let base = base_dir(path);
    m.entries
        .iter()
        .filter(|e| split.is_none_or(|s| m.split.get(&e.id) == Some(&s)))
        .map(|e| load_entry(&base, e))
        .collect()
}

/// Write pairs as `images/<id>.png` and `masks/<id>.png` under `dir`.
pub fn write_pairs(dir: &Path, pairs: &[AnnotatedPair], seed: u64) -> Result<DatasetManifest, ManifestError> {
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let image_path = PathBuf::from("images").join(format!("{}.png", p.id));
        let mask_path = PathBuf::from("masks").join(format!("{}.png", p.id));
        io::write_gray(&dir.join(&image_path), &p.image)?;
        io::write_mask(&dir.join(&mask_path), &p.mask)?;
        entries.push(ManifestEntry {
            id: p.id.clone(),
            image_path,
            mask_path,
            trimester: p.trimester,
            provenance: p.provenance,
        });
    }
    let m = DatasetManifest::new(entries, seed);
    m.validate()?;
    Ok(m)
}

/// `count` phantoms with the reference trimester mix.
pub fn phantom_pairs(count: usize, size: usize, seed: u64) -> Result<Vec<AnnotatedPair>, ManifestError> {
    let labels = sample_trimester_mix(count, TRIMESTER_MIX, seed)?;
    labels
        .into_iter()
        .enumerate()
        .map(|(i, t)| phantom(t, size, seed, i).map_err(Into::into))
        .collect()
}

/// `per_trimester` phantoms of each trimester, first/second/third in order.
pub fn phantom_pairs_balanced(
    per_trimester: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<AnnotatedPair>, ManifestError> {
    let mut out = Vec::new();
    for t in TrimesterLabel::ALL {
        for i in 0..per_trimester {
            out.push(phantom(t, size, seed, t.index() * per_trimester + i)?);
        }
    }
    Ok(out)
}

fn phantom(
    t: TrimesterLabel,
    size: usize,
    seed: u64,
    i: usize,
) -> Result<AnnotatedPair, maskdiff_core::phantom::PhantomError> {
    let s = maskdiff_core::rng::derive(seed, i as u64);
    let mut p = generate_phantom(&PhantomSpec::random(t, size, s))?;
    p.id = format!("ph{seed:x}-{i:05}");
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    FilledMask,
    EllipseContour,
}

const ANNOTATION_SUFFIXES: [&str; 3] = ["_Annotation", "_annotation", "_mask"];

#[derive(Debug, Default)]
pub struct IngestReport {
    pub manifest: Option<DatasetManifest>,
    /// Images skipped, with the reason.
    pub warnings: Vec<String>,
}

/// Index a directory of `<name>.png` images with `<name>_Annotation.png` (or
/// `_mask`) annotations. Trimesters come from an optional `trimesters.csv`
/// (`file,trimester`); unlisted images default to second trimester. Masks
/// are written under `dir/masks_filled/` when contours are filled.
pub fn ingest_hc18_style(dir: &Path, mode: AnnotationMode) -> Result<(DatasetManifest, Vec<String>), ManifestError> {
    let trimesters = read_trimester_table(&dir.join("trimesters.csv"))?;
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png"))
                && !ANNOTATION_SUFFIXES.iter().any(|s| stem(p).ends_with(s))
        })
        .collect();
    names.sort();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for img_path in names {
        let name = stem(&img_path);
        let Some(ann) = ANNOTATION_SUFFIXES
            .iter()
            .map(|s| dir.join(format!("{name}{s}.png")))
            .find(|p| p.is_file())
        else {
            warnings.push(format!("{name}: MissingAnnotation"));
            continue;
        };
        let image = match io::read_gray(&img_path) {
            Ok(i) => i,
            Err(e) => {
                warnings.push(format!("{name}: {e}"));
                continue;
            }
        };
        let raw = match io::read_mask(&ann) {
            Ok(m) => m,
            Err(e) => {
                warnings.push(format!("{name}: {e}"));
                continue;
            }
        };
        if (raw.height(), raw.width()) != (image.height(), image.width()) {
            warnings.push(format!("{name}: annotation size differs from image"));
            continue;
        }
        let mask_path = match mode {
            AnnotationMode::FilledMask => rel(dir, &ann),
            AnnotationMode::EllipseContour => {
                let filled: BinaryMask = match fill_contour(&raw) {
                    Ok(m) => m,
                    Err(e) => {
                        warnings.push(format!("{name}: {e}"));
                        continue;
                    }
                };
                let p = PathBuf::from("masks_filled").join(format!("{name}.png"));
                io::write_mask(&dir.join(&p), &filled)?;
                p
            }
        };
        let trimester = trimesters.get(&name).copied().unwrap_or(TrimesterLabel::Second);
        entries.push(ManifestEntry {
            id: name,
            image_path: rel(dir, &img_path),
            mask_path,
            trimester,
            provenance: Provenance::Real,
        });
    }
    let m = DatasetManifest::new(entries, 0);
    m.validate()?;
    Ok((m, warnings))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn rel(dir: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn read_trimester_table(path: &Path) -> Result<BTreeMap<String, TrimesterLabel>, ManifestError> {
    let mut out = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    let bad = |message: String| IoError::UnreadableFile {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| bad(e.to_string()))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let (Some(file), Some(t)) = (rec.get(0), rec.get(1)) else {
            return Err(bad("expected file,trimester".into()).into());
        };
        let t = TrimesterLabel::parse(t.trim()).ok_or_else(|| bad(format!("unknown trimester {t}")))?;
        let file = Path::new(file.trim());
        out.insert(stem(file), t);
    }
    Ok(out)
}
