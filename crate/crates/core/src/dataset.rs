//! Dataset manifests: sample records tagged with a clean/noisy subset and a
//! train-val/test split, plus the rasters they reference.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::raster::{Mask, RasterError, RgbImage, CLASS_NAMES};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Subset {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Trainval,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 2] = [Subset::Clean, Subset::Noisy];
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Trainval, Split::Test];
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Clean => "CLEAN",
            Subset::Noisy => "NOISY",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Trainval => "TRAINVAL",
            Split::Test => "TEST",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    /// The training label, possibly noisy.
    #[serde(rename = "label")]
    pub label_path: PathBuf,
    /// Uncorrupted ground truth, known only for synthetic data.
    #[serde(rename = "true_label", default, skip_serializing_if = "Option::is_none")]
    pub true_label_path: Option<PathBuf>,
    pub subset: Subset,
    pub split: Split,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

/// Sample tallies per (subset, split).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub clean_trainval: usize,
    pub clean_test: usize,
    pub noisy_trainval: usize,
    pub noisy_test: usize,
}

impl Counts {
    pub fn get(&self, subset: Subset, split: Split) -> usize {
        match (subset, split) {
            (Subset::Clean, Split::Trainval) => self.clean_trainval,
            (Subset::Clean, Split::Test) => self.clean_test,
            (Subset::Noisy, Split::Trainval) => self.noisy_trainval,
            (Subset::Noisy, Split::Test) => self.noisy_test,
        }
    }

    pub fn get_mut(&mut self, subset: Subset, split: Split) -> &mut usize {
        match (subset, split) {
            (Subset::Clean, Split::Trainval) => &mut self.clean_trainval,
            (Subset::Clean, Split::Test) => &mut self.clean_test,
            (Subset::Noisy, Split::Trainval) => &mut self.noisy_trainval,
            (Subset::Noisy, Split::Test) => &mut self.noisy_test,
        }
    }

    pub fn total(&self) -> usize {
        self.clean_trainval + self.clean_test + self.noisy_trainval + self.noisy_test
    }

    fn tally(samples: &[SampleRecord]) -> Self {
        let mut c = Counts::default();
        for s in samples {
            *c.get_mut(s.subset, s.split) += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Base directory of sample paths, relative to the manifest file.
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub counts: Counts,
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("classes must be {expected:?}, got {found:?}")]
    Classes { expected: Vec<String>, found: Vec<String> },
    #[error("sample {id}: file not found: {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("sample {id}: {path} contains value {value} outside {{0,1,2,255}}")]
    BadValue { id: String, path: PathBuf, value: u8 },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("sample {id}: {what} is {found:?}, image is {expected:?}")]
    DimensionMismatch {
        id: String,
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("sample {id}: difficulty {value} outside [0, 1]")]
    BadDifficulty { id: String, value: f64 },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl DatasetManifest {
    /// A manifest whose sample paths resolve against `base_dir/root`.
    pub fn new(base_dir: impl Into<PathBuf>, root: impl Into<PathBuf>, samples: Vec<SampleRecord>) -> Self {
        let counts = Counts::tally(&samples);
        Self {
            version: MANIFEST_VERSION,
            root: root.into(),
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            samples,
            counts,
            base_dir: base_dir.into(),
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.base_dir.join(&self.root)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.data_root().join(rel)
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn load_image(&self, rec: &SampleRecord) -> Result<RgbImage, RasterError> {
        RgbImage::load_png(&self.resolve(&rec.image_path))
    }

    pub fn load_label(&self, rec: &SampleRecord) -> Result<Mask, RasterError> {
        Mask::load_png(&self.resolve(&rec.label_path))
    }

    pub fn load_true_label(&self, rec: &SampleRecord) -> Result<Option<Mask>, RasterError> {
        rec.true_label_path
            .as_ref()
            .map(|p| Mask::load_png(&self.resolve(p)))
            .transpose()
    }

    /// Pretty-printed JSON body, as written by [`DatasetManifest::save`].
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Records matching both tags, in manifest order.
pub fn partition(manifest: &DatasetManifest, subset: Subset, split: Split) -> Vec<SampleRecord> {
    manifest
        .samples
        .iter()
        .filter(|s| s.subset == subset && s.split == split)
        .cloned()
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    validate(&manifest)?;
    manifest.counts = Counts::tally(&manifest.samples);
    Ok(manifest)
}

fn validate(m: &DatasetManifest) -> Result<(), DatasetError> {
    if m.version != MANIFEST_VERSION {
        return Err(DatasetError::Version(m.version));
    }
    let expected: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    if m.classes != expected {
        return Err(DatasetError::Classes {
            expected,
            found: m.classes.clone(),
        });
    }
    let mut seen = HashSet::new();
    for s in &m.samples {
        if !seen.insert(s.id.as_str()) {
            return Err(DatasetError::DuplicateId(s.id.clone()));
        }
    }
    for s in &m.samples {
        validate_sample(m, s)?;
    }
    Ok(())
}

fn existing(m: &DatasetManifest, id: &str, rel: &Path) -> Result<PathBuf, DatasetError> {
    let p = m.resolve(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(DatasetError::MissingFile {
            id: id.to_string(),
            path: p,
        })
    }
}

fn check_mask(id: &str, path: &Path, what: &'static str, dims: (usize, usize)) -> Result<(), DatasetError> {
    let mask = Mask::load_png(path)?;
    if mask.dims() != dims {
        return Err(DatasetError::DimensionMismatch {
            id: id.to_string(),
            what,
            expected: dims,
            found: mask.dims(),
        });
    }
    if let Some(value) = mask.first_invalid() {
        return Err(DatasetError::BadValue {
            id: id.to_string(),
            path: path.to_path_buf(),
            value,
        });
    }
    Ok(())
}

fn validate_sample(m: &DatasetManifest, s: &SampleRecord) -> Result<(), DatasetError> {
    if let Some(d) = s.difficulty {
        if !(0.0..=1.0).contains(&d) {
            return Err(DatasetError::BadDifficulty {
                id: s.id.clone(),
                value: d,
            });
        }
    }
    let image = existing(m, &s.id, &s.image_path)?;
    let label = existing(m, &s.id, &s.label_path)?;
    let truth = s
        .true_label_path
        .as_ref()
        .map(|p| existing(m, &s.id, p))
        .transpose()?;
    let dims = RgbImage::load_png(&image)?.dims();
    check_mask(&s.id, &label, "label", dims)?;
    if let Some(t) = truth {
        check_mask(&s.id, &t, "true label", dims)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Mask, RgbImage};

    fn record(id: &str, subset: Subset, split: Split) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_path: "img.png".into(),
            label_path: "lbl.png".into(),
            true_label_path: None,
            subset,
            split,
            source: "fixture".into(),
            difficulty: None,
        }
    }

    fn write_rasters(dir: &Path, label: &Mask) {
        let (w, h) = label.dims();
        RgbImage::new(w, h).save_png(&dir.join("img.png")).unwrap();
        label.save_png(&dir.join("lbl.png")).unwrap();
    }

    fn write_manifest(dir: &Path, samples: Vec<SampleRecord>) -> PathBuf {
        let path = dir.join("manifest.json");
        DatasetManifest::new(dir, ".", samples).save(&path).unwrap();
        path
    }

    #[test]
    fn table_layout_counts_are_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        write_rasters(dir.path(), &Mask::filled(2, 2, 0));
        let mut samples = Vec::new();
        for (subset, split, n) in [
            (Subset::Clean, Split::Trainval, 1185),
            (Subset::Clean, Split::Test, 450),
            (Subset::Noisy, Split::Trainval, 599),
            (Subset::Noisy, Split::Test, 200),
        ] {
            for i in 0..n {
                samples.push(record(&format!("{subset}-{split}-{i}"), subset, split));
            }
        }
        let path = write_manifest(dir.path(), samples);
        let m = load_manifest(&path).unwrap();
        assert_eq!(
            m.counts,
            Counts {
                clean_trainval: 1185,
                clean_test: 450,
                noisy_trainval: 599,
                noisy_test: 200
            }
        );
        assert_eq!(partition(&m, Subset::Noisy, Split::Trainval).len(), 599);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write_manifest(dir.path(), vec![])).unwrap();
        assert_eq!(m.counts, Counts::default());
        assert!(partition(&m, Subset::Clean, Split::Test).is_empty());
    }

    #[test]
    fn out_of_domain_mask_value() {
        let dir = tempfile::tempdir().unwrap();
        write_rasters(dir.path(), &Mask::from_vec(2, 2, vec![0, 1, 7, 2]));
        let path = write_manifest(dir.path(), vec![record("a", Subset::Clean, Split::Test)]);
        assert!(matches!(load_manifest(&path), Err(DatasetError::BadValue { value: 7, .. })));
    }

    #[test]
    fn duplicate_ids_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_rasters(dir.path(), &Mask::filled(2, 2, 1));
        let dup = vec![record("a", Subset::Clean, Split::Test), record("a", Subset::Noisy, Split::Test)];
        let path = write_manifest(dir.path(), dup);
        assert!(matches!(load_manifest(&path), Err(DatasetError::DuplicateId(id)) if id == "a"));

        let mut r = record("b", Subset::Clean, Split::Test);
        r.true_label_path = Some("nope.png".into());
        let path = write_manifest(dir.path(), vec![r]);
        assert!(matches!(load_manifest(&path), Err(DatasetError::MissingFile { .. })));
    }

    #[test]
    fn label_dimensions_must_match_image() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(4, 4).save_png(&dir.path().join("img.png")).unwrap();
        Mask::filled(4, 3, 0).save_png(&dir.path().join("lbl.png")).unwrap();
        let path = write_manifest(dir.path(), vec![record("a", Subset::Clean, Split::Test)]);
        assert!(matches!(
            load_manifest(&path),
            Err(DatasetError::DimensionMismatch { what: "label", .. })
        ));
    }

    #[test]
    fn save_load_round_trips_body() {
        let dir = tempfile::tempdir().unwrap();
        write_rasters(dir.path(), &Mask::filled(2, 2, 2));
        let mut r = record("x", Subset::Noisy, Split::Trainval);
        r.difficulty = Some(0.25);
        r.true_label_path = Some("lbl.png".into());
        let path = write_manifest(dir.path(), vec![r, record("y", Subset::Clean, Split::Test)]);
        let body = std::fs::read_to_string(&path).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.to_json(), body);
    }
}
