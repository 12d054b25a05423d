//! Dataset manifests and labeled/unlabeled splitting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_volume, Dims, LabelVolume, Volume3D};
use crate::error::{invalid, CfrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    LabeledTrain,
    UnlabeledTrain,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: Option<String>,
    pub split: Split,
}

/// `{"dims":[H,W,D], "num_classes":K, "seed":s, "entries":[...]}`. Paths are
/// relative to the directory holding the manifest file unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dims: Dims,
    pub num_classes: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if matches!(e.split, Split::LabeledTrain | Split::Test) && e.label.is_none() {
                return Err(invalid(format!("{:?} entry {} has no label", e.split, e.image)));
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.with_split(split).count()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ManifestEntry {
    pub fn load_image(&self, base: &Path) -> Result<Volume3D> {
        read_volume(resolve(base, &self.image))?
            .into_image()
            .ok_or_else(|| invalid(format!("{} is a label file", self.image)))
    }

    pub fn load_label(&self, base: &Path) -> Result<LabelVolume> {
        let path = self
            .label
            .as_ref()
            .ok_or_else(|| CfrError::Missing(format!("label for {}", self.image)))?;
        read_volume(resolve(base, path))?
            .into_labels()
            .ok_or_else(|| invalid(format!("{path} is an image file")))
    }
}

/// Reassigns the non-test entries: `m` of them become labeled, the rest unlabeled.
/// Test entries are untouched. Deterministic in `seed`.
pub fn split_dataset(manifest: &DatasetManifest, m: usize, seed: u64) -> Result<DatasetManifest> {
    let pool: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split != Split::Test)
        .map(|(i, _)| i)
        .collect();
    if m == 0 {
        return Err(invalid("at least one labeled volume is required"));
    }
    if m > pool.len() {
        return Err(invalid(format!("m={m} exceeds the training pool of {}", pool.len())));
    }
    let mut order = pool.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    out.seed = seed;
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = if rank < m { Split::LabeledTrain } else { Split::UnlabeledTrain };
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pool(train: usize, test: usize) -> DatasetManifest {
        let entry = |i: usize, split| ManifestEntry {
            image: format!("img_{i:03}.cfrv"),
            label: Some(format!("lab_{i:03}.cfrv")),
            split,
        };
        DatasetManifest {
            dims: [32, 32, 36],
            num_classes: 2,
            seed: 0,
            entries: (0..train)
                .map(|i| entry(i, Split::UnlabeledTrain))
                .chain((train..train + test).map(|i| entry(i, Split::Test)))
                .collect(),
        }
    }

    #[test]
    fn scarce_split_one_labeled() {
        let s = split_dataset(&pool(16, 4), 1, 3).unwrap();
        assert_eq!(s.count(Split::LabeledTrain), 1);
        assert_eq!(s.count(Split::UnlabeledTrain), 15);
        assert_eq!(s.count(Split::Test), 4);
    }

    #[test]
    fn full_pool_labeled_is_valid() {
        let s = split_dataset(&pool(16, 4), 16, 3).unwrap();
        assert_eq!(s.count(Split::UnlabeledTrain), 0);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_dataset(&pool(16, 4), 5, 11).unwrap();
        assert_eq!(a, split_dataset(&pool(16, 4), 5, 11).unwrap());
        let names = |s| a.with_split(s).map(|e| e.image.clone()).collect::<HashSet<_>>();
        let (l, u, t) = (names(Split::LabeledTrain), names(Split::UnlabeledTrain), names(Split::Test));
        assert!(l.is_disjoint(&u) && l.is_disjoint(&t) && u.is_disjoint(&t));
        assert_eq!(l.len() + u.len(), 16);
    }

    #[test]
    fn too_many_labeled_is_an_error() {
        assert!(split_dataset(&pool(4, 2), 5, 0).is_err());
        assert!(split_dataset(&pool(4, 2), 0, 0).is_err());
    }

    #[test]
    fn json_shape() {
        let s = split_dataset(&pool(1, 0), 1, 0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["entries"][0]["split"], "labeled-train");
        assert_eq!(v["dims"], serde_json::json!([32, 32, 36]));
        let back: DatasetManifest = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }
}
