use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::{extract_box, BinaryMask};
use super::pnm::{read_pgm, read_ppm};
use crate::error::{Error, Result};
use crate::model::BoundingBox;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Relative to the dataset directory.
    pub image_path: String,
    pub mask_path: String,
    pub center_id: String,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    #[serde(default)]
    pub generator_seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, generator_seed: Option<u64>) -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            generator_seed,
            entries,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported manifest format {:?}",
                path.display(),
                m.format_version
            )));
        }
        m.validate(dir)?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Sample ids are unique and every referenced file exists.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id {}", e.sample_id)));
            }
            for rel in [&e.image_path, &e.mask_path] {
                if !dir.join(rel).is_file() {
                    return Err(Error::Config(format!(
                        "sample {}: file {} does not exist",
                        e.sample_id,
                        dir.join(rel).display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn centers(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.center_id.clone()).collect()
    }

    pub fn with_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Stable 64-bit FNV-1a, used to derive per-center seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Reassigns every non-test entry to train or val, stratified by center and
/// shuffled deterministically from `seed`. Samples sharing an image move
/// together. Centers with fewer than two images go entirely to train; a
/// warning is returned for each.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_frac: f64,
    seed: u64,
) -> Result<(DatasetManifest, Vec<String>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let mut out = manifest.clone();
    let mut warnings = Vec::new();
    // center -> image path -> entry indices
    let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split == Split::Test {
            continue;
        }
        groups
            .entry(e.center_id.as_str())
            .or_default()
            .entry(e.image_path.as_str())
            .or_default()
            .push(i);
    }
    for (center, images) in groups {
        let mut images: Vec<Vec<usize>> = images.into_values().collect();
        let n = images.len();
        let n_train = if n < 2 {
            warnings.push(format!(
                "center {center} has {n} image(s); cannot stratify, all assigned to train"
            ));
            n
        } else {
            ((n as f64 * train_frac).round() as usize).clamp(1, n - 1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(center.as_bytes()));
        images.shuffle(&mut rng);
        for (rank, idxs) in images.iter().enumerate() {
            let split = if rank < n_train { Split::Train } else { Split::Val };
            for &i in idxs {
                out.entries[i].split = split;
            }
        }
    }
    Ok((out, warnings))
}

/// One prompt/target pair: an image, the mask of a single lesion and its
/// tight box.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub sample_id: String,
    pub center_id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
}

impl SegmentationSample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Loads the image (P6, scaled to `[0, 1]`) and mask (P5, foreground at
/// `>= 128`) of one manifest entry and re-derives its box.
pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<SegmentationSample> {
    let (w, h, rgb) = read_ppm(&dir.join(&entry.image_path))?;
    let (mw, mh, gray) = read_pgm(&dir.join(&entry.mask_path))?;
    if (w, h) != (mw, mh) || (w, h) != (entry.width, entry.height) {
        return Err(Error::Integrity(format!(
            "sample {}: image {w}x{h}, mask {mw}x{mh}, manifest {}x{}",
            entry.sample_id, entry.width, entry.height
        )));
    }
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    let image = Tensor::new(&[3, h, w], data)?;
    let mask = BinaryMask::new(h, w, gray.iter().map(|&v| v >= 128).collect())?;
    let bbox = extract_box(&mask).map_err(|_| {
        Error::EmptyMask(format!("sample {} has an empty mask", entry.sample_id))
    })?;
    if let Some(stored) = entry.bbox {
        if stored != bbox {
            return Err(Error::Integrity(format!(
                "sample {}: stored box {stored:?} differs from mask box {bbox:?}",
                entry.sample_id
            )));
        }
    }
    Ok(SegmentationSample {
        sample_id: entry.sample_id.clone(),
        center_id: entry.center_id.clone(),
        image,
        mask,
        bbox,
    })
}

pub fn load_samples(dir: &Path, entries: &[&ManifestEntry]) -> Result<Vec<SegmentationSample>> {
    entries.iter().map(|e| load_sample(dir, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, center: &str) -> ManifestEntry {
        ManifestEntry {
            sample_id: id.into(),
            image_path: format!("images/{id}.ppm"),
            mask_path: format!("masks/{id}.pgm"),
            center_id: center.into(),
            height: 4,
            width: 4,
            split: Split::Train,
            bbox: None,
        }
    }

    fn manifest(centers: &[(&str, usize)]) -> DatasetManifest {
        let entries = centers
            .iter()
            .flat_map(|&(c, n)| (0..n).map(move |i| entry(&format!("{c}_{i}"), c)))
            .collect();
        DatasetManifest::new(entries, None)
    }

    #[test]
    fn eighty_twenty_single_center() {
        let (m, w) = split_dataset(&manifest(&[("a", 10)]), 0.8, 3).unwrap();
        assert!(w.is_empty());
        assert_eq!(m.count(Split::Train), 8);
        assert_eq!(m.count(Split::Val), 2);
    }

    #[test]
    fn stratified_per_center_and_deterministic() {
        let src = manifest(&[("a", 10), ("b", 10)]);
        let (m, _) = split_dataset(&src, 0.8, 11).unwrap();
        for c in ["a", "b"] {
            let val = m
                .entries
                .iter()
                .filter(|e| e.center_id == c && e.split == Split::Val)
                .count();
            assert_eq!(val, 2);
        }
        assert_eq!(split_dataset(&src, 0.8, 11).unwrap().0, m);
        assert_ne!(split_dataset(&src, 0.8, 12).unwrap().0, m);
    }

    #[test]
    fn tiny_center_warns_and_goes_to_train() {
        let (m, w) = split_dataset(&manifest(&[("a", 1), ("b", 5)]), 0.8, 0).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("center a"));
        assert_eq!(m.entries[0].split, Split::Train);
    }

    #[test]
    fn test_entries_keep_their_split() {
        let mut src = manifest(&[("a", 5), ("c", 3)]);
        for e in src.entries.iter_mut().filter(|e| e.center_id == "c") {
            e.split = Split::Test;
        }
        let (m, _) = split_dataset(&src, 0.8, 0).unwrap();
        assert_eq!(m.count(Split::Test), 3);
        assert!(split_dataset(&src, 1.0, 0).is_err());
    }
}
