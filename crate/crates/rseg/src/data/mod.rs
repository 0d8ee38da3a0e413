//! Dataset types, synthetic generation, splits and file I/O.
//!
//! A [`Sample`] couples a grayscale image with its binary mask; the
//! ground-truth box is always re-derived from the mask (never transformed
//! independently). Images and masks travel as PGM (P5) files, model weights
//! as `RSEG` checkpoints, and datasets are described by a CSV manifest.

mod checkpoint;
mod pgm;
mod synth;

pub use checkpoint::{Checkpoint, CheckpointEntry, LoadReport};
pub use pgm::{read_image_pgm, read_mask_pgm, write_image_pgm, write_mask_pgm};
pub use synth::{generate_dataset, CorpusKind, SynthConfig};

use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path:?}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed PGM in {path:?}: {detail}")]
    MalformedPgm { path: PathBuf, detail: String },
    #[error("mask contains non-binary value {0}")]
    NonBinaryMask(u8),
    #[error("mask is empty")]
    EmptyMask,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("synthetic sample {id} degenerate after {attempts} attempts: {detail}")]
    DegenerateSample { id: u32, attempts: u32, detail: String },
    #[error("malformed manifest line {line}: {detail}")]
    MalformedManifest { line: usize, detail: String },
    #[error("split fractions must sum to 1, got {0}")]
    BadSplitFractions(f64),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Grayscale image, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(w: usize, h: usize) -> Self {
        GrayImage { w, h, data: vec![0.0; w * h] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }
}

/// Binary mask; every element is 0 or 1 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(w: usize, h: usize) -> Self {
        Mask { w, h, data: vec![0; w * h] }
    }

    /// Build from raw bytes, rejecting anything but 0 and 1.
    pub fn from_raw(w: usize, h: usize, data: Vec<u8>) -> Result<Self, DataError> {
        assert_eq!(data.len(), w * h);
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(DataError::NonBinaryMask(bad));
        }
        Ok(Mask { w, h, data })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.w + x] = on as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Number of foreground pixels reachable from the first foreground pixel
    /// (4-connectivity). Equal to `count_ones()` iff the mask is a single
    /// connected component.
    pub fn largest_component_from_first(&self) -> usize {
        let Some(start) = self.data.iter().position(|&v| v == 1) else {
            return 0;
        };
        let mut seen = vec![false; self.data.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(i) = stack.pop() {
            count += 1;
            let (x, y) = (i % self.w, i / self.w);
            let mut push = |xx: usize, yy: usize, stack: &mut Vec<usize>| {
                let j = yy * self.w + xx;
                if self.data[j] == 1 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(x - 1, y, &mut stack);
            }
            if x + 1 < self.w {
                push(x + 1, y, &mut stack);
            }
            if y > 0 {
                push(x, y - 1, &mut stack);
            }
            if y + 1 < self.h {
                push(x, y + 1, &mut stack);
            }
        }
        count
    }

    pub fn is_single_component(&self) -> bool {
        let ones = self.count_ones();
        ones > 0 && self.largest_component_from_first() == ones
    }
}

/// Tight bounding box of the mask's foreground, half-open pixel convention:
/// a single pixel at column x, row y yields `(x, y, x+1, y+1)`.
pub fn derive_gt_box(mask: &Mask) -> Result<BBox, DataError> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut any = false;
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.at(x, y) == 1 {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return Err(DataError::EmptyMask);
    }
    Ok(BBox::new(min_x as f64, min_y as f64, (max_x + 1) as f64, (max_y + 1) as f64))
}

/// Which split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One training/evaluation unit.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u32,
    pub image: GrayImage,
    pub mask: Mask,
    pub gt_box: BBox,
    pub severity: f32,
}

impl Sample {
    /// Construct from image + mask, deriving the box. The mask must be
    /// nonempty.
    pub fn new(id: u32, image: GrayImage, mask: Mask, severity: f32) -> Result<Self, DataError> {
        let gt_box = derive_gt_box(&mask)?;
        Ok(Sample { id, image, mask, gt_box, severity })
    }
}

/// Train/val/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed }
    }
}

/// Disjoint, exhaustive id partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitAssignment {
    pub fn tag_of(&self, id: u32) -> Option<SplitTag> {
        if self.train.contains(&id) {
            Some(SplitTag::Train)
        } else if self.val.contains(&id) {
            Some(SplitTag::Val)
        } else if self.test.contains(&id) {
            Some(SplitTag::Test)
        } else {
            None
        }
    }
}

/// Seeded shuffle followed by a contiguous partition. Val and test sizes are
/// floored; the remainder (rounding) goes to train.
pub fn split_dataset(ids: &[u32], spec: &SplitSpec) -> Result<SplitAssignment, DataError> {
    let total = spec.train + spec.val + spec.test;
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::BadSplitFractions(total));
    }
    let n = ids.len();
    let n_val = (spec.val * n as f64).floor() as usize;
    let n_test = (spec.test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut shuffled: Vec<u32> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shuffled.shuffle(&mut rng);
    Ok(SplitAssignment {
        train: shuffled[..n_train].to_vec(),
        val: shuffled[n_train..n_train + n_val].to_vec(),
        test: shuffled[n_train + n_val..].to_vec(),
    })
}

/// Row of the dataset manifest CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: u32,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: SplitTag,
    pub severity: f32,
}

/// Write `id,image_path,mask_path,split,severity` rows (with header).
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), DataError> {
    let mut out = String::from("id,image_path,mask_path,split,severity\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.id,
            e.image_path.display(),
            e.mask_path.display(),
            e.split,
            e.severity
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(DataError::MalformedManifest {
                line: ln + 1,
                detail: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let id = fields[0].parse::<u32>().map_err(|e| DataError::MalformedManifest {
            line: ln + 1,
            detail: format!("id: {e}"),
        })?;
        let split = fields[3].parse::<SplitTag>().map_err(|e| DataError::MalformedManifest {
            line: ln + 1,
            detail: e,
        })?;
        let severity = fields[4].parse::<f32>().map_err(|e| DataError::MalformedManifest {
            line: ln + 1,
            detail: format!("severity: {e}"),
        })?;
        entries.push(ManifestEntry {
            id,
            image_path: PathBuf::from(fields[1]),
            mask_path: PathBuf::from(fields[2]),
            split,
            severity,
        });
    }
    Ok(entries)
}

/// Load the samples named by a manifest, resolving relative paths against
/// the manifest's directory.
pub fn load_samples(manifest_path: &Path) -> Result<Vec<(Sample, SplitTag)>, DataError> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut out = Vec::with_capacity(entries.len());
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.id) {
            return Err(DataError::MalformedManifest {
                line: 0,
                detail: format!("duplicate id {}", e.id),
            });
        }
        let image = read_image_pgm(&resolve(&e.image_path))?;
        let mask = read_mask_pgm(&resolve(&e.mask_path))?;
        out.push((Sample::new(e.id, image, mask, e.severity)?, e.split));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gt_box_of_full_mask() {
        let mut m = Mask::zeros(256, 256);
        for y in 0..256 {
            for x in 0..256 {
                m.set(x, y, true);
            }
        }
        assert_eq!(derive_gt_box(&m).unwrap(), BBox::new(0.0, 0.0, 256.0, 256.0));
    }

    #[test]
    fn gt_box_of_single_pixel() {
        let mut m = Mask::zeros(64, 32);
        m.set(20, 10, true);
        assert_eq!(derive_gt_box(&m).unwrap(), BBox::new(20.0, 10.0, 21.0, 11.0));
    }

    #[test]
    fn gt_box_rejects_empty_mask() {
        assert!(matches!(derive_gt_box(&Mask::zeros(8, 8)), Err(DataError::EmptyMask)));
    }

    #[test]
    fn gt_box_matches_scan_oracle_on_random_blobs() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut m = Mask::zeros(40, 30);
            for _ in 0..rng.gen_range(1..60) {
                m.set(rng.gen_range(0..40), rng.gen_range(0..30), true);
            }
            let b = derive_gt_box(&m).unwrap();
            // independent exhaustive min/max scan
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..30 {
                for x in 0..40 {
                    if m.at(x, y) == 1 {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            assert_eq!(b, BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64));
        }
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(matches!(
            Mask::from_raw(2, 1, vec![0, 3]),
            Err(DataError::NonBinaryMask(3))
        ));
    }

    #[test]
    fn split_475_gives_285_95_95() {
        let ids: Vec<u32> = (0..475).collect();
        let s = split_dataset(&ids, &SplitSpec::standard(42)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (285, 95, 95));
    }

    #[test]
    fn split_10_gives_6_2_2() {
        let ids: Vec<u32> = (0..10).collect();
        let s = split_dataset(&ids, &SplitSpec::standard(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<u32> = (0..101).collect();
        let a = split_dataset(&ids, &SplitSpec::standard(7)).unwrap();
        let b = split_dataset(&ids, &SplitSpec::standard(7)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_exhaustive(n in 3usize..400, seed in 0u64..1000) {
            let ids: Vec<u32> = (0..n as u32).collect();
            let s = split_dataset(&ids, &SplitSpec::standard(seed)).unwrap();
            let mut all: Vec<u32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, ids);
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let entries = vec![ManifestEntry {
            id: 3,
            image_path: "images/000003.pgm".into(),
            mask_path: "masks/000003.pgm".into(),
            split: SplitTag::Val,
            severity: 0.25,
        }];
        write_manifest(&entries, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }
}
