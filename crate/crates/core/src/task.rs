//! Dataset ingestion, split management, overlap taxonomy, few-shot
//! subsetting and ten-crop augmentation.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Relation of a task's label space to its pretraining source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    Subset,
    Intersect,
    Disjoint,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Stable identity (file path or synthetic id); split disjointness is
    /// checked on these.
    pub id: String,
    pub image: Tensor3,
    pub label: usize,
}

/// A labeled image task with fixed train/val/test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub overlap: Overlap,
    pub source_ref: Option<String>,
}

impl TaskDataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Checks the type invariants: label range, split disjointness by sample
    /// identity, every class present in train.
    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        let mut seen = HashSet::new();
        for (split, samples) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for s in samples {
                if s.label >= k {
                    return Err(Error::Ingest(format!(
                        "{split} sample '{}' has label {} but only {} classes",
                        s.id, s.label, k
                    )));
                }
                if !seen.insert(s.id.clone()) {
                    return Err(Error::Ingest(format!(
                        "sample '{}' appears in more than one split",
                        s.id
                    )));
                }
            }
        }
        for (idx, class) in self.classes.iter().enumerate() {
            if !self.train.iter().any(|s| s.label == idx) {
                return Err(Error::Ingest(format!(
                    "class '{class}' has no train samples"
                )));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<TaskDataset> {
        let ds: TaskDataset = serde_json::from_str(&fs::read_to_string(path)?)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Train sample indices for one class, in stored order.
    fn train_indices_of(&self, class: usize) -> Vec<usize> {
        self.train
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Few-shot subsetting parameters. `ic` is the number of train instances
/// kept per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub ic: usize,
    pub n_subsets: usize,
    pub base_seed: u64,
}

impl FewShotSpec {
    pub fn new(ic: usize, n_subsets: usize, base_seed: u64) -> Result<Self> {
        if ic < 1 || n_subsets < 1 {
            return Err(Error::Config(
                "few-shot spec requires ic >= 1 and n_subsets >= 1".into(),
            ));
        }
        Ok(FewShotSpec {
            ic,
            n_subsets,
            base_seed,
        })
    }
}

/// Stratified train subsets: subset `k` keeps exactly `ic` train samples per
/// class, drawn without replacement; val/test are copied unchanged. Distinct
/// subsets may overlap with each other. Kept samples retain their original
/// relative order, so a subset with `ic` equal to the class size reproduces
/// the full split exactly.
pub fn make_fewshot_subsets(ds: &TaskDataset, spec: &FewShotSpec) -> Result<Vec<TaskDataset>> {
    for (idx, class) in ds.classes.iter().enumerate() {
        let have = ds.train_indices_of(idx).len();
        if have < spec.ic {
            return Err(Error::InsufficientData {
                class: class.clone(),
                have,
                need: spec.ic,
            });
        }
    }

    let mut out = Vec::with_capacity(spec.n_subsets);
    for k in 0..spec.n_subsets {
        let mut rng = subset_rng(spec.base_seed, k);
        let mut keep = Vec::new();
        for class in 0..ds.classes.len() {
            let mut pool = ds.train_indices_of(class);
            // Partial Fisher-Yates: first `ic` entries are the draw.
            for i in 0..spec.ic {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            let mut chosen: Vec<usize> = pool[..spec.ic].to_vec();
            chosen.sort_unstable();
            keep.extend(chosen);
        }
        keep.sort_unstable();
        let subset = TaskDataset {
            name: ds.name.clone(),
            classes: ds.classes.clone(),
            train: keep.iter().map(|&i| ds.train[i].clone()).collect(),
            val: ds.val.clone(),
            test: ds.test.clone(),
            overlap: ds.overlap,
            source_ref: ds.source_ref.clone(),
        };
        out.push(subset);
    }
    Ok(out)
}

fn subset_rng(base_seed: u64, k: usize) -> ChaCha8Rng {
    let mixed = base_seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Four corner crops, the central crop, then the horizontal mirrors of those
/// five in the same order.
pub fn ten_crop(image: &Tensor3, crop: usize) -> Result<Vec<Tensor3>> {
    if crop == 0 || crop > image.h.min(image.w) {
        return Err(Error::Crop(format!(
            "crop side {} invalid for {}x{} image",
            crop, image.h, image.w
        )));
    }
    let bottom = image.h - crop;
    let right = image.w - crop;
    let anchors = [
        (0, 0),
        (0, right),
        (bottom, 0),
        (bottom, right),
        ((image.h - crop) / 2, (image.w - crop) / 2),
    ];
    let mut crops = Vec::with_capacity(10);
    for &(top, left) in &anchors {
        crops.push(image.crop(top, left, crop)?);
    }
    for i in 0..5 {
        crops.push(crops[i].mirror_h());
    }
    Ok(crops)
}

/// Default crop side when nothing pins the geometry: 87.5% of the shorter
/// image side.
pub fn default_crop_side(h: usize, w: usize) -> usize {
    ((h.min(w) as f64) * 0.875).floor() as usize
}

// ---------------------------------------------------------------------------
// Manifest-driven ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SplitSpec {
    Inline(Vec<String>),
    ListingFile(String),
}

#[derive(Debug, Deserialize)]
struct ManifestSplits {
    train: SplitSpec,
    val: SplitSpec,
    test: SplitSpec,
}

#[derive(Debug, Deserialize)]
struct Manifest {
    name: String,
    overlap: Overlap,
    #[serde(default)]
    source_ref: Option<String>,
    #[serde(default = "default_channels")]
    channels: usize,
    classes: Vec<String>,
    splits: ManifestSplits,
}

fn default_channels() -> usize {
    3
}

/// Loads a task from a JSON manifest referencing a class-per-directory image
/// tree. Listed paths are relative to the manifest; each path's first
/// component names the class. Split listings may be inline arrays or paths
/// to one-entry-per-line text files.
pub fn load_dataset(manifest_path: &Path) -> Result<TaskDataset> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Ingest(format!("cannot read manifest {manifest_path:?}: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Ingest(format!("malformed manifest {manifest_path:?}: {e}")))?;
    if manifest.channels != 1 && manifest.channels != 3 {
        return Err(Error::Ingest(format!(
            "unsupported channel count {}",
            manifest.channels
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut ds = TaskDataset {
        name: manifest.name.clone(),
        classes: manifest.classes.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        overlap: manifest.overlap,
        source_ref: manifest.source_ref.clone(),
    };

    for (split_name, spec) in [
        ("train", &manifest.splits.train),
        ("val", &manifest.splits.val),
        ("test", &manifest.splits.test),
    ] {
        let listing = resolve_listing(base, split_name, spec)?;
        let samples = load_split(base, &manifest, split_name, &listing)?;
        match split_name {
            "train" => ds.train = samples,
            "val" => ds.val = samples,
            _ => ds.test = samples,
        }
    }

    ds.validate()?;
    Ok(ds)
}

fn resolve_listing(base: &Path, split: &str, spec: &SplitSpec) -> Result<Vec<String>> {
    match spec {
        SplitSpec::Inline(paths) => Ok(paths.clone()),
        SplitSpec::ListingFile(rel) => {
            let path = base.join(rel);
            let text = fs::read_to_string(&path).map_err(|_| {
                Error::Ingest(format!("missing {split} split listing file {path:?}"))
            })?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect())
        }
    }
}

fn load_split(
    base: &Path,
    manifest: &Manifest,
    split: &str,
    listing: &[String],
) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(listing.len());
    for rel in listing {
        let class_name = rel
            .split('/')
            .next()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Ingest(format!("{split} entry '{rel}' has no class prefix")))?;
        let label = manifest
            .classes
            .iter()
            .position(|c| c == class_name)
            .ok_or_else(|| {
                Error::Ingest(format!(
                    "{split} entry '{rel}' names class '{class_name}' absent from the class list"
                ))
            })?;
        let path = base.join(rel);
        let image = decode_image(&path, manifest.channels)
            .map_err(|e| Error::Ingest(format!("{split} entry '{rel}': {e}")))?;
        samples.push(Sample {
            id: rel.clone(),
            image,
            label,
        });
    }
    Ok(samples)
}

fn decode_image(path: &Path, channels: usize) -> std::result::Result<Tensor3, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor3::zeros(h, w, channels);
    if channels == 1 {
        let gray = img.to_luma8();
        for (x, y, p) in gray.enumerate_pixels() {
            t.set(y as usize, x as usize, 0, p.0[0] as f64 / 255.0);
        }
    } else {
        let rgb = img.to_rgb8();
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                t.set(y as usize, x as usize, ch, p.0[ch] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

/// Generator parameters for synthetic class-separable tasks used by desk-scale
/// runs and tests. Class `c` gets a distinct checkerboard frequency and base
/// intensity; each sample adds phase jitter and uniform pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_image_side")]
    pub image_side: usize,
    #[serde(default = "default_synth_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_overlap")]
    pub overlap: Overlap,
    #[serde(default)]
    pub source_ref: Option<String>,
}

fn default_image_side() -> usize {
    18
}
fn default_synth_channels() -> usize {
    1
}
fn default_noise() -> f64 {
    0.02
}
fn default_overlap() -> Overlap {
    Overlap::Unknown
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<TaskDataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic task needs >= 2 classes".into()));
    }
    if spec.train_per_class == 0 || spec.val_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config(
            "synthetic task needs non-empty splits".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes: Vec<String> = (0..spec.classes).map(|c| format!("class{c}")).collect();

    let gen_split = |split: &str, per_class: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut samples = Vec::new();
        for c in 0..spec.classes {
            for i in 0..per_class {
                let image = synth_image(spec, c, rng);
                samples.push(Sample {
                    id: format!("{}/{}/{}/{}", spec.name, split, c, i),
                    image,
                    label: c,
                });
            }
        }
        samples
    };

    let train = gen_split("train", spec.train_per_class, &mut rng);
    let val = gen_split("val", spec.val_per_class, &mut rng);
    let test = gen_split("test", spec.test_per_class, &mut rng);

    let ds = TaskDataset {
        name: spec.name.clone(),
        classes,
        train,
        val,
        test,
        overlap: spec.overlap,
        source_ref: spec.source_ref.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

fn synth_image(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
    let side = spec.image_side;
    let k = spec.classes as f64;
    let base = 0.2 + 0.6 * class as f64 / (k - 1.0).max(1.0);
    let freq = (class + 1) as f64;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut t = Tensor3::zeros(side, side, spec.channels);
    for y in 0..side {
        for x in 0..side {
            let wave = (std::f64::consts::TAU * freq * x as f64 / side as f64 + phase).sin()
                * (std::f64::consts::TAU * freq * y as f64 / side as f64 + phase).sin();
            for ch in 0..spec.channels {
                let noise: f64 = rng.gen_range(-spec.noise..=spec.noise);
                let v = (base + 0.15 * wave + noise).clamp(0.0, 1.0);
                t.set(y, x, ch, v);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_task(train_per_class: usize) -> TaskDataset {
        synthetic_dataset(&SyntheticSpec {
            name: "tiny".into(),
            classes: 3,
            train_per_class,
            val_per_class: 2,
            test_per_class: 2,
            image_side: 8,
            channels: 1,
            noise: 0.02,
            seed: 11,
            overlap: Overlap::Disjoint,
            source_ref: None,
        })
        .unwrap()
    }

    #[test]
    fn fewshot_counts_and_determinism() {
        let ds = tiny_task(50);
        let spec = FewShotSpec::new(5, 5, 99).unwrap();
        let subsets = make_fewshot_subsets(&ds, &spec).unwrap();
        assert_eq!(subsets.len(), 5);
        for s in &subsets {
            assert_eq!(s.train.len(), 15); // 5 per class x 3 classes
            for c in 0..3 {
                assert_eq!(s.train.iter().filter(|x| x.label == c).count(), 5);
            }
            assert_eq!(s.val.len(), ds.val.len());
            assert_eq!(s.test.len(), ds.test.len());
            s.validate().unwrap();
        }
        let again = make_fewshot_subsets(&ds, &spec).unwrap();
        for (a, b) in subsets.iter().zip(again.iter()) {
            let ids_a: Vec<_> = a.train.iter().map(|s| &s.id).collect();
            let ids_b: Vec<_> = b.train.iter().map(|s| &s.id).collect();
            assert_eq!(ids_a, ids_b);
        }
    }

    #[test]
    fn fewshot_insufficient_class_is_hard_error() {
        let ds = tiny_task(3);
        let spec = FewShotSpec::new(5, 2, 0).unwrap();
        match make_fewshot_subsets(&ds, &spec) {
            Err(Error::InsufficientData { class, have, need }) => {
                assert_eq!(class, "class0");
                assert_eq!((have, need), (3, 5));
            }
            other => panic!("expected InsufficientDataError, got {other:?}"),
        }
    }

    #[test]
    fn fewshot_full_size_subset_reproduces_train_split() {
        let ds = tiny_task(4);
        let spec = FewShotSpec::new(4, 2, 123).unwrap();
        let subsets = make_fewshot_subsets(&ds, &spec).unwrap();
        for s in &subsets {
            assert_eq!(s.train, ds.train);
        }
    }

    #[test]
    fn ten_crop_anchors() {
        // 4x4 ramp image, crop 2.
        let img = Tensor3::from_data(4, 4, 1, (0..16).map(|v| v as f64).collect()).unwrap();
        let set = ten_crop(&img, 2).unwrap();
        assert_eq!(set.len(), 10);
        // corners (0,0),(0,2),(2,0),(2,2) then center (1,1)
        assert_eq!(set[0].data, vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(set[1].data, vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(set[2].data, vec![8.0, 9.0, 12.0, 13.0]);
        assert_eq!(set[3].data, vec![10.0, 11.0, 14.0, 15.0]);
        assert_eq!(set[4].data, vec![5.0, 6.0, 9.0, 10.0]);
        // mirrors in the same order
        for i in 0..5 {
            assert_eq!(set[i + 5], set[i].mirror_h());
            assert_eq!(set[i + 5].mirror_h(), set[i]);
        }
    }

    #[test]
    fn ten_crop_degenerate_and_mirror_values() {
        let img = Tensor3::from_data(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let set = ten_crop(&img, 2).unwrap();
        for i in 0..5 {
            assert_eq!(set[i], img);
        }
        // crop 6 is the mirror of crop 1
        assert_eq!(set[5].data, vec![2.0, 1.0, 4.0, 3.0]);
        assert!(ten_crop(&img, 3).is_err());
    }

    #[test]
    fn default_crop_side_is_87_5_percent() {
        assert_eq!(default_crop_side(16, 16), 14);
        assert_eq!(default_crop_side(224, 320), 196);
    }

    #[test]
    fn synthetic_task_valid_and_deterministic() {
        let a = tiny_task(5);
        let b = tiny_task(5);
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn dataset_json_round_trip() {
        let ds = tiny_task(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save_json(&path).unwrap();
        let back = TaskDataset::load_json(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn validate_rejects_duplicate_identity() {
        let mut ds = tiny_task(3);
        ds.val.push(ds.train[0].clone());
        assert!(matches!(ds.validate(), Err(Error::Ingest(_))));
    }

    proptest! {
        #[test]
        fn subset_class_counts_sum(ic in 1usize..5, n_subsets in 1usize..4, seed in 0u64..1000) {
            let ds = tiny_task(6);
            let spec = FewShotSpec::new(ic, n_subsets, seed).unwrap();
            let subsets = make_fewshot_subsets(&ds, &spec).unwrap();
            for s in subsets {
                prop_assert_eq!(s.train.len(), ic * ds.classes.len());
                // sampled without replacement within a subset
                let ids: HashSet<_> = s.train.iter().map(|x| x.id.clone()).collect();
                prop_assert_eq!(ids.len(), s.train.len());
            }
        }

        #[test]
        fn ten_crop_mirror_involution(h in 3usize..8, w in 3usize..8, crop in 1usize..4) {
            prop_assume!(crop <= h.min(w));
            let data: Vec<f64> = (0..h * w).map(|v| (v as f64) / 10.0).collect();
            let img = Tensor3::from_data(h, w, 1, data).unwrap();
            let set = ten_crop(&img, crop).unwrap();
            prop_assert_eq!(set.len(), 10);
            for i in 0..5 {
                prop_assert_eq!(set[i + 5].mirror_h(), set[i].clone());
            }
        }
    }
}
