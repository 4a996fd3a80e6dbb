//! On-disk formats, manifests, and run persistence.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! manifest.json                  (written last, the commit point)
//! images/<split>/rNNNN.png       8-bit RGB
//! annotations_partial/rNNNN.json labeled regions only
//! annotations_full/<split>/rNNNN.json   synthetic full truth
//! labels/<provenance>/...        persisted label snapshots
//! runs/<run-id>/{checkpoints,labels,logs,reports}
//! ```
//!
//! Partial annotations and full truth live in disjoint subtrees; the
//! training code path holds a [`TrainView`] that can only open the partial
//! subtree (and records which regions it touched), while only
//! [`OracleView`] reaches the full truth.

use crate::error::{Error, Result};
use crate::imaging::{BBox, ImageU8, TriMask};
use crate::synthgen::{RegionRecord, SplitTag};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const MANIFEST_VERSION: u32 = 1;

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_bytes(&bytes))
}

/// Lineage tag of an annotation or label file.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Provenance {
    Partial,
    Full,
    RefinedRound(u32),
    PseudoModelRound { model: String, round: u32 },
    Prediction,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Partial => write!(f, "partial"),
            Provenance::Full => write!(f, "full"),
            Provenance::RefinedRound(r) => write!(f, "refined-round-{r}"),
            Provenance::PseudoModelRound { model, round } => {
                write!(f, "pseudo-model-{model}-round-{round}")
            }
            Provenance::Prediction => write!(f, "prediction"),
        }
    }
}

impl From<Provenance> for String {
    fn from(p: Provenance) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Provenance {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "partial" {
            return Ok(Provenance::Partial);
        }
        if s == "full" {
            return Ok(Provenance::Full);
        }
        if s == "prediction" {
            return Ok(Provenance::Prediction);
        }
        if let Some(r) = s.strip_prefix("refined-round-") {
            return r
                .parse()
                .map(Provenance::RefinedRound)
                .map_err(|_| format!("bad provenance: {s}"));
        }
        if let Some(rest) = s.strip_prefix("pseudo-model-") {
            if let Some((model, round)) = rest.split_once("-round-") {
                return round
                    .parse()
                    .map(|round| Provenance::PseudoModelRound {
                        model: model.to_string(),
                        round,
                    })
                    .map_err(|_| format!("bad provenance: {s}"));
            }
        }
        Err(format!("bad provenance: {s}"))
    }
}

/// Box annotations of one region with mandatory lineage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub region_id: String,
    pub provenance: Provenance,
    pub boxes: Vec<BBox>,
}

/// One region row of the manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionEntry {
    pub id: String,
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partial: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub full: Option<String>,
    pub slide_id: u32,
    pub style_id: u32,
    pub split: SplitTag,
    pub positive: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub master_seed: u64,
    pub regions: Vec<RegionEntry>,
    /// SHA-256 of every referenced file, keyed by root-relative path.
    pub hashes: BTreeMap<String, String>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encode an RGB image as PNG bytes.
pub fn encode_image_png(img: &ImageU8) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.data().to_vec(),
    )
    .expect("buffer length enforced by ImageU8");
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            path: PathBuf::from("<memory>"),
            message: format!("png encode: {e}"),
        })?;
    Ok(bytes)
}

pub fn decode_image_png(bytes: &[u8], path: &Path) -> Result<ImageU8> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?
        .to_rgb8();
    ImageU8::from_raw(img.width() as usize, img.height() as usize, img.into_raw())
}

/// Serialize a TriMask as a single-channel 8-bit PNG with values {0, 1, 2}.
pub fn encode_labels_png(mask: &TriMask) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.labels().to_vec(),
    )
    .expect("buffer length enforced by TriMask");
    let mut bytes = Vec::new();
    image::DynamicImage::ImageLuma8(buf)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            path: PathBuf::from("<memory>"),
            message: format!("png encode: {e}"),
        })?;
    Ok(bytes)
}

pub fn decode_labels_png(bytes: &[u8], path: &Path) -> Result<TriMask> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    TriMask::from_raw(gray.width() as usize, gray.height() as usize, gray.into_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_labels(mask: &TriMask, path: &Path) -> Result<()> {
    write_bytes(path, &encode_labels_png(mask)?)
}

pub fn load_labels(path: &Path) -> Result<TriMask> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels_png(&bytes, path)
}

pub fn save_annotations(file: &AnnotationFile, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(file).expect("annotation serialization");
    write_bytes(path, &json)
}

pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Write a full dataset; the manifest is written last as the commit point.
pub fn write_dataset(
    root: &Path,
    regions: &[(String, RegionRecord)],
    master_seed: u64,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut hashes = BTreeMap::new();
    let mut entries = Vec::with_capacity(regions.len());
    for (id, record) in regions {
        let split = record.split_tag;
        let image_rel = format!("images/{split}/{id}.png");
        let png = encode_image_png(&record.image)?;
        hashes.insert(image_rel.clone(), hash_bytes(&png));
        write_bytes(&root.join(&image_rel), &png)?;

        let partial_rel = match split {
            SplitTag::Labeled | SplitTag::Negative => {
                let rel = format!("annotations_partial/{id}.json");
                let file = AnnotationFile {
                    region_id: id.clone(),
                    provenance: Provenance::Partial,
                    boxes: record.boxes_partial.clone(),
                };
                let json = serde_json::to_vec_pretty(&file).expect("serialize");
                hashes.insert(rel.clone(), hash_bytes(&json));
                write_bytes(&root.join(&rel), &json)?;
                Some(rel)
            }
            SplitTag::Unlabeled => None,
        };

        let full_rel = format!("annotations_full/{split}/{id}.json");
        let file = AnnotationFile {
            region_id: id.clone(),
            provenance: Provenance::Full,
            boxes: record.boxes_full.clone(),
        };
        let json = serde_json::to_vec_pretty(&file).expect("serialize");
        hashes.insert(full_rel.clone(), hash_bytes(&json));
        write_bytes(&root.join(&full_rel), &json)?;

        entries.push(RegionEntry {
            id: id.clone(),
            image: image_rel,
            partial: partial_rel,
            full: Some(full_rel),
            slide_id: record.slide_id,
            style_id: record.style_id,
            split,
            positive: record.positive,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        master_seed,
        regions: entries,
        hashes,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("serialize manifest");
    write_bytes(&root.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// An opened dataset with lazy, hash-verified region access.
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingFile { path: mpath });
        }
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                path: mpath,
                found: manifest.version,
                supported: MANIFEST_VERSION,
            });
        }
        let mut ids = BTreeSet::new();
        for r in &manifest.regions {
            if !ids.insert(r.id.clone()) {
                return Err(Error::format(&root.join("manifest.json"), format!("duplicate region id {}", r.id)));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn regions(&self) -> &[RegionEntry] {
        &self.manifest.regions
    }

    pub fn entry(&self, id: &str) -> Result<&RegionEntry> {
        self.manifest
            .regions
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown region id {id}")))
    }

    fn read_verified(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(Error::MissingFile { path });
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let found = hash_bytes(&bytes);
        match self.manifest.hashes.get(rel) {
            Some(expected) if *expected == found => Ok(bytes),
            Some(expected) => Err(Error::HashMismatch {
                path,
                expected: expected.clone(),
                found,
            }),
            None => Err(Error::format(&path, "file not listed in manifest")),
        }
    }

    pub fn load_image(&self, id: &str) -> Result<ImageU8> {
        let entry = self.entry(id)?;
        let bytes = self.read_verified(&entry.image)?;
        decode_image_png(&bytes, &self.root.join(&entry.image))
    }

    /// Partial (manual) annotations of a region; the evaluation ground truth.
    pub fn partial_boxes(&self, id: &str) -> Result<Vec<BBox>> {
        let entry = self.entry(id)?;
        let rel = entry.partial.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("region {id} has no partial annotations"))
        })?;
        let bytes = self.read_verified(rel)?;
        let file: AnnotationFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&self.root.join(rel), e.to_string()))?;
        Ok(file.boxes)
    }

    /// Verify existence and content hash of every referenced file.
    pub fn verify_all(&self) -> Result<()> {
        for rel in self.manifest.hashes.keys() {
            self.read_verified(rel)?;
        }
        Ok(())
    }

    /// Capability restricted to images + partial annotations, with access
    /// accounting.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            ds: self,
            accessed: Mutex::new(BTreeSet::new()),
        }
    }

    /// Full-truth access for oracle reports only.
    pub fn oracle_view(&self) -> OracleView<'_> {
        OracleView { ds: self }
    }
}

/// Partial-subtree capability handed to training code.
pub struct TrainView<'a> {
    ds: &'a Dataset,
    accessed: Mutex<BTreeSet<String>>,
}

impl<'a> TrainView<'a> {
    pub fn regions(&self) -> &'a [RegionEntry] {
        self.ds.regions()
    }

    fn log(&self, id: &str) {
        self.accessed.lock().unwrap().insert(id.to_string());
    }

    pub fn image(&self, id: &str) -> Result<ImageU8> {
        self.log(id);
        self.ds.load_image(id)
    }

    pub fn partial_boxes(&self, id: &str) -> Result<Vec<BBox>> {
        self.log(id);
        self.ds.partial_boxes(id)
    }

    /// Region ids read through this view so far.
    pub fn accessed_ids(&self) -> BTreeSet<String> {
        self.accessed.lock().unwrap().clone()
    }
}

/// Full-truth view; the only path to `annotations_full`.
pub struct OracleView<'a> {
    ds: &'a Dataset,
}

impl<'a> OracleView<'a> {
    pub fn full_boxes(&self, id: &str) -> Result<Vec<BBox>> {
        let entry = self.ds.entry(id)?;
        let rel = entry.full.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("region {id} has no full annotations"))
        })?;
        let bytes = self.ds.read_verified(rel)?;
        let file: AnnotationFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&self.ds.root.join(rel), e.to_string()))?;
        Ok(file.boxes)
    }
}

/// A run output directory: checkpoints, label snapshots, logs, reports.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "labels", "logs", "reports"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.srcd"))
    }

    pub fn labels_dir(&self, provenance: &Provenance) -> PathBuf {
        self.root.join("labels").join(provenance.to_string())
    }

    pub fn label_path(&self, provenance: &Provenance, region_id: &str) -> PathBuf {
        self.labels_dir(provenance).join(format!("{region_id}.png"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.json"))
    }

    pub fn write_json<T: serde::Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        let json = serde_json::to_vec_pretty(value).expect("serialize");
        write_bytes(path, &json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::TriLabel;
    use crate::synthgen::{generate_region, DatasetGenConfig, SlideSpec};

    fn tiny_dataset() -> Vec<(String, RegionRecord)> {
        let cfg = DatasetGenConfig {
            region_size: 64,
            labeled_per_pos_slide: 1,
            unlabeled_per_pos_slide: 1,
            regions_per_neg_slide: 1,
            styles: crate::synthgen::default_styles()[..2].to_vec(),
            ..DatasetGenConfig::default()
        };
        cfg.generate_regions().unwrap()
    }

    #[test]
    fn dataset_roundtrip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let regions = tiny_dataset();
        let manifest = write_dataset(dir.path(), &regions, 20).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest().regions.len(), manifest.regions.len());
        ds.verify_all().unwrap();
        // Images decode bit-identically.
        for (id, rec) in &regions {
            let img = ds.load_image(id).unwrap();
            assert_eq!(&img, &rec.image);
        }
    }

    #[test]
    fn corrupt_byte_is_hash_mismatch_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let regions = tiny_dataset();
        write_dataset(dir.path(), &regions, 20).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let rel = ds.regions()[0].image.clone();
        let path = dir.path().join(&rel);
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match ds.load_image(&ds.regions()[0].id.clone()) {
            Err(Error::HashMismatch { path: p, .. }) => {
                assert!(p.to_string_lossy().contains(&rel));
            }
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_version_mismatch_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let regions = tiny_dataset();
        write_dataset(dir.path(), &regions, 20).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let rel = ds.regions()[0].image.clone();
        std::fs::remove_file(dir.path().join(&rel)).unwrap();
        assert!(matches!(
            ds.load_image(&ds.regions()[0].id.clone()),
            Err(Error::MissingFile { .. })
        ));

        // Bump manifest version.
        let mpath = dir.path().join("manifest.json");
        let mut manifest: DatasetManifest =
            serde_json::from_slice(&std::fs::read(&mpath).unwrap()).unwrap();
        manifest.version = 99;
        std::fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(
            Dataset::open(dir.path()),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn train_view_has_no_full_truth_and_logs_access() {
        let dir = tempfile::tempdir().unwrap();
        let regions = tiny_dataset();
        write_dataset(dir.path(), &regions, 20).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let tv = ds.train_view();
        let labeled: Vec<String> = ds
            .regions()
            .iter()
            .filter(|r| r.split == SplitTag::Labeled)
            .map(|r| r.id.clone())
            .collect();
        let _ = tv.image(&labeled[0]).unwrap();
        let _ = tv.partial_boxes(&labeled[0]).unwrap();
        assert_eq!(tv.accessed_ids().len(), 1);
        // Full truth differs from partial for omitted regions and is only
        // reachable through the oracle view.
        let ov = ds.oracle_view();
        let full = ov.full_boxes(&labeled[0]).unwrap();
        let partial = tv.partial_boxes(&labeled[0]).unwrap();
        assert!(partial.len() <= full.len());
    }

    #[test]
    fn labels_roundtrip_and_reject_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = TriMask::all_background(9, 7);
        mask.set(3, 2, TriLabel::Inner);
        mask.set(4, 2, TriLabel::Edge);
        let path = dir.path().join("labels/refined-round-1/r0000.png");
        save_labels(&mask, &path).unwrap();
        let back = load_labels(&path).unwrap();
        assert_eq!(mask, back);

        // Value 3 rejected.
        let bad = image::GrayImage::from_raw(2, 1, vec![0, 3]).unwrap();
        let mut bytes = Vec::new();
        image::DynamicImage::ImageLuma8(bad)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let badpath = dir.path().join("bad.png");
        std::fs::write(&badpath, &bytes).unwrap();
        assert!(matches!(load_labels(&badpath), Err(Error::Format { .. })));

        // 0-byte file is a format error, not a crash.
        let empty = dir.path().join("empty.png");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(load_labels(&empty), Err(Error::Format { .. })));
    }

    #[test]
    fn provenance_string_roundtrip() {
        for p in [
            Provenance::Partial,
            Provenance::Full,
            Provenance::RefinedRound(3),
            Provenance::PseudoModelRound {
                model: "A".into(),
                round: 1,
            },
            Provenance::Prediction,
        ] {
            let s = p.to_string();
            let back = Provenance::try_from(s.clone()).unwrap();
            assert_eq!(p, back, "roundtrip of {s}");
        }
        assert!(Provenance::try_from("bogus".to_string()).is_err());
    }

    #[test]
    fn zero_unlabeled_leaves_no_unlabeled_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetGenConfig {
            region_size: 64,
            labeled_per_pos_slide: 1,
            unlabeled_per_pos_slide: 0,
            regions_per_neg_slide: 1,
            styles: crate::synthgen::default_styles()[..1].to_vec(),
            ..DatasetGenConfig::default()
        };
        let regions = cfg.generate_regions().unwrap();
        write_dataset(dir.path(), &regions, cfg.master_seed).unwrap();
        assert!(!dir.path().join("images/unlabeled").exists());
        assert!(dir.path().join("images/labeled").exists());
    }

    #[test]
    fn same_master_seed_gives_identical_manifest_hashes() {
        let cfg = DatasetGenConfig {
            region_size: 64,
            labeled_per_pos_slide: 1,
            unlabeled_per_pos_slide: 1,
            regions_per_neg_slide: 1,
            styles: crate::synthgen::default_styles()[..1].to_vec(),
            ..DatasetGenConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = write_dataset(d1.path(), &cfg.generate_regions().unwrap(), cfg.master_seed).unwrap();
        let m2 = write_dataset(d2.path(), &cfg.generate_regions().unwrap(), cfg.master_seed).unwrap();
        assert_eq!(m1.hashes, m2.hashes);
    }

    #[test]
    fn generate_region_is_usable_without_dataset() {
        let slide = SlideSpec {
            slide_id: 0,
            style: crate::synthgen::default_styles()[0].clone(),
            positive: true,
            n_labeled_regions: 1,
            n_unlabeled_regions: 0,
            region_size: 64,
        };
        let r = generate_region(&slide, 0, 1).unwrap();
        assert_eq!(r.image.width(), 64);
    }
}
