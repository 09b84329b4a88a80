//! Patch datasets: directory ingestion, stratified splitting and a seeded
//! synthetic texture generator.
//!
//! On disk a dataset is `root/<class_name>/*.png|*.ppm`. Class ids follow
//! the sorted class directory names. A directory named `uncertain` holds the
//! held-out class that never takes part in training or testing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, Error, Result};
use crate::interp::resize_bilinear;
use crate::tensor::Tensor;
use crate::Scalar;

pub const UNCERTAIN_DIR: &str = "uncertain";

/// Integer class id, or the held-out uncertain class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Class(u32),
    Uncertain,
}

impl Label {
    pub fn class(self) -> Option<u32> {
        match self {
            Label::Class(c) => Some(c),
            Label::Uncertain => None,
        }
    }

    pub fn is_uncertain(self) -> bool {
        self == Label::Uncertain
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Uncertain => f.write_str("uncertain"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Class(c) => s.serialize_u32(*c),
            Label::Uncertain => s.serialize_str("uncertain"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(c) => Ok(Label::Class(c)),
            Raw::Text(t) if t == "uncertain" => Ok(Label::Uncertain),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "label must be an integer or \"uncertain\", got {t:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unassigned,
    Train,
    Test,
    Holdout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord<T> {
    pub patch_id: String,
    /// `H x W x C` in `[0, 1]`.
    pub pixels: Tensor<T>,
    pub label: Label,
    pub split: Split,
    pub source_path: String,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    /// Class names indexed by class id.
    pub classes: Vec<String>,
    pub records: Vec<PatchRecord<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    /// class name -> split -> record count
    pub counts: BTreeMap<String, BTreeMap<Split, usize>>,
    pub seed: u64,
    pub train_fraction: f64,
}

impl DatasetManifest {
    pub fn from_records<T: Scalar>(
        root: &Path,
        classes: &[String],
        records: &[PatchRecord<T>],
        seed: u64,
        train_fraction: f64,
    ) -> Self {
        let mut counts: BTreeMap<String, BTreeMap<Split, usize>> = BTreeMap::new();
        for r in records {
            let name = match r.label {
                Label::Class(c) => classes.get(c as usize).cloned().unwrap_or_else(|| c.to_string()),
                Label::Uncertain => UNCERTAIN_DIR.to_string(),
            };
            *counts.entry(name).or_default().entry(r.split).or_default() += 1;
        }
        Self {
            root: root.to_path_buf(),
            classes: classes.to_vec(),
            counts,
            seed,
            train_fraction,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Lists the image files of a directory in path order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect())
}

/// Decodes an 8-bit image into an `H x W x C` tensor scaled to `[0, 1]`.
/// `channels` must be 1 (luma) or 3 (RGB).
pub fn decode_image<T: Scalar>(bytes: &[u8], channels: usize) -> Result<Tensor<T>> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Data(format!("cannot decode image: {e}")))?;
    dynamic_to_tensor(img, channels)
}

fn dynamic_to_tensor<T: Scalar>(img: image::DynamicImage, channels: usize) -> Result<Tensor<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        3 => img.to_rgb8().into_raw(),
        1 => img.to_luma8().into_raw(),
        c => return Err(Error::Config(format!("images must have 1 or 3 channels, requested {c}"))),
    };
    let scale = T::lit(1.0 / 255.0);
    Tensor::new(vec![h, w, channels], raw.into_iter().map(|b| T::lit(b as f64) * scale).collect())
}

/// Reads an image file and resizes it bilinearly to `input_shape`.
pub fn load_image<T: Scalar>(path: &Path, input_shape: [usize; 3]) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let t = dynamic_to_tensor(img, input_shape[2])?;
    resize_bilinear(&t, input_shape[0], input_shape[1])
}

/// Quantizes a `[0, 1]` tensor to an 8-bit RGB image (grayscale is replicated).
pub fn to_rgb_image<T: Scalar>(t: &Tensor<T>) -> Result<image::RgbImage> {
    let (h, w, c) = t.dims3()?;
    if c != 1 && c != 3 {
        return Err(dim_err!("channel axis: cannot render {c} channels as RGB"));
    }
    let q = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = Vec::with_capacity(h * w * 3);
    for px in t.data().chunks(c) {
        if c == 3 {
            raw.extend(px.iter().map(|&v| q(v)));
        } else {
            raw.extend([q(px[0]); 3]);
        }
    }
    Ok(image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

pub fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_png(&to_rgb_image(t)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads `root/<class>/*` in sorted path order, resizing to `input_shape`.
/// Every record starts out [`Split::Unassigned`], except uncertain records,
/// which are always [`Split::Holdout`].
pub fn load_dataset<T: Scalar>(root: &Path, input_shape: [usize; 3]) -> Result<Dataset<T>> {
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut classes = Vec::new();
    let mut uncertain_dir = None;
    for dir in dirs {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == UNCERTAIN_DIR {
            uncertain_dir = Some(dir);
        } else {
            classes.push((name, dir));
        }
    }
    if classes.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }

    let mut records = Vec::new();
    let mut add_dir = |name: &str, dir: &Path, label: Label, split: Split| -> Result<()> {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} contains no images", dir.display())));
        }
        for file in files {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            records.push(PatchRecord {
                patch_id: format!("{name}/{stem}"),
                pixels: load_image(&file, input_shape)?,
                label,
                split,
                source_path: file.to_string_lossy().into_owned(),
            });
        }
        Ok(())
    };
    for (id, (name, dir)) in classes.iter().enumerate() {
        add_dir(name, dir, Label::Class(id as u32), Split::Unassigned)?;
    }
    if let Some(dir) = uncertain_dir {
        add_dir(UNCERTAIN_DIR, &dir, Label::Uncertain, Split::Holdout)?;
    }
    Ok(Dataset {
        classes: classes.into_iter().map(|(n, _)| n).collect(),
        records,
    })
}

/// Stratified split: each class is shuffled independently and its first
/// `round(n * train_fraction)` records go to train, the rest to test.
/// Uncertain records are forced to holdout.
pub fn split<T: Scalar>(mut records: Vec<PatchRecord<T>>, train_fraction: f64, seed: u64) -> Result<Vec<PatchRecord<T>>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter_mut().enumerate() {
        match r.label {
            Label::Class(c) => by_class.entry(c).or_default().push(i),
            Label::Uncertain => r.split = Split::Holdout,
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Data(format!("class {class} has {} record(s), at least 2 are needed", idx.len())));
        }
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            records[i].split = if rank < n_train { Split::Train } else { Split::Test };
        }
    }
    Ok(records)
}

/// Class names used by the generator and the `synth` command.
pub const SYNTH_CLASSES: [&str; 2] = ["benign", "malignant"];

fn smooth_texture<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let base = rng.gen_range(0.35..0.65);
    let scale = h.min(w) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..=5))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(scale / 5.0..scale / 2.5),
                rng.gen_range(-0.3..0.3),
            )
        })
        .collect();
    let mut g = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v: f64 = blobs
                .iter()
                .map(|&(cy, cx, s, a)| {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
            g.push((base + v).clamp(0.0, 1.0));
        }
    }
    g
}

fn speckle_texture<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let base = rng.gen_range(0.35..0.65);
    let amp = rng.gen_range(0.15..0.3);
    let grain = rng.gen_range(1..=2usize);
    let (ch, cw) = (h.div_ceil(grain), w.div_ceil(grain));
    let cells: Vec<f64> = (0..ch * cw).map(|_| rng.gen_range(-amp..amp)).collect();
    let mut g = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            g.push((base + cells[(i / grain) * cw + j / grain]).clamp(0.0, 1.0));
        }
    }
    g
}

/// Maps a gray texture to correlated RGB with a per-record stain-like tint.
fn colorize<T: Scalar, R: Rng>(gray: &[f64], h: usize, w: usize, rng: &mut R) -> Tensor<T> {
    let gain = [rng.gen_range(0.85..1.0), rng.gen_range(0.6..0.8), rng.gen_range(0.75..0.95)];
    let offset = [rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.15)];
    let data = gray
        .iter()
        .flat_map(|&g| (0..3).map(move |c| T::lit((gain[c] * g + offset[c]).clamp(0.0, 1.0))))
        .collect();
    Tensor::new(vec![h, w, 3], data).expect("sized to h*w*3")
}

/// Seeded three-class texture set: class 0 smooth low-frequency blobs,
/// class 1 high-frequency speckle, and an uncertain class that is half of
/// each (split along a random axis). Records come back unassigned to a
/// split, except the uncertain ones which are holdout.
pub fn synth_generate<T: Scalar>(n_per_class: usize, size: (usize, usize), seed: u64) -> Result<Vec<PatchRecord<T>>> {
    let (h, w) = size;
    if n_per_class < 4 {
        return Err(Error::Config(format!("n_per_class must be at least 4, got {n_per_class}")));
    }
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("synthetic patches must be at least 16x16, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(3 * n_per_class);
    for (class, name) in SYNTH_CLASSES.iter().enumerate() {
        for i in 0..n_per_class {
            let gray = if class == 0 {
                smooth_texture(h, w, &mut rng)
            } else {
                speckle_texture(h, w, &mut rng)
            };
            records.push(PatchRecord {
                patch_id: format!("{name}/{i:05}"),
                pixels: colorize(&gray, h, w, &mut rng),
                label: Label::Class(class as u32),
                split: Split::Unassigned,
                source_path: String::new(),
            });
        }
    }
    for i in 0..n_per_class {
        let smooth = smooth_texture(h, w, &mut rng);
        let speckle = speckle_texture(h, w, &mut rng);
        let vertical = rng.gen_bool(0.5);
        let smooth_first = rng.gen_bool(0.5);
        let mixed: Vec<f64> = (0..h * w)
            .map(|p| {
                let (r, c) = (p / w, p % w);
                let first = if vertical { c < w / 2 } else { r < h / 2 };
                if first == smooth_first {
                    smooth[p]
                } else {
                    speckle[p]
                }
            })
            .collect();
        records.push(PatchRecord {
            patch_id: format!("{UNCERTAIN_DIR}/{i:05}"),
            pixels: colorize(&mixed, h, w, &mut rng),
            label: Label::Uncertain,
            split: Split::Holdout,
            source_path: String::new(),
        });
    }
    Ok(records)
}

/// Writes records as PNGs in the class-directory layout and returns the
/// paths written, in record order.
pub fn write_dataset<T: Scalar>(records: &[PatchRecord<T>], classes: &[String], root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(records.len());
    for r in records {
        let dir_name = match r.label {
            Label::Class(c) => classes
                .get(c as usize)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no class name for label {c}")))?,
            Label::Uncertain => UNCERTAIN_DIR.to_string(),
        };
        let dir = root.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = r.patch_id.rsplit('/').next().unwrap_or(&r.patch_id);
        let path = dir.join(format!("{stem}.png"));
        save_png(&r.pixels, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_serde() {
        assert_eq!(serde_json::to_string(&Label::Class(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&Label::Uncertain).unwrap(), "\"uncertain\"");
        assert_eq!(serde_json::from_str::<Label>("1").unwrap(), Label::Class(1));
        assert_eq!(serde_json::from_str::<Label>("\"uncertain\"").unwrap(), Label::Uncertain);
        assert!(serde_json::from_str::<Label>("\"maybe\"").is_err());
    }

    #[test]
    fn synth_counts_and_determinism() {
        let a = synth_generate::<f64>(5, (16, 20), 3).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a.iter().filter(|r| r.label == Label::Class(0)).count(), 5);
        assert_eq!(a.iter().filter(|r| r.label.is_uncertain()).count(), 5);
        assert!(a.iter().all(|r| r.pixels.shape() == [16, 20, 3]));
        assert!(a.iter().all(|r| r.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        let b = synth_generate::<f64>(5, (16, 20), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_preconditions() {
        assert!(synth_generate::<f64>(3, (16, 16), 0).is_err());
        assert!(synth_generate::<f64>(4, (15, 16), 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let recs = synth_generate::<f32>(10, (16, 16), 1).unwrap();
        let out = split(recs, 0.7, 9).unwrap();
        for class in [0, 1] {
            let train = out.iter().filter(|r| r.label == Label::Class(class) && r.split == Split::Train).count();
            let test = out.iter().filter(|r| r.label == Label::Class(class) && r.split == Split::Test).count();
            assert_eq!((train, test), (7, 3));
        }
        assert!(out.iter().filter(|r| r.label.is_uncertain()).all(|r| r.split == Split::Holdout));
    }

    #[test]
    fn split_rejects_tiny_class() {
        let mut recs = synth_generate::<f64>(4, (16, 16), 1).unwrap();
        recs.retain(|r| r.label != Label::Class(1) || r.patch_id.ends_with("00000"));
        assert!(matches!(split(recs, 0.7, 0), Err(Error::Data(_))));
    }
}
