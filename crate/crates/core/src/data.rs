//! Dataset decoding, supervision derivation, augmentation and splitting.
//!
//! Layout on disk: `<root>/<split>/images/<id>.png` paired with
//! `<root>/<split>/masks/<id>.png`. Masks are 8-bit single-channel PNGs whose
//! raw values are class indices (0 background, 1 teeth, 2 plaque); a palette,
//! if present, is ignored.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::derive_rng;

pub const BACKGROUND: u8 = 0;
pub const TEETH: u8 = 1;
pub const PLAQUE: u8 = 2;

/// Per-pixel 0/1 map.
pub type BinaryMap = Array2<u8>;

/// Validated 3-class annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    labels: Array2<u8>,
}

impl LabelMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| v > PLAQUE) {
            return Err(Error::Invalid(format!(
                "label value {bad} outside {{0,1,2}}"
            )));
        }
        Ok(Self { labels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.labels
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&v| v == class).count()
    }
}

/// Binary masks and boundary maps for both foreground classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionPack {
    pub teeth_mask: BinaryMap,
    pub plaque_mask: BinaryMap,
    pub teeth_boundary: BinaryMap,
    pub plaque_boundary: BinaryMap,
}

impl SupervisionPack {
    pub fn from_label(label: &LabelMask, op: BoundaryOp) -> Self {
        let (teeth_mask, plaque_mask) = separate_channels(label);
        let teeth_boundary = op.apply(&teeth_mask);
        let plaque_boundary = op.apply(&plaque_mask);
        Self {
            teeth_mask,
            plaque_mask,
            teeth_boundary,
            plaque_boundary,
        }
    }

    /// Recombine the two class masks into the 3-class annotation.
    pub fn label(&self) -> LabelMask {
        recombine(&self.teeth_mask, &self.plaque_mask)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.teeth_mask.dim()
    }

    /// Disjoint masks, boundaries inside their masks, equal shapes.
    pub fn validate(&self) -> Result<()> {
        let d = self.teeth_mask.dim();
        if [&self.plaque_mask, &self.teeth_boundary, &self.plaque_boundary]
            .iter()
            .any(|m| m.dim() != d)
        {
            return Err(Error::Shape("supervision maps differ in size".into()));
        }
        let overlap = self
            .teeth_mask
            .iter()
            .zip(self.plaque_mask.iter())
            .any(|(&t, &p)| t != 0 && p != 0);
        if overlap {
            return Err(Error::Invalid("teeth and plaque masks overlap".into()));
        }
        for (b, m, name) in [
            (&self.teeth_boundary, &self.teeth_mask, "teeth"),
            (&self.plaque_boundary, &self.plaque_mask, "plaque"),
        ] {
            if b.iter().zip(m.iter()).any(|(&b, &m)| b != 0 && m == 0) {
                return Err(Error::Invalid(format!("{name} boundary leaves its mask")));
            }
        }
        Ok(())
    }

    fn map_all(&self, f: impl Fn(&BinaryMap) -> BinaryMap) -> Self {
        Self {
            teeth_mask: f(&self.teeth_mask),
            plaque_mask: f(&self.plaque_mask),
            teeth_boundary: f(&self.teeth_boundary),
            plaque_boundary: f(&self.plaque_boundary),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub supervision: SupervisionPack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
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
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// How boundary ground truth is derived from a binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryOp {
    /// Inner boundary from the 4-neighbourhood (deterministic, the default).
    #[default]
    Neighbor,
    /// Canny edges (thresholds 100/200 on a 0/255 mask), restricted to the mask.
    Canny,
}

impl BoundaryOp {
    pub fn apply(self, mask: &BinaryMap) -> BinaryMap {
        match self {
            BoundaryOp::Neighbor => extract_boundary(mask),
            BoundaryOp::Canny => canny_boundary(mask),
        }
    }
}

impl FromStr for BoundaryOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neighbor" => Ok(BoundaryOp::Neighbor),
            "canny" => Ok(BoundaryOp::Canny),
            other => Err(Error::Config(format!("unknown boundary op `{other}`"))),
        }
    }
}

pub fn separate_channels(mask: &LabelMask) -> (BinaryMap, BinaryMap) {
    let teeth = mask.labels.mapv(|v| u8::from(v == TEETH));
    let plaque = mask.labels.mapv(|v| u8::from(v == PLAQUE));
    (teeth, plaque)
}

/// `0 + 1*teeth + 2*plaque`; plaque wins where both are set.
pub fn recombine(teeth: &BinaryMap, plaque: &BinaryMap) -> LabelMask {
    let mut labels = Array2::zeros(teeth.dim());
    ndarray::Zip::from(&mut labels)
        .and(teeth)
        .and(plaque)
        .for_each(|l, &t, &p| {
            *l = if p != 0 {
                PLAQUE
            } else if t != 0 {
                TEETH
            } else {
                BACKGROUND
            }
        });
    LabelMask { labels }
}

/// One-pixel inner boundary: set pixels with a 4-neighbour outside the mask
/// or lying on the image border.
pub fn extract_boundary(mask: &BinaryMap) -> BinaryMap {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if mask[[y, x]] == 0 {
            return 0;
        }
        let edge = y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || mask[[y - 1, x]] == 0
            || mask[[y + 1, x]] == 0
            || mask[[y, x - 1]] == 0
            || mask[[y, x + 1]] == 0;
        u8::from(edge)
    })
}

pub const CANNY_LOW: f32 = 100.0;
pub const CANNY_HIGH: f32 = 200.0;

pub fn canny_boundary(mask: &BinaryMap) -> BinaryMap {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    let edges = imageproc::edges::canny(&img, CANNY_LOW, CANNY_HIGH);
    Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(mask[[y, x]] != 0 && edges.get_pixel(x as u32, y as u32)[0] != 0)
    })
}

fn flip_map(m: &BinaryMap, horizontal: bool, vertical: bool) -> BinaryMap {
    let mut v = m.view();
    if horizontal {
        v.invert_axis(Axis(1));
    }
    if vertical {
        v.invert_axis(Axis(0));
    }
    v.to_owned()
}

/// Flip the image and all four supervision maps together.
pub fn augment_flip(record: &SampleRecord, horizontal: bool, vertical: bool) -> SampleRecord {
    let mut img = record.image.view();
    if horizontal {
        img.invert_axis(Axis(2));
    }
    if vertical {
        img.invert_axis(Axis(1));
    }
    SampleRecord {
        id: record.id.clone(),
        image: img.as_standard_layout().into_owned(),
        supervision: record
            .supervision
            .map_all(|m| flip_map(m, horizontal, vertical)),
    }
}

/// Independent coin per axis with probability 0.5, drawn from a stream keyed by
/// `(seed, epoch, id)` so the result does not depend on loader scheduling.
pub fn random_flip(record: &SampleRecord, seed: u64, epoch: usize) -> SampleRecord {
    let mut rng = derive_rng(seed, &format!("flip/{epoch}/{}", record.id));
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    augment_flip(record, h, v)
}

/// Decode a mask PNG into raw class indices.
pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let labels = read_index_png(path)?;
    LabelMask::new(labels).map_err(|e| Error::data(path, e.to_string()))
}

/// Raw 8-bit values of a grayscale or indexed PNG (palette ignored).
pub fn read_index_png(path: &Path) -> Result<Array2<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = info.bit_depth as usize;
    match (info.color_type, bits) {
        (png::ColorType::Grayscale, 8) | (png::ColorType::Indexed, 8) => {
            let mut out = Array2::zeros((h, w));
            for (y, row) in buf.chunks(info.line_size).take(h).enumerate() {
                for x in 0..w {
                    out[[y, x]] = row[x];
                }
            }
            Ok(out)
        }
        (png::ColorType::Indexed, 1 | 2 | 4) => {
            let per_byte = 8 / bits;
            let mask = (1u8 << bits) - 1;
            let mut out = Array2::zeros((h, w));
            for (y, row) in buf.chunks(info.line_size).take(h).enumerate() {
                for x in 0..w {
                    let byte = row[x / per_byte];
                    let shift = 8 - bits * (x % per_byte + 1);
                    out[[y, x]] = (byte >> shift) & mask;
                }
            }
            Ok(out)
        }
        (ct, b) => Err(Error::data(
            path,
            format!("mask must be 8-bit grayscale or indexed PNG, got {ct:?} at {b} bits"),
        )),
    }
}

pub fn write_index_png(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([values[[y as usize, x as usize]]]));
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 16-bit grayscale PNG of a `[0, 1]` map, quantized to `round(p * 65535)`.
pub fn write_prob_png(path: &Path, prob: &Array2<f32>) -> Result<()> {
    let (h, w) = prob.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = prob[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(p * 65535.0).round() as u16])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_prob_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
    }))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8())
}

/// Bilinear resize to `size x size` (no-op at native size) and scale to `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage, size: usize) -> Array3<f32> {
    let resized;
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    };
    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

fn resize_nearest(mask: &Array2<u8>, size: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if h == size && w == size {
        return mask.clone();
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask[[y as usize, x as usize]]]));
    let r = image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest);
    Array2::from_shape_fn((size, size), |(y, x)| r.get_pixel(x as u32, y as u32)[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub input_size: usize,
    pub boundary_op: BoundaryOp,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            input_size: 128,
            boundary_op: BoundaryOp::Neighbor,
        }
    }
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

/// Sorted `.png` stems under `<root>/<split>/images`. A missing split yields an empty list.
pub fn list_ids(root: &Path, split: Split) -> Result<Vec<String>> {
    let dir = split_dir(root, split).join("images");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_sample(root: &Path, split: Split, id: &str, opts: LoadOptions) -> Result<SampleRecord> {
    let dir = split_dir(root, split);
    let image_path = dir.join("images").join(format!("{id}.png"));
    let mask_path = dir.join("masks").join(format!("{id}.png"));
    if !mask_path.exists() {
        return Err(Error::MissingMask {
            stem: id.to_string(),
            expected: mask_path,
        });
    }
    let rgb = read_rgb(&image_path)?;
    let raw = read_mask_png(&mask_path)?;
    if (raw.height(), raw.width()) != (rgb.height() as usize, rgb.width() as usize) {
        return Err(Error::data(
            &mask_path,
            format!(
                "mask is {}x{} but image is {}x{}",
                raw.width(),
                raw.height(),
                rgb.width(),
                rgb.height()
            ),
        ));
    }
    let image = image_to_tensor(&rgb, opts.input_size);
    let label = LabelMask::new(resize_nearest(raw.labels(), opts.input_size))?;
    if label.height() != image.dim().1 || label.width() != image.dim().2 {
        return Err(Error::data(&mask_path, "size mismatch after resize"));
    }
    let supervision = SupervisionPack::from_label(&label, opts.boundary_op);
    supervision
        .validate()
        .map_err(|e| Error::data(&mask_path, e.to_string()))?;
    Ok(SampleRecord {
        id: id.to_string(),
        image,
        supervision,
    })
}

/// Load every image/mask pair of a split, ordered by id. Decoding runs in parallel;
/// the first failing id (in order) is reported.
pub fn load_dataset(root: &Path, split: Split, opts: LoadOptions) -> Result<Vec<SampleRecord>> {
    let ids = list_ids(root, split)?;
    ids.par_iter()
        .map(|id| load_sample(root, split, id, opts))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Shuffle ids with `seed` and cut them 8:1:1. Train takes `floor(0.8 n)`; of the
/// remainder the test split takes the larger half.
pub fn make_split(ids: &[String], seed: u64) -> DatasetSplit {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = derive_rng(seed, "split");
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = n * 8 / 10;
    let rest = n - n_train;
    let n_test = rest.div_ceil(2);
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..n_train + n_test].to_vec();
    let mut val = ids[n_train + n_test..].to_vec();
    train.sort();
    val.sort();
    test.sort();
    DatasetSplit { train, val, test }
}

/// Materialize boundary maps as `<root>/<split>/boundaries/{teeth,plaque}/<id>.png`
/// (raw 0/1 values). Returns the number of samples written.
pub fn prepare_boundaries(root: &Path, op: BoundaryOp) -> Result<usize> {
    let mut written = 0;
    for split in Split::ALL {
        let ids = list_ids(root, split)?;
        let dir = split_dir(root, split);
        for id in &ids {
            let mask_path = dir.join("masks").join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(Error::MissingMask {
                    stem: id.clone(),
                    expected: mask_path,
                });
            }
            let label = read_mask_png(&mask_path)?;
            let pack = SupervisionPack::from_label(&label, op);
            for (name, map) in [("teeth", &pack.teeth_boundary), ("plaque", &pack.plaque_boundary)] {
                let out_dir = dir.join("boundaries").join(name);
                std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
                write_index_png(&out_dir.join(format!("{id}.png")), map)?;
            }
            written += 1;
        }
    }
    Ok(written)
}
