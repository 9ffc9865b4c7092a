//! Procedural stand-in for intraoral photographs: pale elliptical teeth on a
//! textured gum background, with yellow plaque patches along each tooth's
//! gum line.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    image_to_tensor, split_dir, write_index_png, BoundaryOp, LabelMask, SampleRecord, Split, SupervisionPack, PLAQUE,
    TEETH,
};
use crate::error::{Error, Result};
use crate::weights::derive_rng;

const GUM: [f32; 3] = [168.0, 72.0, 78.0];
const TOOTH: [f32; 3] = [236.0, 232.0, 218.0];
const PLAQUE_RGB: [f32; 3] = [214.0, 178.0, 64.0];

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> Rgb<u8> {
    let mut px = [0u8; 3];
    for (o, b) in px.iter_mut().zip(base) {
        *o = (b + rng.random_range(-amount..=amount)).clamp(0.0, 255.0) as u8;
    }
    Rgb(px)
}

/// One synthetic image and its 3-class annotation, fully determined by
/// `(seed, id)`.
pub fn synth_sample(id: &str, size: usize, seed: u64) -> (RgbImage, LabelMask) {
    let mut rng = derive_rng(seed, &format!("synth/{id}"));
    let mut labels = Array2::<u8>::zeros((size, size));
    let s = size as f32;
    let n_teeth = rng.random_range(2..=4usize);
    let slot = s / n_teeth as f32;
    for i in 0..n_teeth {
        let cx = slot * (i as f32 + 0.5) + rng.random_range(-0.08..0.08) * slot;
        let cy = s * rng.random_range(0.42..0.58);
        let rx = slot * rng.random_range(0.3..0.42);
        let ry = s * rng.random_range(0.25..0.36);
        let depth = rng.random_range(0.2..0.45f32);
        let lower = rng.random_bool(0.5);
        let has_plaque = rng.random_bool(0.85);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f32 + 0.5 - cx) / rx;
                let dy = (y as f32 + 0.5 - cy) / ry;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
                let band = if lower { dy > 1.0 - 2.0 * depth } else { dy < -1.0 + 2.0 * depth };
                labels[[y, x]] = if has_plaque && band { PLAQUE } else { TEETH };
            }
        }
    }
    let mut img = RgbImage::new(size as u32, size as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = match labels[[y as usize, x as usize]] {
            TEETH => jitter(&mut rng, TOOTH, 14.0),
            PLAQUE => jitter(&mut rng, PLAQUE_RGB, 18.0),
            _ => jitter(&mut rng, GUM, 22.0),
        };
    }
    (img, LabelMask::new(labels).expect("labels are in range"))
}

pub fn synth_id(index: usize) -> String {
    format!("synth_{index:04}")
}

/// In-memory samples `synth_<offset>..synth_<offset+n>` at `size`.
pub fn synth_records(n: usize, offset: usize, size: usize, seed: u64, op: BoundaryOp) -> Vec<SampleRecord> {
    (offset..offset + n)
        .map(|i| {
            let id = synth_id(i);
            let (img, label) = synth_sample(&id, size, seed);
            SampleRecord {
                image: image_to_tensor(&img, size),
                supervision: SupervisionPack::from_label(&label, op),
                id,
            }
        })
        .collect()
}

/// Write a dataset in the standard on-disk layout with `counts` samples for
/// train, val and test. Returns the number of images written.
pub fn write_synthetic_dataset(root: &Path, counts: [usize; 3], size: usize, seed: u64) -> Result<usize> {
    let mut index = 0;
    for (split, &n) in Split::ALL.iter().zip(counts.iter()) {
        let dir = split_dir(root, *split);
        let (images, masks) = (dir.join("images"), dir.join("masks"));
        for d in [&images, &masks] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for _ in 0..n {
            let id = synth_id(index);
            let (img, label) = synth_sample(&id, size, seed);
            let path = images.join(format!("{id}.png"));
            img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
            write_index_png(&masks.join(format!("{id}.png")), label.labels())?;
            index += 1;
        }
    }
    Ok(index)
}
