//! On-disk datasets: `<split>/<class>/<id>.png` RGB images with
//! `<id>.mask.png` 8-bit concept-id masks and a `vocabulary.txt` at the root.

use std::io::Cursor;
use std::path::Path;

use crate::cnn::TensorDataset;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::semlabel::{SegMask, Vocabulary};
use crate::tensor::{Scalar, Tensor};

pub const VOCAB_FILE: &str = "vocabulary.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Validation, Split::Test]
    }
}

/// One split: images stored as interleaved RGB8 with pixel-exact masks.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub size: usize,
    pub class_names: Vec<String>,
    pub images: Vec<Vec<u8>>,
    pub masks: Vec<SegMask>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Planar `[3,size,size]` tensors with values in [0,1].
    pub fn to_tensors<T: Scalar>(&self) -> TensorDataset<T> {
        let s = self.size;
        let images = self
            .images
            .iter()
            .map(|rgb| {
                let mut data = vec![T::zero(); 3 * s * s];
                for p in 0..s * s {
                    for c in 0..3 {
                        data[c * s * s + p] = T::from_f64(rgb[p * 3 + c] as f64 / 255.0);
                    }
                }
                Tensor::new(vec![3, s, s], data).expect("image tensor")
            })
            .collect();
        TensorDataset { images, labels: self.labels.clone() }
    }

    /// Most frequent class (lowest index on ties); the abstention fallback.
    pub fn majority_class(&self) -> usize {
        let mut counts = vec![0usize; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate().skip(1) {
            if c > counts[best] {
                best = i;
            }
        }
        best
    }
}

fn encode_png_rgb(size: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(size as u32, size as u32, rgb.to_vec())
        .ok_or_else(|| Error::Dataset("image buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Dataset(format!("png encode: {e}")))?;
    Ok(bytes)
}

fn encode_png_gray(size: usize, ids: &[u8]) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(size as u32, size as u32, ids.to_vec())
        .ok_or_else(|| Error::Dataset("mask buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Dataset(format!("png encode: {e}")))?;
    Ok(bytes)
}

/// Write one split under `root/<split>/<class>/`, plus the vocabulary file at
/// the root.
pub fn save_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    fsutil::write_atomic_str(&root.join(VOCAB_FILE), &ds.vocab.to_text())?;
    let split_dir = root.join(ds.split.as_str());
    for (i, id) in ds.ids.iter().enumerate() {
        let class_dir = split_dir.join(&ds.class_names[ds.labels[i]]);
        std::fs::create_dir_all(&class_dir)?;
        fsutil::write_atomic(&class_dir.join(format!("{id}.png")), &encode_png_rgb(ds.size, &ds.images[i])?)?;
        fsutil::write_atomic(
            &class_dir.join(format!("{id}.mask.png")),
            &encode_png_gray(ds.size, &ds.masks[i].ids)?,
        )?;
    }
    Ok(())
}

/// Load one split. Classes are the sorted subdirectory names; files within a
/// class load in sorted id order, so the layout fixes the dataset order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let vocab_path = root.join(VOCAB_FILE);
    let vocab = Vocabulary::parse(&std::fs::read_to_string(&vocab_path).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", vocab_path.display()))
    })?)?;
    let split_dir = root.join(split.as_str());
    let mut class_names: Vec<String> = std::fs::read_dir(&split_dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", split_dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    class_names.sort();
    if class_names.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", split_dir.display())));
    }

    let mut size = 0usize;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let dir = split_dir.join(class);
        let mut stems: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".png") && !n.ends_with(".mask.png"))
            .map(|n| n.trim_end_matches(".png").to_string())
            .collect();
        stems.sort();
        for stem in stems {
            let img_path = dir.join(format!("{stem}.png"));
            let img = image::open(&img_path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", img_path.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            if w != h {
                return Err(Error::Dataset(format!("{}: image is not square", img_path.display())));
            }
            if size == 0 {
                size = w as usize;
            } else if size != w as usize {
                return Err(Error::Dataset(format!("{}: inconsistent image size", img_path.display())));
            }
            let mask_path = dir.join(format!("{stem}.mask.png"));
            let mask_img = image::open(&mask_path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))?
                .to_luma8();
            if mask_img.dimensions() != (w, h) {
                return Err(Error::Dataset(format!(
                    "{}: mask size differs from image",
                    mask_path.display()
                )));
            }
            let mask = SegMask::new(size, mask_img.into_raw())?;
            mask.validate_against(&vocab)?;
            images.push(img.into_raw());
            masks.push(mask);
            labels.push(label);
            ids.push(stem);
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", split_dir.display())));
    }
    Ok(Dataset { split, size, class_names, images, masks, labels, ids, vocab })
}
