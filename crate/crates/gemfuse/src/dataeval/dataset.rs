//! Dataset disk layout: `images/a/NNNN.png` and `images/b/NNNN.png` plus a
//! COCO-subset `annotations.json` (images, categories, annotations with pixel
//! [x, y, w, h] boxes; category ids are 1-based in the file).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::preproc::{Image, ImageKind};

use super::scene::CLASS_NAMES;
use super::{Annotation, EvalError, MultiModalSample, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    width: usize,
    height: usize,
    file_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    categories: Vec<CocoCategory>,
    annotations: Vec<CocoAnnotation>,
}

/// A dataset loaded from (or about to be written to) disk.
#[derive(Debug)]
pub struct DatasetOnDisk {
    pub root: PathBuf,
    pub samples: Vec<MultiModalSample>,
}

fn file_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// Write samples to `dir` in the documented layout. The directory structure
/// is created; existing-file policy is the caller's concern.
pub fn save_dataset(dir: &Path, samples: &[MultiModalSample]) -> Result<()> {
    let dir_a = dir.join("images").join("a");
    let dir_b = dir.join("images").join("b");
    fs::create_dir_all(&dir_a)?;
    fs::create_dir_all(&dir_b)?;

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1usize;
    for (i, sample) in samples.iter().enumerate() {
        let name = file_name(i);
        sample.image_a.save_png(&dir_a.join(&name))?;
        sample.image_b.save_png(&dir_b.join(&name))?;
        images.push(CocoImage {
            id: i,
            width: sample.image_a.width,
            height: sample.image_a.height,
            file_name: name,
        });
        for gt in &sample.gts {
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: i,
                category_id: gt.class_id + 1,
                bbox: gt.bbox_xywh,
            });
            ann_id += 1;
        }
    }
    let categories = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory { id: i + 1, name: name.to_string() })
        .collect();
    let file = CocoFile { images, categories, annotations };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(dir.join(ANNOTATIONS_FILE), text)?;
    Ok(())
}

/// Load a dataset, validating the annotation file against the images.
pub fn load_dataset(dir: &Path) -> Result<DatasetOnDisk> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    if !ann_path.is_file() {
        return Err(EvalError::Data(format!("missing {}", ann_path.display())));
    }
    let file: CocoFile = serde_json::from_str(&fs::read_to_string(&ann_path)?)?;

    for cat in &file.categories {
        if cat.id == 0 || cat.id > CLASS_NAMES.len() {
            return Err(EvalError::Data(format!(
                "unknown category id {} ({})",
                cat.id, cat.name
            )));
        }
    }

    let mut samples = Vec::with_capacity(file.images.len());
    let mut order: Vec<&CocoImage> = file.images.iter().collect();
    order.sort_by_key(|im| im.id);
    for im in &order {
        let path_a = dir.join("images").join("a").join(&im.file_name);
        let path_b = dir.join("images").join("b").join(&im.file_name);
        if !path_a.is_file() || !path_b.is_file() {
            return Err(EvalError::Data(format!(
                "image pair for `{}` is incomplete",
                im.file_name
            )));
        }
        let image_a = Image::load_png(&path_a, ImageKind::Rgb)?;
        let image_b = Image::load_png(&path_b, ImageKind::Ir)?;
        if image_a.height != im.height || image_a.width != im.width {
            return Err(EvalError::Data(format!(
                "size of `{}` does not match the annotation entry",
                im.file_name
            )));
        }
        if image_b.height != im.height || image_b.width != im.width {
            return Err(EvalError::Data(format!(
                "modality b size of `{}` does not match",
                im.file_name
            )));
        }
        let gts: Vec<Annotation> = file
            .annotations
            .iter()
            .filter(|a| a.image_id == im.id)
            .map(|a| {
                let [x, y, w, h] = a.bbox;
                if a.category_id == 0 || a.category_id > CLASS_NAMES.len() {
                    return Err(EvalError::Data(format!(
                        "annotation {} has unknown category {}",
                        a.id, a.category_id
                    )));
                }
                if x < 0.0
                    || y < 0.0
                    || w <= 0.0
                    || h <= 0.0
                    || x + w > im.width as f64 + 1e-9
                    || y + h > im.height as f64 + 1e-9
                {
                    return Err(EvalError::Data(format!(
                        "annotation {} box {:?} leaves image bounds",
                        a.id, a.bbox
                    )));
                }
                Ok(Annotation { class_id: a.category_id - 1, bbox_xywh: a.bbox })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(MultiModalSample { image_a, image_b, gts, corruption: None });
    }
    Ok(DatasetOnDisk { root: dir.to_path_buf(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataeval::scene::{generate_scene, SceneConfig};

    #[test]
    fn save_load_round_trip_preserves_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<MultiModalSample> =
            (0..5).map(|i| generate_scene(&SceneConfig::default(), i)).collect();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 5);
        for (orig, got) in samples.iter().zip(&loaded.samples) {
            assert_eq!(orig.gts, got.gts);
            assert_eq!(orig.image_a.height, got.image_a.height);
            // Pixel values survive 8-bit quantization.
            for i in 0..orig.image_a.data.len() {
                let q = (orig.image_a.data[i] * 255.0).round() / 255.0;
                assert!((got.image_a.data[i] - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn annotations_are_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let samples: Vec<MultiModalSample> =
            (0..3).map(|i| generate_scene(&SceneConfig::default(), 50 + i)).collect();
        save_dataset(d1.path(), &samples).unwrap();
        save_dataset(d2.path(), &samples).unwrap();
        let a = fs::read(d1.path().join(ANNOTATIONS_FILE)).unwrap();
        let b = fs::read(d2.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(a, b);
        // Image bytes too.
        let ia = fs::read(d1.path().join("images/a/0000.png")).unwrap();
        let ib = fs::read(d2.path().join("images/a/0000.png")).unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[]).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded.samples.is_empty());
    }

    #[test]
    fn missing_image_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![generate_scene(&SceneConfig::default(), 1)];
        save_dataset(dir.path(), &samples).unwrap();
        fs::remove_file(dir.path().join("images/b/0000.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(EvalError::Data(_))));
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![generate_scene(&SceneConfig::default(), 2)];
        save_dataset(dir.path(), &samples).unwrap();
        let path = dir.path().join(ANNOTATIONS_FILE);
        let mut file: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        file["annotations"][0]["bbox"] = serde_json::json!([60.0, 60.0, 30.0, 30.0]);
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(EvalError::Data(_))));
    }
}
