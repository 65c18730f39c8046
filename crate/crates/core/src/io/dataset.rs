//! Dataset directories: one `<image_id>.f2dt` per image (array `image`,
//! shape `[H, W]`) plus a shared `annotations.json`.

use std::collections::BTreeMap;
use std::path::Path;

use super::json::{read_annotations, write_annotations};
use super::scene::{generate_scene, scene_id, SceneConfig};
use super::tensorfile::{read_tensor_file, write_tensor_file};
use crate::error::{Error, Result};
use crate::geometry::Annotation;
use crate::nn::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGE_EXTENSION: &str = "f2dt";
pub const IMAGE_ARRAY: &str = "image";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    /// `[H, W]` grayscale in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

/// Writes `samples` into `dir`, creating it if needed.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut all = Vec::new();
    for s in samples {
        let path = dir.join(format!("{}.{IMAGE_EXTENSION}", s.image_id));
        write_tensor_file(&path, &[(IMAGE_ARRAY.to_string(), s.image.clone())])?;
        all.extend(s.annotations.iter().cloned());
    }
    write_annotations(dir.join(ANNOTATIONS_FILE), &all)
}

/// Generates `count` scenes and writes them to `dir`.
pub fn generate_dataset(dir: impl AsRef<Path>, cfg: &SceneConfig, count: usize) -> Result<Vec<Sample>> {
    let samples = (0..count as u64)
        .map(|i| {
            let (image, annotations) = generate_scene(cfg, i)?;
            Ok(Sample {
                image_id: scene_id(i),
                image,
                annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset(dir, &samples)?;
    Ok(samples)
}

/// Loads every image file of `dir` (sorted by id) with its annotations.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut by_id: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(IMAGE_EXTENSION) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    for id in &ids {
        by_id.insert(id.clone(), Vec::new());
    }
    for a in read_annotations(dir.join(ANNOTATIONS_FILE))? {
        match by_id.get_mut(&a.image_id) {
            Some(v) => v.push(a),
            None => {
                return Err(Error::InvalidAnnotation(format!(
                    "annotation for `{}` has no image file in {}",
                    a.image_id,
                    dir.display()
                )))
            }
        }
    }
    let mut samples = Vec::with_capacity(ids.len());
    for (image_id, annotations) in by_id {
        let path = dir.join(format!("{image_id}.{IMAGE_EXTENSION}"));
        let image = read_tensor_file(&path)?
            .into_iter()
            .find(|(n, _)| n == IMAGE_ARRAY)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{}: no `{IMAGE_ARRAY}` array", path.display())))?;
        if image.shape().len() != 2 {
            return Err(Error::Format(format!(
                "{}: image must be [H, W], got {:?}",
                path.display(),
                image.shape()
            )));
        }
        samples.push(Sample {
            image_id,
            image,
            annotations,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            width: 64,
            height: 64,
            max_height: 60.0,
            ..SceneConfig::default()
        };
        let written = generate_dataset(dir.path(), &cfg, 3).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(written, loaded);
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &SceneConfig::default(), 0).unwrap();
        let text = std::fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(text.trim(), "[]");
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn orphan_annotation_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            width: 64,
            height: 64,
            max_height: 60.0,
            occlusion: 0.0,
            max_distractors: 0,
            ..SceneConfig::default()
        };
        generate_dataset(dir.path(), &cfg, 2).unwrap();
        std::fs::remove_file(dir.path().join("scene_00001.f2dt")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scene_00001"), "{err}");
    }
}
