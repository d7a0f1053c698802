use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use super::{
    Dataset, DatasetSpec, Image, LabeledSample, Manifest, Mask, PersonalDataset, Role, SourceDataset,
    UnlabeledSample, MANIFEST_FILE,
};
use crate::error::{Error, Result};

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut buf = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf[(y * w + x) * 3 + c] = (image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized for image");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.into_raw())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("buffer sized for mask");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

fn check_mask(id: &str, image: &Image, mask: &Mask, class_count: usize) -> Result<()> {
    LabeledSample::new(id, image.clone(), mask.clone(), class_count).map(|_| ())
}

/// Loads a dataset root described by its manifest. Samples come back sorted by id.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let root = &spec.root;
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.clone()));
    }
    let class_count = spec.manifest.class_count;
    let ids = list_ids(&root.join("images"))?;
    match spec.manifest.role {
        Role::Source => {
            let samples = ids
                .par_iter()
                .map(|id| {
                    let image = read_image(&image_path(root, id))?;
                    let mpath = mask_path(root, id);
                    if !mpath.exists() {
                        return Err(Error::InvalidSample {
                            id: id.clone(),
                            reason: format!("missing mask {}", mpath.display()),
                        });
                    }
                    let mask = read_mask(&mpath)?;
                    LabeledSample::new(id.clone(), image, mask, class_count)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::Source(SourceDataset {
                class_count,
                samples,
            }))
        }
        Role::Personal => {
            let user = spec.manifest.user.clone().unwrap_or_default();
            let samples = ids
                .par_iter()
                .map(|id| {
                    Ok(UnlabeledSample {
                        id: id.clone(),
                        user: user.clone(),
                        image: read_image(&image_path(root, id))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let eval_ids: Vec<String> = match &spec.manifest.val {
                Some(val) => val.clone(),
                None => ids
                    .iter()
                    .filter(|id| mask_path(root, id).exists())
                    .cloned()
                    .collect(),
            };
            let mut annotations = BTreeMap::new();
            for id in eval_ids {
                let Ok(pos) = samples.binary_search_by(|s: &UnlabeledSample| s.id.cmp(&id)) else {
                    return Err(Error::InvalidSample {
                        id,
                        reason: "listed in the evaluation split but has no image".into(),
                    });
                };
                let mask = read_mask(&mask_path(root, &id))?;
                check_mask(&id, &samples[pos].image, &mask, class_count)?;
                annotations.insert(id, mask);
            }
            Ok(Dataset::Personal(PersonalDataset {
                user,
                class_count,
                samples,
                annotations,
            }))
        }
    }
}

/// Writes a dataset in the layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let manifest = match dataset {
        Dataset::Source(d) => {
            d.samples.par_iter().try_for_each(|s| {
                write_image(&image_path(root, &s.id), &s.image)?;
                write_mask(&mask_path(root, &s.id), &s.mask)
            })?;
            Manifest {
                role: Role::Source,
                class_count: d.class_count,
                user: None,
                val: None,
            }
        }
        Dataset::Personal(d) => {
            d.samples
                .par_iter()
                .try_for_each(|s| write_image(&image_path(root, &s.id), &s.image))?;
            for (id, m) in &d.annotations {
                write_mask(&mask_path(root, id), m)?;
            }
            Manifest {
                role: Role::Personal,
                class_count: d.class_count,
                user: Some(d.user.clone()),
                val: Some(d.annotations.keys().cloned().collect()),
            }
        }
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantized_image(h: usize, w: usize, seed: usize) -> Image {
        let data = (0..3 * h * w)
            .map(|i| ((i * 37 + seed * 11) % 256) as f32 / 255.0)
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn source_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = ["b", "a", "c"]
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let mask = Mask::new(4, 5, (0..20).map(|v| (v % 3) as u8).collect()).unwrap();
                LabeledSample::new(*id, quantized_image(4, 5, i), mask, 3).unwrap()
            })
            .collect();
        let ds = Dataset::Source(SourceDataset {
            class_count: 3,
            samples: samples.clone(),
        });
        write_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(&DatasetSpec::open(dir.path()).unwrap())
            .unwrap()
            .into_source()
            .unwrap();
        let ids: Vec<_> = loaded.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        for s in &loaded.samples {
            let orig = samples.iter().find(|o| o.id == s.id).unwrap();
            assert_eq!(s, orig);
        }
    }

    #[test]
    fn out_of_range_mask_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let s = LabeledSample::new("img7", quantized_image(2, 2, 0), mask, 3).unwrap();
        write_dataset(
            dir.path(),
            &Dataset::Source(SourceDataset {
                class_count: 3,
                samples: vec![s],
            }),
        )
        .unwrap();
        write_mask(&dir.path().join("masks/img7.png"), &Mask::new(2, 2, vec![0, 3, 0, 0]).unwrap()).unwrap();
        let err = load_dataset(&DatasetSpec::open(dir.path()).unwrap()).unwrap_err();
        assert!(err.to_string().contains("img7"), "{err}");
    }

    #[test]
    fn personal_without_masks_is_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let d = PersonalDataset {
            user: "alice".into(),
            class_count: 2,
            samples: (0..3)
                .map(|i| UnlabeledSample {
                    id: format!("p{i}"),
                    user: "alice".into(),
                    image: quantized_image(3, 3, i),
                })
                .collect(),
            annotations: BTreeMap::new(),
        };
        write_dataset(dir.path(), &Dataset::Personal(d.clone())).unwrap();
        let loaded = load_dataset(&DatasetSpec::open(dir.path()).unwrap())
            .unwrap()
            .into_personal()
            .unwrap();
        assert_eq!(loaded, d);
        assert!(loaded.annotations.is_empty());
    }

    #[test]
    fn missing_root_is_an_error() {
        assert!(DatasetSpec::open("/nonexistent/dataset/root").is_err());
    }
}
