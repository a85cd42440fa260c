//! On-disk dataset layout and its loader.
//!
//! A dataset root holds three directories with files matched by stem:
//!
//! ```text
//! root/
//!   images/<stem>.ppm     8-bit RGB (P6)
//!   saliency/<stem>.pgm   binary object mask (P5): 0 background, 255 object
//!   labels/<stem>.pgm     class ids (P5), 255 = ignore — optional
//! ```
//!
//! Every image must have a saliency mask; label maps are required only by
//! callers that evaluate against ground truth. Files are ingested in
//! parallel but samples keep the sorted-stem order, so the resulting
//! [`Dataset`] is identical regardless of thread count.

use std::path::Path;

use maskcontrast_core::data::{Dataset, LabelMap, Sample};
use maskcontrast_core::error::{Error, Result};
use maskcontrast_core::maskcontrast::ObjectMask;
use maskcontrast_core::tensor::Tensor;
use rayon::prelude::*;

use crate::netpbm::{read_pgm, read_ppm, Raster};

/// Converts an interleaved 8-bit RGB raster to a planar `[3, H, W]` tensor
/// with values in `[0, 1]`.
pub fn image_tensor(raster: &Raster) -> Tensor<f32> {
    let (w, h) = (raster.width, raster.height);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raster.data[i * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("shape matches construction")
}

/// Interprets a grayscale raster as a binary object mask. Any value other
/// than 0 or 255 is rejected — a mask with shades is evidence of a rescaled
/// or mislabeled file, not information.
fn object_mask(path: &Path, raster: &Raster) -> Result<ObjectMask> {
    if let Some(i) = raster.data.iter().position(|&v| v != 0 && v != 255) {
        return Err(Error::Data(format!(
            "mask {} holds value {} at pixel {} (row {}, column {}); masks must be 0 or 255",
            path.display(),
            raster.data[i],
            i,
            i / raster.width,
            i % raster.width,
        )));
    }
    let (w, data) = (raster.width, raster.data.clone());
    Ok(ObjectMask::from_fn(w, raster.height, move |y, x| {
        data[y * w + x] == 255
    }))
}

/// Sorted stems of all `*.<ext>` files directly inside `dir`.
fn list_stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn require_dir(dir: &Path, role: &str) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "{role} directory {} does not exist",
            dir.display()
        )));
    }
    Ok(())
}

/// Checks that `dir` holds `<stem>.pgm` for every stem, or reports every
/// missing one at once.
fn require_matching_pgms(dir: &Path, stems: &[String], role: &str) -> Result<()> {
    let missing: Vec<&str> = stems
        .iter()
        .filter(|stem| !dir.join(format!("{stem}.pgm")).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} image(s) lack a {role} file in {}: {}",
            missing.len(),
            dir.display(),
            missing.join(", ")
        )));
    }
    Ok(())
}

/// One ingested file triple, before empty-mask filtering.
struct LoadedSample {
    stem: String,
    /// `None` when the mask has no foreground pixel.
    sample: Option<Sample>,
}

fn load_one(root: &Path, stem: &str, want_labels: bool) -> Result<LoadedSample> {
    let image_path = root.join("images").join(format!("{stem}.ppm"));
    let mask_path = root.join("saliency").join(format!("{stem}.pgm"));
    let label_path = root.join("labels").join(format!("{stem}.pgm"));

    let image = image_tensor(&read_ppm(&image_path)?);
    let saliency = object_mask(&mask_path, &read_pgm(&mask_path)?)?;
    if saliency.is_empty() {
        return Ok(LoadedSample {
            stem: stem.to_string(),
            sample: None,
        });
    }
    let labels = if want_labels && label_path.is_file() {
        let raster = read_pgm(&label_path)?;
        Some(LabelMap::new(raster.width, raster.height, raster.data)?)
    } else {
        None
    };
    Ok(LoadedSample {
        stem: stem.to_string(),
        sample: Some(Sample {
            id: stem.to_string(),
            image,
            saliency,
            labels,
        }),
    })
}

/// Loads a dataset root. With `require_labels`, every image must come with
/// a label map; otherwise label maps are attached opportunistically.
///
/// Images whose saliency mask has no foreground pixel are excluded with a
/// warning: they carry no object to learn from or to score.
pub fn load_dataset(root: impl AsRef<Path>, require_labels: bool) -> Result<Dataset> {
    let root = root.as_ref();
    let images_dir = root.join("images");
    let saliency_dir = root.join("saliency");
    let labels_dir = root.join("labels");

    require_dir(&images_dir, "images")?;
    require_dir(&saliency_dir, "saliency")?;
    let stems = list_stems(&images_dir, "ppm")?;
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm images found in {}",
            images_dir.display()
        )));
    }
    require_matching_pgms(&saliency_dir, &stems, "saliency")?;
    if require_labels {
        require_dir(&labels_dir, "labels")?;
        require_matching_pgms(&labels_dir, &stems, "label")?;
    }

    let want_labels = require_labels || labels_dir.is_dir();
    let loaded: Vec<Result<LoadedSample>> = stems
        .par_iter()
        .map(|stem| load_one(root, stem, want_labels))
        .collect();

    let mut samples = Vec::with_capacity(stems.len());
    for result in loaded {
        let item = result?;
        match item.sample {
            Some(sample) => samples.push(sample),
            None => log::warn!(
                "image '{}' has an empty saliency mask; excluded from the dataset",
                item.stem
            ),
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "every image under {} has an empty saliency mask",
            root.display()
        )));
    }
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netpbm::{write_pgm, write_ppm};

    /// Writes one triple; `mask_on` selects foreground pixels.
    fn write_triple(root: &Path, stem: &str, size: usize, mask_on: impl Fn(usize, usize) -> bool, with_labels: bool) {
        for sub in ["images", "saliency", "labels"] {
            std::fs::create_dir_all(root.join(sub)).unwrap();
        }
        let rgb: Vec<u8> = (0..size * size * 3).map(|i| (i % 251) as u8).collect();
        write_ppm(root.join("images").join(format!("{stem}.ppm")), size, size, &rgb).unwrap();
        let mask: Vec<u8> = (0..size * size)
            .map(|i| if mask_on(i / size, i % size) { 255 } else { 0 })
            .collect();
        write_pgm(root.join("saliency").join(format!("{stem}.pgm")), size, size, &mask).unwrap();
        if with_labels {
            let labels: Vec<u8> = (0..size * size)
                .map(|i| if mask_on(i / size, i % size) { 1 } else { 0 })
                .collect();
            write_pgm(root.join("labels").join(format!("{stem}.pgm")), size, size, &labels).unwrap();
        }
    }

    #[test]
    fn loads_triples_in_sorted_stem_order() {
        let dir = tempfile::tempdir().unwrap();
        for stem in ["zebra", "apple", "mango"] {
            write_triple(dir.path(), stem, 8, |y, _| y < 4, true);
        }
        let data = load_dataset(dir.path(), true).unwrap();
        let ids: Vec<&str> = data.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["apple", "mango", "zebra"]);
        assert!(data.fully_labeled());
        let s = data.get(0);
        assert_eq!(s.image.shape(), &[3, 8, 8]);
        assert_eq!(s.saliency.foreground_count(), 32);
    }

    #[test]
    fn image_values_are_scaled_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("saliency")).unwrap();
        write_ppm(
            dir.path().join("images/a.ppm"),
            1,
            1,
            &[255, 0, 51],
        )
        .unwrap();
        write_pgm(dir.path().join("saliency/a.pgm"), 1, 1, &[255]).unwrap();
        let data = load_dataset(dir.path(), false).unwrap();
        let img = &data.get(0).image;
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert!((img.data()[2] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn missing_saliency_directory_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        write_ppm(dir.path().join("images/a.ppm"), 2, 2, &[0; 12]).unwrap();
        let err = load_dataset(dir.path(), false).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
        assert!(err.to_string().contains("saliency"));
    }

    #[test]
    fn missing_mask_files_are_listed_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_triple(dir.path(), "a", 4, |_, _| true, false);
        write_triple(dir.path(), "b", 4, |_, _| true, false);
        std::fs::remove_file(dir.path().join("saliency/b.pgm")).unwrap();
        let err = load_dataset(dir.path(), false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('b') && msg.contains("saliency"), "message was: {msg}");
    }

    #[test]
    fn labels_are_optional_until_required() {
        let dir = tempfile::tempdir().unwrap();
        write_triple(dir.path(), "a", 4, |_, _| true, false);
        let data = load_dataset(dir.path(), false).unwrap();
        assert!(!data.fully_labeled());
        let err = load_dataset(dir.path(), true).unwrap_err();
        assert!(err.to_string().contains("label"));
    }

    #[test]
    fn empty_mask_images_are_excluded() {
        let dir = tempfile::tempdir().unwrap();
        write_triple(dir.path(), "full", 4, |_, _| true, false);
        write_triple(dir.path(), "empty", 4, |_, _| false, false);
        let data = load_dataset(dir.path(), false).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.get(0).id, "full");
    }

    #[test]
    fn gray_mask_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_triple(dir.path(), "a", 4, |_, _| true, false);
        let mut mask = vec![255u8; 16];
        mask[5] = 128;
        write_pgm(dir.path().join("saliency/a.pgm"), 4, 4, &mask).unwrap();
        let err = load_dataset(dir.path(), false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("128") && msg.contains("row 1"), "message was: {msg}");
    }

    #[test]
    fn corrupt_image_header_reports_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_triple(dir.path(), "a", 4, |_, _| true, false);
        std::fs::write(dir.path().join("images/a.ppm"), b"P6\n4 4\n200\n").unwrap();
        let err = load_dataset(dir.path(), false).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 7),
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn mismatched_mask_geometry_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_triple(dir.path(), "a", 4, |_, _| true, false);
        write_pgm(dir.path().join("saliency/a.pgm"), 2, 2, &[255; 4]).unwrap();
        assert!(load_dataset(dir.path(), false).is_err());
    }
}
