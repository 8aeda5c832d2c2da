//! On-disk dataset layout.
//!
//! ```text
//! <root>/
//!   images/<name>.png                       8-bit RGB
//!   masks/<name>/<idx>_<slug>_<person>.png  8-bit gray, 0 or 255
//!   captions.jsonl                          {"image": name, "caption": text}
//!   meta/<name>.json                        exact labels and person ids
//!   meta/unification.json                   label map snapshot
//!   meta/ensembles.json                     ensemble table snapshot
//! ```
//!
//! Mask filenames embed a sanitized label for browsability only; the exact
//! label string lives in `meta/<name>.json`, which is the source of truth on
//! load, so labels may contain spaces, hyphens, or any other punctuation.
//! `captions.jsonl` fixes the sample order.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{Instance, LabeledSample};

#[derive(Debug, Serialize, Deserialize)]
struct CaptionRow {
    image: String,
    caption: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaInstance {
    index: usize,
    label: String,
    person: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    instances: Vec<MetaInstance>,
}

/// Filesystem-safe display form of a label: lowercase with every
/// non-alphanumeric run collapsed to a single `-`.
pub fn sanitize_label(label: &str) -> String {
    let mut out = String::new();
    let mut dash = true; // suppress leading dash
    for ch in label.to_lowercase().chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch);
            dash = false;
        } else if !dash {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push('x');
    }
    out
}

fn data_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {what}", path.display()))
}

/// Write an RGB `[3, H, W]` tensor (values in `[0, 1]`) as an 8-bit PNG.
pub fn image_to_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[1, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[2, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| data_err(path, e))
}

/// Read an 8-bit PNG into an RGB `[3, H, W]` tensor with values in `[0, 1]`.
pub fn png_to_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| data_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Write a mask as an 8-bit gray PNG (binarized at 0.5 into 0/255).
pub fn mask_to_png(mask: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([if v >= 0.5 { 255 } else { 0 }]));
    }
    img.save(path).map_err(|e| data_err(path, e))
}

/// Read a gray PNG into a binary mask (pixels >= 128 become 1.0).
pub fn png_to_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| data_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = if px.0[0] >= 128 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Canonical name for the `i`-th sample of a written dataset.
pub fn sample_name(i: usize) -> String {
    format!("sample_{i:04}")
}

fn mask_file(index: usize, label: &str, person: usize) -> String {
    format!("{index:02}_{}_{person}.png", sanitize_label(label))
}

/// Writes a dataset to `dir`, creating the full layout. Existing files with
/// the same names are overwritten.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[LabeledSample]) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let masks = dir.join("masks");
    let meta = dir.join("meta");
    for d in [&images, &masks, &meta] {
        std::fs::create_dir_all(d).map_err(|e| data_err(d, e))?;
    }

    let mut captions = String::new();
    for (i, sample) in samples.iter().enumerate() {
        sample.validate()?;
        let name = sample_name(i);
        image_to_png(&sample.image, &images.join(format!("{name}.png")))?;

        let mask_dir = masks.join(&name);
        std::fs::create_dir_all(&mask_dir).map_err(|e| data_err(&mask_dir, e))?;
        let mut metas = Vec::with_capacity(sample.instances.len());
        for (k, inst) in sample.instances.iter().enumerate() {
            mask_to_png(&inst.mask, &mask_dir.join(mask_file(k, &inst.label, inst.person)))?;
            metas.push(MetaInstance {
                index: k,
                label: inst.label.clone(),
                person: inst.person,
            });
        }
        let meta_path = meta.join(format!("{name}.json"));
        let body = serde_json::to_string_pretty(&MetaFile { instances: metas })
            .expect("meta serializes");
        std::fs::write(&meta_path, body).map_err(|e| data_err(&meta_path, e))?;

        let row = CaptionRow {
            image: name,
            caption: sample.caption.clone(),
        };
        captions.push_str(&serde_json::to_string(&row).expect("caption row serializes"));
        captions.push('\n');
    }
    let cap_path = dir.join("captions.jsonl");
    std::fs::write(&cap_path, captions).map_err(|e| data_err(&cap_path, e))?;

    // Self-describing metadata: the label map and ensembles used downstream.
    for (file, body) in [
        ("unification.json", include_str!("../assets/unification.json")),
        ("ensembles.json", include_str!("../assets/ensembles.json")),
    ] {
        let p = meta.join(file);
        std::fs::write(&p, body).map_err(|e| data_err(&p, e))?;
    }
    Ok(())
}

/// Loads a dataset written by [`save_dataset`]. Sample order follows
/// `captions.jsonl`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    Ok(load_dataset_named(dir)?.1)
}

/// Like [`load_dataset`], also returning each sample's on-disk name (the
/// key used by prediction and overlay directories).
pub fn load_dataset_named(dir: impl AsRef<Path>) -> Result<(Vec<String>, Vec<LabeledSample>)> {
    let dir = dir.as_ref();
    let cap_path = dir.join("captions.jsonl");
    let text = std::fs::read_to_string(&cap_path).map_err(|e| data_err(&cap_path, e))?;
    let mut names = Vec::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: CaptionRow = serde_json::from_str(line)
            .map_err(|e| data_err(&cap_path, format!("line {}: {e}", lineno + 1)))?;
        let image = png_to_image(&dir.join("images").join(format!("{}.png", row.image)))?;

        let meta_path = dir.join("meta").join(format!("{}.json", row.image));
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| data_err(&meta_path, e))?;
        let meta: MetaFile =
            serde_json::from_str(&meta_text).map_err(|e| data_err(&meta_path, e))?;

        let mask_dir: PathBuf = dir.join("masks").join(&row.image);
        let mut instances = Vec::with_capacity(meta.instances.len());
        for m in &meta.instances {
            let mask = png_to_mask(&mask_dir.join(mask_file(m.index, &m.label, m.person)))?;
            instances.push(Instance {
                mask,
                label: m.label.clone(),
                person: m.person,
            });
        }
        let sample = LabeledSample {
            image,
            caption: row.caption,
            instances,
        };
        sample.validate()?;
        names.push(row.image);
        out.push(sample);
    }
    if out.is_empty() {
        return Err(data_err(dir, "dataset has no samples"));
    }
    Ok((names, out))
}

// ---------------------------------------------------------------------------
// predictions
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PredInstanceMeta {
    index: usize,
    label: String,
    score: f64,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredSemanticMeta {
    label: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredMeta {
    instances: Vec<PredInstanceMeta>,
    semantic: Vec<PredSemanticMeta>,
}

fn bool_to_f64(mask: &Array2<bool>) -> Array2<f64> {
    mask.mapv(|b| if b { 1.0 } else { 0.0 })
}

/// Write per-image predictions under `dir/<name>/`: binary mask PNGs plus a
/// `meta.json` carrying exact labels and scores.
pub fn save_predictions(
    dir: impl AsRef<Path>,
    names: &[String],
    preds: &[crate::eval::ImagePrediction],
) -> Result<()> {
    let dir = dir.as_ref();
    if names.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} names for {} predictions",
            names.len(),
            preds.len()
        )));
    }
    for (name, pred) in names.iter().zip(preds) {
        let pdir = dir.join(name);
        std::fs::create_dir_all(&pdir).map_err(|e| data_err(&pdir, e))?;
        let mut meta = PredMeta {
            instances: Vec::new(),
            semantic: Vec::new(),
        };
        for (k, inst) in pred.instances.iter().enumerate() {
            let file = format!("instance_{k:02}_{}.png", sanitize_label(&inst.label));
            mask_to_png(&bool_to_f64(&inst.mask), &pdir.join(&file))?;
            meta.instances.push(PredInstanceMeta {
                index: k,
                label: inst.label.clone(),
                score: inst.score,
                file,
            });
        }
        for (k, (label, plane)) in pred.semantic.iter().enumerate() {
            let file = format!("semantic_{k:02}_{}.png", sanitize_label(label));
            mask_to_png(&bool_to_f64(plane), &pdir.join(&file))?;
            meta.semantic.push(PredSemanticMeta {
                label: label.clone(),
                file,
            });
        }
        let meta_path = pdir.join("meta.json");
        let body =
            serde_json::to_string_pretty(&meta).expect("prediction meta serializes");
        std::fs::write(&meta_path, body).map_err(|e| data_err(&meta_path, e))?;
    }
    Ok(())
}

/// Load predictions saved by [`save_predictions`]. A sample with no
/// prediction directory comes back as `None` so evaluation can flag it
/// rather than fail.
pub fn load_predictions(
    dir: impl AsRef<Path>,
    names: &[String],
) -> Result<Vec<Option<crate::eval::ImagePrediction>>> {
    let dir = dir.as_ref();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let pdir = dir.join(name);
        let meta_path = pdir.join("meta.json");
        if !meta_path.is_file() {
            out.push(None);
            continue;
        }
        let text = std::fs::read_to_string(&meta_path).map_err(|e| data_err(&meta_path, e))?;
        let meta: PredMeta =
            serde_json::from_str(&text).map_err(|e| data_err(&meta_path, e))?;
        let mut pred = crate::eval::ImagePrediction::default();
        for m in &meta.instances {
            let mask = png_to_mask(&pdir.join(&m.file))?.mapv(|v| v >= 0.5);
            pred.instances.push(crate::eval::PredInstance {
                mask,
                label: m.label.clone(),
                score: m.score,
            });
        }
        for m in &meta.semantic {
            let plane = png_to_mask(&pdir.join(&m.file))?.mapv(|v| v >= 0.5);
            pred.semantic.insert(m.label.clone(), plane);
        }
        out.push(Some(pred));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_dataset, SynthOptions};

    #[test]
    fn sanitizes_labels() {
        assert_eq!(sanitize_label("left hand"), "left-hand");
        assert_eq!(sanitize_label("One-Piece Outfit"), "one-piece-outfit");
        assert_eq!(sanitize_label("  weird__label!! "), "weird-label");
        assert_eq!(sanitize_label("--"), "x");
    }

    #[test]
    fn round_trips_synthetic_dataset_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic_dataset(4, 1, &SynthOptions::default()).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.image, b.image, "images must be PNG-exact");
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.instances.len(), b.instances.len());
            for (x, y) in a.instances.iter().zip(&b.instances) {
                assert_eq!(x.label, y.label);
                assert_eq!(x.person, y.person);
                assert_eq!(x.mask, y.mask);
            }
        }
    }

    #[test]
    fn layout_matches_contract() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic_dataset(1, 2, &SynthOptions::default()).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        assert!(dir.path().join("images/sample_0000.png").is_file());
        assert!(dir.path().join("captions.jsonl").is_file());
        assert!(dir.path().join("meta/sample_0000.json").is_file());
        assert!(dir.path().join("meta/unification.json").is_file());
        assert!(dir.path().join("meta/ensembles.json").is_file());
        let mask_dir = dir.path().join("masks/sample_0000");
        let n_masks = std::fs::read_dir(&mask_dir).unwrap().count();
        assert_eq!(n_masks, samples[0].instances.len());
        // Filenames carry index, slug, and person id.
        let first = std::fs::read_dir(&mask_dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .find(|n| n.starts_with("00_"))
            .expect("mask with index 0");
        assert!(first.ends_with(".png"));
    }

    #[test]
    fn missing_pieces_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Data(_))
        ));
        let samples = generate_synthetic_dataset(1, 3, &SynthOptions::default()).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        std::fs::remove_file(dir.path().join("images/sample_0000.png")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn named_loading_reports_on_disk_names() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic_dataset(3, 4, &SynthOptions::default()).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let (names, loaded) = load_dataset_named(dir.path()).unwrap();
        assert_eq!(names, vec!["sample_0000", "sample_0001", "sample_0002"]);
        assert_eq!(loaded.len(), 3);
    }

    #[test]
    fn predictions_round_trip_with_missing_entries_as_none() {
        use crate::eval::{ImagePrediction, PredInstance};
        use ndarray::Array2;

        let dir = tempfile::tempdir().unwrap();
        let mut mask = Array2::from_elem((6, 5), false);
        mask[[2, 3]] = true;
        mask[[4, 1]] = true;
        let mut pred = ImagePrediction::default();
        pred.instances.push(PredInstance {
            mask: mask.clone(),
            label: "One-Piece Outfit".to_string(),
            score: 0.625, // representable exactly, so JSON round-trips it
        });
        pred.semantic.insert("face".to_string(), mask.clone());

        let names = vec!["sample_0000".to_string(), "sample_0001".to_string()];
        save_predictions(dir.path(), &names[..1], &[pred.clone()]).unwrap();

        let loaded = load_predictions(dir.path(), &names).unwrap();
        assert_eq!(loaded.len(), 2);
        let got = loaded[0].as_ref().expect("saved prediction loads");
        assert_eq!(got.instances.len(), 1);
        assert_eq!(got.instances[0].label, "One-Piece Outfit");
        assert_eq!(got.instances[0].score, 0.625);
        assert_eq!(got.instances[0].mask, mask);
        assert_eq!(got.semantic["face"], mask);
        assert!(loaded[1].is_none(), "absent directory must load as None");
    }

    #[test]
    fn prediction_name_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(save_predictions(dir.path(), &names, &[]).is_err());
    }
}
