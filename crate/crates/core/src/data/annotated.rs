//! Annotated image folders.
//!
//! Layout: `root/images/<file>` plus `root/annotations.txt`, whose first line
//! names the attributes and whose remaining lines read `file v1 v2 …` with
//! values in {−1, 1} or {0, 1}. A leading line holding only an image count
//! (as in the public CelebA attribute list) is skipped.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{denormalize, ImageRecord, PreprocessSpec};
use crate::label::DatasetSpec;
use crate::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
pub const IMAGES_DIR: &str = "images";

/// How the listing is divided into train and test records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// This many randomly chosen records go to the test side.
    Holdout(usize),
    /// This many randomly chosen records go to the train side.
    Train(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub attributes: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (_, mut header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty annotation file", path.display())))?;
    if header.parse::<u64>().is_ok() {
        header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: missing attribute header", path.display())))?
            .1;
    }
    let attributes: Vec<String> = header.split_whitespace().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (n, line) in lines {
        let mut parts = line.split_whitespace();
        let file = parts.next().unwrap_or_default().to_owned();
        let values = parts
            .map(|v| match v {
                "1" => Ok(1.0),
                "0" | "-1" => Ok(0.0),
                other => Err(Error::Data(format!(
                    "{}:{n}: `{file}` has attribute value `{other}`, expected -1, 0 or 1",
                    path.display()
                ))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != attributes.len() {
            return Err(Error::Data(format!(
                "{}:{n}: `{file}` has {} values for {} attributes",
                path.display(),
                values.len(),
                attributes.len()
            )));
        }
        rows.push((file, values));
    }
    Ok(Annotations { attributes, rows })
}

/// Loads, validates and preprocesses every listed image, then splits.
///
/// The dataset's label names pick (and order) columns out of the annotation
/// file; a categorical dataset requires exactly one active column per row.
pub fn load_annotated_folder<R: Rng + ?Sized>(
    root: &Path,
    spec: &DatasetSpec,
    preprocess: &PreprocessSpec,
    split: Split,
    rng: &mut R,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    preprocess.validate()?;
    let ann = read_annotations(&root.join(ANNOTATIONS_FILE))?;
    let columns = spec
        .label_names()
        .iter()
        .map(|name| {
            ann.attributes.iter().position(|a| a == name).ok_or_else(|| {
                Error::Data(format!(
                    "dataset `{}`: attribute `{name}` is not in {} (available: {})",
                    spec.name(),
                    root.join(ANNOTATIONS_FILE).display(),
                    ann.attributes.join(", ")
                ))
            })
        })
        .collect::<Result<Vec<usize>>>()?;

    let mut records = Vec::with_capacity(ann.rows.len());
    for (file, values) in &ann.rows {
        let label: Vec<f64> = columns.iter().map(|&c| values[c]).collect();
        spec.validate(&label)
            .map_err(|e| Error::Data(format!("record `{file}`: {e}")))?;
        let path = root.join(IMAGES_DIR).join(file);
        let img = image::open(&path)
            .map_err(|e| Error::Image { path: path.clone(), source: e })?
            .to_rgb8();
        let pixels = preprocess
            .apply(&img)
            .map_err(|e| Error::Data(format!("record `{file}`: {e}")))?;
        records.push(ImageRecord { pixels, label, source_path: path.display().to_string() });
    }
    split_records(records, split, rng)
}

/// Randomly partitions records; each side keeps the listing order.
pub fn split_records<R: Rng + ?Sized>(
    records: Vec<ImageRecord>,
    split: Split,
    rng: &mut R,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let n = records.len();
    let n_test = match split {
        Split::Holdout(k) => k,
        Split::Train(k) => n.checked_sub(k).ok_or_else(|| {
            Error::Data(format!("requested {k} training records but only {n} exist"))
        })?,
    };
    if n_test > n {
        return Err(Error::Data(format!("requested {n_test} held-out records but only {n} exist")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (rec, t) in records.into_iter().zip(is_test) {
        if t { test.push(rec) } else { train.push(rec) }
    }
    Ok((train, test))
}

pub fn to_rgb_image(pixels: &Array3<f64>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = |k| denormalize(pixels[[y as usize, x as usize, k]]);
        image::Rgb([p(0), p(1), p(2)])
    })
}

/// Writes `records` as PNGs plus an annotation file with ±1 values. The
/// target directory must be missing or empty.
pub fn write_annotated_folder(root: &Path, attributes: &[String], records: &[(String, Vec<f64>, Array3<f64>)]) -> Result<()> {
    if root.exists() {
        let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(Error::Data(format!("refusing to write into non-empty directory {}", root.display())));
        }
    }
    let images = root.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let ann_path = root.join(ANNOTATIONS_FILE);
    let mut ann = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut text = attributes.join(" ");
    text.push('\n');
    for (file, label, pixels) in records {
        let path = images.join(file);
        to_rgb_image(pixels)
            .save(&path)
            .map_err(|e| Error::Image { path: path.clone(), source: e })?;
        text.push_str(file);
        for v in label {
            text.push_str(if *v == 1.0 { " 1" } else { " -1" });
        }
        text.push('\n');
    }
    ann.write_all(text.as_bytes()).map_err(|e| Error::io(&ann_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Crop;
    use crate::label::LabelKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_ann(dir: &Path, text: &str) {
        fs::write(dir.join(ANNOTATIONS_FILE), text).unwrap();
    }

    #[test]
    fn celeba_count_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_ann(dir.path(), "2\nBlack_Hair Male Young\na.jpg -1 1 1\nb.jpg 1 -1 -1\n");
        let ann = read_annotations(&dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(ann.attributes, ["Black_Hair", "Male", "Young"]);
        assert_eq!(ann.rows[1], ("b.jpg".to_owned(), vec![1.0, 0.0, 0.0]));
    }

    #[test]
    fn bad_values_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_ann(dir.path(), "A B\nx.png 1 2\n");
        let err = read_annotations(&dir.path().join(ANNOTATIONS_FILE)).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("x.png"), "{err}");
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("set");
        let names = vec!["red".to_owned(), "green".to_owned()];
        let px = |v: f64| Array3::from_elem((8, 8, 3), v);
        let recs = vec![
            ("a.png".to_owned(), vec![1.0, 0.0], px(-1.0)),
            ("b.png".to_owned(), vec![0.0, 1.0], px(1.0)),
            ("c.png".to_owned(), vec![1.0, 0.0], px(0.0)),
        ];
        write_annotated_folder(&root, &names, &recs).unwrap();
        assert!(write_annotated_folder(&root, &names, &recs).is_err());

        let spec = DatasetSpec::new("hue", LabelKind::Categorical, ["green", "red"]).unwrap();
        let pre = PreprocessSpec::new(Crop::None, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, test) = load_annotated_folder(&root, &spec, &pre, Split::Holdout(1), &mut rng).unwrap();
        assert_eq!((train.len(), test.len()), (2, 1));
        let all: Vec<&ImageRecord> = train.iter().chain(&test).collect();
        let b = all.iter().find(|r| r.source_path.ends_with("b.png")).unwrap();
        assert_eq!(b.label, vec![1.0, 0.0]);
        assert_eq!(b.pixels[[0, 0, 0]], 1.0);
    }

    #[test]
    fn invalid_records_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join(IMAGES_DIR)).unwrap();
        write_ann(root, "red green\nmissing.png 1 -1\n");
        let spec = DatasetSpec::new("hue", LabelKind::Categorical, ["red", "green"]).unwrap();
        let pre = PreprocessSpec::new(Crop::None, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = load_annotated_folder(root, &spec, &pre, Split::Holdout(0), &mut rng).unwrap_err().to_string();
        assert!(err.contains("missing.png"), "{err}");

        write_ann(root, "red green\ntwo.png 1 1\n");
        let err = load_annotated_folder(root, &spec, &pre, Split::Holdout(0), &mut rng).unwrap_err().to_string();
        assert!(err.contains("two.png") && err.contains("categorical"), "{err}");

        let spec = DatasetSpec::new("hue", LabelKind::Categorical, ["red", "blue"]).unwrap();
        let err = load_annotated_folder(root, &spec, &pre, Split::Holdout(0), &mut rng).unwrap_err().to_string();
        assert!(err.contains("blue"), "{err}");
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let recs: Vec<ImageRecord> = (0..20)
            .map(|i| ImageRecord { pixels: Array3::zeros((1, 1, 3)), label: vec![], source_path: i.to_string() })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (train, test) = split_records(recs, Split::Train(15), &mut rng).unwrap();
        assert_eq!((train.len(), test.len()), (15, 5));
        let mut ids: Vec<usize> = train.iter().chain(&test).map(|r| r.source_path.parse().unwrap()).collect();
        ids.sort();
        assert_eq!(ids, (0..20).collect::<Vec<_>>());
    }
}
