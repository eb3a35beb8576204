//! Image grids and the dataset-mask probe.

use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use super::classifier::{label_error, Classifier};
use super::translate;
use crate::data::annotated::to_rgb_image;
use crate::label::{LabelKind, LabelUniverse, UnifiedLabel};
use crate::nn::Generator;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridInfo {
    pub rows: usize,
    pub cols: usize,
    pub width: usize,
    pub height: usize,
}

/// Tiles `rows` (each a list of equally sized images) into one picture.
pub fn tile(rows: &[Vec<Array3<f64>>]) -> Result<Array3<f64>> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::Eval("empty grid".into()))?;
    let (h, w, _) = first.dim();
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Eval("grid rows differ in length".into()));
    }
    let mut out = Array3::zeros((rows.len() * h, cols * w, 3));
    for (i, row) in rows.iter().enumerate() {
        for (j, img) in row.iter().enumerate() {
            if img.dim() != (h, w, 3) {
                return Err(Error::Eval("grid images differ in size".into()));
            }
            out.slice_mut(s![i * h..(i + 1) * h, j * w..(j + 1) * w, ..]).assign(img);
        }
    }
    Ok(out)
}

/// Writes a PNG whose rows are the inputs: column 0 is the input, then one
/// column per target expression (resolved against that input's label).
pub fn emit_grid(
    generator: &Generator,
    universe: &LabelUniverse,
    inputs: &[(Array3<f64>, UnifiedLabel)],
    targets: &[String],
    path: &Path,
) -> Result<GridInfo> {
    if inputs.is_empty() || targets.is_empty() {
        return Err(Error::Eval("a grid needs at least one input and one target".into()));
    }
    let images: Vec<Array3<f64>> = inputs.iter().map(|(i, _)| i.clone()).collect();
    let mut columns = Vec::with_capacity(targets.len());
    for t in targets {
        let labels = inputs
            .iter()
            .map(|(_, l)| universe.resolve_target(t, Some(l)).map(|u| u.values().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        columns.push(translate(generator, &images, &labels)?);
    }
    let rows: Vec<Vec<Array3<f64>>> = (0..inputs.len())
        .map(|i| std::iter::once(images[i].clone()).chain(columns.iter().map(|c| c[i].clone())).collect())
        .collect();
    save_tiled(&rows, path)
}

fn save_tiled(rows: &[Vec<Array3<f64>>], path: &Path) -> Result<GridInfo> {
    let grid = tile(rows)?;
    let (height, width, _) = grid.dim();
    to_rgb_image(&grid)
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    Ok(GridInfo { rows: rows.len(), cols: rows[0].len(), width, height })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskProbe {
    /// Categorical dataset whose classes are requested.
    pub dataset: String,
    /// Dataset whose mask bit is set instead, in the wrong-mask condition.
    pub wrong_dataset: String,
    pub proper_error: f64,
    pub wrong_error: f64,
    /// Error of a judge that ignores the image: `1 − 1/K`.
    pub chance: f64,
    pub n_images: usize,
}

/// Requests every class of `dataset` for every input, once with the mask
/// pointing at `dataset` and once pointing at `wrong_dataset` (label
/// vectors identical otherwise), and scores both with `classifier`.
///
/// With `grid`, writes paired rows for the first `grid_inputs` inputs:
/// proper mask above, wrong mask below.
pub fn mask_probe(
    generator: &Generator,
    universe: &LabelUniverse,
    inputs: &[Array3<f64>],
    dataset: usize,
    wrong_dataset: usize,
    classifier: &dyn Classifier,
    grid: Option<(&Path, usize)>,
) -> Result<MaskProbe> {
    if universe.n() < 2 {
        return Err(Error::Eval("the mask probe needs at least two datasets".into()));
    }
    if dataset == wrong_dataset || dataset >= universe.n() || wrong_dataset >= universe.n() {
        return Err(Error::Eval("mask probe needs two distinct datasets".into()));
    }
    let ds = universe.dataset(dataset);
    if ds.kind() != LabelKind::Categorical {
        return Err(Error::Eval(format!("mask probe targets must be categorical; `{}` is not", ds.name())));
    }
    if inputs.is_empty() {
        return Err(Error::Eval("mask probe needs inputs".into()));
    }
    let mask = |i: usize| {
        let mut m = vec![0.0; universe.n()];
        m[i] = 1.0;
        m
    };
    let k = ds.dim();
    let (mut proper_err, mut wrong_err) = (0.0, 0.0);
    let mut grid_rows = Vec::new();
    let shown = grid.map_or(0, |(_, n)| n.min(inputs.len()));
    let mut per_class: Vec<(Vec<Array3<f64>>, Vec<Array3<f64>>)> = Vec::with_capacity(k);
    for c in 0..k {
        let want = ds.one_hot(c);
        let proper = universe.encode_with_mask_override(&want, dataset, &mask(dataset))?;
        let wrong = universe.encode_with_mask_override(&want, dataset, &mask(wrong_dataset))?;
        let good = translate(generator, inputs, &vec![proper; inputs.len()])?;
        let bad = translate(generator, inputs, &vec![wrong; inputs.len()])?;
        for (p, w) in classifier.predict(&good)?.iter().zip(classifier.predict(&bad)?) {
            proper_err += label_error(ds, p, &want);
            wrong_err += label_error(ds, &w, &want);
        }
        per_class.push((good[..shown].to_vec(), bad[..shown].to_vec()));
    }
    if let Some((path, _)) = grid {
        for i in 0..shown {
            let row = |pick: &dyn Fn(&(Vec<Array3<f64>>, Vec<Array3<f64>>)) -> Array3<f64>| {
                std::iter::once(inputs[i].clone()).chain(per_class.iter().map(pick)).collect::<Vec<_>>()
            };
            grid_rows.push(row(&|c| c.0[i].clone()));
            grid_rows.push(row(&|c| c.1[i].clone()));
        }
        save_tiled(&grid_rows, path)?;
    }
    let n = (inputs.len() * k) as f64;
    Ok(MaskProbe {
        dataset: ds.name().to_owned(),
        wrong_dataset: universe.dataset(wrong_dataset).name().to_owned(),
        proper_error: proper_err / n,
        wrong_error: wrong_err / n,
        chance: 1.0 - 1.0 / k as f64,
        n_images: inputs.len() * k,
    })
}
