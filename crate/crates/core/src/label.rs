//! Domain labels: per-dataset label semantics, the unified label with its
//! dataset mask, target sampling and spatial replication.
//!
//! A unified label concatenates one slice per dataset followed by a one-hot
//! mask over datasets: `[c_1, …, c_n, m]`. Only the slice of the dataset the
//! sample came from is populated; the other slices are zero. With a single
//! dataset no mask is appended.

use std::collections::HashSet;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// Independent 0/1 attributes, any number of which may be set.
    BinaryAttributes,
    /// Exactly one class is active.
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDatasetSpec", into = "RawDatasetSpec")]
pub struct DatasetSpec {
    name: String,
    kind: LabelKind,
    label_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawDatasetSpec {
    name: String,
    kind: LabelKind,
    labels: Vec<String>,
}

impl TryFrom<RawDatasetSpec> for DatasetSpec {
    type Error = Error;
    fn try_from(raw: RawDatasetSpec) -> Result<Self> {
        DatasetSpec::new(raw.name, raw.kind, raw.labels)
    }
}

impl From<DatasetSpec> for RawDatasetSpec {
    fn from(s: DatasetSpec) -> Self {
        RawDatasetSpec {
            name: s.name,
            kind: s.kind,
            labels: s.label_names,
        }
    }
}

impl DatasetSpec {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        kind: LabelKind,
        label_names: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let name = name.into();
        let label_names: Vec<String> = label_names.into_iter().map(Into::into).collect();
        if label_names.is_empty() {
            return Err(Error::Label(format!("dataset `{name}` declares no labels")));
        }
        let mut seen = HashSet::new();
        for l in &label_names {
            if !seen.insert(l.as_str()) {
                return Err(Error::Label(format!("dataset `{name}` repeats label `{l}`")));
            }
        }
        if kind == LabelKind::Categorical && label_names.len() < 2 {
            // A single class cannot be translated to anything.
            log::warn!("categorical dataset `{name}` has a single class");
        }
        Ok(Self {
            name,
            kind,
            label_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == label)
    }

    /// Checks a raw label against this dataset's kind.
    pub fn validate(&self, label: &[f64]) -> Result<()> {
        if label.len() != self.dim() {
            return Err(Error::Label(format!(
                "dataset `{}` expects {} label entries, got {}",
                self.name,
                self.dim(),
                label.len()
            )));
        }
        if let Some(v) = label.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Label(format!(
                "dataset `{}`: label entry {v} is not 0 or 1",
                self.name
            )));
        }
        if self.kind == LabelKind::Categorical {
            let ones = label.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 {
                return Err(Error::Label(format!(
                    "dataset `{}` is categorical but the label has {ones} active entries",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// One-hot label for class `k` of a categorical dataset (or attribute `k`
    /// alone for a binary one).
    pub fn one_hot(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        v[k] = 1.0;
        v
    }
}

/// The ordered list of datasets sharing one generator and discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DatasetSpec>", into = "Vec<DatasetSpec>")]
pub struct LabelUniverse {
    datasets: Vec<DatasetSpec>,
}

impl TryFrom<Vec<DatasetSpec>> for LabelUniverse {
    type Error = Error;
    fn try_from(d: Vec<DatasetSpec>) -> Result<Self> {
        LabelUniverse::new(d)
    }
}

impl From<LabelUniverse> for Vec<DatasetSpec> {
    fn from(u: LabelUniverse) -> Self {
        u.datasets
    }
}

impl LabelUniverse {
    pub fn new(datasets: Vec<DatasetSpec>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Label("label universe needs at least one dataset".into()));
        }
        let mut names = HashSet::new();
        for d in &datasets {
            if !names.insert(d.name()) {
                return Err(Error::Label(format!("dataset name `{}` is used twice", d.name())));
            }
        }
        Ok(Self { datasets })
    }

    pub fn single(dataset: DatasetSpec) -> Self {
        Self {
            datasets: vec![dataset],
        }
    }

    pub fn datasets(&self) -> &[DatasetSpec] {
        &self.datasets
    }

    pub fn dataset(&self, i: usize) -> &DatasetSpec {
        &self.datasets[i]
    }

    pub fn dataset_index(&self, name: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d.name() == name)
    }

    /// Number of datasets (the mask length when a mask is present).
    pub fn n(&self) -> usize {
        self.datasets.len()
    }

    pub fn has_mask(&self) -> bool {
        self.n() >= 2
    }

    /// Σ of per-dataset dims: the width of the classifier head.
    pub fn total_label_dim(&self) -> usize {
        self.datasets.iter().map(DatasetSpec::dim).sum()
    }

    /// Width of the generator's conditioning vector.
    pub fn unified_dim(&self) -> usize {
        self.total_label_dim() + if self.has_mask() { self.n() } else { 0 }
    }

    /// Offset of dataset `i`'s slice inside the unified vector (and inside
    /// the classifier logits, which share the layout minus the mask).
    pub fn offset(&self, i: usize) -> usize {
        self.datasets[..i].iter().map(DatasetSpec::dim).sum()
    }

    fn check_origin(&self, origin: usize) -> Result<()> {
        if origin >= self.n() {
            return Err(Error::Label(format!(
                "dataset index {origin} out of range for {} datasets",
                self.n()
            )));
        }
        Ok(())
    }

    fn place(&self, label: &[f64], origin: usize, mask_at: Option<usize>) -> Vec<f64> {
        let mut values = vec![0.0; self.unified_dim()];
        let off = self.offset(origin);
        values[off..off + label.len()].copy_from_slice(label);
        if let Some(m) = mask_at {
            values[self.total_label_dim() + m] = 1.0;
        }
        values
    }

    pub fn encode_unified(&self, label: &[f64], origin: usize) -> Result<UnifiedLabel> {
        self.check_origin(origin)?;
        self.datasets[origin].validate(label)?;
        let mask = self.has_mask().then_some(origin);
        Ok(UnifiedLabel {
            values: self.place(label, origin, mask),
            origin,
        })
    }

    /// Like [`encode_unified`](Self::encode_unified) but with a caller-chosen
    /// mask, which may disagree with `origin`. The origin slice must hold 0/1
    /// entries but need not be a valid label (an all-zero slice is allowed).
    ///
    /// Only meant for probing a trained model; training never calls it.
    pub fn encode_with_mask_override(&self, label: &[f64], origin: usize, mask: &[f64]) -> Result<Vec<f64>> {
        self.check_origin(origin)?;
        if !self.has_mask() {
            return Err(Error::Label("mask override needs at least two datasets".into()));
        }
        if mask.len() != self.n() {
            return Err(Error::Label(format!(
                "mask has length {}, expected {}",
                mask.len(),
                self.n()
            )));
        }
        let hot: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        if hot.len() != 1 || mask[hot[0]] != 1.0 {
            return Err(Error::Label(format!("mask {mask:?} is not one-hot")));
        }
        let ds = &self.datasets[origin];
        if label.len() != ds.dim() {
            return Err(Error::Label(format!(
                "dataset `{}` expects {} label entries, got {}",
                ds.name(),
                ds.dim(),
                label.len()
            )));
        }
        if label.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Label("label entries must be 0 or 1".into()));
        }
        Ok(self.place(label, origin, Some(hot[0])))
    }

    /// Recovers the dataset-local label and origin from a unified vector.
    pub fn decode(&self, unified: &UnifiedLabel) -> Result<(Vec<f64>, usize)> {
        self.check_origin(unified.origin)?;
        if unified.values.len() != self.unified_dim() {
            return Err(Error::Label(format!(
                "unified label has length {}, expected {}",
                unified.values.len(),
                self.unified_dim()
            )));
        }
        Ok((unified.slice(self).to_vec(), unified.origin))
    }

    /// Checks every invariant of a unified label.
    pub fn check(&self, unified: &UnifiedLabel) -> Result<()> {
        let (label, origin) = self.decode(unified)?;
        self.datasets[origin].validate(&label)?;
        for j in (0..self.n()).filter(|&j| j != origin) {
            let off = self.offset(j);
            if unified.values[off..off + self.datasets[j].dim()].iter().any(|&v| v != 0.0) {
                return Err(Error::Label(format!("slice of dataset {j} is not zero")));
            }
        }
        if self.has_mask() {
            let m = &unified.values[self.total_label_dim()..];
            if m.iter().enumerate().any(|(i, &v)| v != if i == origin { 1.0 } else { 0.0 }) {
                return Err(Error::Label(format!("mask {m:?} is not one-hot at {origin}")));
            }
        }
        Ok(())
    }

    /// Resolves a target expression such as `blond+male` or `happy` against
    /// the datasets, starting from `base` when it belongs to the same dataset.
    ///
    /// Tokens are joined with `+`. A bare name sets a binary attribute to 1 or
    /// selects a categorical class; `!name` clears and `~name` toggles a
    /// binary attribute. Names may be qualified as `dataset.label`.
    pub fn resolve_target(&self, expr: &str, base: Option<&UnifiedLabel>) -> Result<UnifiedLabel> {
        let mut origin: Option<usize> = None;
        let mut ops: Vec<(char, usize)> = Vec::new();
        for raw in expr.split('+').map(str::trim) {
            if raw.is_empty() {
                return Err(Error::Label(format!("empty token in target `{expr}`")));
            }
            let (op, name) = match raw.chars().next() {
                Some(c @ ('!' | '~')) => (c, &raw[1..]),
                _ => ('=', raw),
            };
            let (ds, idx) = self.lookup_label(name)?;
            match origin {
                None => origin = Some(ds),
                Some(o) if o != ds => {
                    return Err(Error::Label(format!(
                        "target `{expr}` mixes labels of `{}` and `{}`",
                        self.datasets[o].name(),
                        self.datasets[ds].name()
                    )))
                }
                _ => {}
            }
            if op != '=' && self.datasets[ds].kind() == LabelKind::Categorical {
                return Err(Error::Label(format!("`{raw}`: categorical labels cannot be cleared or toggled")));
            }
            ops.push((op, idx));
        }
        let origin = origin.expect("split yields at least one token");
        let ds = &self.datasets[origin];
        let mut label = match base {
            Some(b) if b.origin == origin => b.slice(self).to_vec(),
            _ => vec![0.0; ds.dim()],
        };
        for (op, idx) in ops {
            match (ds.kind(), op) {
                (LabelKind::Categorical, _) => {
                    label.iter_mut().for_each(|v| *v = 0.0);
                    label[idx] = 1.0;
                }
                (LabelKind::BinaryAttributes, '=') => label[idx] = 1.0,
                (LabelKind::BinaryAttributes, '!') => label[idx] = 0.0,
                (LabelKind::BinaryAttributes, _) => label[idx] = 1.0 - label[idx],
            }
        }
        self.encode_unified(&label, origin)
    }

    fn lookup_label(&self, name: &str) -> Result<(usize, usize)> {
        let candidates: Vec<(usize, usize)> = match name.split_once('.') {
            Some((ds, label)) => self
                .dataset_index(ds)
                .and_then(|d| self.datasets[d].index_of(label).map(|l| (d, l)))
                .into_iter()
                .collect(),
            None => self
                .datasets
                .iter()
                .enumerate()
                .filter_map(|(d, s)| s.index_of(name).map(|l| (d, l)))
                .collect(),
        };
        match candidates.as_slice() {
            [one] => Ok(*one),
            [] => Err(Error::Label(format!(
                "unknown domain `{name}`; valid names: {}",
                self.all_label_names().join(", ")
            ))),
            _ => Err(Error::Label(format!(
                "domain `{name}` is ambiguous; qualify it as dataset.label"
            ))),
        }
    }

    /// Every label name, qualified with its dataset when there are several.
    pub fn all_label_names(&self) -> Vec<String> {
        self.datasets
            .iter()
            .flat_map(|d| {
                d.label_names().iter().map(move |l| {
                    if self.has_mask() {
                        format!("{}.{l}", d.name())
                    } else {
                        l.clone()
                    }
                })
            })
            .collect()
    }
}

/// A conditioning vector `[c_1, …, c_n, m]` plus the dataset it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedLabel {
    values: Vec<f64>,
    origin: usize,
}

impl UnifiedLabel {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    /// The origin dataset's slice.
    pub fn slice<'a>(&'a self, universe: &LabelUniverse) -> &'a [f64] {
        let off = universe.offset(self.origin);
        &self.values[off..off + universe.dataset(self.origin).dim()]
    }
}

/// Shuffles the batch's own labels to serve as translation targets.
///
/// Targets are therefore always label combinations that occur in the data,
/// drawn from the same dataset as the batch.
pub fn sample_target_labels<R: Rng + ?Sized>(real: &[UnifiedLabel], rng: &mut R) -> Result<Vec<UnifiedLabel>> {
    let first = real
        .first()
        .ok_or_else(|| Error::Label("cannot sample targets for an empty batch".into()))?;
    if real.iter().any(|l| l.origin != first.origin) {
        return Err(Error::Label("batch mixes labels from different datasets".into()));
    }
    let mut out = real.to_vec();
    out.shuffle(rng);
    Ok(out)
}

/// Replicates a conditioning vector over an `h × w` grid, channels last.
pub fn spatial_replicate(values: &[f64], h: usize, w: usize) -> Array3<f64> {
    assert!(h >= 1 && w >= 1, "spatial_replicate needs a non-empty grid");
    Array3::from_shape_fn((h, w, values.len()), |(_, _, k)| values[k])
}

/// Batched replication in the networks' NCHW layout: `[N, dim, h, w]`.
pub fn label_maps(labels: &[&[f64]], h: usize, w: usize) -> Array4<f64> {
    let dim = labels.first().map_or(0, |l| l.len());
    Array4::from_shape_fn((labels.len(), dim, h, w), |(n, k, _, _)| labels[n][k])
}
