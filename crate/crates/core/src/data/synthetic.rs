//! Procedural corpus with a closed-form labeler.
//!
//! Each image is a flat gray background (dark or bright), optionally framed
//! by a white ring, with one colored disc or square of random position and
//! size. Depending on [`SyntheticLabels`] the label is the shape's hue
//! (categorical) or the pair `bright_background, border` (binary). Factors
//! that are not labeled are drawn at random, so two corpora built from the
//! same renderer can carry disjoint label sets over one image distribution.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotated::write_annotated_folder;
use super::ImageRecord;
use crate::label::{DatasetSpec, LabelKind};
use crate::rng::substream;
use crate::{Error, Result};

pub const ORACLE_FILE: &str = "oracle.json";

const DARK_BACKGROUND: f64 = -0.6;
const BRIGHT_BACKGROUND: f64 = 0.3;
const BORDER_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hue {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Hue {
    pub fn color(self) -> [f64; 3] {
        let (hi, lo) = (0.9, -0.7);
        match self {
            Hue::Red => [hi, lo, lo],
            Hue::Green => [lo, hi, lo],
            Hue::Blue => [lo, lo, hi],
            Hue::Yellow => [hi, hi, lo],
            Hue::Cyan => [lo, hi, hi],
            Hue::Magenta => [hi, lo, hi],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Hue::Red => "red",
            Hue::Green => "green",
            Hue::Blue => "blue",
            Hue::Yellow => "yellow",
            Hue::Cyan => "cyan",
            Hue::Magenta => "magenta",
        }
    }

    /// The color minus its gray component, unit length.
    fn chroma_direction(self) -> [f64; 3] {
        let c = self.color();
        let m = (c[0] + c[1] + c[2]) / 3.0;
        let d = [c[0] - m, c[1] - m, c[2] - m];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticLabels {
    /// Categorical over the palette.
    Hue,
    /// Binary `bright_background`, `border`.
    Scene,
}

pub const SCENE_ATTRIBUTES: [&str; 2] = ["bright_background", "border"];

fn default_hues() -> Vec<Hue> {
    vec![Hue::Red, Hue::Green, Hue::Blue]
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub image_size: usize,
    /// Training images per domain (class, or attribute combination).
    pub per_domain: usize,
    #[serde(default)]
    pub test_per_domain: usize,
    pub labels: SyntheticLabels,
    #[serde(default = "default_hues")]
    pub hues: Vec<Hue>,
    /// Randomize the background level when it is not labeled.
    #[serde(default)]
    pub vary_background: bool,
    /// Randomize the border when it is not labeled.
    #[serde(default)]
    pub vary_border: bool,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("synthetic corpus `{}`: {m}", self.name)));
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.per_domain == 0 {
            return bad("per_domain must be positive".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise must be a non-negative number, got {}", self.noise));
        }
        let min_hues = if self.labels == SyntheticLabels::Hue { 2 } else { 1 };
        if self.hues.len() < min_hues {
            return bad(format!("needs at least {min_hues} hues, got {}", self.hues.len()));
        }
        for (i, h) in self.hues.iter().enumerate() {
            if self.hues[..i].contains(h) {
                return bad(format!("hue `{}` listed twice", h.name()));
            }
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        match self.labels {
            SyntheticLabels::Hue => {
                DatasetSpec::new(self.name.clone(), LabelKind::Categorical, self.hues.iter().map(|h| h.name()))
            }
            SyntheticLabels::Scene => {
                DatasetSpec::new(self.name.clone(), LabelKind::BinaryAttributes, SCENE_ATTRIBUTES)
            }
        }
    }

    pub fn n_domains(&self) -> usize {
        match self.labels {
            SyntheticLabels::Hue => self.hues.len(),
            SyntheticLabels::Scene => 4,
        }
    }

    pub fn oracle(&self) -> SyntheticOracle {
        SyntheticOracle {
            labels: self.labels,
            hues: self.hues.clone(),
            ring: ring_width(self.image_size),
            bright_threshold: (DARK_BACKGROUND + BRIGHT_BACKGROUND) / 2.0,
            border_threshold: (BRIGHT_BACKGROUND + BORDER_LEVEL) / 2.0,
        }
    }
}

fn ring_width(size: usize) -> usize {
    (size / 16).max(1)
}

/// Scene factors of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scene {
    pub hue: Hue,
    pub bright_background: bool,
    pub border: bool,
}

/// Draws one image; shape, position and size come from `rng`.
pub fn render<R: Rng + ?Sized>(size: usize, scene: Scene, noise: f64, rng: &mut R) -> Array3<f64> {
    let ring = ring_width(size);
    let bg = if scene.bright_background { BRIGHT_BACKGROUND } else { DARK_BACKGROUND };
    let s = size as f64;
    let r = rng.random_range(0.18 * s..=0.28 * s);
    let lo = ring as f64 + r;
    let hi = (s - ring as f64 - r).max(lo);
    let cx = rng.random_range(lo..=hi);
    let cy = rng.random_range(lo..=hi);
    let square = rng.random_bool(0.5);
    let half = 0.85 * r;
    let color = scene.hue.color();
    let dist = Normal::new(0.0, noise).expect("noise validated as finite and non-negative");

    let mut img = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let on_ring = x < ring || y < ring || x >= size - ring || y >= size - ring;
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = if square { px.abs() <= half && py.abs() <= half } else { px * px + py * py <= r * r };
            for k in 0..3 {
                let base = if on_ring && scene.border {
                    BORDER_LEVEL
                } else if inside && !on_ring {
                    color[k]
                } else {
                    bg
                };
                let n = if noise > 0.0 { dist.sample(rng) } else { 0.0 };
                img[[y, x, k]] = (base + n).clamp(-1.0, 1.0);
            }
        }
    }
    img
}

/// Recovers the labeled factors from pixels.
///
/// Hue: the sum over pixels of each pixel's deviation from its own gray
/// level is compared (by cosine) with each palette color's deviation; gray
/// background and white border contribute nothing. Background: median pixel
/// brightness inside the ring against the midpoint of the two levels.
/// Border: mean ring brightness against the midpoint of the bright
/// background and the ring level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub labels: SyntheticLabels,
    pub hues: Vec<Hue>,
    pub ring: usize,
    pub bright_threshold: f64,
    pub border_threshold: f64,
}

impl SyntheticOracle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn hue_index(&self, img: &Array3<f64>) -> usize {
        let mut sum = [0.0; 3];
        for px in img.rows() {
            let m = (px[0] + px[1] + px[2]) / 3.0;
            for k in 0..3 {
                sum[k] += px[k] - m;
            }
        }
        let score = |h: &Hue| {
            let d = h.chroma_direction();
            sum[0] * d[0] + sum[1] * d[1] + sum[2] * d[2]
        };
        let mut best = 0;
        for (i, h) in self.hues.iter().enumerate() {
            if score(h) > score(&self.hues[best]) {
                best = i;
            }
        }
        best
    }

    pub fn bright_background(&self, img: &Array3<f64>) -> bool {
        let (h, w, _) = img.dim();
        let r = self.ring.min(h / 2).min(w / 2);
        let mut lum: Vec<f64> = Vec::new();
        for y in r..h - r {
            for x in r..w - r {
                lum.push((img[[y, x, 0]] + img[[y, x, 1]] + img[[y, x, 2]]) / 3.0);
            }
        }
        if lum.is_empty() {
            return false;
        }
        lum.sort_by(f64::total_cmp);
        lum[lum.len() / 2] > self.bright_threshold
    }

    pub fn border(&self, img: &Array3<f64>) -> bool {
        let (h, w, _) = img.dim();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if x < self.ring || y < self.ring || x + self.ring >= w || y + self.ring >= h {
                    sum += (img[[y, x, 0]] + img[[y, x, 1]] + img[[y, x, 2]]) / 3.0;
                    n += 1;
                }
            }
        }
        n > 0 && sum / n as f64 > self.border_threshold
    }

    pub fn predict(&self, img: &Array3<f64>) -> Vec<f64> {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        match self.labels {
            SyntheticLabels::Hue => {
                let mut v = vec![0.0; self.hues.len()];
                v[self.hue_index(img)] = 1.0;
                v
            }
            SyntheticLabels::Scene => vec![b(self.bright_background(img)), b(self.border(img))],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub dataset: DatasetSpec,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub oracle: SyntheticOracle,
}

impl SyntheticCorpus {
    /// Writes every record (train then test) as an annotated folder plus
    /// `oracle.json`. Refuses a non-empty target directory.
    pub fn write(&self, root: &Path) -> Result<()> {
        let records: Vec<_> = self
            .train
            .iter()
            .chain(&self.test)
            .map(|r| (r.source_path.clone(), r.label.clone(), r.pixels.clone()))
            .collect();
        write_annotated_folder(root, self.dataset.label_names(), &records)?;
        let path = root.join(ORACLE_FILE);
        let json = serde_json::to_string_pretty(&self.oracle).expect("oracle serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let dataset = spec.dataset_spec()?;
    let mut rng = substream(spec.seed, "synthetic", 0);
    let draw = |split: &str, count: usize, rng: &mut crate::rng::StreamRng| {
        let mut out = Vec::with_capacity(count * spec.n_domains());
        for d in 0..spec.n_domains() {
            for _ in 0..count {
                let pick_hue = |rng: &mut crate::rng::StreamRng| spec.hues[rng.random_range(0..spec.hues.len())];
                let (scene, label) = match spec.labels {
                    SyntheticLabels::Hue => {
                        let bright = spec.vary_background && rng.random_bool(0.5);
                        let border = spec.vary_border && rng.random_bool(0.5);
                        (Scene { hue: spec.hues[d], bright_background: bright, border }, dataset.one_hot(d))
                    }
                    SyntheticLabels::Scene => {
                        let (bright, border) = (d & 1 == 1, d & 2 == 2);
                        let label = vec![bright as u8 as f64, border as u8 as f64];
                        (Scene { hue: pick_hue(rng), bright_background: bright, border }, label)
                    }
                };
                let pixels = render(spec.image_size, scene, spec.noise, rng);
                let source_path = format!("{}_{split}_{:05}.png", spec.name, out.len());
                out.push(ImageRecord { pixels, label, source_path });
            }
        }
        out
    };
    let train = draw("train", spec.per_domain, &mut rng);
    let test = draw("test", spec.test_per_domain, &mut rng);
    Ok(SyntheticCorpus { spec: spec.clone(), dataset, train, test, oracle: spec.oracle() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hue_spec() -> SyntheticSpec {
        SyntheticSpec {
            name: "hue".into(),
            image_size: 16,
            per_domain: 50,
            test_per_domain: 10,
            labels: SyntheticLabels::Hue,
            hues: default_hues(),
            vary_background: true,
            vary_border: true,
            noise: 0.05,
            seed: 9,
        }
    }

    #[test]
    fn corpus_sizes_and_labels() {
        let c = make_synthetic(&hue_spec()).unwrap();
        assert_eq!(c.train.len(), 150);
        assert_eq!(c.test.len(), 30);
        for r in &c.train {
            c.dataset.validate(&r.label).unwrap();
            assert_eq!(r.pixels.dim(), (16, 16, 3));
            assert!(r.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let per_class: Vec<usize> =
            (0..3).map(|k| c.train.iter().filter(|r| r.label[k] == 1.0).count()).collect();
        assert_eq!(per_class, [50, 50, 50]);
    }

    #[test]
    fn oracle_labels_every_generated_image() {
        let c = make_synthetic(&hue_spec()).unwrap();
        for r in c.train.iter().chain(&c.test) {
            assert_eq!(c.oracle.predict(&r.pixels), r.label, "{}", r.source_path);
        }
        let mut scene = hue_spec();
        scene.labels = SyntheticLabels::Scene;
        scene.hues = vec![Hue::Red, Hue::Yellow, Hue::Cyan, Hue::Blue];
        scene.noise = 0.1;
        let c = make_synthetic(&scene).unwrap();
        assert_eq!(c.train.len(), 200);
        for r in c.train.iter().chain(&c.test) {
            assert_eq!(c.oracle.predict(&r.pixels), r.label, "{}", r.source_path);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = make_synthetic(&hue_spec()).unwrap();
        let b = make_synthetic(&hue_spec()).unwrap();
        assert_eq!(a.train, b.train);
        let mut other = hue_spec();
        other.seed += 1;
        assert_ne!(make_synthetic(&other).unwrap().train, a.train);
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = hue_spec();
        s.hues = vec![Hue::Red];
        assert!(make_synthetic(&s).is_err());
        let mut s = hue_spec();
        s.hues = vec![Hue::Red, Hue::Red];
        assert!(make_synthetic(&s).is_err());
        let mut s = hue_spec();
        s.image_size = 4;
        assert!(make_synthetic(&s).is_err());
        let mut s = hue_spec();
        s.per_domain = 0;
        assert!(make_synthetic(&s).is_err());
    }

    #[test]
    fn written_corpus_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = hue_spec();
        s.test_per_domain = 0;
        let c = make_synthetic(&s).unwrap();
        c.write(&dir.path().join("a")).unwrap();
        make_synthetic(&s).unwrap().write(&dir.path().join("b")).unwrap();
        let files = |p: &Path| {
            let mut v: Vec<_> = fs::read_dir(p.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
            v.sort();
            v
        };
        let (fa, fb) = (files(&dir.path().join("a")), files(&dir.path().join("b")));
        assert_eq!(fa.len(), 150);
        for (a, b) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        for f in ["annotations.txt", ORACLE_FILE] {
            assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
        }
        let oracle = SyntheticOracle::load(&dir.path().join("a").join(ORACLE_FILE)).unwrap();
        assert_eq!(oracle, c.oracle);
    }
}
