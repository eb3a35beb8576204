//! Measuring a trained generator: classification error of translations,
//! parameter counts, image grids and the dataset-mask probe.

pub mod classifier;
pub mod grid;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::arch::NetworkSpec;
use crate::autograd::{no_grad, Var};
use crate::data::{from_nchw, to_nchw, ImageRecord};
use crate::label::{LabelKind, LabelUniverse};
use crate::nn::Generator;
use crate::{Error, Result};

pub use classifier::{accuracy, label_error, train_eval_classifier, Classifier, CnnClassifier, CnnConfig};
pub use grid::{emit_grid, mask_probe, GridInfo, MaskProbe};

const TRANSLATE_CHUNK: usize = 32;

/// Runs the generator without recording a graph; `labels` are full
/// conditioning vectors.
pub fn translate(generator: &Generator, images: &[Array3<f64>], labels: &[Vec<f64>]) -> Result<Vec<Array3<f64>>> {
    if images.len() != labels.len() {
        return Err(Error::Eval(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| l.len() != generator.label_dim()) {
        return Err(Error::Eval(format!(
            "conditioning vector of length {} for a generator expecting {}",
            l.len(),
            generator.label_dim()
        )));
    }
    let _guard = no_grad();
    let mut out = Vec::with_capacity(images.len());
    for (imgs, labs) in images.chunks(TRANSLATE_CHUNK).zip(labels.chunks(TRANSLATE_CHUNK)) {
        let refs: Vec<&Array3<f64>> = imgs.iter().collect();
        let x = Var::constant(to_nchw(&refs, &vec![false; refs.len()]));
        let c = ArrayD::from_shape_vec(IxDyn(&[labs.len(), generator.label_dim()]), labs.concat())
            .expect("label lengths checked");
        let y = generator.forward(&x, &Var::constant(c));
        out.extend(from_nchw(y.value()));
    }
    Ok(out)
}

/// Default targets for a dataset: each class of a categorical one, a
/// toggle of each attribute of a binary one.
pub fn default_targets(universe: &LabelUniverse, dataset: usize) -> Vec<String> {
    let ds = universe.dataset(dataset);
    let qualify = |n: &String| if universe.n() > 1 { format!("{}.{n}", ds.name()) } else { n.clone() };
    match ds.kind() {
        LabelKind::Categorical => ds.label_names().iter().map(qualify).collect(),
        LabelKind::BinaryAttributes => ds.label_names().iter().map(|n| format!("~{}", qualify(n))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetError {
    pub target: String,
    pub error: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationEval {
    pub dataset: String,
    pub per_target: Vec<TargetError>,
    /// Image-weighted mean over targets.
    pub error: f64,
    /// Mean absolute difference between inputs and their round trip back to
    /// the original label, over all translated images.
    pub reconstruction_l1: f64,
    pub n_images: usize,
}

/// Translates every test image of `dataset` to every target and scores the
/// result with `classifier`.
pub fn translation_error(
    generator: &Generator,
    universe: &LabelUniverse,
    dataset: usize,
    test: &[ImageRecord],
    targets: &[String],
    classifier: &dyn Classifier,
) -> Result<TranslationEval> {
    if test.is_empty() || targets.is_empty() {
        return Err(Error::Eval("translation error needs test images and targets".into()));
    }
    let ds = universe.dataset(dataset);
    let images: Vec<Array3<f64>> = test.iter().map(|r| r.pixels.clone()).collect();
    let originals = test
        .iter()
        .map(|r| universe.encode_unified(&r.label, dataset))
        .collect::<Result<Vec<_>>>()?;
    let mut per_target = Vec::new();
    let (mut err_sum, mut rec_sum, mut rec_n) = (0.0, 0.0, 0usize);
    for t in targets {
        let wanted = originals
            .iter()
            .map(|o| universe.resolve_target(t, Some(o)))
            .collect::<Result<Vec<_>>>()?;
        if wanted.iter().any(|w| w.origin() != dataset) {
            return Err(Error::Eval(format!("target `{t}` does not address dataset `{}`", ds.name())));
        }
        let fakes = translate(generator, &images, &wanted.iter().map(|w| w.values().to_vec()).collect::<Vec<_>>())?;
        let pred = classifier.predict(&fakes)?;
        let e: f64 = pred.iter().zip(&wanted).map(|(p, w)| label_error(ds, p, w.slice(universe))).sum();
        let back = translate(generator, &fakes, &originals.iter().map(|o| o.values().to_vec()).collect::<Vec<_>>())?;
        for (b, x) in back.iter().zip(&images) {
            rec_sum += (b - x).mapv(f64::abs).mean().unwrap_or(0.0);
            rec_n += 1;
        }
        err_sum += e;
        per_target.push(TargetError { target: t.clone(), error: e / test.len() as f64, n: test.len() });
    }
    let n_images = test.len() * targets.len();
    Ok(TranslationEval {
        dataset: ds.name().to_owned(),
        per_target,
        error: err_sum / n_images as f64,
        reconstruction_l1: rec_sum / rec_n as f64,
        n_images,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub generator: u64,
    pub discriminator: u64,
    pub total: u64,
    pub reference: Option<f64>,
    /// `|total − reference| / reference`.
    pub relative_diff: Option<f64>,
}

pub fn param_report(generator: &NetworkSpec, discriminator: &NetworkSpec, reference: Option<f64>) -> ParamReport {
    let (g, d) = (generator.param_count(), discriminator.param_count());
    let total = g + d;
    ParamReport {
        generator: g,
        discriminator: d,
        total,
        reference,
        relative_diff: reference.map(|r| (total as f64 - r).abs() / r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInfo {
    pub kind: String,
    pub accuracy: Option<f64>,
    /// False when a learned classifier falls below the accuracy floor; the
    /// error numbers are then not meaningful.
    pub trusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub step: u64,
    pub params: ParamReport,
    pub classifier: ClassifierInfo,
    pub translations: Vec<TranslationEval>,
    pub mask_probe: Option<MaskProbe>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# Evaluation (config {}, step {})\n\n", self.config_hash, self.step);
        s += "| network | parameters |\n|---|---:|\n";
        s += &format!("| generator | {} |\n| discriminator | {} |\n| total | {} |\n", self.params.generator, self.params.discriminator, self.params.total);
        if let (Some(r), Some(d)) = (self.params.reference, self.params.relative_diff) {
            s += &format!("| reference | {r} ({:.2}% off) |\n", d * 100.0);
        }
        s += &format!(
            "\nClassifier: {}{}{}\n",
            self.classifier.kind,
            self.classifier.accuracy.map(|a| format!(", held-out accuracy {:.1}%", a * 100.0)).unwrap_or_default(),
            if self.classifier.trusted { "" } else { " (below the accuracy floor; errors untrusted)" }
        );
        for t in &self.translations {
            s += &format!("\n## {}\n\n| target | error | images |\n|---|---:|---:|\n", t.dataset);
            for e in &t.per_target {
                s += &format!("| {} | {:.1}% | {} |\n", e.target, e.error * 100.0, e.n);
            }
            s += &format!("| **mean** | **{:.1}%** | {} |\n\nReconstruction L1: {:.4}\n", t.error * 100.0, t.n_images, t.reconstruction_l1);
        }
        if let Some(m) = &self.mask_probe {
            s += &format!(
                "\n## Mask probe ({})\n\n| mask | error |\n|---|---:|\n| proper | {:.1}% |\n| wrong | {:.1}% |\n| chance | {:.1}% |\n",
                m.dataset,
                m.proper_error * 100.0,
                m.wrong_error * 100.0,
                m.chance * 100.0
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::DatasetSpec;

    #[test]
    fn full_size_param_report() {
        let g = NetworkSpec::generator(8, 1.0, 6).unwrap();
        let d = NetworkSpec::discriminator(128, 128, 8, 1.0, None).unwrap();
        let r = param_report(&g, &d, Some(53.2e6));
        assert_eq!(r.total, 53_230_284);
        assert!(r.relative_diff.unwrap() < 0.01);
    }

    #[test]
    fn default_targets_per_kind() {
        let u = LabelUniverse::new(vec![
            DatasetSpec::new("a", LabelKind::BinaryAttributes, ["x", "y"]).unwrap(),
            DatasetSpec::new("b", LabelKind::Categorical, ["p", "q"]).unwrap(),
        ])
        .unwrap();
        assert_eq!(default_targets(&u, 0), ["~a.x", "~a.y"]);
        assert_eq!(default_targets(&u, 1), ["b.p", "b.q"]);
    }
}
