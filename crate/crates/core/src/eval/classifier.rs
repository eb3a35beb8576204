//! Judges of translated images: the synthetic oracle, or a small CNN
//! trained on real images of the dataset.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::arch::NetworkSpec;
use crate::autograd::{grad, no_grad, Var};
use crate::data::{batches, to_nchw, ImageRecord, SyntheticOracle};
use crate::label::{DatasetSpec, LabelKind, LabelUniverse};
use crate::loss::cls_loss;
use crate::nn::Discriminator;
use crate::optim::{Adam, AdamParams};
use crate::rng::{substream, EVAL};
use crate::{Error, Result};

/// Predicts a dataset label (in that dataset's own label space) per image.
pub trait Classifier {
    fn predict(&self, images: &[Array3<f64>]) -> Result<Vec<Vec<f64>>>;
}

impl Classifier for SyntheticOracle {
    fn predict(&self, images: &[Array3<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(images.iter().map(|i| SyntheticOracle::predict(self, i)).collect())
    }
}

/// Disagreement between a predicted and a wanted label: 0/1 on the class
/// for categorical datasets, the fraction of differing attributes for
/// binary ones.
pub fn label_error(spec: &DatasetSpec, predicted: &[f64], wanted: &[f64]) -> f64 {
    match spec.kind() {
        LabelKind::Categorical => (argmax(predicted) != argmax(wanted)) as u8 as f64,
        LabelKind::BinaryAttributes => {
            let diff = predicted.iter().zip(wanted).filter(|(p, w)| (**p >= 0.5) != (**w >= 0.5)).count();
            diff as f64 / wanted.len().max(1) as f64
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean [`label_error`] accuracy complement over labeled records.
pub fn accuracy(classifier: &dyn Classifier, spec: &DatasetSpec, records: &[ImageRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Eval("no records to measure accuracy on".into()));
    }
    let images: Vec<Array3<f64>> = records.iter().map(|r| r.pixels.clone()).collect();
    let pred = classifier.predict(&images)?;
    let err: f64 = pred.iter().zip(records).map(|(p, r)| label_error(spec, p, &r.label)).sum();
    Ok(1.0 - err / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub width: f64,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, lr: 1e-3, width: 0.25, seed: 0 }
    }
}

/// Strided convolutions with leaky ReLU and a full-extent classification
/// head (the critic's trunk and auxiliary head, trained on its own).
#[derive(Debug, Clone)]
pub struct CnnClassifier {
    net: Discriminator,
    universe: LabelUniverse,
}

impl CnnClassifier {
    pub fn spec(&self) -> &DatasetSpec {
        self.universe.dataset(0)
    }

    fn logits(&self, images: &[Array3<f64>]) -> Vec<Vec<f64>> {
        let _guard = no_grad();
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        let x = Var::constant(to_nchw(&refs, &vec![false; refs.len()]));
        let (_, logits) = self.net.forward(&x);
        logits.value().outer_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl Classifier for CnnClassifier {
    fn predict(&self, images: &[Array3<f64>]) -> Result<Vec<Vec<f64>>> {
        let kind = self.spec().kind();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for z in self.logits(chunk) {
                out.push(match kind {
                    LabelKind::Categorical => {
                        let mut v = vec![0.0; z.len()];
                        v[argmax(&z)] = 1.0;
                        v
                    }
                    LabelKind::BinaryAttributes => z.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
                });
            }
        }
        Ok(out)
    }
}

/// Trains on `train` and reports held-out accuracy on `test`.
pub fn train_eval_classifier(
    train: &[ImageRecord],
    test: &[ImageRecord],
    spec: &DatasetSpec,
    cfg: &CnnConfig,
) -> Result<(CnnClassifier, f64)> {
    let first = train.first().ok_or_else(|| Error::Eval("classifier needs training records".into()))?;
    let (h, w) = first.size();
    let net_spec = NetworkSpec::discriminator(h, w, spec.dim(), cfg.width, None)?;
    let net = Discriminator::materialize(&net_spec, &mut substream(cfg.seed, EVAL, 0))?;
    let universe = LabelUniverse::single(spec.clone());
    let mut clf = CnnClassifier { net, universe };
    let params = AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut opt = Adam::new(params, clf.net.network().params());
    let bs = cfg.batch_size.min(train.len());
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, EVAL, 1 + epoch as u64);
        for batch in batches(train, bs, &mut rng)? {
            let recs: Vec<&ImageRecord> = batch.iter().map(|&i| &train[i]).collect();
            let flips: Vec<bool> = batch.iter().map(|&i| i % 2 == 1).collect();
            let x = Var::constant(to_nchw(&recs.iter().map(|r| &r.pixels).collect::<Vec<_>>(), &flips));
            let labels = recs
                .iter()
                .map(|r| clf.universe.encode_unified(&r.label, 0))
                .collect::<Result<Vec<_>>>()?;
            let (_, logits) = clf.net.forward(&x);
            let loss = cls_loss(&logits, &labels, &clf.universe)?;
            let p: Vec<&Var> = clf.net.network().params().iter().collect();
            let grads = grad(&loss, &p, false);
            let next = opt.update(clf.net.network().params(), &grads, cfg.lr)?;
            clf.net.network_mut().set_param_values(next)?;
        }
    }
    let acc = if test.is_empty() { f64::NAN } else { accuracy(&clf, spec, test)? };
    Ok((clf, acc))
}
