//! Objective terms: adversarial (log-likelihood and Wasserstein with
//! gradient penalty), masked domain classification, cycle reconstruction,
//! and their assembly into the critic and generator objectives.
//!
//! Every reduction is a mean over batch and spatial/attribute positions.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::label::{LabelKind, LabelUniverse, UnifiedLabel};
use crate::{Error, Result};

/// Keeps the gradient norm differentiable when the gradient vanishes.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvVariant {
    /// Log-likelihood objective on sigmoid probabilities.
    Gan,
    /// Wasserstein objective on raw critic scores plus gradient penalty.
    #[default]
    WganGp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_gp: f64,
    pub adv_variant: AdvVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_rec: 10.0,
            lambda_gp: 10.0,
            adv_variant: AdvVariant::WganGp,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_rec", self.lambda_rec),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Something the objectives can be assembled over: plain numbers for
/// reporting, graph nodes for training.
pub trait Term: Clone {
    fn zero() -> Self;
    fn plus(&self, other: &Self) -> Self;
    fn times(&self, k: f64) -> Self;
}

impl Term for f64 {
    fn zero() -> Self {
        0.0
    }
    fn plus(&self, other: &Self) -> Self {
        self + other
    }
    fn times(&self, k: f64) -> Self {
        self * k
    }
}

impl Term for Var {
    fn zero() -> Self {
        Var::scalar(0.0)
    }
    fn plus(&self, other: &Self) -> Self {
        self.add(other)
    }
    fn times(&self, k: f64) -> Self {
        self.scale(k)
    }
}

/// Unweighted loss terms from one minibatch.
///
/// `adv` is the adversarial value without the penalty: for the critic, the
/// full expectation difference (or log-likelihood); for the generator, only
/// its fake-sample term. `gp` is the raw mean squared deviation of the
/// gradient norm from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts<T> {
    pub adv: T,
    pub cls: T,
    pub rec: T,
    pub gp: T,
}

impl<T: Term> LossParts<T> {
    pub fn zero() -> Self {
        Self {
            adv: T::zero(),
            cls: T::zero(),
            rec: T::zero(),
            gp: T::zero(),
        }
    }
}

/// Weighted contributions to an objective; the fields sum to `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T = f64> {
    pub adv: T,
    pub cls: T,
    pub rec: T,
    pub gp: T,
    pub total: T,
}

fn assemble<T: Term>(adv: T, cls: T, rec: T, gp: T) -> LossBreakdown<T> {
    let total = adv.plus(&cls).plus(&rec).plus(&gp);
    LossBreakdown { adv, cls, rec, gp, total }
}

/// `L_D = −L_adv + λ_cls · L_cls^r`, where the Wasserstein `L_adv` carries
/// `−λ_gp · gp`.
pub fn total_d_loss<T: Term>(parts: &LossParts<T>, cfg: &LossConfig) -> LossBreakdown<T> {
    let gp = match cfg.adv_variant {
        AdvVariant::WganGp => parts.gp.times(cfg.lambda_gp),
        AdvVariant::Gan => T::zero(),
    };
    assemble(parts.adv.times(-1.0), parts.cls.times(cfg.lambda_cls), T::zero(), gp)
}

/// `L_G = L_adv + λ_cls · L_cls^f + λ_rec · L_rec`.
pub fn total_g_loss<T: Term>(parts: &LossParts<T>, cfg: &LossConfig) -> LossBreakdown<T> {
    assemble(
        parts.adv.clone(),
        parts.cls.times(cfg.lambda_cls),
        parts.rec.times(cfg.lambda_rec),
        T::zero(),
    )
}

impl LossBreakdown<Var> {
    pub fn values(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            adv: self.adv.item(),
            cls: self.cls.item(),
            rec: self.rec.item(),
            gp: self.gp.item(),
            total: self.total.item(),
        }
    }
}

impl LossBreakdown<f64> {
    pub fn is_finite(&self) -> bool {
        [self.adv, self.cls, self.rec, self.gp, self.total].iter().all(|v| v.is_finite())
    }
}

/// `E[log D(x)] + E[log(1 − D(G(x, c)))]` over probabilities in (0, 1).
pub fn adv_loss_gan(d_real: &Var, d_fake: &Var) -> Result<Var> {
    for (which, v) in [("real", d_real), ("fake", d_fake)] {
        if let Some(p) = v.value().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Loss(format!(
                "{which} probability {p} outside (0, 1); apply the sigmoid first"
            )));
        }
    }
    Ok(d_real.ln().mean().add(&d_fake.neg().add_scalar(1.0).ln().mean()))
}

/// Generator side of [`adv_loss_gan`]: `E[log(1 − D(G(x, c)))]`.
pub fn adv_loss_gan_fake(d_fake: &Var) -> Result<Var> {
    if let Some(p) = d_fake.value().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Loss(format!("fake probability {p} outside (0, 1)")));
    }
    Ok(d_fake.neg().add_scalar(1.0).ln().mean())
}

/// [`adv_loss_gan`] from pre-sigmoid scores, using
/// `log σ(z) = −softplus(−z)` and `log(1 − σ(z)) = −softplus(z)` so that
/// saturated scores stay finite.
pub fn adv_loss_gan_logits(real: &Var, fake: &Var) -> Var {
    real.neg().softplus().mean().add(&fake.softplus().mean()).neg()
}

/// Generator side of [`adv_loss_gan_logits`].
pub fn adv_loss_gan_fake_logits(fake: &Var) -> Var {
    fake.softplus().mean().neg()
}

/// `E[D(x)] − E[D(G(x, c))] − λ_gp · E[(‖∇D(x̂)‖ − 1)²]` on raw critic
/// scores.
pub fn adv_loss_wgan_gp(d_real: &Var, d_fake: &Var, grad_norms: &Var, cfg: &LossConfig) -> Var {
    wasserstein_gap(d_real, d_fake).sub(&gradient_penalty(grad_norms).scale(cfg.lambda_gp))
}

/// `E[D(x)] − E[D(G(x, c))]`.
pub fn wasserstein_gap(d_real: &Var, d_fake: &Var) -> Var {
    d_real.mean().sub(&d_fake.mean())
}

/// `E[(‖g‖ − 1)²]` over per-sample gradient norms.
pub fn gradient_penalty(grad_norms: &Var) -> Var {
    let d = grad_norms.add_scalar(-1.0);
    d.mul(&d).mean()
}

/// Per-sample L2 norms of `∇_x̂ Σ src`, kept differentiable so the penalty
/// can be minimized with respect to the critic (and `x̂`).
///
/// `x_hat` must require grad and `src` must have been computed from it.
pub fn critic_grad_norms(x_hat: &Var, src: &Var) -> Var {
    assert!(x_hat.requires_grad(), "interpolates must be differentiable");
    let g = grad(&src.sum(), &[x_hat], true).remove(0);
    let n = g.shape()[0];
    let mut stat = vec![1; g.shape().len()];
    stat[0] = n;
    g.mul(&g).sum_to(&stat).add_scalar(NORM_EPS).powf(0.5).reshape(&[n])
}

/// `ε · real + (1 − ε) · fake` with one `ε ~ U[0, 1]` per sample.
pub fn interpolate<R: Rng + ?Sized>(real: &ArrayD<f64>, fake: &ArrayD<f64>, rng: &mut R) -> (ArrayD<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..real.shape()[0]).map(|_| rng.random::<f64>()).collect();
    (interpolate_with(real, fake, &eps), eps)
}

pub fn interpolate_with(real: &ArrayD<f64>, fake: &ArrayD<f64>, eps: &[f64]) -> ArrayD<f64> {
    assert_eq!(real.shape(), fake.shape(), "interpolate: shape mismatch");
    assert_eq!(eps.len(), real.shape()[0], "interpolate: one epsilon per sample");
    let mut out = fake.clone();
    for (i, (mut o, r)) in out.axis_iter_mut(Axis(0)).zip(real.axis_iter(Axis(0))).enumerate() {
        let e = eps[i];
        o.zip_mut_with(&r, |f, &r| *f = e * r + (1.0 - e) * *f);
    }
    out
}

/// Domain classification loss restricted to the batch's own dataset.
///
/// Binary-attribute datasets use per-attribute sigmoid cross-entropy;
/// categorical ones use softmax cross-entropy over their slice. Logits of
/// other datasets do not enter the value, so their gradient is exactly zero.
pub fn cls_loss(logits: &Var, labels: &[UnifiedLabel], universe: &LabelUniverse) -> Result<Var> {
    let first = labels.first().ok_or_else(|| Error::Loss("empty label batch".into()))?;
    let origin = first.origin();
    if labels.iter().any(|l| l.origin() != origin) {
        return Err(Error::Loss("label batch mixes datasets".into()));
    }
    let n = labels.len();
    let total = universe.total_label_dim();
    if logits.shape() != [n, total] {
        return Err(Error::Loss(format!(
            "logits shape {:?}, expected [{n}, {total}]",
            logits.shape()
        )));
    }
    let ds = universe.dataset(origin);
    let dim = ds.dim();
    let slice = logits.narrow(1, universe.offset(origin), dim);
    let mut target = ArrayD::zeros(IxDyn(&[n, dim]));
    for (i, l) in labels.iter().enumerate() {
        for (k, &v) in l.slice(universe).iter().enumerate() {
            target[[i, k]] = v;
        }
    }
    let target = Var::constant(target);
    Ok(match ds.kind() {
        LabelKind::BinaryAttributes => slice.softplus().sub(&slice.mul(&target)).mean(),
        LabelKind::Categorical => {
            let lse = log_sum_exp_rows(&slice);
            let picked = slice.mul(&target).sum_to(&[n, 1]);
            lse.sub(&picked).mean()
        }
    })
}

/// Row-wise `log Σ exp` of `[N, K]`, returned as `[N, 1]`.
fn log_sum_exp_rows(x: &Var) -> Var {
    let s = x.shape().to_vec();
    let max = x.value().map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    let max = Var::constant(max.insert_axis(Axis(1)));
    let shifted = x.sub(&max.broadcast_to(&s));
    shifted.exp().sum_to(&[s[0], 1]).ln().add(&max)
}

/// Mean absolute difference.
pub fn rec_loss(x: &Var, x_rec: &Var) -> Result<Var> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Loss(format!(
            "reconstruction shape {:?} does not match input {:?}",
            x_rec.shape(),
            x.shape()
        )));
    }
    Ok(x.sub(x_rec).abs().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::DatasetSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(shape: &[usize], v: Vec<f64>) -> Var {
        Var::constant(ArrayD::from_shape_vec(IxDyn(shape), v).unwrap())
    }

    #[test]
    fn gan_loss_values() {
        let half = c(&[4, 1, 2, 2], vec![0.5; 16]);
        let v = adv_loss_gan(&half, &half).unwrap().item();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 1.3863).abs() < 1e-4);
        let eps = 1e-9;
        let near = adv_loss_gan(&c(&[1], vec![1.0 - eps]), &c(&[1], vec![eps])).unwrap().item();
        assert!(near < 0.0 && near > -1e-8);
        assert!(adv_loss_gan(&c(&[1], vec![1.0]), &half).is_err());
        assert!(adv_loss_gan(&half, &c(&[1], vec![-0.2])).is_err());
    }

    #[test]
    fn gan_loss_averages_patches() {
        let real = c(&[2, 1, 1, 2], vec![0.9, 0.6, 0.3, 0.8]);
        let fake = c(&[2, 1, 1, 2], vec![0.1, 0.4, 0.2, 0.7]);
        let v = adv_loss_gan(&real, &fake).unwrap().item();
        let want = [0.9f64, 0.6, 0.3, 0.8].iter().map(|p| p.ln()).sum::<f64>() / 4.0
            + [0.1f64, 0.4, 0.2, 0.7].iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 4.0;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn wgan_values() {
        let cfg = LossConfig::default();
        let v = adv_loss_wgan_gp(&c(&[1], vec![1.0]), &c(&[1], vec![0.0]), &c(&[1], vec![1.0]), &cfg);
        assert_eq!(v.item(), 1.0);
        let zero = c(&[1], vec![0.0]);
        let v = adv_loss_wgan_gp(&zero, &zero, &c(&[1], vec![2.0]), &cfg);
        assert_eq!(v.item(), -10.0);
        let v = adv_loss_wgan_gp(&zero, &zero, &zero, &cfg);
        assert_eq!(v.item(), -10.0);
    }

    #[test]
    fn interpolation_endpoints() {
        let real = ArrayD::from_elem(IxDyn(&[2, 3, 2, 2]), 1.0);
        let fake = ArrayD::zeros(IxDyn(&[2, 3, 2, 2]));
        assert_eq!(interpolate_with(&real, &fake, &[1.0, 1.0]), real);
        assert_eq!(interpolate_with(&real, &fake, &[0.0, 0.0]), fake);
        let mid = interpolate_with(&real, &fake, &[0.5, 0.5]);
        assert!(mid.iter().all(|&v| v == 0.5));
        let (x, eps) = interpolate(&real, &fake, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(eps.len(), 2);
        for (i, e) in eps.iter().enumerate() {
            assert!((0.0..=1.0).contains(e));
            assert!(x.index_axis(Axis(0), i).iter().all(|v| (v - e).abs() < 1e-15));
        }
    }

    #[test]
    fn categorical_cls_values() {
        let u = LabelUniverse::single(DatasetSpec::new("e", LabelKind::Categorical, (0..8).map(|i| format!("c{i}"))).unwrap());
        let lab = u.encode_unified(&u.dataset(0).one_hot(3), 0).unwrap();
        let uniform = c(&[1, 8], vec![0.7; 8]);
        let v = cls_loss(&uniform, &[lab.clone()], &u).unwrap().item();
        assert!((v - 8f64.ln()).abs() < 1e-12);
        let mut sharp = vec![-800.0; 8];
        sharp[3] = 800.0;
        let v = cls_loss(&c(&[1, 8], sharp), &[lab], &u).unwrap().item();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn binary_cls_perfect_and_masked() {
        let u = LabelUniverse::new(vec![
            DatasetSpec::new("a", LabelKind::BinaryAttributes, ["x", "y", "z"]).unwrap(),
            DatasetSpec::new("b", LabelKind::Categorical, ["p", "q"]).unwrap(),
        ])
        .unwrap();
        let lab = u.encode_unified(&[1.0, 0.0, 1.0], 0).unwrap();
        let logits = vec![900.0, -900.0, 900.0, 3.0, -2.0];
        let v = cls_loss(&c(&[1, 5], logits.clone()), &[lab.clone()], &u).unwrap().item();
        assert!(v.abs() < 1e-12);
        let mut other = logits;
        other[3] = -7.0;
        other[4] = 11.0;
        let w = cls_loss(&c(&[1, 5], other), &[lab], &u).unwrap().item();
        assert_eq!(v, w);
    }

    #[test]
    fn cls_rejects_mixed_batches() {
        let u = LabelUniverse::new(vec![
            DatasetSpec::new("a", LabelKind::BinaryAttributes, ["x"]).unwrap(),
            DatasetSpec::new("b", LabelKind::Categorical, ["p", "q"]).unwrap(),
        ])
        .unwrap();
        let a = u.encode_unified(&[1.0], 0).unwrap();
        let b = u.encode_unified(&[0.0, 1.0], 1).unwrap();
        assert!(cls_loss(&c(&[2, 3], vec![0.0; 6]), &[a, b], &u).is_err());
    }

    #[test]
    fn rec_values() {
        let x = c(&[1, 3, 2, 2], (0..12).map(|i| i as f64 * 0.1).collect());
        assert_eq!(rec_loss(&x, &x).unwrap().item(), 0.0);
        let shifted = x.add_scalar(0.5);
        assert!((rec_loss(&x, &shifted).unwrap().item() - 0.5).abs() < 1e-12);
        let zero = c(&[1, 1, 2, 2], vec![0.0; 4]);
        let alt = c(&[1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(rec_loss(&zero, &alt).unwrap().item(), 1.0);
        assert!(rec_loss(&x, &zero).is_err());
    }

    #[test]
    fn assembly_arithmetic() {
        let cfg = LossConfig::default();
        let d = total_d_loss(&LossParts { adv: 1.0, cls: 2.0, rec: 0.0, gp: 0.0 }, &cfg);
        assert_eq!(d.total, 1.0);
        let g = total_g_loss(&LossParts { adv: 1.0, cls: 2.0, rec: 0.3, gp: 0.0 }, &cfg);
        assert!((g.total - 6.0).abs() < 1e-12);
        assert_eq!(g.adv + g.cls + g.rec + g.gp, g.total);
        let z = total_d_loss(&LossParts::<f64>::zero(), &cfg);
        assert_eq!(z.total, 0.0);
        assert_eq!(total_g_loss(&LossParts::<f64>::zero(), &cfg).total, 0.0);
    }

    #[test]
    fn loss_config_rejects_negative_weights() {
        let cfg = LossConfig { lambda_rec: -1.0, ..LossConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let zr = c(&[3], vec![-2.0, 0.3, 4.0]);
        let zf = c(&[3], vec![1.0, -0.5, -3.0]);
        let p = adv_loss_gan(&sigmoid_of(&zr), &sigmoid_of(&zf)).unwrap().item();
        assert!((adv_loss_gan_logits(&zr, &zf).item() - p).abs() < 1e-12);
        let pf = adv_loss_gan_fake(&sigmoid_of(&zf)).unwrap().item();
        assert!((adv_loss_gan_fake_logits(&zf).item() - pf).abs() < 1e-12);
        let big = c(&[1], vec![800.0]);
        assert!(adv_loss_gan_logits(&big, &big.neg()).item().is_finite());
    }

    fn sigmoid_of(z: &Var) -> Var {
        Var::constant(z.value().mapv(|v| 1.0 / (1.0 + (-v).exp())))
    }
}
