//! Alternating critic/generator optimization.
//!
//! Every step draws one minibatch, samples target labels by permuting the
//! batch's real labels, and updates the critic; every `n_critic`-th step also
//! updates the generator with the same batch and targets. With several
//! datasets, steps cycle through them round-robin and an epoch is one pass
//! over the largest dataset for each of them (smaller ones wrap around).
//!
//! All randomness is addressed by `(seed, stream, index)`, so the state
//! needed to resume is the parameters, the optimizer moments and the step
//! counter.

pub mod checkpoint;
pub mod log;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::NetworkSpec;
use crate::autograd::{grad, no_grad, Var};
use crate::data::{batches, to_nchw, ImageRecord};
use crate::label::{sample_target_labels, LabelUniverse, UnifiedLabel};
use crate::loss::{
    adv_loss_gan_fake_logits, adv_loss_gan_logits, cls_loss, critic_grad_norms, gradient_penalty, interpolate,
    rec_loss, total_d_loss, total_g_loss, wasserstein_gap, AdvVariant, LossBreakdown, LossConfig, LossParts,
};
use crate::nn::{Discriminator, Generator};
use crate::optim::{Adam, AdamParams};
use crate::rng::{substream, DATA, INIT, TRAIN};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, OptState};
pub use log::{LossLog, LOG_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// One dataset.
    #[default]
    Single,
    /// Datasets take turns, one minibatch each.
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Epochs at the base learning rate.
    pub warm_epochs: usize,
    /// Epochs of linear decay to zero that follow.
    pub decay_epochs: usize,
    pub n_critic: usize,
    pub batch_size: usize,
    pub flip_prob: f64,
    pub alternation: Alternation,
    /// Save a checkpoint every this many steps; 0 saves only the last one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            warm_epochs: 10,
            decay_epochs: 10,
            n_critic: 5,
            batch_size: 16,
            flip_prob: 0.5,
            alternation: Alternation::Single,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} must lie in [0, 1), got {b}"));
            }
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        if self.warm_epochs + self.decay_epochs == 0 {
            return bad("training needs at least one epoch".into());
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.warm_epochs + self.decay_epochs
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams { beta1: self.beta1, beta2: self.beta2, ..AdamParams::default() }
    }
}

/// Constant for `warm_epochs`, then linear to zero over `decay_epochs`.
/// `epoch` may be fractional.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warm_epochs as f64;
    if epoch < warm {
        return cfg.lr;
    }
    if cfg.decay_epochs == 0 {
        return 0.0;
    }
    cfg.lr * (1.0 - (epoch - warm) / cfg.decay_epochs as f64).clamp(0.0, 1.0)
}

/// Everything that determines a run apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub universe: LabelUniverse,
    pub generator: NetworkSpec,
    pub discriminator: NetworkSpec,
    pub train: TrainConfig,
    pub losses: LossConfig,
    /// Digest of the configuration that produced this setup; checkpoints
    /// from a different configuration are refused.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub batches_per_dataset: Vec<usize>,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

/// One finished step. `step` counts from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub dataset: usize,
    pub lr: f64,
    pub d: LossBreakdown,
    pub g: Option<LossBreakdown>,
}

pub struct Trainer {
    setup: TrainSetup,
    datasets: Vec<Vec<ImageRecord>>,
    schedule: Schedule,
    generator: Generator,
    discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(setup: TrainSetup, datasets: Vec<Vec<ImageRecord>>) -> Result<Self> {
        let schedule = validate_setup(&setup, &datasets)?;
        let generator = Generator::materialize(&setup.generator, &mut substream(setup.train.seed, INIT, 0))?;
        let discriminator = Discriminator::materialize(&setup.discriminator, &mut substream(setup.train.seed, INIT, 1))?;
        let g_opt = Adam::new(setup.train.adam(), generator.network().params());
        let d_opt = Adam::new(setup.train.adam(), discriminator.network().params());
        Ok(Self { setup, datasets, schedule, generator, discriminator, g_opt, d_opt, step: 0 })
    }

    /// Continues from a checkpoint written under the same configuration.
    pub fn resume(setup: TrainSetup, datasets: Vec<Vec<ImageRecord>>, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != setup.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written by configuration {} but this run is {}",
                ckpt.config_hash, setup.config_hash
            )));
        }
        let mut t = Self::new(setup, datasets)?;
        if ckpt.universe != t.setup.universe
            || ckpt.generator_spec != t.setup.generator
            || ckpt.discriminator_spec != t.setup.discriminator
        {
            return Err(Error::Checkpoint("checkpoint networks or labels differ from this configuration".into()));
        }
        t.generator.network_mut().set_param_values(ckpt.generator.clone())?;
        t.discriminator.network_mut().set_param_values(ckpt.discriminator.clone())?;
        ckpt.g_opt.restore_into(&mut t.g_opt)?;
        ckpt.d_opt.restore_into(&mut t.d_opt)?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.setup.config_hash.clone(),
            step: self.step,
            seed: self.setup.train.seed,
            universe: self.setup.universe.clone(),
            generator_spec: self.setup.generator.clone(),
            discriminator_spec: self.setup.discriminator.clone(),
            generator: self.generator.network().param_values(),
            discriminator: self.discriminator.network().param_values(),
            g_opt: OptState::of(&self.g_opt),
            d_opt: OptState::of(&self.d_opt),
        }
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    /// Fractional epoch at the start of step index `step` (0-based).
    pub fn epoch_of(&self, step: u64) -> f64 {
        step as f64 / self.schedule.steps_per_epoch as f64
    }

    pub fn lr_now(&self) -> f64 {
        lr_at(self.epoch_of(self.step), &self.setup.train)
    }

    /// Dataset and record indices used by step index `step` (0-based).
    pub fn batch_for_step(&self, step: u64) -> Result<(usize, Vec<usize>)> {
        let n = self.datasets.len() as u64;
        let (ds, k) = match self.setup.train.alternation {
            Alternation::Single => (0, step),
            Alternation::RoundRobin => ((step % n) as usize, step / n),
        };
        let nb = self.schedule.batches_per_dataset[ds] as u64;
        let (cycle, idx) = (k / nb, k % nb);
        let mut rng = substream(self.setup.train.seed, DATA, ((ds as u64) << 40) | cycle);
        let mut b = batches(&self.datasets[ds], self.setup.train.batch_size, &mut rng)?;
        Ok((ds, b.swap_remove(idx as usize)))
    }

    /// Runs the next scheduled step.
    pub fn step_once(&mut self) -> Result<StepOutcome> {
        let (ds, idx) = self.batch_for_step(self.step)?;
        let mut rng = substream(self.setup.train.seed, TRAIN, self.step);
        let records: Vec<&ImageRecord> = idx.iter().map(|&i| &self.datasets[ds][i]).collect();
        let flips: Vec<bool> = records.iter().map(|_| rng.random_bool(self.setup.train.flip_prob)).collect();
        let images = to_nchw(&records.iter().map(|r| &r.pixels).collect::<Vec<_>>(), &flips);
        let labels = records
            .iter()
            .map(|r| self.setup.universe.encode_unified(&r.label, ds))
            .collect::<Result<Vec<_>>>()?;
        self.train_step(&images, &labels, &mut rng)
    }

    /// Runs scheduled steps until `until` (capped at the schedule's end),
    /// handing each outcome to `sink`.
    pub fn run(&mut self, until: u64, mut sink: impl FnMut(&Self, &StepOutcome) -> Result<()>) -> Result<()> {
        let until = until.min(self.schedule.total_steps);
        while self.step < until {
            let out = self.step_once()?;
            sink(self, &out)?;
        }
        Ok(())
    }

    /// One critic update and, every `n_critic` steps, one generator update
    /// on the given batch `[N, 3, H, W]`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        images: &ArrayD<f64>,
        labels: &[UnifiedLabel],
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::Shape(format!(
                "batch of {:?} images with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        for l in labels {
            self.setup.universe.check(l)?;
        }
        let targets = sample_target_labels(labels, rng)?;
        let lr = self.lr_now();
        let d = self.d_update(images, labels, &targets, rng, lr)?;
        let g = if (self.step + 1) % self.setup.train.n_critic as u64 == 0 {
            Some(self.g_update(images, labels, &targets, lr)?)
        } else {
            None
        };
        self.step += 1;
        Ok(StepOutcome { step: self.step, dataset: labels[0].origin(), lr, d, g })
    }

    /// Critic update; the generator is only evaluated.
    pub fn d_update<R: Rng + ?Sized>(
        &mut self,
        images: &ArrayD<f64>,
        labels: &[UnifiedLabel],
        targets: &[UnifiedLabel],
        rng: &mut R,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let cfg = self.setup.losses;
        let x = Var::constant(images.clone());
        let fake = {
            let _guard = no_grad();
            self.generator.forward(&x, &label_batch(targets)).value().clone()
        };
        let d = &self.discriminator;
        let (src_real, logits_real) = d.forward(&x);
        let (src_fake, _) = d.forward(&Var::constant(fake.clone()));
        let (adv, gp) = match cfg.adv_variant {
            AdvVariant::WganGp => {
                let (x_hat, _) = interpolate(images, &fake, rng);
                let x_hat = Var::param(x_hat);
                let (src_hat, _) = d.forward(&x_hat);
                let gp = gradient_penalty(&critic_grad_norms(&x_hat, &src_hat));
                (wasserstein_gap(&src_real, &src_fake), gp)
            }
            AdvVariant::Gan => (adv_loss_gan_logits(&src_real, &src_fake), Var::scalar(0.0)),
        };
        let cls = cls_loss(&logits_real, labels, &self.setup.universe)?;
        let loss = total_d_loss(&LossParts { adv, cls, rec: Var::scalar(0.0), gp }, &cfg);
        let values = self.check_finite("critic", &loss)?;
        let params: Vec<&Var> = d.network().params().iter().collect();
        let grads = grad(&loss.total, &params, false);
        let next = self.d_opt.update(d.network().params(), &grads, lr)?;
        self.discriminator.network_mut().set_param_values(next)?;
        Ok(values)
    }

    /// Generator update through the (fixed) critic and the reconstruction
    /// cycle. With `lambda_rec = 0` the second generator pass is skipped.
    pub fn g_update(
        &mut self,
        images: &ArrayD<f64>,
        labels: &[UnifiedLabel],
        targets: &[UnifiedLabel],
        lr: f64,
    ) -> Result<LossBreakdown> {
        let cfg = self.setup.losses;
        let x = Var::constant(images.clone());
        let g = &self.generator;
        let fake = g.forward(&x, &label_batch(targets));
        let (src_fake, logits_fake) = self.discriminator.forward(&fake);
        let adv = match cfg.adv_variant {
            AdvVariant::WganGp => src_fake.mean().neg(),
            AdvVariant::Gan => adv_loss_gan_fake_logits(&src_fake),
        };
        let cls = cls_loss(&logits_fake, targets, &self.setup.universe)?;
        let rec = if cfg.lambda_rec > 0.0 {
            rec_loss(&x, &g.forward(&fake, &label_batch(labels)))?
        } else {
            Var::scalar(0.0)
        };
        let loss = total_g_loss(&LossParts { adv, cls, rec, gp: Var::scalar(0.0) }, &cfg);
        let values = self.check_finite("generator", &loss)?;
        let params: Vec<&Var> = g.network().params().iter().collect();
        let grads = grad(&loss.total, &params, false);
        let next = self.g_opt.update(g.network().params(), &grads, lr)?;
        self.generator.network_mut().set_param_values(next)?;
        Ok(values)
    }

    fn check_finite(&self, which: &str, loss: &LossBreakdown<Var>) -> Result<LossBreakdown> {
        let v = loss.values();
        if v.is_finite() {
            return Ok(v);
        }
        Err(Error::NonFinite {
            step: self.step + 1,
            msg: format!(
                "{which} loss not finite (adv {}, cls {}, rec {}, gp {}, total {}); parameters left at step {}",
                v.adv, v.cls, v.rec, v.gp, v.total, self.step
            ),
        })
    }
}

/// `[N, unified_dim]` constant from unified labels.
pub fn label_batch(labels: &[UnifiedLabel]) -> Var {
    let d = labels.first().map_or(0, |l| l.values().len());
    let flat: Vec<f64> = labels.iter().flat_map(|l| l.values().iter().copied()).collect();
    Var::constant(ArrayD::from_shape_vec(IxDyn(&[labels.len(), d]), flat).expect("labels share one dimension"))
}

fn validate_setup(setup: &TrainSetup, datasets: &[Vec<ImageRecord>]) -> Result<Schedule> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.losses.validate()?;
    let u = &setup.universe;
    if datasets.len() != u.n() {
        return Err(Error::Config(format!("{} label datasets but {} image sets", u.n(), datasets.len())));
    }
    match (cfg.alternation, u.n()) {
        (Alternation::Single, 1) => {}
        (Alternation::RoundRobin, n) if n >= 2 => {}
        (a, n) => {
            return Err(Error::Config(format!("alternation {a:?} does not fit {n} dataset(s)")));
        }
    }
    if setup.generator.input_channels != 3 + u.unified_dim() {
        return Err(Error::Config(format!(
            "generator takes {} input channels, expected 3 + {} label channels",
            setup.generator.input_channels,
            u.unified_dim()
        )));
    }
    let n_domains = setup.discriminator.heads.as_ref().map_or(0, |h| h.cls.out_channels);
    if n_domains != u.total_label_dim() {
        return Err(Error::Config(format!(
            "discriminator classifies {n_domains} domains, labels have {}",
            u.total_label_dim()
        )));
    }
    let mut size = None;
    let mut batches_per_dataset = Vec::new();
    for (i, set) in datasets.iter().enumerate() {
        let spec = u.dataset(i);
        if set.len() < cfg.batch_size {
            return Err(Error::Data(format!(
                "dataset `{}` has {} records, fewer than one batch of {}",
                spec.name(),
                set.len(),
                cfg.batch_size
            )));
        }
        for r in set {
            spec.validate(&r.label).map_err(|e| Error::Data(format!("record `{}`: {e}", r.source_path)))?;
            let s = r.size();
            if *size.get_or_insert(s) != s {
                return Err(Error::Data(format!("record `{}` is {s:?}, others are {:?}", r.source_path, size.unwrap())));
            }
        }
        batches_per_dataset.push(set.len() / cfg.batch_size);
    }
    let (h, w) = size.expect("at least one dataset");
    setup.generator.infer(h, w)?;
    setup.discriminator.infer(h, w)?;
    let steps_per_epoch = match cfg.alternation {
        Alternation::Single => batches_per_dataset[0],
        Alternation::RoundRobin => datasets.len() * batches_per_dataset.iter().max().copied().unwrap_or(0),
    } as u64;
    Ok(Schedule { batches_per_dataset, steps_per_epoch, total_steps: steps_per_epoch * cfg.epochs() as u64 })
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("step", &self.step).field("schedule", &self.schedule).finish()
    }
}
