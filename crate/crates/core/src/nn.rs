//! Differentiable networks built from [`NetworkSpec`] tables.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{Activation, LayerKind, LayerSpec, NetworkSpec, Norm, LEAKY_SLOPE};
use crate::autograd::Var;
use crate::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Instance normalization over the spatial axes of `[N, C, H, W]` with a
/// per-channel affine transform.
pub fn instance_norm(x: &Var, gamma: &Var, beta: &Var) -> Var {
    let s = x.shape().to_vec();
    let (n, c, hw) = (s[0], s[1], (s[2] * s[3]) as f64);
    let stat = [n, c, 1, 1];
    let mean = x.sum_to(&stat).scale(1.0 / hw);
    let centered = x.sub(&mean.broadcast_to(&s));
    let var = centered.mul(&centered).sum_to(&stat).scale(1.0 / hw);
    let inv = var.add_scalar(INSTANCE_NORM_EPS).powf(-0.5);
    let normed = centered.mul(&inv.broadcast_to(&s));
    let g = gamma.reshape(&[1, c, 1, 1]).broadcast_to(&s);
    let b = beta.reshape(&[1, c, 1, 1]).broadcast_to(&s);
    normed.mul(&g).add(&b)
}

fn add_bias(x: &Var, b: &Var) -> Var {
    let c = b.shape()[0];
    x.add(&b.reshape(&[1, c, 1, 1]).broadcast_to(x.shape()))
}

fn activate(x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => x.relu(),
        Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
        Activation::Tanh => x.tanh(),
        Activation::None => x,
    }
}

/// Shapes of the parameters a layer owns, in storage order.
fn param_shapes(layer: &LayerSpec, cin: usize) -> Vec<(Vec<usize>, ParamRole)> {
    let (kh, kw) = layer.kernel;
    let cout = layer.out_channels;
    let norm = |out: &mut Vec<_>| {
        if layer.norm == Norm::Instance {
            out.push((vec![cout], ParamRole::NormScale));
            out.push((vec![cout], ParamRole::NormShift));
        }
    };
    let mut out = Vec::new();
    match layer.kind {
        LayerKind::Conv => {
            out.push((vec![cout, cin, kh, kw], ParamRole::Weight));
            out.push((vec![cout], ParamRole::Bias));
            norm(&mut out);
        }
        LayerKind::TransposedConv => {
            out.push((vec![cin, cout, kh, kw], ParamRole::Weight));
            out.push((vec![cout], ParamRole::Bias));
            norm(&mut out);
        }
        LayerKind::ResidualBlock => {
            for _ in 0..2 {
                out.push((vec![cout, cin, kh, kw], ParamRole::Weight));
                out.push((vec![cout], ParamRole::Bias));
                norm(&mut out);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

/// A network's parameters bound to its layer table.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Var>,
}

impl Network {
    /// Builds trainable parameters: conv weights ~ N(0, 0.02²), zero biases,
    /// unit norm scales and zero shifts.
    pub fn materialize<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Spec(e.to_string()))?;
        let mut params = Vec::new();
        let mut cin = spec.input_channels;
        let mut layers: Vec<&LayerSpec> = spec.layers.iter().collect();
        let trunk_out = spec.output_channels();
        if let Some(h) = &spec.heads {
            layers.push(&h.src);
            layers.push(&h.cls);
        }
        for (i, layer) in layers.iter().enumerate() {
            let c = if i >= spec.layers.len() { trunk_out } else { cin };
            for (shape, role) in param_shapes(layer, c) {
                let value = match role {
                    ParamRole::Weight => ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(rng)),
                    ParamRole::Bias | ParamRole::NormShift => ArrayD::zeros(IxDyn(&shape)),
                    ParamRole::NormScale => ArrayD::ones(IxDyn(&shape)),
                };
                params.push(Var::param(value));
            }
            if i < spec.layers.len() {
                cin = layer.out_channels;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn param_values(&self) -> Vec<ArrayD<f64>> {
        self.params.iter().map(|p| p.value().clone()).collect()
    }

    /// Replaces every parameter, keeping shapes.
    pub fn set_param_values(&mut self, values: Vec<ArrayD<f64>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{}: expected {} parameter tensors, got {}",
                self.spec.name,
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "{}: parameter shape {:?} does not match {:?}",
                    self.spec.name,
                    v.shape(),
                    p.shape()
                )));
            }
        }
        self.params = values.into_iter().map(Var::param).collect();
        Ok(())
    }

    /// Number of scalar parameters actually allocated.
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.value().len() as u64).sum()
    }

    fn apply_layer<'a>(layer: &LayerSpec, x: &Var, params: &mut impl Iterator<Item = &'a Var>) -> Var {
        let mut next = || params.next().expect("parameter list shorter than layer table");
        let mut conv_norm = |x: &Var| {
            let w = next();
            let b = next();
            let y = match layer.kind {
                LayerKind::TransposedConv => x.conv_transpose2d(w, layer.stride, layer.padding),
                _ => x.conv2d(w, layer.stride, layer.padding),
            };
            let y = add_bias(&y, b);
            if layer.norm == Norm::Instance {
                let gamma = next();
                let beta = next();
                instance_norm(&y, gamma, beta)
            } else {
                y
            }
        };
        match layer.kind {
            LayerKind::Conv | LayerKind::TransposedConv => activate(conv_norm(x), layer.activation),
            LayerKind::ResidualBlock => {
                let h = activate(conv_norm(x), layer.activation);
                x.add(&conv_norm(&h))
            }
        }
    }

    /// Runs the trunk, then the heads if any.
    fn run(&self, x: &Var) -> (Var, Option<(Var, Var)>) {
        assert_eq!(
            x.shape()[1],
            self.spec.input_channels,
            "{}: expected {} input channels",
            self.spec.name,
            self.spec.input_channels
        );
        let mut it = self.params.iter();
        let mut h = x.clone();
        for layer in &self.spec.layers {
            h = Self::apply_layer(layer, &h, &mut it);
        }
        let heads = self.spec.heads.as_ref().map(|hd| {
            let src = Self::apply_layer(&hd.src, &h, &mut it);
            let cls = Self::apply_layer(&hd.cls, &h, &mut it);
            (src, cls)
        });
        (h, heads)
    }
}

/// Image-plus-label to image translator.
#[derive(Debug, Clone)]
pub struct Generator {
    net: Network,
}

impl Generator {
    pub fn new(net: Network) -> Result<Self> {
        if net.spec.heads.is_some() || net.spec.output_channels() != 3 || net.spec.input_channels <= 3 {
            return Err(Error::Spec("generator must map 3 + label channels to 3 channels without heads".into()));
        }
        Ok(Self { net })
    }

    pub fn materialize<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        Self::new(Network::materialize(spec, rng)?)
    }

    pub fn label_dim(&self) -> usize {
        self.net.spec.input_channels - 3
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Translates `images [N, 3, H, W]` under `labels [N, label_dim]`, which
    /// are replicated spatially and concatenated as extra input channels.
    pub fn forward(&self, images: &Var, labels: &Var) -> Var {
        let s = images.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let d = self.label_dim();
        assert_eq!(labels.shape(), &[n, d], "label batch shape");
        let maps = labels.reshape(&[n, d, 1, 1]).broadcast_to(&[n, d, h, w]);
        self.forward_stacked(&Var::concat(&[images.clone(), maps], 1))
    }

    /// Forward pass on an already concatenated `[N, 3 + label_dim, H, W]`.
    pub fn forward_stacked(&self, x: &Var) -> Var {
        self.net.run(x).0
    }
}

/// PatchGAN critic with an auxiliary domain classifier.
#[derive(Debug, Clone)]
pub struct Discriminator {
    net: Network,
}

impl Discriminator {
    pub fn new(net: Network) -> Result<Self> {
        if net.spec.heads.is_none() {
            return Err(Error::Spec("discriminator needs src and cls heads".into()));
        }
        Ok(Self { net })
    }

    pub fn materialize<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        Self::new(Network::materialize(spec, rng)?)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn n_domains(&self) -> usize {
        self.net.spec.heads.as_ref().map_or(0, |h| h.cls.out_channels)
    }

    /// Returns the patch map `[N, 1, h', w']` and the class logits
    /// `[N, n_domains]` (the `(1, 1, n_d)` head output, flattened).
    pub fn forward(&self, images: &Var) -> (Var, Var) {
        let (_, heads) = self.net.run(images);
        let (src, cls) = heads.expect("discriminator has heads");
        let n = cls.shape()[0];
        let cs = cls.shape().to_vec();
        assert_eq!((cs[2], cs[3]), (1, 1), "classifier head must reduce to 1x1, got {cs:?}");
        let logits = cls.reshape(&[n, cs[1]]);
        (src, logits)
    }

    pub fn forward_raw(&self, images: &Var) -> (Var, Var) {
        let (_, heads) = self.net.run(images);
        heads.expect("discriminator has heads")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad, no_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn materialized_counts_match_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = NetworkSpec::generator(5, 0.125, 2).unwrap();
        let d = NetworkSpec::discriminator(16, 16, 3, 0.125, None).unwrap();
        assert_eq!(Network::materialize(&g, &mut rng).unwrap().param_count(), g.param_count());
        assert_eq!(Network::materialize(&d, &mut rng).unwrap().param_count(), d.param_count());
    }

    #[test]
    fn generator_shapes_and_range() {
        let spec = NetworkSpec::generator(3, 0.125, 1).unwrap();
        let g = Generator::materialize(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Var::constant(rand_tensor(&[2, 3, 8, 12], 2).mapv(|v| v * 50.0));
        let c = Var::constant(rand_tensor(&[2, 3], 3));
        let _ng = no_grad();
        let y = g.forward(&x, &c);
        assert_eq!(y.shape(), &[2, 3, 8, 12]);
        assert!(y.value().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_heads() {
        let spec = NetworkSpec::discriminator(16, 16, 4, 0.125, None).unwrap();
        let d = Discriminator::materialize(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (src, cls) = d.forward(&Var::constant(rand_tensor(&[3, 3, 16, 16], 5)));
        assert_eq!(src.shape(), &[3, 1, 2, 2]);
        assert_eq!(cls.shape(), &[3, 4]);
    }

    #[test]
    fn equal_seeds_equal_parameters() {
        let spec = NetworkSpec::generator(2, 0.125, 1).unwrap();
        let a = Network::materialize(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Network::materialize(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.param_values(), b.param_values());
        let c = Network::materialize(&spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a.param_values(), c.param_values());
    }

    #[test]
    fn instance_norm_gradient_matches_differences() {
        let x0 = rand_tensor(&[2, 3, 3, 4], 11);
        let g0 = rand_tensor(&[3], 12);
        let b0 = rand_tensor(&[3], 13);
        let w = rand_tensor(&[2, 3, 3, 4], 14);
        let f = |x: &Var| instance_norm(x, &Var::constant(g0.clone()), &Var::constant(b0.clone())).mul(&Var::constant(w.clone())).sum();
        let x = Var::param(x0.clone());
        let g = &grad(&f(&x), &[&x], false)[0];
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            let mut m = x0.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let fd = (f(&Var::constant(p)).item() - f(&Var::constant(m)).item()) / (2.0 * h);
            let a = g.value().as_slice().unwrap()[i];
            assert!((a - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{a} vs {fd}");
        }
    }

    #[test]
    fn set_param_values_checks_shapes() {
        let spec = NetworkSpec::generator(2, 0.125, 0).unwrap();
        let mut n = Network::materialize(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut v = n.param_values();
        v.pop();
        assert!(n.set_param_values(v).is_err());
    }
}
